"""Convolutional autoencoder that gives the denoiser its latent space."""

from __future__ import annotations

import logging

import torch
from torch import nn

from .. import rng
from ..errors import TrainingDivergedError

log = logging.getLogger(__name__)


class ConvAutoencoder(nn.Module):
    """Downsamples by a factor of 4 into latent_channels planes."""

    def __init__(self, base_width: int = 48, latent_channels: int = 4, seed: int = 0):
        super().__init__()
        torch.manual_seed(rng.derive_seed(seed, "autoencoder-init"))
        w = base_width
        self.latent_channels = latent_channels
        self.factor = 4
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(w, w, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * w, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * w, 3, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(w, w, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(w, 3, 3, padding=1),
        )

    def _check_images(self, images: torch.Tensor) -> None:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected Bx3xHxW images, got {tuple(images.shape)}")
        if images.shape[2] % self.factor or images.shape[3] % self.factor:
            raise ValueError(f"image size must be divisible by {self.factor}")

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        self._check_images(images)
        return self.encoder(images)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.ndim != 4 or latents.shape[1] != self.latent_channels:
            raise ValueError(
                f"expected Bx{self.latent_channels}xhxw latents, got {tuple(latents.shape)}"
            )
        return self.decoder(latents)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(images))


def train_autoencoder(
    model: ConvAutoencoder,
    images: torch.Tensor,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
) -> list[float]:
    """Plain reconstruction training; returns the per-step loss history."""
    model.train()
    order = rng.generator(seed, "ae-batches")
    losses: list[float] = []
    n = images.shape[0]
    # the loss plateaus under a single optimizer run; restarting the adaptive
    # state at a lower rate escapes it where smooth decay does not
    phases = [(steps // 2, lr), (3 * steps // 10, lr / 2), (0, lr / 6)]
    phases[-1] = (steps - phases[0][0] - phases[1][0], lr / 6)
    for phase_steps, phase_lr in phases:
        opt = torch.optim.AdamW(model.parameters(), lr=phase_lr, weight_decay=1e-6)
        for _ in range(phase_steps):
            idx = torch.from_numpy(order.choice(n, size=min(batch_size, n), replace=False))
            batch = images[idx]
            recon = model(batch)
            loss = torch.mean((recon - batch) ** 2)
            value = loss.detach().item()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"autoencoder loss non-finite at step {len(losses)}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
            if len(losses) % 500 == 0:
                log.info("autoencoder step %d loss %.5f", len(losses), value)
    model.eval()
    return losses


def latent_scale_factor(model: ConvAutoencoder, images: torch.Tensor) -> float:
    """1/std of the encoded corpus, so diffusion sees roughly unit-scale latents."""
    with torch.no_grad():
        latents = model.encode(images)
    std = latents.double().std().item()
    if std <= 0:
        raise TrainingDivergedError("degenerate latent distribution (zero variance)")
    return 1.0 / std
