"""Denoiser training with per-sample condition dropout.

Each step draws a categorical code per sample: keep everything, null out the
input-frame latent, null out the conditioning matrix, or both. The null
conditioning path runs through the same trainable projections as the real
one, so guidance at sampling time contrasts two states of the same network.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .. import rng
from ..conditioning import (
    ConditioningProjector,
    FrozenTextEncoder,
    assemble_conditioning,
    null_conditioning,
)
from ..config import RunConfig
from ..errors import ConfigError, NumericError, TrainingDivergedError
from ..vllm_instruct import TextEmbedding
from .schedule import NoiseSchedule, forward_diffuse
from .unet import ConditionalUNet

log = logging.getLogger(__name__)

KEEP, DROP_IMAGE, DROP_COND, DROP_BOTH = range(4)


@dataclass(frozen=True)
class DropoutPolicy:
    p_img_only: float = 0.05
    p_cond_only: float = 0.05
    p_both: float = 0.05

    def __post_init__(self) -> None:
        probs = (self.p_img_only, self.p_cond_only, self.p_both)
        if any(p < 0 for p in probs) or sum(probs) > 1.0:
            raise ConfigError("dropout probabilities must be >= 0 and sum to <= 1")

    @property
    def p_keep(self) -> float:
        return 1.0 - self.p_img_only - self.p_cond_only - self.p_both

    def draw(self, gen: np.random.Generator, n: int) -> np.ndarray:
        edges = np.cumsum([self.p_keep, self.p_img_only, self.p_cond_only])
        return np.searchsorted(edges, gen.random(n), side="right").astype(np.int64)


@dataclass
class LatentPair:
    z_input: torch.Tensor
    z_target0: torch.Tensor
    factor: int

    def validate(self, resolution: int) -> None:
        if self.z_input.shape != self.z_target0.shape:
            raise ValueError("input and target latents must share a shape")
        c, h, w = self.z_input.shape
        if h != w or h != resolution // self.factor:
            raise ValueError(
                f"latent side {h}x{w} inconsistent with resolution {resolution} / f={self.factor}"
            )


@dataclass
class TrainSample:
    pair: LatentPair
    text: str
    h_i: torch.Tensor | None
    h_t: TextEmbedding | None
    pair_flipped: LatentPair | None = None


class LdmTrainer:
    def __init__(
        self,
        unet: ConditionalUNet,
        psi: FrozenTextEncoder,
        projector: ConditioningProjector,
        schedule: NoiseSchedule,
        policy: DropoutPolicy,
        config: RunConfig,
        null_h_t: TextEmbedding | None,
        seed: int,
    ):
        self.unet = unet
        self.psi = psi
        self.projector = projector
        self.schedule = schedule
        self.policy = policy
        self.config = config
        self.null_h_t = null_h_t
        self.gen = rng.generator(seed, "ldm-train")
        params = list(unet.parameters()) + list(projector.parameters())
        self.opt = torch.optim.AdamW(params, lr=config.ldm_lr, weight_decay=1e-6)

    def _bundle(self, sample: TrainSample):
        mode = self.config.conditioning_mode
        return assemble_conditioning(sample.text, sample.h_i, sample.h_t, mode, self.psi, self.projector)

    def _null_bundle(self):
        return null_conditioning(
            self.config.conditioning_mode, self.psi, self.projector, self.config, self.null_h_t
        )

    def _batch_forward(self, samples, t, noise, codes, flips):
        z_inputs, z_targets, matrices, masks = [], [], [], []
        for i, sample in enumerate(samples):
            pair = sample.pair
            if flips[i] and sample.pair_flipped is not None:
                pair = sample.pair_flipped
            z_in = pair.z_input
            if codes[i] in (DROP_IMAGE, DROP_BOTH):
                z_in = torch.zeros_like(z_in)
            bundle = self._null_bundle() if codes[i] in (DROP_COND, DROP_BOTH) else self._bundle(sample)
            z_inputs.append(z_in)
            z_targets.append(pair.z_target0)
            matrices.append(bundle.matrix)
            masks.append(
                bundle.key_mask
                if bundle.key_mask is not None
                else torch.ones(bundle.matrix.shape[0], dtype=torch.bool)
            )
        z0 = torch.stack(z_targets)
        z_t = forward_diffuse(z0, t, noise, self.schedule)
        pred = self.unet(
            z_t.float(), torch.stack(z_inputs), t, torch.stack(matrices), torch.stack(masks)
        )
        return torch.mean((pred - noise) ** 2)

    def train_step(self, samples: list[TrainSample]) -> float:
        b = len(samples)
        t = torch.from_numpy(self.gen.integers(0, self.schedule.num_steps, b))
        shape = (b,) + tuple(samples[0].pair.z_target0.shape)
        noise = torch.from_numpy(self.gen.standard_normal(shape)).float()
        codes = self.policy.draw(self.gen, b)
        flips = self.gen.random(b) < self.config.flip_prob
        try:
            loss = self._batch_forward(samples, t, noise, codes, flips)
        except NumericError as err:
            raise TrainingDivergedError(f"denoiser produced non-finite values: {err}") from err
        value = loss.detach().item()
        if not np.isfinite(value):
            raise TrainingDivergedError("diffusion loss went non-finite")
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        return value

    @torch.no_grad()
    def eval_loss(self, samples: list[TrainSample], draws: int = 4) -> float:
        """Deterministic fully conditioned loss over a fixed noise/timestep set."""
        gen = rng.generator(self.config.seed, "ldm-eval")
        b = len(samples)
        total = 0.0
        for d in range(draws):
            frac = (d + 0.5) / draws
            t = torch.full((b,), int(frac * (self.schedule.num_steps - 1)), dtype=torch.long)
            shape = (b,) + tuple(samples[0].pair.z_target0.shape)
            noise = torch.from_numpy(gen.standard_normal(shape)).float()
            codes = np.full(b, KEEP)
            flips = np.zeros(b, dtype=bool)
            total += self._batch_forward(samples, t, noise, codes, flips).item()
        return total / draws


def train_ldm(trainer: LdmTrainer, samples: list[TrainSample], steps: int, batch_size: int) -> list[float]:
    if not samples:
        raise ConfigError("no training samples for the denoiser")
    losses: list[float] = []
    order = rng.generator(trainer.config.seed, "ldm-batches")
    n = len(samples)
    for step in range(steps):
        idx = order.choice(n, size=min(batch_size, n), replace=False)
        losses.append(trainer.train_step([samples[i] for i in idx]))
        if step % 200 == 0:
            log.info("ldm step %d loss %.5f", step, losses[-1])
    return losses
