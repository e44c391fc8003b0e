"""Feature extractors backing the metric suite.

Five roles, each a small deterministic stand-in sized for CPU work:

- perceptual: frozen seeded conv pyramid; multi-layer activations for the
  perceptual distance and pooled vectors for similarity filtering / FID.
- contrastive_image: conv encoder trained with a symmetric InfoNCE loss on
  augmented frame pairs; unit-norm embeddings.
- contrastive_video: order-aware encoder over fixed-length 4-frame stacks,
  trained the same way on stacks; per-position projections make it sensitive
  to frame order, which the duplicate-vs-combine stack scores rely on.
- captioner: retrieval captioner; embeds the query image with a frozen conv
  encoder and returns the caption of the nearest gallery image. Two widths
  stand in for the two caption-model columns of the report.
- text: hashed character-trigram bag-of-features, no training.

Every extractor exposes ``fingerprint()`` so reports can declare exactly
which stand-in produced their numbers.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .. import rng
from ..errors import NumericError, TrainingDivergedError

STACK_LEN = 4


def _module_fingerprint(module: nn.Module, tag: str) -> str:
    digest = hashlib.sha256(tag.encode("utf-8"))
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return digest.hexdigest()[:16]


def _to_batch(image: np.ndarray) -> torch.Tensor:
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {arr.shape}")
    return torch.from_numpy(np.transpose(arr, (2, 0, 1))).unsqueeze(0)


class PerceptualExtractor(nn.Module):
    """Frozen random conv pyramid; three stages of stride-2 features."""

    role = "perceptual"

    def __init__(self, seed: int = 0, widths: tuple[int, ...] = (16, 32, 64)):
        super().__init__()
        torch.manual_seed(rng.derive_seed(seed, "perceptual-extractor"))
        stages = []
        in_ch = 3
        for w in widths:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, w, kernel_size=3, stride=2, padding=1),
                    nn.Tanh(),
                )
            )
            in_ch = w
        self.stages = nn.ModuleList(stages)
        self.widths = widths
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def feature_maps(self, batch: torch.Tensor) -> list[torch.Tensor]:
        maps = []
        x = batch
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps

    @torch.no_grad()
    def features(self, image: np.ndarray) -> np.ndarray:
        """Coarse spatially-aware pooled vector (4x4 grid per stage).

        Each channel is standardized over space first; otherwise the shared
        response level of the random convs dominates every cosine.
        """
        maps = self.feature_maps(_to_batch(image))
        parts = []
        for m in maps:
            mu = m.mean(dim=(2, 3), keepdim=True)
            sd = m.std(dim=(2, 3), keepdim=True)
            parts.append(F.adaptive_avg_pool2d((m - mu) / (sd + 1e-6), 4).reshape(-1))
        return torch.cat(parts).numpy().astype(np.float64)

    @torch.no_grad()
    def distribution_features(self, image: np.ndarray) -> np.ndarray:
        """Spatial-mean vector per stage, concatenated; used for set distances."""
        maps = self.feature_maps(_to_batch(image))
        parts = [m.mean(dim=(2, 3)).reshape(-1) for m in maps]
        return torch.cat(parts).numpy().astype(np.float64)

    def fingerprint(self) -> str:
        return _module_fingerprint(self, "perceptual")


class _ConvEmbedNet(nn.Module):
    def __init__(self, width: int, embed_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(width * 2, width * 4, 3, stride=2, padding=1),
            nn.GELU(),
            nn.AdaptiveAvgPool2d(2),
        )
        self.head = nn.Linear(width * 4 * 4, embed_dim)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        feats = self.net(batch).flatten(1)
        out = self.head(feats)
        return F.normalize(out, dim=1, eps=1e-8)


class ContrastiveImageEncoder(nn.Module):
    """Image-to-unit-vector encoder for similarity scoring."""

    role = "contrastive_image"

    def __init__(self, seed: int = 0, width: int = 16, embed_dim: int = 32):
        super().__init__()
        torch.manual_seed(rng.derive_seed(seed, "contrastive-image"))
        self.core = _ConvEmbedNet(width, embed_dim)
        self.embed_dim = embed_dim

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        return self.core(batch)

    @torch.no_grad()
    def embed_image(self, image: np.ndarray) -> np.ndarray:
        self.eval()
        return self(_to_batch(image))[0].numpy().astype(np.float64)

    def fingerprint(self) -> str:
        return _module_fingerprint(self, "contrastive_image")


class VideoStackEncoder(nn.Module):
    """Order-aware encoder over a fixed-length stack of 4 frames."""

    role = "contrastive_video"

    def __init__(self, seed: int = 0, width: int = 16, embed_dim: int = 32):
        super().__init__()
        torch.manual_seed(rng.derive_seed(seed, "contrastive-video"))
        self.frame_net = _ConvEmbedNet(width, embed_dim)
        self.position = nn.Parameter(torch.randn(STACK_LEN, embed_dim, embed_dim) * 0.2)
        self.head = nn.Linear(embed_dim, embed_dim)
        self.embed_dim = embed_dim

    def forward(self, stacks: torch.Tensor) -> torch.Tensor:
        if stacks.ndim != 5 or stacks.shape[1] != STACK_LEN:
            raise ValueError(f"expected Bx{STACK_LEN}x3xHxW stacks, got {tuple(stacks.shape)}")
        b = stacks.shape[0]
        frames = stacks.reshape(b * STACK_LEN, *stacks.shape[2:])
        feats = self.frame_net(frames).reshape(b, STACK_LEN, -1)
        mixed = torch.einsum("btd,tde->be", feats, self.position) / STACK_LEN
        return F.normalize(self.head(F.gelu(mixed)), dim=1, eps=1e-8)

    @torch.no_grad()
    def embed_stack(self, frames: list[np.ndarray]) -> np.ndarray:
        self.eval()
        stack = build_stack(frames)
        batch = torch.from_numpy(np.transpose(np.stack(stack), (0, 3, 1, 2)).astype(np.float32))
        return self(batch.unsqueeze(0))[0].numpy().astype(np.float64)

    def fingerprint(self) -> str:
        return _module_fingerprint(self, "contrastive_video")


def build_stack(frames: list[np.ndarray]) -> list[np.ndarray]:
    """Pad by duplicating the last frame / truncate to the fixed stack length."""
    if not frames:
        raise ValueError("empty frame stack")
    stack = list(frames)[:STACK_LEN]
    while len(stack) < STACK_LEN:
        stack.append(stack[-1])
    return stack


class RetrievalCaptioner:
    """Nearest-neighbor captioner over a gallery of (image, caption) pairs."""

    role = "captioner"

    def __init__(self, variant: str, seed: int = 0):
        if variant not in ("blip_b", "blip_l"):
            raise ValueError(f"unknown captioner variant {variant!r}")
        width = 12 if variant == "blip_b" else 20
        torch.manual_seed(rng.derive_seed(seed, "captioner", variant))
        self.variant = variant
        self.encoder = _ConvEmbedNet(width, 24)
        self.encoder.requires_grad_(False)
        self.encoder.eval()
        self._gallery: list[tuple[np.ndarray, str]] = []

    @torch.no_grad()
    def _embed(self, image: np.ndarray) -> np.ndarray:
        return self.encoder(_to_batch(image))[0].numpy().astype(np.float64)

    def fit_gallery(self, images: list[np.ndarray], captions: list[str]) -> None:
        if len(images) != len(captions) or not images:
            raise ValueError("gallery needs equal, non-zero image and caption counts")
        self._gallery = [(self._embed(img), cap) for img, cap in zip(images, captions)]

    def caption(self, image: np.ndarray) -> str:
        if not self._gallery:
            raise RuntimeError("captioner gallery is empty; call fit_gallery first")
        query = self._embed(image)
        best_idx = 0
        best = -math.inf
        for i, (vec, _) in enumerate(self._gallery):
            score = float(np.dot(query, vec))
            if score > best:
                best = score
                best_idx = i
        return self._gallery[best_idx][1]

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(_module_fingerprint(self.encoder, self.variant).encode())
        for vec, cap in self._gallery:
            digest.update(vec.tobytes())
            digest.update(cap.encode("utf-8"))
        return digest.hexdigest()[:16]


class TrigramTextEncoder:
    """Hashed character-trigram embedding; deterministic, training-free."""

    role = "text"

    def __init__(self, dim: int = 256):
        self.dim = dim

    def embed_text(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        padded = f"  {text.lower()}  "
        for i in range(len(padded) - 2):
            tri = padded[i : i + 3]
            h = int.from_bytes(hashlib.blake2b(tri.encode("utf-8"), digest_size=8).digest(), "little")
            vec[h % self.dim] += 1.0
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return vec

    def fingerprint(self) -> str:
        return hashlib.sha256(f"trigram-{self.dim}".encode()).hexdigest()[:16]


# -- augmentation + contrastive training ----------------------------------

def _augment(batch: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Random crop-resize, horizontal flip, brightness jitter, pixel noise."""
    b, _, h, w = batch.shape
    crop = max(h - h // 8, 8)
    out = []
    for i in range(b):
        top = int(torch.randint(0, h - crop + 1, (1,), generator=gen).item())
        left = int(torch.randint(0, w - crop + 1, (1,), generator=gen).item())
        view = batch[i : i + 1, :, top : top + crop, left : left + crop]
        view = F.interpolate(view, size=(h, w), mode="bilinear", align_corners=False)
        if torch.rand(1, generator=gen).item() < 0.5:
            view = torch.flip(view, dims=[3])
        scale = 1.0 + 0.2 * (torch.rand(1, generator=gen).item() - 0.5)
        noise = torch.randn(view.shape, generator=gen) * 0.02
        out.append(torch.clamp(view * scale + noise, 0.0, 1.0))
    return torch.cat(out, dim=0)


def _info_nce(za: torch.Tensor, zb: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    logits = za @ zb.t() / temperature
    labels = torch.arange(za.shape[0])
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.t(), labels))


def train_image_encoder(
    images: np.ndarray,
    seed: int = 0,
    steps: int = 300,
    batch_size: int = 16,
    lr: float = 1e-3,
) -> ContrastiveImageEncoder:
    """InfoNCE training on augmented views of corpus frames.

    ``images`` is Nx H x W x 3 in [0,1].
    """
    model = ContrastiveImageEncoder(seed=seed)
    data = torch.from_numpy(np.transpose(images, (0, 3, 1, 2)).astype(np.float32))
    gen = torch.Generator().manual_seed(rng.derive_seed(seed, "image-encoder-train"))
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    model.train()
    n = data.shape[0]
    for step in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        batch = data[idx]
        za = model(_augment(batch, gen))
        zb = model(_augment(batch, gen))
        loss = _info_nce(za, zb)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"image encoder loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model


def train_video_encoder(
    stacks: np.ndarray,
    seed: int = 0,
    steps: int = 300,
    batch_size: int = 8,
    lr: float = 1e-3,
) -> VideoStackEncoder:
    """InfoNCE training on augmented 4-frame stacks (N x 4 x H x W x 3)."""
    if stacks.ndim != 5 or stacks.shape[1] != STACK_LEN:
        raise ValueError(f"expected Nx{STACK_LEN}xHxWx3 stacks, got {stacks.shape}")
    model = VideoStackEncoder(seed=seed)
    data = torch.from_numpy(np.transpose(stacks, (0, 1, 4, 2, 3)).astype(np.float32))
    gen = torch.Generator().manual_seed(rng.derive_seed(seed, "video-encoder-train"))
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    model.train()
    n = data.shape[0]
    for step in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        batch = data[idx]
        b, t = batch.shape[0], batch.shape[1]
        flat = batch.reshape(b * t, *batch.shape[2:])
        va = _augment(flat, gen).reshape(b, t, *batch.shape[2:])
        vb = _augment(flat, gen).reshape(b, t, *batch.shape[2:])
        loss = _info_nce(model(va), model(vb))
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"video encoder loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model


def check_unit_norm(vec: np.ndarray, tol: float = 1e-5) -> None:
    norm = float(np.linalg.norm(vec))
    if not math.isfinite(norm) or abs(norm - 1.0) > tol:
        raise NumericError(f"embedding norm {norm} is not unit")
