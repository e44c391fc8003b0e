"""Scalar image metrics: fidelity, perceptual, contrastive, and caption-based."""

from __future__ import annotations

import logging
import math

import numpy as np

from .extractors import _to_batch, build_stack

log = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def perceptual_distance(a: np.ndarray, b: np.ndarray, extractor) -> float:
    """Unit-normalize channels per position, average squared gaps, sum layers."""
    maps_a = extractor.feature_maps(_to_batch(a))
    maps_b = extractor.feature_maps(_to_batch(b))
    total = 0.0
    for fa, fb in zip(maps_a, maps_b):
        fa = fa.double()
        fb = fb.double()
        na = fa / (fa.square().sum(dim=1, keepdim=True).sqrt() + 1e-10)
        nb = fb / (fb.square().sum(dim=1, keepdim=True).sqrt() + 1e-10)
        total += float((na - nb).square().sum(dim=1).mean())
    return total


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(matrix)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(features_real: np.ndarray, features_gen: np.ndarray) -> float:
    real = np.asarray(features_real, dtype=np.float64)
    gen = np.asarray(features_gen, dtype=np.float64)
    if real.ndim != 2 or gen.ndim != 2:
        raise ValueError("feature sets must be NxD matrices")
    if real.shape[1] != gen.shape[1]:
        raise ValueError(f"feature dims differ: {real.shape[1]} vs {gen.shape[1]}")
    if real.shape[0] < 2 or gen.shape[0] < 2:
        raise ValueError("need at least two feature vectors per set")
    mu1, mu2 = real.mean(axis=0), gen.mean(axis=0)
    sigma1 = np.cov(real, rowvar=False)
    sigma2 = np.cov(gen, rowvar=False)
    root1 = _psd_sqrt(sigma1)
    inner = _psd_sqrt(root1 @ sigma2 @ root1)
    value = float(np.sum((mu1 - mu2) ** 2) + np.trace(sigma1 + sigma2 - 2.0 * inner))
    return max(value, 0.0)


def contrastive_image_score(gen: np.ndarray, ref: np.ndarray, extractor) -> float:
    za = extractor.embed_image(gen)
    zb = extractor.embed_image(ref)
    return 100.0 * float(np.dot(za, zb))


def egovlp_score(gen: np.ndarray, ref: np.ndarray, extractor) -> float:
    """Static stacks: the single frame duplicated to the full stack length."""
    za = extractor.embed_stack(build_stack([gen]))
    zb = extractor.embed_stack(build_stack([ref]))
    return 100.0 * float(np.dot(za, zb))


def egovlp_plus_score(
    input_frame: np.ndarray, gen: np.ndarray, ref: np.ndarray, extractor
) -> float:
    """Input-then-output stacks, each half duplicated, order preserved."""
    half = len(build_stack([input_frame])) // 2
    stack_gen = [input_frame] * half + [gen] * half
    stack_ref = [input_frame] * half + [ref] * half
    za = extractor.embed_stack(stack_gen)
    zb = extractor.embed_stack(stack_ref)
    return 100.0 * float(np.dot(za, zb))


def caption_text_similarity(gen_image: np.ndarray, description: str, captioner, text_encoder) -> float:
    caption = captioner.caption(gen_image)
    if not caption:
        log.warning("captioner returned an empty caption; scoring against empty text")
    za = text_encoder.embed_text(caption)
    zb = text_encoder.embed_text(description)
    return 100.0 * float(np.dot(za, zb))
