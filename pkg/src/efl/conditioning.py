"""Conditioning matrix assembly for the diffusion UNet.

The UNet attends over a row-concatenation of up to three blocks: the frozen
text encoding of the description, a linear projection of the VLLM image
tokens, and self-attention-mixed projections of the VLLM text hidden states.
Five modes select which blocks participate, from a plain label encoding up
to the full joint bundle. The null bundle (empty text, zero image tokens,
pad-only text hidden states) is what classifier-free guidance contrasts
against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import rng, tokenizer
from .config import CONDITIONING_MODES, RunConfig
from .errors import ConfigError
from .vllm_instruct import TextEmbedding


@dataclass
class ConditioningBundle:
    matrix: torch.Tensor               # rows x D
    segments: dict[str, tuple[int, int]]
    mode: str
    # which rows downstream cross-attention may use as keys; pad rows of the
    # text-hidden-state segment are excluded so they can never leak into the
    # denoiser. None means every row is attendable.
    key_mask: torch.Tensor | None = None

    def validate(self) -> None:
        spans = sorted(self.segments.values())
        cursor = 0
        for start, end in spans:
            if start != cursor or end <= start:
                raise ValueError(f"segment spans {self.segments} do not tile the matrix")
            cursor = end
        if cursor != self.matrix.shape[0]:
            raise ValueError(
                f"segments cover {cursor} rows but matrix has {self.matrix.shape[0]}"
            )
        if self.key_mask is not None:
            if self.key_mask.shape != (self.matrix.shape[0],) or self.key_mask.dtype != torch.bool:
                raise ValueError("key_mask must be a bool vector with one entry per row")
            if not bool(self.key_mask.any()):
                raise ValueError("key_mask must keep at least one row attendable")


def expected_rows(mode: str, n: int, m: int) -> int:
    """Row-count law: N per text-style block, M for the image block."""
    if mode in ("labels_only", "descriptions"):
        return n
    if mode == "desc_plus_image":
        return n + m
    if mode == "desc_plus_text":
        return 2 * n
    if mode == "desc_plus_joint":
        return 2 * n + m
    raise ConfigError(f"unknown conditioning mode {mode!r}")


class FrozenTextEncoder(nn.Module):
    """Frozen byte-level text encoder with a fixed output length of N rows.

    Token layout follows the usual contrastive-encoder convention: start
    token, bytes, end token, pad to N, truncate to the first N positions.
    """

    def __init__(self, n_tokens: int, d_out: int, seed: int = 0):
        super().__init__()
        torch.manual_seed(rng.derive_seed(seed, "frozen-text-encoder"))
        self.n_tokens = n_tokens
        self.embed = nn.Embedding(tokenizer.VOCAB_SIZE, d_out)
        self.pos = nn.Embedding(n_tokens, d_out)
        self.mix_q = nn.Linear(d_out, d_out)
        self.mix_k = nn.Linear(d_out, d_out)
        self.mix_v = nn.Linear(d_out, d_out)
        self.norm = nn.LayerNorm(d_out)
        self.tok = tokenizer.ByteTokenizer()
        self.requires_grad_(False)
        self.eval()

    def token_ids(self, text: str) -> list[int]:
        ids = [tokenizer.BOS_ID] + self.tok.encode(text) + [tokenizer.EOS_ID]
        ids = ids[: self.n_tokens]
        ids += [tokenizer.PAD_ID] * (self.n_tokens - len(ids))
        return ids

    @torch.no_grad()
    def forward(self, text: str) -> torch.Tensor:
        ids = torch.tensor(self.token_ids(text), dtype=torch.long)
        x = self.embed(ids) + self.pos.weight
        q, k, v = self.mix_q(x), self.mix_k(x), self.mix_v(x)
        attn = torch.softmax(q @ k.t() / math.sqrt(x.shape[1]), dim=-1)
        return self.norm(x + attn @ v)


class MaskedSelfAttentionBlock(nn.Module):
    """Residual bidirectional self-attention with key padding support."""

    def __init__(self, d_model: int):
        super().__init__()
        self.ln = nn.LayerNorm(d_model)
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        h = self.ln(x)
        q, k, v = self.q_proj(h), self.k_proj(h), self.v_proj(h)
        scores = q @ k.t() / math.sqrt(x.shape[1])
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[None, :], float("-inf"))
            if not bool(key_mask.any()):
                # every key masked: attention contributes nothing
                return x
        attn = torch.softmax(scores, dim=-1)
        return x + self.out_proj(attn @ v)


class ConditioningProjector(nn.Module):
    """Trainable maps into the UNet conditioning space.

    sigma lifts image tokens, mu lifts text hidden states, and pi mixes the
    mu outputs with a two-block self-attention stack (pad rows masked).
    """

    def __init__(self, d_llm: int, d_out: int, seed: int = 0, pi_depth: int = 2):
        super().__init__()
        torch.manual_seed(rng.derive_seed(seed, "conditioning-projector"))
        self.sigma = nn.Linear(d_llm, d_out)
        self.mu = nn.Linear(d_llm, d_out)
        for lin in (self.sigma, self.mu):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)
        self.pi_blocks = nn.ModuleList(MaskedSelfAttentionBlock(d_out) for _ in range(pi_depth))

    def project_image_embedding(self, h_i: torch.Tensor) -> torch.Tensor:
        if h_i.ndim != 2 or h_i.shape[1] != self.sigma.in_features:
            raise ValueError(
                f"expected image embedding of shape Mx{self.sigma.in_features}, got {tuple(h_i.shape)}"
            )
        return self.sigma(h_i)

    def project_text_embedding(self, h_t: TextEmbedding | torch.Tensor) -> torch.Tensor:
        if isinstance(h_t, TextEmbedding):
            tokens, valid_len = h_t.tokens, h_t.valid_len
        else:
            tokens, valid_len = h_t, h_t.shape[0]
        if tokens.ndim != 2 or tokens.shape[1] != self.mu.in_features:
            raise ValueError(
                f"expected text embedding of shape Nx{self.mu.in_features}, got {tuple(tokens.shape)}"
            )
        key_mask = torch.zeros(tokens.shape[0], dtype=torch.bool)
        key_mask[:valid_len] = True
        x = self.mu(tokens)
        for block in self.pi_blocks:
            x = block(x, key_mask)
        return x


def assemble_conditioning(
    text: str,
    h_i: torch.Tensor | None,
    h_t: TextEmbedding | torch.Tensor | None,
    mode: str,
    psi: FrozenTextEncoder,
    projector: ConditioningProjector,
) -> ConditioningBundle:
    """Concatenate the blocks the mode asks for, recording segment spans."""
    if mode not in CONDITIONING_MODES:
        raise ConfigError(f"unknown conditioning mode {mode!r}")
    wants_image = mode in ("desc_plus_image", "desc_plus_joint")
    wants_text = mode in ("desc_plus_text", "desc_plus_joint")
    if wants_image and h_i is None:
        raise ConfigError(f"mode {mode} requires an image embedding")
    if wants_text and h_t is None:
        raise ConfigError(f"mode {mode} requires a text embedding")
    if not wants_image and h_i is not None:
        raise ConfigError(f"mode {mode} does not accept an image embedding")
    if not wants_text and h_t is not None:
        raise ConfigError(f"mode {mode} does not accept a text embedding")

    blocks: list[tuple[str, torch.Tensor, torch.Tensor]] = []

    def add(name: str, tensor: torch.Tensor, valid: int | None = None) -> None:
        mask = torch.ones(tensor.shape[0], dtype=torch.bool)
        if valid is not None:
            mask[valid:] = False
        blocks.append((name, tensor, mask))

    add("psi", psi(text))
    if wants_image:
        add("sigma", projector.project_image_embedding(h_i))
    if wants_text:
        valid = h_t.valid_len if isinstance(h_t, TextEmbedding) else None
        add("pi", projector.project_text_embedding(h_t), valid)

    segments = {}
    cursor = 0
    for name, block, _ in blocks:
        segments[name] = (cursor, cursor + block.shape[0])
        cursor += block.shape[0]
    bundle = ConditioningBundle(
        matrix=torch.cat([b for _, b, _ in blocks], dim=0),
        segments=segments,
        mode=mode,
        key_mask=torch.cat([m for _, _, m in blocks]),
    )
    bundle.validate()
    return bundle


def null_text_embedding(d_llm: int, n_tokens: int, pad_row: torch.Tensor) -> TextEmbedding:
    """All-pad text hidden states (valid_len 0) built from the LM pad embedding."""
    if pad_row.shape != (d_llm,):
        raise ValueError(f"pad row must have shape ({d_llm},), got {tuple(pad_row.shape)}")
    return TextEmbedding(tokens=pad_row.detach().expand(n_tokens, -1).clone(), valid_len=0)


def null_conditioning(
    mode: str,
    psi: FrozenTextEncoder,
    projector: ConditioningProjector,
    config: RunConfig,
    null_h_t: TextEmbedding | None = None,
) -> ConditioningBundle:
    """The guidance null bundle: empty text, zero image tokens, pad-only text."""
    wants_image = mode in ("desc_plus_image", "desc_plus_joint")
    wants_text = mode in ("desc_plus_text", "desc_plus_joint")
    h_i = torch.zeros(config.n_image_tokens, config.d_llm) if wants_image else None
    h_t = None
    if wants_text:
        if null_h_t is None:
            raise ConfigError("this mode's null bundle needs the LM pad-row text embedding")
        if null_h_t.valid_len != 0:
            raise ConfigError("null text embedding must have valid_len 0")
        h_t = null_h_t
    return assemble_conditioning("", h_i, h_t, mode, psi, projector)
