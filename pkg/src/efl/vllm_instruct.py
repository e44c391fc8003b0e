"""Small multimodal LM: frozen patch encoder, trainable projection, decoder.

The image goes through a frozen random-orthogonal patch projection, a linear
layer lifts the patch features into the LM width, and a 2-layer causal
decoder over bytes learns to continue [image tokens, prompt] with the curated
action description. The same trained model later serves as the embedding
extractor for the diffusion conditioning: image tokens H_i and the
description's pre-head hidden states H_t.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import rng, tokenizer
from .config import RunConfig
from .dataset_pipeline import FrameRecord
from .enrichment import EnrichedDescription, cache_key
from .errors import ConfigError, NumericError, TrainingDivergedError

log = logging.getLogger(__name__)

IGNORE_INDEX = -100


@dataclass(frozen=True)
class VisualEncoderConfig:
    patch_size: int
    d_vision: int
    m_tokens: int
    frozen: bool = True

    def validate(self, resolution: int) -> None:
        if self.m_tokens < 1:
            raise ConfigError("m_tokens must be >= 1")
        side = math.isqrt(self.m_tokens)
        if side * side != self.m_tokens:
            raise ConfigError(f"m_tokens must be a square number, got {self.m_tokens}")
        if resolution % self.patch_size != 0:
            raise ConfigError("resolution must be divisible by patch_size")
        if (resolution // self.patch_size) ** 2 != self.m_tokens:
            raise ConfigError(
                f"patch grid {(resolution // self.patch_size) ** 2} does not match m_tokens {self.m_tokens}"
            )

    @classmethod
    def from_run_config(cls, config: RunConfig, d_vision: int = 64) -> "VisualEncoderConfig":
        side = math.isqrt(config.n_image_tokens)
        if side * side != config.n_image_tokens or config.resolution % side != 0:
            raise ConfigError(
                f"n_image_tokens {config.n_image_tokens} must be a square dividing resolution {config.resolution}"
            )
        cfg = cls(patch_size=config.resolution // side, d_vision=d_vision, m_tokens=config.n_image_tokens)
        cfg.validate(config.resolution)
        return cfg


@dataclass
class ImageEmbedding:
    tokens: torch.Tensor  # M x D_llm

    def validate(self, m_tokens: int) -> None:
        if self.tokens.shape[0] != m_tokens:
            raise ValueError(f"expected {m_tokens} image tokens, got {self.tokens.shape[0]}")
        if not torch.isfinite(self.tokens).all():
            raise NumericError("image embedding contains non-finite values")


@dataclass
class TextEmbedding:
    tokens: torch.Tensor  # N x D_llm
    valid_len: int


@dataclass
class InstructSample:
    image: FrameRecord
    prompt: str
    target_text: str


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W, 3) -> (M, patch_size*patch_size*3), patches in row-major order."""
    h, w, c = image.shape
    gh, gw = h // patch_size, w // patch_size
    patches = (
        image.reshape(gh, patch_size, gw, patch_size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, patch_size * patch_size * c)
    )
    return patches


class VisualEncoder(nn.Module):
    """Frozen orthogonal projection of image patches (the fixed encoder)."""

    def __init__(self, cfg: VisualEncoderConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        patch_dim = cfg.patch_size * cfg.patch_size * 3
        gen = torch.Generator().manual_seed(rng.derive_seed(seed, "visual-encoder"))
        raw = torch.randn(patch_dim, cfg.d_vision, generator=gen, dtype=torch.float64)
        q, _ = torch.linalg.qr(raw)
        self.register_buffer("weight", q.to(torch.float32))

    def forward(self, image: np.ndarray) -> torch.Tensor:
        expected = self.cfg.patch_size * math.isqrt(self.cfg.m_tokens)
        if image.shape[0] != expected or image.shape[1] != expected:
            raise ValueError(
                f"image resolution {image.shape[:2]} does not match encoder resolution {expected}"
            )
        patches = torch.from_numpy(
            np.ascontiguousarray(patchify(np.asarray(image, dtype=np.float32), self.cfg.patch_size))
        ).to(self.weight.dtype)
        return patches @ self.weight


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, length, d = x.shape

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.view(b, length, self.n_heads, self.d_head).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        mask = torch.triu(torch.ones(length, length, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, length, d)
        return self.out_proj(out)


class DecoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, mlp_ratio * d_model),
            nn.GELU(),
            nn.Linear(mlp_ratio * d_model, d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class DecoderLM(nn.Module):
    """Byte-level causal decoder; hidden states exposed before the head."""

    def __init__(self, d_model: int, n_layers: int, n_heads: int, max_seq_len: int = 512):
        super().__init__()
        self.max_seq_len = max_seq_len
        self.embed = nn.Embedding(tokenizer.VOCAB_SIZE, d_model)
        self.pos = nn.Embedding(max_seq_len, d_model)
        self.blocks = nn.ModuleList(DecoderBlock(d_model, n_heads) for _ in range(n_layers))
        self.final_ln = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, tokenizer.VOCAB_SIZE)

    def hidden_states(self, embeddings: torch.Tensor) -> torch.Tensor:
        b, length, _ = embeddings.shape
        if length > self.max_seq_len:
            raise ValueError(f"sequence length {length} exceeds LM context {self.max_seq_len}")
        positions = torch.arange(length, device=embeddings.device)
        x = embeddings + self.pos(positions)[None, :, :]
        for block in self.blocks:
            x = block(x)
        return self.final_ln(x)

    def logits(self, embeddings: torch.Tensor) -> torch.Tensor:
        return self.head(self.hidden_states(embeddings))


class VisualLM(nn.Module):
    """Frozen encoder + projection + decoder, with the extraction interfaces."""

    def __init__(self, config: RunConfig, seed: int | None = None, d_vision: int = 64):
        super().__init__()
        seed = config.seed if seed is None else seed
        self.run_config = config
        self.n_text_tokens = config.n_text_tokens
        self.m_tokens = config.n_image_tokens
        self.d_llm = config.d_llm
        vis_cfg = VisualEncoderConfig.from_run_config(config, d_vision=d_vision)
        torch.manual_seed(rng.derive_seed(seed, "vllm-init"))
        self.phi = VisualEncoder(vis_cfg, seed=seed)
        self.tau = nn.Linear(vis_cfg.d_vision, config.d_llm)
        self.lm = DecoderLM(config.d_llm, config.vllm_layers, config.vllm_heads)
        self.tok = tokenizer.ByteTokenizer()

    # -- image side -------------------------------------------------------

    def encode_image(self, image: np.ndarray) -> ImageEmbedding:
        emb = ImageEmbedding(tokens=self.tau(self.phi(image)))
        emb.validate(self.m_tokens)
        return emb

    def extract_image_embedding(self, image: np.ndarray) -> ImageEmbedding:
        return self.encode_image(image)

    # -- sequence assembly ------------------------------------------------

    def assemble_multimodal_sequence(
        self, h_i: torch.Tensor, prompt_tokens: list[int]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """[image rows, prompt embeddings] with positions assigned afterwards."""
        ids = torch.tensor(prompt_tokens, dtype=torch.long)
        seq = torch.cat([h_i, self.lm.embed(ids)], dim=0) if len(prompt_tokens) else h_i
        if seq.shape[0] > self.lm.max_seq_len:
            raise ValueError(f"sequence length {seq.shape[0]} exceeds LM context {self.lm.max_seq_len}")
        positions = torch.arange(seq.shape[0])
        return seq, positions

    def _sample_rows(self, sample: InstructSample) -> tuple[torch.Tensor, list[int]]:
        """(embedding rows, labels) for one sample; loss only on target rows."""
        h_i = self.encode_image(sample.image.image).tokens
        prompt_ids = [tokenizer.BOS_ID] + self.tok.encode(sample.prompt)
        target_ids = self.tok.encode(sample.target_text) + [tokenizer.EOS_ID]
        seq, _ = self.assemble_multimodal_sequence(h_i, prompt_ids + target_ids)
        n_prefix = self.m_tokens + len(prompt_ids)
        # logits at position i predict the token at position i+1
        labels = [IGNORE_INDEX] * (n_prefix - 1) + target_ids + [IGNORE_INDEX]
        return seq, labels

    def batch_forward(self, samples: list[InstructSample]) -> tuple[torch.Tensor, torch.Tensor]:
        """Padded batch logits plus aligned next-token labels."""
        rows = [self._sample_rows(s) for s in samples]
        max_len = max(seq.shape[0] for seq, _ in rows)
        pad_emb = self.lm.embed(torch.tensor([tokenizer.PAD_ID]))
        seqs, labels = [], []
        for seq, lab in rows:
            short = max_len - seq.shape[0]
            if short:
                seq = torch.cat([seq, pad_emb.expand(short, -1)], dim=0)
                lab = lab + [IGNORE_INDEX] * short
            seqs.append(seq)
            labels.append(lab)
        logits = self.lm.logits(torch.stack(seqs))
        return logits, torch.tensor(labels, dtype=torch.long)

    @staticmethod
    def masked_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Mean next-token cross entropy over unmasked label positions."""
        shifted = logits[:, :-1, :]
        targets = labels[:, : shifted.shape[1]]
        return F.cross_entropy(
            shifted.reshape(-1, shifted.shape[-1]), targets.reshape(-1), ignore_index=IGNORE_INDEX
        )

    def loss_on_batch(self, samples: list[InstructSample]) -> torch.Tensor:
        logits, labels = self.batch_forward(samples)
        return self.masked_loss(logits, labels)

    # -- generation -------------------------------------------------------

    @torch.no_grad()
    def generate_description(
        self,
        image: np.ndarray,
        prompt: str,
        max_new_tokens: int | None = None,
        temperature: float = 0.0,
        seed: int = 0,
    ) -> EnrichedDescription:
        self.eval()
        cap = self.run_config.vllm_max_new_tokens if max_new_tokens is None else max_new_tokens
        h_i = self.encode_image(image).tokens
        prompt_ids = [tokenizer.BOS_ID] + self.tok.encode(prompt)
        seq, _ = self.assemble_multimodal_sequence(h_i, prompt_ids)
        seq = seq.unsqueeze(0)
        gen = torch.Generator().manual_seed(rng.derive_seed(seed, "vllm-sample")) if temperature > 0 else None
        out_ids: list[int] = []
        for _ in range(cap):
            if seq.shape[1] >= self.lm.max_seq_len:
                break
            logits = self.lm.logits(seq)[0, -1]
            if temperature > 0:
                probs = torch.softmax(logits / temperature, dim=-1)
                next_id = int(torch.multinomial(probs, 1, generator=gen).item())
            else:
                next_id = int(torch.argmax(logits).item())
            if next_id == tokenizer.EOS_ID:
                break
            out_ids.append(next_id)
            seq = torch.cat([seq, self.lm.embed(torch.tensor([[next_id]]))], dim=1)
        text = self.tok.decode(out_ids)
        if not text:
            log.warning("generation produced no tokens for prompt %r", prompt)
        return EnrichedDescription(
            text=text, source="tuned_vllm", cache_key=cache_key(prompt, "", "vllm")
        )

    # -- extraction for the diffusion stage -------------------------------

    @torch.no_grad()
    def extract_text_embedding(self, description_tokens: list[int]) -> TextEmbedding:
        """Pre-head hidden states of the description, padded/truncated to N.

        Causality makes prefix truncation commute with the forward pass, so
        the LM only ever runs on the first N description tokens.
        """
        self.eval()
        n = self.n_text_tokens
        ids = list(description_tokens)[:n]
        valid_len = len(ids)
        pad_emb = self.lm.embed(torch.tensor([tokenizer.PAD_ID]))
        if ids:
            seq = self.lm.embed(torch.tensor([tokenizer.BOS_ID] + ids)).unsqueeze(0)
            hidden = self.lm.hidden_states(seq)[0, 1:, :]
        else:
            hidden = torch.zeros(0, self.d_llm)
        if valid_len < n:
            hidden = torch.cat([hidden, pad_emb.expand(n - valid_len, -1)], dim=0)
        return TextEmbedding(tokens=hidden, valid_len=valid_len)

    def embed_description(self, text: str) -> TextEmbedding:
        return self.extract_text_embedding(self.tok.encode(text))

    def trainable_parameters(self) -> list[nn.Parameter]:
        return list(self.tau.parameters()) + list(self.lm.parameters())


def train_step(
    model: VisualLM, optimizer: torch.optim.Optimizer, samples: list[InstructSample]
) -> float:
    model.train()
    loss = model.loss_on_batch(samples)
    if not torch.isfinite(loss):
        raise TrainingDivergedError("instruction-tuning loss is non-finite")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.item())


def train_vllm(
    model: VisualLM,
    samples: list[InstructSample],
    config: RunConfig,
    max_steps: int | None = None,
) -> list[float]:
    """Epoch-based tuning loop over shuffled minibatches; returns step losses."""
    if not samples:
        raise ValueError("no instruction samples to train on")
    budget = config.vllm_max_steps if max_steps is None else max_steps
    optimizer = torch.optim.AdamW(model.trainable_parameters(), lr=config.vllm_lr)
    gen = rng.generator(config.seed, "vllm-batches")
    losses: list[float] = []
    steps_per_epoch = max(1, math.ceil(len(samples) / config.vllm_batch))
    total = min(budget, config.vllm_epochs * steps_per_epoch)
    order: list[int] = []
    for _ in range(total):
        if len(order) < config.vllm_batch:
            order += list(gen.permutation(len(samples)))
        batch = [samples[i] for i in order[: config.vllm_batch]]
        order = order[config.vllm_batch :]
        losses.append(train_step(model, optimizer, batch))
    return losses
