import hashlib

import pytest
import torch

from efl import rng
from efl.conditioning import (
    ConditioningBundle,
    ConditioningProjector,
    FrozenTextEncoder,
    assemble_conditioning,
    expected_rows,
    null_conditioning,
    null_text_embedding,
)
from efl.config import CONDITIONING_MODES, RunConfig
from efl.errors import ConfigError
from efl.vllm_instruct import TextEmbedding


@pytest.fixture()
def cfg():
    return RunConfig()


@pytest.fixture()
def psi(cfg):
    return FrozenTextEncoder(cfg.n_text_tokens, cfg.d_cond, seed=11)


@pytest.fixture()
def projector(cfg):
    return ConditioningProjector(cfg.d_llm, cfg.d_cond, seed=13)


def make_inputs(cfg, seed=0, valid_len=None):
    gen = rng.generator(seed, "cond-test")
    h_i = torch.tensor(gen.standard_normal((cfg.n_image_tokens, cfg.d_llm)), dtype=torch.float32)
    tokens = torch.tensor(gen.standard_normal((cfg.n_text_tokens, cfg.d_llm)), dtype=torch.float32)
    if valid_len is None:
        valid_len = cfg.n_text_tokens
    return h_i, TextEmbedding(tokens=tokens, valid_len=valid_len)


def zero_value_paths(projector):
    with torch.no_grad():
        for block in projector.pi_blocks:
            block.v_proj.weight.zero_()
            block.v_proj.bias.zero_()


# ---------------------------------------------------------------------------
# row-count law


@pytest.mark.parametrize("mode", sorted(CONDITIONING_MODES))
def test_row_count_law(cfg, psi, projector, mode):
    h_i, h_t = make_inputs(cfg)
    wants_image = mode in ("desc_plus_image", "desc_plus_joint")
    wants_text = mode in ("desc_plus_text", "desc_plus_joint")
    bundle = assemble_conditioning(
        "pick up the red block",
        h_i if wants_image else None,
        h_t if wants_text else None,
        mode,
        psi,
        projector,
    )
    n, m = cfg.n_text_tokens, cfg.n_image_tokens
    assert bundle.matrix.shape == (expected_rows(mode, n, m), cfg.d_cond)
    assert bundle.mode == mode
    bundle.validate()


def test_joint_mode_desk_shape(cfg, psi, projector):
    h_i, h_t = make_inputs(cfg)
    bundle = assemble_conditioning("move the ball", h_i, h_t, "desc_plus_joint", psi, projector)
    assert bundle.matrix.shape == (80, 64)
    assert bundle.segments == {"psi": (0, 32), "sigma": (32, 48), "pi": (48, 80)}


def test_joint_image_rows_match_direct_projection(cfg, psi, projector):
    h_i, h_t = make_inputs(cfg)
    bundle = assemble_conditioning("move the ball", h_i, h_t, "desc_plus_joint", psi, projector)
    start, end = bundle.segments["sigma"]
    direct = projector.project_image_embedding(h_i)
    assert torch.equal(bundle.matrix[start:end], direct)


@pytest.mark.parametrize(
    "mode,give_image,give_text",
    [
        ("labels_only", True, False),
        ("descriptions", False, True),
        ("desc_plus_image", False, False),
        ("desc_plus_image", True, True),
        ("desc_plus_text", False, False),
        ("desc_plus_joint", True, False),
        ("desc_plus_joint", False, True),
    ],
)
def test_mode_input_mismatch_raises(cfg, psi, projector, mode, give_image, give_text):
    h_i, h_t = make_inputs(cfg)
    with pytest.raises(ConfigError):
        assemble_conditioning(
            "x", h_i if give_image else None, h_t if give_text else None, mode, psi, projector
        )


def test_unknown_mode_raises(cfg, psi, projector):
    with pytest.raises(ConfigError):
        assemble_conditioning("x", None, None, "labels_and_vibes", psi, projector)
    with pytest.raises(ConfigError):
        expected_rows("labels_and_vibes", 32, 16)


def test_key_mask_marks_text_pad_rows(cfg, psi, projector):
    valid = 9
    h_i, h_t = make_inputs(cfg, seed=55, valid_len=valid)
    bundle = assemble_conditioning("nudge the token", h_i, h_t, "desc_plus_joint", psi, projector)
    p0, p1 = bundle.segments["pi"]
    assert bundle.key_mask is not None
    assert bundle.key_mask[:p0].all()
    assert bundle.key_mask[p0 : p0 + valid].all()
    assert not bundle.key_mask[p0 + valid : p1].any()


def test_key_mask_all_true_without_text_block(cfg, psi, projector):
    bundle = assemble_conditioning("lift the lid", None, None, "descriptions", psi, projector)
    assert bundle.key_mask.all()


def test_key_mask_validation():
    bundle = ConditioningBundle(
        matrix=torch.zeros(4, 2),
        segments={"a": (0, 4)},
        mode="descriptions",
        key_mask=torch.zeros(4, dtype=torch.bool),
    )
    with pytest.raises(ValueError):
        bundle.validate()
    bundle.key_mask = torch.ones(5, dtype=torch.bool)
    with pytest.raises(ValueError):
        bundle.validate()


def test_segment_validation_catches_gaps():
    bundle = ConditioningBundle(
        matrix=torch.zeros(10, 4), segments={"a": (0, 4), "b": (5, 10)}, mode="descriptions"
    )
    with pytest.raises(ValueError):
        bundle.validate()
    bundle = ConditioningBundle(
        matrix=torch.zeros(10, 4), segments={"a": (0, 4)}, mode="descriptions"
    )
    with pytest.raises(ValueError):
        bundle.validate()


# ---------------------------------------------------------------------------
# frozen text encoder


def test_psi_fixed_rows_any_text_length(cfg, psi):
    for text in ["", "a", "open the drawer", "x" * 500]:
        out = psi(text)
        assert out.shape == (cfg.n_text_tokens, cfg.d_cond)
        assert torch.isfinite(out).all()


def test_psi_truncates_to_first_n_positions(cfg, psi):
    long_text = "b" * (2 * cfg.n_text_tokens)
    ids = psi.token_ids(long_text)
    assert len(ids) == cfg.n_text_tokens
    # a change past the truncation point cannot affect the encoding
    other = long_text[: cfg.n_text_tokens + 5] + "Z" * 20
    assert torch.equal(psi(long_text), psi(other))


def test_psi_distinguishes_texts(psi):
    a = psi("pick up the red block")
    b = psi("put down the blue ball")
    assert not torch.allclose(a, b)


def test_psi_is_frozen_and_hash_stable(cfg):
    psi = FrozenTextEncoder(cfg.n_text_tokens, cfg.d_cond, seed=11)
    assert all(not p.requires_grad for p in psi.parameters())

    def state_hash(module):
        h = hashlib.sha256()
        for name, tensor in sorted(module.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.numpy().tobytes())
        return h.hexdigest()

    before = state_hash(psi)
    for text in ["one", "two", "", "three" * 40]:
        psi(text)
    assert state_hash(psi) == before
    assert state_hash(FrozenTextEncoder(cfg.n_text_tokens, cfg.d_cond, seed=11)) == before


def test_psi_output_carries_no_grad(psi):
    out = psi("anything")
    assert not out.requires_grad


# ---------------------------------------------------------------------------
# image projection (sigma)


def test_sigma_matmul_oracle(cfg, projector):
    h_i, _ = make_inputs(cfg, seed=3)
    expect = h_i @ projector.sigma.weight.t() + projector.sigma.bias
    got = projector.project_image_embedding(h_i)
    assert torch.allclose(got, expect, atol=1e-6)


def test_sigma_one_by_one_affine():
    projector = ConditioningProjector(1, 1, seed=0)
    with torch.no_grad():
        projector.sigma.weight.fill_(2.0)
        projector.sigma.bias.fill_(1.0)
    out = projector.project_image_embedding(torch.tensor([[3.0]]))
    assert out.item() == pytest.approx(7.0)


def test_sigma_linearity(cfg, projector):
    h_a, _ = make_inputs(cfg, seed=5)
    h_b, _ = make_inputs(cfg, seed=6)
    lhs = projector.project_image_embedding(0.5 * h_a + 0.5 * h_b)
    rhs = 0.5 * projector.project_image_embedding(h_a) + 0.5 * projector.project_image_embedding(h_b)
    assert torch.allclose(lhs, rhs, atol=1e-6)


def test_mu_linearity(cfg, projector):
    a = torch.randn(cfg.n_text_tokens, cfg.d_llm)
    b = torch.randn(cfg.n_text_tokens, cfg.d_llm)
    lhs = projector.mu(0.25 * a + 0.75 * b)
    rhs = 0.25 * projector.mu(a) + 0.75 * projector.mu(b)
    assert torch.allclose(lhs, rhs, atol=1e-6)


def test_sigma_shape_mismatch_raises(cfg, projector):
    with pytest.raises(ValueError):
        projector.project_image_embedding(torch.zeros(cfg.n_image_tokens, cfg.d_llm + 1))
    with pytest.raises(ValueError):
        projector.project_text_embedding(torch.zeros(cfg.n_text_tokens, cfg.d_llm + 3))


# ---------------------------------------------------------------------------
# text projection (mu then pi)


def test_pi_value_path_zeroed_reduces_to_mu(cfg, projector):
    zero_value_paths(projector)
    _, h_t = make_inputs(cfg, seed=9, valid_len=20)
    got = projector.project_text_embedding(h_t)
    assert torch.allclose(got, projector.mu(h_t.tokens), atol=1e-6)


def test_pi_pad_permutation_invariance(cfg, projector):
    valid = 12
    _, h_t = make_inputs(cfg, seed=21, valid_len=valid)
    base = projector.project_text_embedding(h_t)
    perm_tokens = h_t.tokens.clone()
    tail = perm_tokens[valid:]
    perm_tokens[valid:] = tail[torch.randperm(tail.shape[0], generator=torch.Generator().manual_seed(4))]
    permuted = projector.project_text_embedding(TextEmbedding(tokens=perm_tokens, valid_len=valid))
    assert torch.equal(base[:valid], permuted[:valid])


def test_pi_pad_rows_do_not_leak_into_valid_rows(cfg, projector):
    valid = 8
    _, h_t = make_inputs(cfg, seed=22, valid_len=valid)
    base = projector.project_text_embedding(h_t)
    noisy_tokens = h_t.tokens.clone()
    noisy_tokens[valid:] += 100.0
    noisy = projector.project_text_embedding(TextEmbedding(tokens=noisy_tokens, valid_len=valid))
    assert torch.equal(base[:valid], noisy[:valid])
    # with no mask information the same perturbation must show through
    raw_base = projector.project_text_embedding(h_t.tokens)
    raw_noisy = projector.project_text_embedding(noisy_tokens)
    assert not torch.allclose(raw_base[:valid], raw_noisy[:valid])


def test_pi_fully_masked_is_mu_only(cfg, projector):
    _, h_t = make_inputs(cfg, seed=23, valid_len=0)
    got = projector.project_text_embedding(h_t)
    assert torch.allclose(got, projector.mu(h_t.tokens), atol=1e-6)


def test_pi_single_token_closed_form(cfg):
    projector = ConditioningProjector(cfg.d_llm, cfg.d_cond, seed=17)
    _, h_t = make_inputs(cfg, seed=24, valid_len=1)
    x = projector.mu(h_t.tokens)
    # one valid key: softmax over a single score is 1, so attention returns
    # out_proj(v_proj(ln(x_0))) added to the residual, per block
    expect = x.clone()
    for block in projector.pi_blocks:
        h0 = block.ln(expect)[0]
        expect = expect + block.out_proj(block.v_proj(h0))[None, :].expand_as(expect)
    got = projector.project_text_embedding(h_t)
    assert torch.allclose(got, expect, atol=1e-5)


def test_projection_is_differentiable(cfg, projector):
    h_i, h_t = make_inputs(cfg, seed=30, valid_len=10)
    psi = FrozenTextEncoder(cfg.n_text_tokens, cfg.d_cond, seed=1)
    bundle = assemble_conditioning("grab the cup", h_i, h_t, "desc_plus_joint", psi, projector)
    loss = bundle.matrix.square().mean()
    loss.backward()
    assert projector.sigma.weight.grad is not None
    assert projector.mu.weight.grad is not None
    assert projector.pi_blocks[0].q_proj.weight.grad is not None


# ---------------------------------------------------------------------------
# segment integrity


def test_segment_integrity_image_perturbation(cfg, psi, projector):
    h_i, h_t = make_inputs(cfg, seed=31)
    before = assemble_conditioning("tip the jar", h_i, h_t, "desc_plus_joint", psi, projector)
    after = assemble_conditioning("tip the jar", h_i + 1.0, h_t, "desc_plus_joint", psi, projector)
    s0, s1 = before.segments["sigma"]
    assert not torch.allclose(before.matrix[s0:s1], after.matrix[s0:s1])
    for name in ("psi", "pi"):
        a0, a1 = before.segments[name]
        assert torch.equal(before.matrix[a0:a1], after.matrix[a0:a1])


def test_segment_integrity_text_perturbation(cfg, psi, projector):
    h_i, h_t = make_inputs(cfg, seed=32)
    bumped = TextEmbedding(tokens=h_t.tokens + 0.5, valid_len=h_t.valid_len)
    before = assemble_conditioning("tip the jar", h_i, h_t, "desc_plus_joint", psi, projector)
    after = assemble_conditioning("tip the jar", h_i, bumped, "desc_plus_joint", psi, projector)
    p0, p1 = before.segments["pi"]
    assert not torch.allclose(before.matrix[p0:p1], after.matrix[p0:p1])
    for name in ("psi", "sigma"):
        a0, a1 = before.segments[name]
        assert torch.equal(before.matrix[a0:a1], after.matrix[a0:a1])


# ---------------------------------------------------------------------------
# null bundle


def test_null_text_embedding_shape_and_validity(cfg):
    pad_row = torch.randn(cfg.d_llm)
    h = null_text_embedding(cfg.d_llm, cfg.n_text_tokens, pad_row)
    assert h.tokens.shape == (cfg.n_text_tokens, cfg.d_llm)
    assert h.valid_len == 0
    assert torch.equal(h.tokens[0], pad_row)
    assert torch.equal(h.tokens[-1], pad_row)
    with pytest.raises(ValueError):
        null_text_embedding(cfg.d_llm, cfg.n_text_tokens, torch.randn(cfg.d_llm + 1))


@pytest.mark.parametrize("mode", sorted(CONDITIONING_MODES))
def test_null_bundle_shapes_and_determinism(cfg, psi, projector, mode):
    pad_row = torch.randn(cfg.d_llm)
    h_null = null_text_embedding(cfg.d_llm, cfg.n_text_tokens, pad_row)
    a = null_conditioning(mode, psi, projector, cfg, null_h_t=h_null)
    b = null_conditioning(mode, psi, projector, cfg, null_h_t=h_null)
    n, m = cfg.n_text_tokens, cfg.n_image_tokens
    assert a.matrix.shape == (expected_rows(mode, n, m), cfg.d_cond)
    assert torch.equal(a.matrix, b.matrix)
    # psi segment of the null bundle is the empty-string encoding
    s0, s1 = a.segments["psi"]
    assert torch.equal(a.matrix[s0:s1], psi(""))


def test_null_bundle_image_rows_are_sigma_bias(cfg, psi, projector):
    bundle = null_conditioning("desc_plus_image", psi, projector, cfg)
    s0, s1 = bundle.segments["sigma"]
    expect = projector.sigma.bias[None, :].expand(cfg.n_image_tokens, -1)
    assert torch.allclose(bundle.matrix[s0:s1], expect, atol=1e-7)


def test_null_bundle_requires_pad_embedding_for_text_modes(cfg, psi, projector):
    with pytest.raises(ConfigError):
        null_conditioning("desc_plus_text", psi, projector, cfg)
    bad = TextEmbedding(tokens=torch.zeros(cfg.n_text_tokens, cfg.d_llm), valid_len=3)
    with pytest.raises(ConfigError):
        null_conditioning("desc_plus_joint", psi, projector, cfg, null_h_t=bad)


def test_null_bundle_differs_from_real_bundle(cfg, psi, projector):
    h_i, h_t = make_inputs(cfg, seed=40, valid_len=16)
    real = assemble_conditioning("stack the plates", h_i, h_t, "desc_plus_joint", psi, projector)
    pad_row = torch.randn(cfg.d_llm)
    null = null_conditioning(
        "desc_plus_joint", psi, projector, cfg,
        null_h_t=null_text_embedding(cfg.d_llm, cfg.n_text_tokens, pad_row),
    )
    assert real.matrix.shape == null.matrix.shape
    assert not torch.allclose(real.matrix, null.matrix)
