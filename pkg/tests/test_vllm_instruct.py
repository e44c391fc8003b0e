import math

import numpy as np
import pytest
import torch

from efl import rng, tokenizer
from efl import vllm_instruct as vi
from efl.config import RunConfig
from efl.dataset_pipeline import FrameRecord
from efl.errors import ConfigError, NumericError, TrainingDivergedError
from efl.gradcheck import finite_difference_check


@pytest.fixture()
def model():
    return vi.VisualLM(RunConfig(seed=3))


def sample_images(n, resolution=64, key="vllm-test"):
    gen = rng.generator(17, key)
    return [gen.random((resolution, resolution, 3)).astype(np.float32) for _ in range(n)]


def make_samples(model, n=4):
    images = sample_images(n)
    texts = [
        "The camera wearer slides the red block across the table.",
        "The camera wearer lifts the green ball straight up.",
        "The camera wearer pushes the blue token to the left.",
        "The camera wearer drags the purple block closer.",
    ]
    prompts = [f"What should I do to action {i}?" for i in range(n)]
    return [
        vi.InstructSample(FrameRecord(0.0, images[i]), prompts[i], texts[i % len(texts)])
        for i in range(n)
    ]


class TestVisualEncoderConfig:
    def test_from_run_config(self):
        cfg = vi.VisualEncoderConfig.from_run_config(RunConfig())
        assert cfg.patch_size == 16
        assert cfg.m_tokens == 16
        assert cfg.frozen

    def test_non_square_token_count_rejected(self):
        with pytest.raises(ConfigError):
            vi.VisualEncoderConfig.from_run_config(RunConfig(n_image_tokens=15))

    def test_grid_mismatch_rejected(self):
        bad = vi.VisualEncoderConfig(patch_size=8, d_vision=16, m_tokens=16)
        with pytest.raises(ConfigError):
            bad.validate(resolution=64)


class TestEncodeImage:
    def test_zero_image_zero_tau_gives_zero_embedding(self, model):
        with torch.no_grad():
            model.tau.weight.zero_()
            model.tau.bias.zero_()
        emb = model.encode_image(np.zeros((64, 64, 3), dtype=np.float32))
        assert torch.all(emb.tokens == 0)

    def test_shape_and_finite(self, model):
        emb = model.encode_image(sample_images(1)[0])
        assert emb.tokens.shape == (16, 64)
        assert torch.isfinite(emb.tokens).all()

    def test_deterministic(self, model):
        img = sample_images(1)[0]
        a = model.encode_image(img).tokens
        b = model.encode_image(img).tokens
        assert torch.equal(a, b)

    def test_resolution_mismatch_rejected(self, model):
        with pytest.raises(ValueError):
            model.encode_image(np.zeros((32, 32, 3), dtype=np.float32))

    def test_matches_matrix_product_oracle(self):
        cfg = RunConfig(resolution=4, n_image_tokens=4, d_llm=8, vllm_heads=2)
        small = vi.VisualLM(cfg, d_vision=5)
        gen = rng.generator(5, "phi-oracle")
        w_phi = gen.standard_normal((12, 5))
        w_tau = gen.standard_normal((8, 5))
        b_tau = gen.standard_normal(8)
        with torch.no_grad():
            small.phi.weight.copy_(torch.from_numpy(w_phi).float())
            small.tau.weight.copy_(torch.from_numpy(w_tau).float())
            small.tau.bias.copy_(torch.from_numpy(b_tau).float())
        img = gen.random((4, 4, 3)).astype(np.float32)
        got = small.encode_image(img).tokens.detach().numpy()
        want = vi.patchify(img, 2).astype(np.float64) @ w_phi @ w_tau.T + b_tau
        assert np.abs(got - want).max() < 1e-5

    def test_extract_image_embedding_aliases_encode(self, model):
        img = sample_images(1)[0]
        assert torch.equal(
            model.encode_image(img).tokens, model.extract_image_embedding(img).tokens
        )

    def test_phi_weight_is_orthogonal(self, model):
        w = model.phi.weight.double()
        gram = w.t() @ w
        assert torch.allclose(gram, torch.eye(w.shape[1], dtype=torch.float64), atol=1e-6)


class TestSequenceAssembly:
    def test_concatenation_order_and_length(self, model):
        h_i = model.encode_image(sample_images(1)[0]).tokens
        seq, positions = model.assemble_multimodal_sequence(h_i, list(range(6)))
        assert seq.shape == (16 + 6, 64)
        assert torch.equal(seq[:16], h_i)
        assert positions.tolist() == list(range(22))

    def test_empty_prompt(self, model):
        h_i = model.encode_image(sample_images(1)[0]).tokens
        seq, positions = model.assemble_multimodal_sequence(h_i, [])
        assert seq.shape[0] == 16
        assert positions.tolist() == list(range(16))

    def test_context_overflow_rejected(self, model):
        h_i = model.encode_image(sample_images(1)[0]).tokens
        with pytest.raises(ValueError):
            model.assemble_multimodal_sequence(h_i, [65] * 600)


class TestLoss:
    def test_uniform_logits_loss_is_log_vocab(self, model):
        with torch.no_grad():
            model.lm.head.weight.zero_()
            model.lm.head.bias.zero_()
        loss = model.loss_on_batch(make_samples(model, 2))
        assert loss.detach().item() == pytest.approx(math.log(tokenizer.VOCAB_SIZE), rel=1e-6)

    def test_masked_positions_do_not_affect_loss(self, model):
        samples = make_samples(model, 3)
        logits, labels = model.batch_forward(samples)
        base = model.masked_loss(logits, labels)
        noise = torch.randn_like(logits) * 10.0
        # Perturb logits wherever the next-token label is masked out
        # (prompt/image/padding positions).
        mask = torch.ones_like(logits)
        shifted = labels[:, : logits.shape[1] - 1]
        keep = shifted != vi.IGNORE_INDEX
        mask[:, :-1, :][keep] = 0.0
        mask[:, -1, :] = 1.0
        perturbed = model.masked_loss(logits + noise * mask, labels)
        assert torch.equal(base, perturbed)

    def test_nan_loss_raises(self, model):
        with torch.no_grad():
            model.lm.head.bias.fill_(float("nan"))
        opt = torch.optim.AdamW(model.trainable_parameters(), lr=1e-3)
        with pytest.raises(TrainingDivergedError):
            vi.train_step(model, opt, make_samples(model, 2))

    def test_non_finite_image_embedding_raises(self, model):
        with torch.no_grad():
            model.tau.weight.fill_(float("nan"))
        with pytest.raises(NumericError):
            model.encode_image(sample_images(1)[0])

    def test_phi_frozen_through_training(self, model):
        before = model.phi.weight.clone()
        opt = torch.optim.AdamW(model.trainable_parameters(), lr=1e-3)
        samples = make_samples(model, 2)
        for _ in range(10):
            vi.train_step(model, opt, samples)
        assert torch.equal(model.phi.weight, before)

    def test_gradients_match_finite_differences(self):
        cfg = RunConfig(resolution=16, n_image_tokens=4, d_llm=16, vllm_heads=2, vllm_layers=1)
        model = vi.VisualLM(cfg, d_vision=8).double()
        gen = rng.generator(7, "vllm-fd")
        img = gen.random((16, 16, 3)).astype(np.float32)
        samples = [vi.InstructSample(FrameRecord(0.0, img), "do it?", "done now")]
        params = [
            model.tau.weight,
            model.lm.blocks[0].attn.q_proj.weight,
            model.lm.head.weight,
            model.lm.embed.weight,
        ]
        worst = finite_difference_check(
            lambda: model.loss_on_batch(samples), params, gen, num_coords=3
        )
        assert worst < 1e-4


class TestGeneration:
    def test_length_cap_one_token(self, model):
        # Rig the head so greedy decoding always emits the byte 'A'.
        with torch.no_grad():
            model.lm.head.weight.zero_()
            model.lm.head.bias.zero_()
            model.lm.head.bias[65] = 10.0
        img = sample_images(1)[0]
        out = model.generate_description(img, "prompt", max_new_tokens=1)
        assert out.text == "A"
        assert out.source == "tuned_vllm"
        out3 = model.generate_description(img, "prompt", max_new_tokens=3)
        assert out3.text == "AAA"

    def test_greedy_deterministic(self, model):
        img = sample_images(1)[0]
        a = model.generate_description(img, "what next?", max_new_tokens=24)
        b = model.generate_description(img, "what next?", max_new_tokens=24)
        assert a.text == b.text

    def test_sampling_seeded(self, model):
        img = sample_images(1)[0]
        a = model.generate_description(img, "p", max_new_tokens=16, temperature=1.0, seed=5)
        b = model.generate_description(img, "p", max_new_tokens=16, temperature=1.0, seed=5)
        c = model.generate_description(img, "p", max_new_tokens=16, temperature=1.0, seed=6)
        assert a.text == b.text
        assert (a.text != c.text) or (a.text == "")

    def test_quick_overfit_regenerates_targets(self):
        cfg = RunConfig(seed=11)
        model = vi.VisualLM(cfg)
        samples = make_samples(model, 2)
        opt = torch.optim.AdamW(model.trainable_parameters(), lr=2e-3)
        losses = [vi.train_step(model, opt, samples) for _ in range(250)]
        assert losses[-1] < 0.1
        for s in samples:
            got = model.generate_description(s.image.image, s.prompt, max_new_tokens=96)
            assert got.text == s.target_text


class TestTextEmbedding:
    def test_truncation_to_n(self, model):
        emb = model.extract_text_embedding(list(range(40)))
        assert emb.tokens.shape == (32, 64)
        assert emb.valid_len == 32

    def test_padding_rows_use_pad_embedding(self, model):
        emb = model.extract_text_embedding(model.tok.encode("ten bytes!"))
        assert emb.valid_len == 10
        pad = model.lm.embed(torch.tensor([tokenizer.PAD_ID]))[0]
        for row in range(10, 32):
            assert torch.equal(emb.tokens[row], pad)

    def test_prefix_rule_matches_slice_oracle(self, model):
        ids = model.tok.encode("a rather long description that exceeds the token budget easily")
        assert len(ids) > 32
        emb = model.extract_text_embedding(ids)
        full = model.lm.hidden_states(
            model.lm.embed(torch.tensor([tokenizer.BOS_ID] + ids)).unsqueeze(0)
        )[0, 1:, :]
        assert torch.allclose(emb.tokens, full[:32], atol=1e-6)

    def test_row_count_always_n(self, model):
        for length in range(1, 97, 7):
            emb = model.extract_text_embedding([65] * length)
            assert emb.tokens.shape[0] == 32
            assert emb.valid_len == min(length, 32)

    def test_empty_input_all_pad(self, model):
        emb = model.extract_text_embedding([])
        assert emb.valid_len == 0
        pad = model.lm.embed(torch.tensor([tokenizer.PAD_ID]))[0]
        assert torch.equal(emb.tokens, pad.expand(32, -1))

    def test_overfit_loss_monotone_over_windows(self):
        model = vi.VisualLM(RunConfig(seed=2))
        samples = make_samples(model, 4)
        opt = torch.optim.AdamW(model.trainable_parameters(), lr=1e-3)
        losses = [vi.train_step(model, opt, samples) for _ in range(200)]
        w = 100
        means = [sum(losses[i : i + w]) / w for i in range(0, len(losses) - w + 1, w)]
        assert all(b < a for a, b in zip(means, means[1:]))
