import hashlib

import numpy as np
import pytest
import torch

from efl import rng
from efl.conditioning import ConditioningProjector, FrozenTextEncoder, null_text_embedding
from efl.config import RunConfig
from efl.diffusion.schedule import NoiseSchedule
from efl.diffusion.training import (
    DROP_BOTH,
    DROP_COND,
    DROP_IMAGE,
    KEEP,
    DropoutPolicy,
    LatentPair,
    LdmTrainer,
    TrainSample,
    train_ldm,
)
from efl.diffusion.unet import ConditionalUNet
from efl.errors import ConfigError, TrainingDivergedError
from efl.gradcheck import finite_difference_check
from efl.vllm_instruct import TextEmbedding

TINY_SCHED = dict(num_steps=50, beta_start=1e-2, beta_end=0.3)


def test_dropout_policy_validation():
    DropoutPolicy(0.05, 0.05, 0.05)
    with pytest.raises(ConfigError):
        DropoutPolicy(-0.01, 0.05, 0.05)
    with pytest.raises(ConfigError):
        DropoutPolicy(0.5, 0.5, 0.2)


def test_dropout_frequencies_over_100k_draws():
    policy = DropoutPolicy(0.05, 0.05, 0.05)
    gen = rng.generator(0, "dropout-freq")
    codes = policy.draw(gen, 100_000)
    freqs = np.bincount(codes, minlength=4) / 100_000
    assert abs(freqs[KEEP] - 0.85) < 0.01
    assert abs(freqs[DROP_IMAGE] - 0.05) < 0.01
    assert abs(freqs[DROP_COND] - 0.05) < 0.01
    assert abs(freqs[DROP_BOTH] - 0.05) < 0.01


def test_dropout_draws_deterministic():
    policy = DropoutPolicy()
    a = policy.draw(rng.generator(3, "dropout"), 500)
    b = policy.draw(rng.generator(3, "dropout"), 500)
    assert np.array_equal(a, b)


def test_latent_pair_validation():
    pair = LatentPair(torch.zeros(4, 16, 16), torch.zeros(4, 16, 16), factor=4)
    pair.validate(64)
    with pytest.raises(ValueError):
        pair.validate(128)
    with pytest.raises(ValueError):
        LatentPair(torch.zeros(4, 16, 16), torch.zeros(4, 8, 8), factor=4).validate(64)


def small_config(**overrides) -> RunConfig:
    values = dict(
        resolution=32,
        n_text_tokens=8,
        n_image_tokens=4,
        d_cond=16,
        d_llm=12,
        diffusion_steps=50,
        ldm_lr=2e-3,
        ldm_batch=4,
        flip_prob=0.0,
        conditioning_mode="desc_plus_joint",
    )
    values.update(overrides)
    return RunConfig(**values)


def build_setup(cfg, unet_width=8, seed=0):
    unet = ConditionalUNet(cfg.latent_channels, unet_width, cfg.d_cond, seed=seed)
    psi = FrozenTextEncoder(cfg.n_text_tokens, cfg.d_cond, seed=seed + 1)
    projector = ConditioningProjector(cfg.d_llm, cfg.d_cond, seed=seed + 2)
    schedule = NoiseSchedule.linear(cfg.diffusion_steps, 1e-2, 0.3)
    policy = DropoutPolicy(cfg.drop_image_only, cfg.drop_cond_only, cfg.drop_both)
    null_h_t = null_text_embedding(cfg.d_llm, cfg.n_text_tokens, torch.zeros(cfg.d_llm))
    trainer = LdmTrainer(unet, psi, projector, schedule, policy, cfg, null_h_t, seed=seed)
    return trainer


def make_samples(cfg, n, seed=0):
    gen = rng.generator(seed, "ldm-test-samples")
    side = cfg.resolution // cfg.downsample_factor
    samples = []
    for i in range(n):
        z_in = torch.tensor(
            gen.standard_normal((cfg.latent_channels, side, side)), dtype=torch.float32
        )
        z_out = torch.tensor(
            gen.standard_normal((cfg.latent_channels, side, side)), dtype=torch.float32
        )
        h_i = torch.tensor(gen.standard_normal((cfg.n_image_tokens, cfg.d_llm)), dtype=torch.float32)
        tokens = torch.tensor(gen.standard_normal((cfg.n_text_tokens, cfg.d_llm)), dtype=torch.float32)
        samples.append(
            TrainSample(
                pair=LatentPair(z_in, z_out, cfg.downsample_factor),
                text=f"poke object {i}",
                h_i=h_i,
                h_t=TextEmbedding(tokens=tokens, valid_len=cfg.n_text_tokens - 2),
            )
        )
    return samples


def test_perfect_predictor_gives_zero_loss():
    cfg = small_config()
    trainer = build_setup(cfg)
    samples = make_samples(cfg, 4)
    schedule = trainer.schedule

    class PerfectPredictor:
        """Inverts the forward process against the known clean targets."""

        def __init__(self, targets):
            self.targets = torch.stack(targets)

        def __call__(self, z_t, z_input, t, cond, mask):
            ab = schedule.alpha_bar(t).float().reshape(-1, 1, 1, 1)
            return (z_t - torch.sqrt(ab) * self.targets) / torch.sqrt(1.0 - ab)

    trainer.unet = PerfectPredictor([s.pair.z_target0 for s in samples])
    t = torch.tensor([3, 17, 30, 44])
    noise = torch.randn(4, cfg.latent_channels, 8, 8)
    loss = trainer._batch_forward(samples, t, noise, np.full(4, KEEP), np.zeros(4, bool))
    assert loss.item() < 1e-10


def test_train_step_runs_and_grads_reach_all_trainable_parts():
    cfg = small_config()
    trainer = build_setup(cfg)
    samples = make_samples(cfg, 4)
    loss = trainer.train_step(samples)
    assert np.isfinite(loss)
    assert trainer.unet.conv_in.weight.grad is not None
    assert trainer.projector.sigma.weight.grad is not None
    assert trainer.projector.mu.weight.grad is not None
    assert trainer.projector.pi_blocks[0].q_proj.weight.grad is not None
    assert all(p.grad is None for p in trainer.psi.parameters())


def test_psi_hash_unchanged_by_training():
    cfg = small_config()
    trainer = build_setup(cfg)
    samples = make_samples(cfg, 4)

    def psi_hash():
        h = hashlib.sha256()
        for name, tensor in sorted(trainer.psi.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.numpy().tobytes())
        return h.hexdigest()

    before = psi_hash()
    train_ldm(trainer, samples, steps=10, batch_size=4)
    assert psi_hash() == before


def test_training_moves_loss_down_on_tiny_problem():
    cfg = small_config()
    trainer = build_setup(cfg)
    samples = make_samples(cfg, 4)
    start = trainer.eval_loss(samples)
    train_ldm(trainer, samples, steps=60, batch_size=4)
    end = trainer.eval_loss(samples)
    assert end < start


def test_eval_loss_deterministic():
    cfg = small_config()
    trainer = build_setup(cfg)
    samples = make_samples(cfg, 3)
    assert trainer.eval_loss(samples) == trainer.eval_loss(samples)


def test_nan_raises_training_diverged():
    cfg = small_config()
    trainer = build_setup(cfg)
    samples = make_samples(cfg, 2)
    with torch.no_grad():
        trainer.unet.out_conv.bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError):
        trainer.train_step(samples)


def test_flip_augmentation_uses_flipped_pair():
    cfg = small_config(flip_prob=1.0)
    trainer = build_setup(cfg)
    samples = make_samples(cfg, 2)
    flipped = make_samples(cfg, 2, seed=99)
    for s, f in zip(samples, flipped):
        s.pair_flipped = f.pair

    seen = {}

    class Recorder:
        def __call__(self, z_t, z_input, t, cond, mask):
            seen["z_input"] = z_input.clone()
            return torch.zeros_like(z_t)

    trainer.unet = Recorder()
    t = torch.tensor([5, 5])
    noise = torch.randn(2, cfg.latent_channels, 8, 8)
    trainer._batch_forward(samples, t, noise, np.full(2, KEEP), np.ones(2, bool))
    assert torch.equal(seen["z_input"][0], flipped[0].pair.z_input)
    trainer._batch_forward(samples, t, noise, np.full(2, KEEP), np.zeros(2, bool))
    assert torch.equal(seen["z_input"][0], samples[0].pair.z_input)


def test_dropout_codes_zero_the_right_things():
    cfg = small_config()
    trainer = build_setup(cfg)
    samples = make_samples(cfg, 1)
    captured = {}

    class Recorder:
        def __call__(self, z_t, z_input, t, cond, mask):
            captured["z_input"] = z_input.clone()
            captured["cond"] = cond.clone()
            return torch.zeros_like(z_t)

    trainer.unet = Recorder()
    t = torch.tensor([5])
    noise = torch.randn(1, cfg.latent_channels, 8, 8)

    trainer._batch_forward(samples, t, noise, np.array([KEEP]), np.zeros(1, bool))
    keep_cond = captured["cond"].clone()
    assert not torch.equal(captured["z_input"], torch.zeros_like(captured["z_input"]))

    trainer._batch_forward(samples, t, noise, np.array([DROP_IMAGE]), np.zeros(1, bool))
    assert torch.equal(captured["z_input"], torch.zeros_like(captured["z_input"]))
    assert torch.equal(captured["cond"], keep_cond)

    trainer._batch_forward(samples, t, noise, np.array([DROP_COND]), np.zeros(1, bool))
    assert not torch.equal(captured["z_input"], torch.zeros_like(captured["z_input"]))
    assert not torch.equal(captured["cond"], keep_cond)
    null_cond = captured["cond"].clone()

    trainer._batch_forward(samples, t, noise, np.array([DROP_BOTH]), np.zeros(1, bool))
    assert torch.equal(captured["z_input"], torch.zeros_like(captured["z_input"]))
    assert torch.equal(captured["cond"], null_cond)


def test_unet_gradients_match_finite_differences():
    cfg = small_config(n_text_tokens=4, n_image_tokens=2, d_cond=8, d_llm=6)
    unet = ConditionalUNet(2, 8, cfg.d_cond, seed=4).double()
    with torch.no_grad():
        unet.out_conv.weight.normal_(0, 0.05, generator=torch.Generator().manual_seed(1))
        unet.out_conv.bias.normal_(0, 0.05, generator=torch.Generator().manual_seed(2))
    gen = rng.generator(0, "unet-fd")
    z_t = torch.tensor(gen.standard_normal((1, 2, 8, 8)))
    z_in = torch.tensor(gen.standard_normal((1, 2, 8, 8)))
    cond = torch.tensor(gen.standard_normal((1, 6, cfg.d_cond)))
    target = torch.tensor(gen.standard_normal((1, 2, 8, 8)))

    def loss_fn():
        pred = unet(z_t, z_in, torch.tensor(3), cond)
        return torch.mean((pred - target) ** 2)

    params = [
        unet.conv_in.weight,
        unet.mid_attn.params.w_q.weight,
        unet.mid_attn.params.w_v.weight,
        unet.down_block.time_proj.weight,
        unet.out_conv.weight,
    ]
    worst = finite_difference_check(loss_fn, params, rng.generator(1, "unet-fd-coords"), num_coords=3)
    assert worst < 1e-4
