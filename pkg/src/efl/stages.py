"""Pipeline stages behind the CLI.

Each stage reads its inputs from a shared workspace directory, writes its
artifacts atomically, and records a provenance sidecar under ``meta/`` with
the config echo, seed, code version, and content hashes of everything it
consumed and produced. A stage refuses to run when a prerequisite stage
never ran (missing sidecar) or when a prerequisite artifact changed since
its producer wrote it (hash mismatch), so partial reruns cannot silently
mix generations of artifacts.

Workspace layout::

    corpus/       rendered videos + annotations        (synthesize)
    data/         curated pair manifests + frame PNGs  (preprocess)
    curated/      enriched description JSONL per split (curate)
    cache/        enrichment response cache, kept across runs
    checkpoints/  model weights                        (train-vllm, train-ldm)
    generated/    sampled images + records.jsonl       (generate)
    reports/      metric report, per-sample rows       (evaluate)
    meta/         one provenance JSON per stage
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from pathlib import Path
from statistics import fmean
from typing import Iterable

import numpy as np
import torch

from . import __version__, ioutil, rng, tokenizer
from .checkpoint import (
    load_checkpoint,
    load_module_state,
    module_state_arrays,
    save_checkpoint,
)
from .conditioning import (
    ConditioningProjector,
    FrozenTextEncoder,
    assemble_conditioning,
    null_conditioning,
    null_text_embedding,
)
from .config import RunConfig
from .dataset_pipeline import (
    DEFAULT_PROMPT_TEMPLATES,
    _frame_name,
    build_manifest,
    load_manifest,
    render_prompt,
    save_manifest,
)
from .diffusion.autoencoder import ConvAutoencoder, latent_scale_factor, train_autoencoder
from .diffusion.sampling import GuidanceScales, generation_record, sample_latent
from .diffusion.schedule import NoiseSchedule
from .diffusion.training import DropoutPolicy, LatentPair, LdmTrainer, TrainSample, train_ldm
from .diffusion.unet import ConditionalUNet
from .enrichment import DescriptionCache, Enricher, default_examples, make_backend
from .errors import (
    ConfigError,
    EflError,
    MissingPrerequisiteError,
    StalePrerequisiteError,
)
from .eval_harness import metrics as metricsmod
from .eval_harness.bins import transition_time_bins
from .eval_harness.extractors import (
    PerceptualExtractor,
    RetrievalCaptioner,
    TrigramTextEncoder,
    build_stack,
    train_image_encoder,
    train_video_encoder,
)
from .eval_harness.report import build_report, save_report
from .eval_harness.study import user_study_export, write_study_package
from .images import load_png, save_png
from .synthetic import NpzFramesSource, generate_corpus, load_instances
from .vllm_instruct import InstructSample, VisualLM, train_vllm

log = logging.getLogger(__name__)

STAGE_ORDER = (
    "synthesize",
    "preprocess",
    "curate",
    "train-vllm",
    "train-ldm",
    "generate",
    "evaluate",
)

VLLM_CKPT = "checkpoints/vllm.ckpt"
LDM_CKPT = "checkpoints/ldm.ckpt"


# -- provenance and locking -----------------------------------------------


def _meta_path(workspace: Path, stage: str) -> Path:
    return workspace / "meta" / f"{stage}.json"


@contextmanager
def workspace_lock(workspace: Path):
    """Exclusive advisory lock so two commands never write one workspace."""
    workspace.mkdir(parents=True, exist_ok=True)
    lock = workspace / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise EflError(
            f"workspace {workspace} is locked ({lock} exists); another command may be "
            "running, or a previous one crashed and the file needs removing"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode("utf-8"))
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _hash_files(workspace: Path, paths: Iterable[Path]) -> dict[str, str]:
    return {
        path.relative_to(workspace).as_posix(): ioutil.sha256_file(path)
        for path in sorted(set(paths))
    }


def _finish_stage(
    workspace: Path,
    stage: str,
    config: RunConfig,
    input_hashes: dict[str, str],
    outputs: Iterable[Path],
    started: float,
) -> dict:
    meta = {
        "stage": stage,
        "code_version": __version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "input_hashes": dict(sorted(input_hashes.items())),
        "output_hashes": _hash_files(workspace, outputs),
    }
    ioutil.atomic_write_json(_meta_path(workspace, stage), meta)
    log.info(
        "stage %s: %d artifacts in %.1fs",
        stage,
        len(meta["output_hashes"]),
        time.monotonic() - started,
    )
    return meta


def require_stage(workspace: Path, stage: str) -> dict[str, str]:
    """Check a prerequisite ran and its outputs are byte-identical to what it wrote."""
    meta_path = _meta_path(workspace, stage)
    if not meta_path.is_file():
        raise MissingPrerequisiteError(
            f"stage '{stage}' has no outputs in workspace {workspace}; run `efl {stage}` first"
        )
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    for rel, recorded in meta["output_hashes"].items():
        path = workspace / rel
        if not path.is_file():
            raise MissingPrerequisiteError(
                f"artifact {rel} from stage '{stage}' is missing; rerun `efl {stage}`"
            )
        if ioutil.sha256_file(path) != recorded:
            raise StalePrerequisiteError(
                f"artifact {rel} changed after stage '{stage}' wrote it; rerun `efl {stage}`"
            )
    return dict(meta["output_hashes"])


def _announce(stage: str, config: RunConfig) -> float:
    log.info("stage %s seed=%d", stage, config.seed)
    log.info("config echo: %s", json.dumps(config.to_dict(), sort_keys=True))
    return time.monotonic()


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _files_under(directory: Path) -> list[Path]:
    return [p for p in directory.rglob("*") if p.is_file()]


# -- stage bodies ---------------------------------------------------------


def cmd_synthesize(config: RunConfig) -> dict:
    """Render the procedural corpus: videos, annotations, ground-truth scores."""
    workspace = config.workspace_path
    with workspace_lock(workspace):
        started = _announce("synthesize", config)
        corpus_dir = _fresh_dir(workspace / "corpus")
        instances = generate_corpus(config, corpus_dir)
        log.info("rendered %d instances", len(instances))
        return _finish_stage(
            workspace, "synthesize", config, {}, _files_under(corpus_dir), started
        )


def cmd_preprocess(config: RunConfig) -> dict:
    """Curate frame pairs from the corpus into per-split manifests."""
    workspace = config.workspace_path
    with workspace_lock(workspace):
        started = _announce("preprocess", config)
        inputs = require_stage(workspace, "synthesize")
        instances, _ = load_instances(workspace / "corpus")
        source = NpzFramesSource(workspace / "corpus")
        data_dir = _fresh_dir(workspace / "data")
        for split in ("train", "test"):
            manifest, rejections = build_manifest(instances, source, config, split=split)
            save_manifest(manifest, data_dir)
            ioutil.write_jsonl(
                data_dir / f"rejections_{split}.jsonl",
                [{"key": r.key, "reason": r.reason} for r in rejections],
            )
            log.info("split %s: %d pairs kept, %d rejected", split, len(manifest.entries), len(rejections))
        return _finish_stage(
            workspace, "preprocess", config, inputs, _files_under(data_dir), started
        )


def _load_descriptions(workspace: Path, split: str) -> dict[str, str]:
    path = workspace / "curated" / f"descriptions_{split}.jsonl"
    return {row["key"]: row["text"] for row in ioutil.read_jsonl(path)}


def cmd_curate(config: RunConfig) -> dict:
    """Expand every manifest label into an enriched description, with caching."""
    workspace = config.workspace_path
    with workspace_lock(workspace):
        started = _announce("curate", config)
        inputs = {
            **require_stage(workspace, "synthesize"),
            **require_stage(workspace, "preprocess"),
        }
        instances, _ = load_instances(workspace / "corpus")
        boxes_by_key = {inst.key: inst.boxes for inst in instances}
        cache = DescriptionCache(workspace / "cache" / "enrichment.jsonl")
        backend = make_backend(
            config.enrichment_backend,
            temperature=config.enrichment_temperature,
            max_tokens=config.enrichment_max_tokens,
        )
        enrichers: dict[str, Enricher] = {}
        curated_dir = _fresh_dir(workspace / "curated")
        outputs: list[Path] = []
        n_rows = 0
        for split in ("train", "test"):
            rows = []
            manifest = load_manifest(workspace / "data", split, load_frames=False)
            for pair in manifest.entries:
                inst = pair.instance
                if inst.key not in boxes_by_key:
                    raise StalePrerequisiteError(
                        f"manifest entry {inst.key} has no corpus annotation; rerun `efl preprocess`"
                    )
                if inst.dataset_tag not in enrichers:
                    enrichers[inst.dataset_tag] = Enricher(
                        backend=backend,
                        cache=cache,
                        examples=default_examples(inst.dataset_tag),
                        max_words=config.enrichment_max_words,
                    )
                desc = enrichers[inst.dataset_tag].enrich(
                    inst.action_label, boxes_by_key[inst.key]
                )
                rows.append(
                    {
                        "key": inst.key,
                        "text": desc.text,
                        "source": desc.source,
                        "cache_key": desc.cache_key,
                    }
                )
            outputs.append(
                ioutil.write_jsonl(curated_dir / f"descriptions_{split}.jsonl", rows)
            )
            n_rows += len(rows)
        calls = sum(e.backend_calls for e in enrichers.values())
        log.info("curate: %d descriptions (%d backend calls, rest cached)", n_rows, calls)
        outputs.append(cache.path)
        return _finish_stage(workspace, "curate", config, inputs, outputs, started)


def cmd_train_vllm(config: RunConfig) -> dict:
    """Instruction-tune the small multimodal LM on (input frame, prompt, description)."""
    workspace = config.workspace_path
    with workspace_lock(workspace):
        started = _announce("train-vllm", config)
        inputs = {
            **require_stage(workspace, "preprocess"),
            **require_stage(workspace, "curate"),
        }
        manifest = load_manifest(workspace / "data", "train", load_frames=True)
        descriptions = _load_descriptions(workspace, "train")
        samples = []
        for pair in manifest.entries:
            key = pair.instance.key
            if key not in descriptions:
                raise StalePrerequisiteError(
                    f"no curated description for {key}; rerun `efl curate`"
                )
            samples.append(
                InstructSample(
                    image=pair.input_frame,
                    prompt=pair.prompt,
                    target_text=descriptions[key],
                )
            )
        model = VisualLM(config, seed=config.seed)
        losses = train_vllm(model, samples, config)
        log.info(
            "tuned on %d samples for %d steps, final loss %.4f",
            len(samples),
            len(losses),
            losses[-1],
        )
        ckpt = workspace / VLLM_CKPT
        save_checkpoint(
            ckpt,
            {
                "stage": "train-vllm",
                "code_version": __version__,
                "seed": config.seed,
                "config": config.to_dict(),
                "n_samples": len(samples),
                "steps": len(losses),
                "final_loss": losses[-1],
            },
            module_state_arrays(model),
        )
        return _finish_stage(workspace, "train-vllm", config, inputs, [ckpt], started)


def _load_vllm(workspace: Path, config: RunConfig) -> VisualLM:
    _, tensors = load_checkpoint(workspace / VLLM_CKPT)
    model = VisualLM(config, seed=config.seed)
    load_module_state(model, tensors)
    model.eval()
    return model


def _to_batch(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.transpose(image, (2, 0, 1)).astype(np.float32)).unsqueeze(0)


def _encode_scaled(ae: ConvAutoencoder, image: np.ndarray, scale: float) -> torch.Tensor:
    with torch.no_grad():
        return ae.encode(_to_batch(image))[0] * scale


def _mode_wants(mode: str) -> tuple[bool, bool]:
    return (
        mode in ("desc_plus_image", "desc_plus_joint"),
        mode in ("desc_plus_text", "desc_plus_joint"),
    )


def _null_text(vllm: VisualLM, config: RunConfig):
    with torch.no_grad():
        pad_row = vllm.lm.embed(torch.tensor([tokenizer.PAD_ID]))[0]
    return null_text_embedding(config.d_llm, config.n_text_tokens, pad_row)


def cmd_train_ldm(config: RunConfig) -> dict:
    """Train the autoencoder, then the conditioned denoiser over its latents."""
    workspace = config.workspace_path
    with workspace_lock(workspace):
        started = _announce("train-ldm", config)
        inputs = {
            **require_stage(workspace, "preprocess"),
            **require_stage(workspace, "curate"),
            **require_stage(workspace, "train-vllm"),
        }
        manifest = load_manifest(workspace / "data", "train", load_frames=True)
        descriptions = _load_descriptions(workspace, "train")
        vllm = _load_vllm(workspace, config)

        frames = [p.input_frame.image for p in manifest.entries]
        frames += [p.target_frame.image for p in manifest.entries]
        images = torch.from_numpy(
            np.transpose(np.stack(frames), (0, 3, 1, 2)).astype(np.float32)
        )
        ae = ConvAutoencoder(
            base_width=config.ae_base_width,
            latent_channels=config.latent_channels,
            seed=config.seed,
        )
        ae_losses = train_autoencoder(
            ae,
            images,
            steps=config.ae_steps,
            batch_size=config.ae_batch,
            lr=config.ae_lr,
            seed=config.seed,
        )
        scale = latent_scale_factor(ae, images)
        log.info("autoencoder: %d steps, final loss %.5f, latent scale %.4f",
                 len(ae_losses), ae_losses[-1], scale)

        psi = FrozenTextEncoder(config.n_text_tokens, config.d_cond, seed=config.seed)
        projector = ConditioningProjector(config.d_llm, config.d_cond, seed=config.seed)
        unet = ConditionalUNet(
            config.latent_channels, config.unet_base_width, config.d_cond, seed=config.seed
        )
        schedule = NoiseSchedule.linear(
            config.diffusion_steps, config.beta_start, config.beta_end
        )
        policy = DropoutPolicy(
            config.drop_image_only, config.drop_cond_only, config.drop_both
        )
        wants_image, wants_text = _mode_wants(config.conditioning_mode)
        null_h_t = _null_text(vllm, config) if wants_text else None

        samples = []
        for pair in manifest.entries:
            key = pair.instance.key
            if key not in descriptions:
                raise StalePrerequisiteError(
                    f"no curated description for {key}; rerun `efl curate`"
                )
            label = pair.instance.action_label
            text = label if config.conditioning_mode == "labels_only" else descriptions[key]
            image_in = pair.input_frame.image
            image_out = pair.target_frame.image
            pair_plain = LatentPair(
                _encode_scaled(ae, image_in, scale),
                _encode_scaled(ae, image_out, scale),
                ae.factor,
            )
            pair_flipped = LatentPair(
                _encode_scaled(ae, image_in[:, ::-1, :].copy(), scale),
                _encode_scaled(ae, image_out[:, ::-1, :].copy(), scale),
                ae.factor,
            )
            # the tuned LM is frozen here, so its embeddings enter as constants
            with torch.no_grad():
                h_i = vllm.extract_image_embedding(image_in).tokens if wants_image else None
            h_t = vllm.embed_description(text) if wants_text else None
            samples.append(TrainSample(pair_plain, text, h_i, h_t, pair_flipped))

        trainer = LdmTrainer(
            unet, psi, projector, schedule, policy, config, null_h_t, seed=config.seed
        )
        losses = train_ldm(
            trainer, samples, steps=config.ldm_steps, batch_size=config.ldm_batch
        )
        log.info("denoiser: %d steps, final loss %.5f", len(losses), losses[-1])

        tensors: dict[str, np.ndarray] = {}
        for prefix, module in (
            ("autoencoder", ae),
            ("psi", psi),
            ("projector", projector),
            ("unet", unet),
        ):
            for name, array in module_state_arrays(module).items():
                tensors[f"{prefix}.{name}"] = array
        ckpt = workspace / LDM_CKPT
        save_checkpoint(
            ckpt,
            {
                "stage": "train-ldm",
                "code_version": __version__,
                "seed": config.seed,
                "config": config.to_dict(),
                "latent_scale": scale,
                "n_pairs": len(samples),
                "steps": len(losses),
                "final_loss": losses[-1],
            },
            tensors,
        )
        return _finish_stage(workspace, "train-ldm", config, inputs, [ckpt], started)


def _load_ldm(workspace: Path, config: RunConfig):
    header, tensors = load_checkpoint(workspace / LDM_CKPT)
    ae = ConvAutoencoder(
        base_width=config.ae_base_width,
        latent_channels=config.latent_channels,
        seed=config.seed,
    )
    psi = FrozenTextEncoder(config.n_text_tokens, config.d_cond, seed=config.seed)
    projector = ConditioningProjector(config.d_llm, config.d_cond, seed=config.seed)
    unet = ConditionalUNet(
        config.latent_channels, config.unet_base_width, config.d_cond, seed=config.seed
    )
    for prefix, module in (
        ("autoencoder", ae),
        ("psi", psi),
        ("projector", projector),
        ("unet", unet),
    ):
        load_module_state(module, tensors, prefix=f"{prefix}.")
        module.eval()
    return ae, psi, projector, unet, float(header["latent_scale"])


def _safe_name(key: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in key)


def cmd_generate(config: RunConfig) -> dict:
    """Sample an action frame per test input, or fan one probe frame across actions."""
    workspace = config.workspace_path
    with workspace_lock(workspace):
        started = _announce("generate", config)
        inputs = {
            **require_stage(workspace, "train-vllm"),
            **require_stage(workspace, "train-ldm"),
        }
        vllm = _load_vllm(workspace, config)
        ae, psi, projector, unet, scale = _load_ldm(workspace, config)
        schedule = NoiseSchedule.linear(
            config.diffusion_steps, config.beta_start, config.beta_end
        )
        scales = GuidanceScales(config.guidance_image, config.guidance_cond)
        mode = config.conditioning_mode
        wants_image, wants_text = _mode_wants(mode)
        null_h_t = _null_text(vllm, config) if wants_text else None
        null_bundle = null_conditioning(mode, psi, projector, config, null_h_t)

        requests: list[tuple[str, np.ndarray, str, str]] = []
        if config.probe_frame:
            frame = load_png(config.probe_frame)
            labels = [s.strip() for s in config.probe_actions.split(";") if s.strip()]
            if not labels:
                raise ConfigError("probe_frame is set but probe_actions lists no actions")
            for i, label in enumerate(labels):
                prompt = render_prompt(DEFAULT_PROMPT_TEMPLATES[0], label)
                requests.append((f"probe-{i:02d}", frame, label, prompt))
        else:
            inputs.update(require_stage(workspace, "preprocess"))
            manifest = load_manifest(workspace / "data", "test", load_frames=True)
            for pair in manifest.entries[: config.n_generate]:
                requests.append(
                    (
                        pair.instance.key,
                        pair.input_frame.image,
                        pair.instance.action_label,
                        pair.prompt,
                    )
                )

        out_dir = _fresh_dir(workspace / "generated")
        records = []
        for key, image, label, prompt in requests:
            if mode == "labels_only":
                text, description = label, ""
            else:
                description = vllm.generate_description(image, prompt).text
                text = description
            with torch.no_grad():
                h_i = vllm.extract_image_embedding(image).tokens if wants_image else None
            h_t = vllm.embed_description(text) if wants_text else None
            with torch.no_grad():
                bundle = assemble_conditioning(text, h_i, h_t, mode, psi, projector)
            z_input = _encode_scaled(ae, image, scale)
            gen = rng.generator(config.seed, "sample", key)
            z = sample_latent(
                unet,
                z_input,
                bundle,
                null_bundle,
                schedule,
                scales,
                config.sample_steps,
                gen,
                ancestral=config.sampler == "ancestral",
            )
            with torch.no_grad():
                decoded = ae.decode((z / scale).unsqueeze(0))[0]
            frame_out = np.clip(
                np.transpose(decoded.numpy().astype(np.float64), (1, 2, 0)), 0.0, 1.0
            )
            rel = f"generated/{_safe_name(key)}.png"
            save_png(workspace / rel, frame_out)
            row = generation_record(key, config.seed, config.sample_steps, scales, mode)
            row.update({"image_path": rel, "prompt": prompt, "description": description})
            records.append(row)
            log.info("sampled %s", key)
        ioutil.write_jsonl(out_dir / "records.jsonl", records)
        return _finish_stage(
            workspace, "generate", config, inputs, _files_under(out_dir), started
        )


def _bin_rows(
    per_sample: list[dict], deltas: np.ndarray, k: int, metric_names: tuple[str, ...]
) -> list[dict]:
    """Per-bin means over transition time; collapses when too few samples."""
    n = len(per_sample)
    if k < 2 or n < k:
        row = {"bin": 0, "count": n, "delta_max": float(deltas.max())}
        row.update({m: fmean(r[m] for r in per_sample) for m in metric_names})
        return [row]
    assignment = transition_time_bins(deltas, k)
    rows = []
    for b in range(assignment.k):
        members = [r for r, a in zip(per_sample, assignment.assignments) if a == b]
        row: dict = {"bin": b, "count": len(members)}
        if not assignment.degenerate:
            edges = assignment.thresholds
            row["delta_max"] = float(edges[b]) if b < len(edges) else float(deltas.max())
        if members:
            row.update({m: fmean(r[m] for r in members) for m in metric_names})
        rows.append(row)
    return rows


PER_SAMPLE_METRICS = ("psnr", "lpips", "clip", "egovlp", "egovlp_plus", "blip_b", "blip_l")


def cmd_evaluate(config: RunConfig) -> dict:
    """Score generated frames against ground truth and write the metric report."""
    workspace = config.workspace_path
    with workspace_lock(workspace):
        started = _announce("evaluate", config)
        inputs = {
            **require_stage(workspace, "preprocess"),
            **require_stage(workspace, "curate"),
            **require_stage(workspace, "generate"),
        }
        test = load_manifest(workspace / "data", "test", load_frames=True)
        by_key = {p.instance.key: p for p in test.entries}
        records = ioutil.read_jsonl(workspace / "generated" / "records.jsonl")
        matched = [(rec, by_key[rec["key"]]) for rec in records if rec["key"] in by_key]
        if len(matched) < 2:
            raise MissingPrerequisiteError(
                "need at least 2 generated samples matching the test manifest; "
                "run `efl generate` without probe overrides first"
            )
        descriptions = _load_descriptions(workspace, "test")

        train = load_manifest(workspace / "data", "train", load_frames=True)
        train_inputs = [p.input_frame.image for p in train.entries]
        train_targets = [p.target_frame.image for p in train.entries]
        gallery_texts = _load_descriptions(workspace, "train")
        image_encoder = train_image_encoder(
            np.stack(train_targets + train_inputs),
            seed=config.seed,
            steps=config.extractor_steps,
            batch_size=config.extractor_batch,
        )
        video_encoder = train_video_encoder(
            np.stack(
                [
                    np.stack(build_stack([i, t]))
                    for i, t in zip(train_inputs, train_targets)
                ]
            ),
            seed=config.seed,
            steps=config.extractor_steps,
            batch_size=config.extractor_batch,
        )
        perceptual = PerceptualExtractor(seed=config.seed)
        text_encoder = TrigramTextEncoder()
        captioners = {}
        gallery_pairs = [
            (p.target_frame.image, gallery_texts[p.instance.key])
            for p in train.entries
            if p.instance.key in gallery_texts
        ]
        for variant in ("blip_b", "blip_l"):
            captioner = RetrievalCaptioner(variant, seed=config.seed)
            captioner.fit_gallery([g for g, _ in gallery_pairs], [t for _, t in gallery_pairs])
            captioners[variant] = captioner

        per_sample = []
        ref_features, gen_features = [], []
        for rec, pair in matched:
            gen_img = load_png(workspace / rec["image_path"])
            ref = pair.target_frame.image
            inp = pair.input_frame.image
            ref_text = descriptions.get(pair.instance.key, "")
            per_sample.append(
                {
                    "key": rec["key"],
                    "delta": pair.delta_in + pair.delta_out,
                    "psnr": metricsmod.psnr(gen_img, ref),
                    "lpips": metricsmod.perceptual_distance(gen_img, ref, perceptual),
                    "clip": metricsmod.contrastive_image_score(gen_img, ref, image_encoder),
                    "egovlp": metricsmod.egovlp_score(gen_img, ref, video_encoder),
                    "egovlp_plus": metricsmod.egovlp_plus_score(
                        inp, gen_img, ref, video_encoder
                    ),
                    "blip_b": metricsmod.caption_text_similarity(
                        gen_img, ref_text, captioners["blip_b"], text_encoder
                    ),
                    "blip_l": metricsmod.caption_text_similarity(
                        gen_img, ref_text, captioners["blip_l"], text_encoder
                    ),
                }
            )
            ref_features.append(perceptual.distribution_features(ref))
            gen_features.append(perceptual.distribution_features(gen_img))

        metrics = {m: fmean(r[m] for r in per_sample) for m in PER_SAMPLE_METRICS}
        metrics["fid"] = metricsmod.fid(np.stack(ref_features), np.stack(gen_features))
        deltas = np.array([r["delta"] for r in per_sample], dtype=np.float64)
        bins = _bin_rows(per_sample, deltas, config.bins_k, PER_SAMPLE_METRICS)
        fingerprints = {
            "perceptual": perceptual.fingerprint(),
            "image": image_encoder.fingerprint(),
            "video": video_encoder.fingerprint(),
            "caption_blip_b": captioners["blip_b"].fingerprint(),
            "caption_blip_l": captioners["blip_l"].fingerprint(),
        }
        report = build_report(
            metrics,
            bins,
            fingerprints,
            n=len(per_sample),
            notes={
                "seed": config.seed,
                "code_version": __version__,
                "conditioning_mode": config.conditioning_mode,
                "n_generated": len(records),
            },
        )
        reports_dir = _fresh_dir(workspace / "reports")
        save_report(report, reports_dir / "report.json")
        ioutil.write_jsonl(
            reports_dir / "per_sample.jsonl",
            [{k: (round(v, 6) if isinstance(v, float) else v) for k, v in row.items()} for row in per_sample],
        )
        log.info(
            "evaluated %d samples: psnr %.2f, fid %.2f",
            len(per_sample),
            metrics["psnr"],
            metrics["fid"],
        )
        if config.study_export:
            study_samples = [
                {
                    "key": rec["key"],
                    "input": f"data/frames/test/{_frame_name(rec['key'], 'in')}",
                    "outputs": {
                        "ours": rec["image_path"],
                        "input_copy": f"data/frames/test/{_frame_name(rec['key'], 'in')}",
                    },
                }
                for rec, pair in matched
            ]
            tasks, key = user_study_export(
                study_samples, ["ours", "input_copy"], config.study_n_raters, config.seed
            )
            write_study_package(tasks, key, reports_dir / "study")
        return _finish_stage(
            workspace, "evaluate", config, inputs, _files_under(reports_dir), started
        )


STAGE_COMMANDS = {
    "synthesize": cmd_synthesize,
    "preprocess": cmd_preprocess,
    "curate": cmd_curate,
    "train-vllm": cmd_train_vllm,
    "train-ldm": cmd_train_ldm,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
}
