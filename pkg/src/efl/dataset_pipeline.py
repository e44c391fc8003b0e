"""Curation of (input frame, target frame, prompt) pairs from action annotations.

Per action annotation the pipeline derives the frame offsets, picks the
sharpest frame inside a small window around each nominal timestamp, scores
input/target similarity, keeps pairs inside the configured band, and attaches
a templated user prompt. Everything is deterministic given the seed; rejected
annotations are logged with a reason code instead of being dropped silently.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import images, rng
from .config import RunConfig
from .errors import (
    AnnotationIncompleteError,
    DegenerateAnnotationError,
    DuplicateKeyError,
    EmptyManifestError,
    NumericError,
    SplitMismatchError,
    TemplateError,
)

DATASET_TAGS = ("ego4d_style", "ek_style")

REASON_ANNOTATION_INCOMPLETE = "annotation_incomplete"
REASON_DEGENERATE = "degenerate_annotation"
REASON_BELOW_BAND = "similarity_below_band"
REASON_ABOVE_BAND = "similarity_above_band"
REASON_DUPLICATE = "duplicate_key"
REASON_OTHER_SPLIT = "other_split"
REASON_MISSING_FRAMES = "missing_frames"

DEFAULT_PROMPT_TEMPLATES = (
    "What should I do to {action}?",
    "How can I {action}?",
    "Show me how to {action}.",
    "What is the next move if I want to {action}?",
    "Demonstrate the way to {action}.",
    "I need to {action}. What happens next?",
    "What does the scene look like after I {action}?",
    "Give me the action frame for: {action}.",
    "Visualize how I {action}.",
    "What comes right after I start to {action}?",
)


@dataclass(frozen=True)
class Box:
    """Axis-aligned object box in normalized image coordinates."""

    name: str
    x0: float
    y0: float
    x1: float
    y1: float

    def validate(self) -> None:
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise DegenerateAnnotationError(
                f"box {self.name!r} has invalid coords ({self.x0}, {self.y0}, {self.x1}, {self.y1})"
            )

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass
class ActionInstance:
    """One annotated action: label, timing, and object boxes."""

    video_id: str
    action_label: str
    t_start: float
    t_end: float
    dataset_tag: str
    t_pre: float | None = None
    t_pnr: float | None = None
    boxes: list[Box] = field(default_factory=list)

    @property
    def key(self) -> str:
        return instance_key(self.video_id, self.t_start)

    def validate(self) -> None:
        if self.dataset_tag not in DATASET_TAGS:
            raise DegenerateAnnotationError(f"unknown dataset_tag {self.dataset_tag!r}")
        if not self.t_start < self.t_end:
            raise DegenerateAnnotationError(
                f"{self.key}: need t_start < t_end, got {self.t_start} >= {self.t_end}"
            )
        if self.t_pre is not None and self.t_pre > self.t_start:
            raise DegenerateAnnotationError(f"{self.key}: t_pre after t_start")
        if self.t_pnr is not None and not (self.t_start <= self.t_pnr <= self.t_end):
            raise DegenerateAnnotationError(f"{self.key}: t_pnr outside [t_start, t_end]")
        for box in self.boxes:
            box.validate()


@dataclass
class FrameRecord:
    """A single frame: timestamp, HxWx3 float image in [0,1], optional score."""

    time: float
    image: np.ndarray
    aesthetic_score: float | None = None


@dataclass
class CuratedPair:
    instance: ActionInstance
    input_frame: FrameRecord
    target_frame: FrameRecord
    delta_in: float
    delta_out: float
    similarity: float
    prompt: str


@dataclass
class Manifest:
    split: str
    entries: list[CuratedPair]
    seed: int
    source_tags: list[str]


@dataclass(frozen=True)
class Rejection:
    key: str
    reason: str


class FramesSource(Protocol):
    """Supplies decoded frames around a timestamp for one video."""

    def window(self, video_id: str, center_time: float, radius: int) -> tuple[list[FrameRecord], int]:
        """Return (frames, center_index) for the clamped window around center_time."""
        ...


class FeatureExtractor(Protocol):
    def features(self, image: np.ndarray) -> np.ndarray:
        """Pooled feature vector for one HxWx3 image in [0,1]."""
        ...


class IdentityExtractor:
    """Uses the raw pixels as the feature vector."""

    def features(self, image: np.ndarray) -> np.ndarray:
        return np.asarray(image, dtype=np.float64).reshape(-1)


def instance_key(video_id: str, t_start: float) -> str:
    return f"{video_id}:{t_start:.3f}"


def sharpness_score(image: np.ndarray) -> float:
    """Default aesthetic stand-in: mean gradient magnitude of the frame."""
    return images.gradient_magnitude(image)


def compute_frame_offsets(
    instance: ActionInstance,
    lambda_frac: float,
    default_delta_in: float,
) -> tuple[float, float]:
    """Derive (delta_in, delta_out) in seconds from the annotation timing.

    ego4d_style uses the annotated pre/contact timestamps directly; ek_style
    falls back to a fixed input offset and a fraction of the action duration.
    """
    if instance.dataset_tag == "ego4d_style":
        if instance.t_pre is None or instance.t_pnr is None:
            raise AnnotationIncompleteError(
                f"{instance.key}: ego4d_style needs t_pre and t_pnr"
            )
        delta_in = instance.t_start - instance.t_pre
        delta_out = instance.t_pnr - instance.t_start
    elif instance.dataset_tag == "ek_style":
        if not (0.0 < lambda_frac < 1.0):
            raise DegenerateAnnotationError(f"lambda_frac must be in (0,1), got {lambda_frac}")
        delta_in = default_delta_in
        delta_out = lambda_frac * (instance.t_end - instance.t_start)
    else:
        raise DegenerateAnnotationError(f"unknown dataset_tag {instance.dataset_tag!r}")
    if delta_in <= 0.0 or delta_out <= 0.0:
        raise DegenerateAnnotationError(
            f"{instance.key}: non-positive offsets ({delta_in}, {delta_out})"
        )
    return delta_in, delta_out


def select_best_index(scores: Sequence[float], center_index: int, radius: int) -> int:
    """Index of the best-scoring frame in the clamped window around center_index.

    Ties go to the frame nearest the center, then to the lower index.
    """
    if len(scores) == 0:
        raise EmptyManifestError("select_best_frame: empty candidate list")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    lo = max(0, center_index - radius)
    hi = min(len(scores) - 1, center_index + radius)
    best = lo
    for i in range(lo, hi + 1):
        better = scores[i] > scores[best]
        tie = scores[i] == scores[best]
        closer = abs(i - center_index) < abs(best - center_index)
        if better or (tie and closer):
            best = i
    return best


def select_best_frame(
    candidates: Sequence[FrameRecord],
    center_index: int,
    radius: int,
    aesthetic_fn: Callable[[np.ndarray], float] = sharpness_score,
) -> FrameRecord:
    """Pick the best frame in the window; missing scores come from aesthetic_fn."""
    scored: list[FrameRecord] = []
    for rec in candidates:
        if rec.aesthetic_score is None:
            rec = dataclasses.replace(rec, aesthetic_score=aesthetic_fn(rec.image))
        scored.append(rec)
    idx = select_best_index([rec.aesthetic_score for rec in scored], center_index, radius)
    return scored[idx]


def embed_similarity(a: FrameRecord, b: FrameRecord, extractor: FeatureExtractor) -> float:
    """Cosine similarity between the pooled extractor features of two frames."""
    if a.image.shape != b.image.shape:
        raise ValueError(f"frame shapes differ: {a.image.shape} vs {b.image.shape}")
    fa = np.asarray(extractor.features(a.image), dtype=np.float64).reshape(-1)
    fb = np.asarray(extractor.features(b.image), dtype=np.float64).reshape(-1)
    na = float(np.linalg.norm(fa))
    nb = float(np.linalg.norm(fb))
    if na == 0.0 or nb == 0.0:
        raise NumericError("embed_similarity: zero-norm feature vector")
    return float(np.clip(np.dot(fa, fb) / (na * nb), -1.0, 1.0))


def filter_by_similarity(pair: CuratedPair, lo: float = 0.81, hi: float = 0.97) -> bool:
    """Keep the pair iff its similarity lies inside the inclusive band."""
    if not (-1.0 <= lo < hi <= 1.0):
        raise ValueError(f"invalid similarity band [{lo}, {hi}]")
    return lo <= pair.similarity <= hi


def validate_templates(templates: Sequence[str]) -> None:
    if not templates:
        raise TemplateError("template list is empty")
    for tpl in templates:
        if tpl.count("{action}") != 1:
            raise TemplateError(f"template needs exactly one {{action}} placeholder: {tpl!r}")


def select_prompt_template(templates: Sequence[str], gen: np.random.Generator) -> str:
    """Uniform seeded choice among the (validated) templates."""
    validate_templates(templates)
    return templates[int(gen.integers(len(templates)))]


def render_prompt(template: str, action_label: str) -> str:
    validate_templates([template])
    try:
        return template.format(action=action_label)
    except (KeyError, IndexError, ValueError) as exc:
        raise TemplateError(f"cannot render template {template!r}: {exc}") from exc


def assign_split(video_id: str, seed: int, train_fraction: float) -> str:
    """Deterministic per-video train/test assignment."""
    gen = rng.generator(seed, "split", video_id)
    return "train" if float(gen.random()) < train_fraction else "test"


def build_manifest(
    instances: Sequence[ActionInstance],
    frames_source: FramesSource,
    config: RunConfig,
    split: str = "train",
    extractor: FeatureExtractor | None = None,
    aesthetic_fn: Callable[[np.ndarray], float] = sharpness_score,
    templates: Sequence[str] = DEFAULT_PROMPT_TEMPLATES,
) -> tuple[Manifest, list[Rejection]]:
    """Run the full curation chain for one split.

    Every input instance ends up either in the manifest or in the rejection
    list, so counts always reconcile. Ordering is stable by (video_id,
    t_start) and all randomness comes from streams derived from config.seed,
    so reruns are byte-identical.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if extractor is None:
        from .eval_harness.extractors import PerceptualExtractor

        extractor = PerceptualExtractor(seed=config.seed)
    validate_templates(templates)

    ordered = sorted(instances, key=lambda inst: (inst.video_id, inst.t_start))
    entries: list[CuratedPair] = []
    rejections: list[Rejection] = []
    seen: set[str] = set()
    tags: list[str] = []

    for inst in ordered:
        key = inst.key
        if key in seen:
            rejections.append(Rejection(key, REASON_DUPLICATE))
            continue
        seen.add(key)
        if assign_split(inst.video_id, config.seed, config.train_fraction) != split:
            rejections.append(Rejection(key, REASON_OTHER_SPLIT))
            continue
        try:
            inst.validate()
            delta_in, delta_out = compute_frame_offsets(
                inst, config.lambda_frac, config.default_delta_in
            )
        except AnnotationIncompleteError:
            rejections.append(Rejection(key, REASON_ANNOTATION_INCOMPLETE))
            continue
        except DegenerateAnnotationError:
            rejections.append(Rejection(key, REASON_DEGENERATE))
            continue

        try:
            in_frames, in_center = frames_source.window(
                inst.video_id, inst.t_start - delta_in, config.aesthetic_radius
            )
            out_frames, out_center = frames_source.window(
                inst.video_id, inst.t_start + delta_out, config.aesthetic_radius
            )
            input_frame = select_best_frame(in_frames, in_center, config.aesthetic_radius, aesthetic_fn)
            target_frame = select_best_frame(out_frames, out_center, config.aesthetic_radius, aesthetic_fn)
        except EmptyManifestError:
            rejections.append(Rejection(key, REASON_MISSING_FRAMES))
            continue

        similarity = embed_similarity(input_frame, target_frame, extractor)
        pair = CuratedPair(
            instance=inst,
            input_frame=input_frame,
            target_frame=target_frame,
            delta_in=delta_in,
            delta_out=delta_out,
            similarity=similarity,
            prompt="",
        )
        if not filter_by_similarity(pair, config.sim_lo, config.sim_hi):
            reason = REASON_BELOW_BAND if similarity < config.sim_lo else REASON_ABOVE_BAND
            rejections.append(Rejection(key, reason))
            continue

        gen = rng.generator(config.seed, "prompt", inst.video_id, f"{inst.t_start:.6f}")
        template = select_prompt_template(templates, gen)
        pair.prompt = render_prompt(template, inst.action_label)
        entries.append(pair)
        if inst.dataset_tag not in tags:
            tags.append(inst.dataset_tag)

    if not entries:
        raise EmptyManifestError(f"no instances survived curation for split {split!r}")
    return Manifest(split=split, entries=entries, seed=config.seed, source_tags=tags), rejections


def merge_manifests(a: Manifest, b: Manifest) -> Manifest:
    """Union of two same-split manifests; duplicate keys are an error."""
    if a.split != b.split:
        raise SplitMismatchError(f"cannot merge splits {a.split!r} and {b.split!r}")
    seen: set[str] = set()
    for pair in a.entries + b.entries:
        key = pair.instance.key
        if key in seen:
            raise DuplicateKeyError(f"duplicate key {key} while merging manifests")
        seen.add(key)
    entries = sorted(a.entries + b.entries, key=lambda p: (p.instance.video_id, p.instance.t_start))
    tags = list(a.source_tags)
    for tag in b.source_tags:
        if tag not in tags:
            tags.append(tag)
    return Manifest(split=a.split, entries=entries, seed=a.seed, source_tags=tags)


# -- persistence ----------------------------------------------------------

def _frame_name(key: str, role: str) -> str:
    return key.replace(":", "_").replace("/", "_") + f"_{role}.png"


def save_manifest(manifest: Manifest, directory: str | Path) -> Path:
    """Write frames as PNGs plus one JSONL row per pair; returns the JSONL path."""
    directory = Path(directory)
    frames_dir = directory / "frames" / manifest.split
    frames_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for pair in manifest.entries:
        inst = pair.instance
        in_name = _frame_name(inst.key, "in")
        out_name = _frame_name(inst.key, "out")
        images.save_png(frames_dir / in_name, pair.input_frame.image)
        images.save_png(frames_dir / out_name, pair.target_frame.image)
        rows.append(
            {
                "video_id": inst.video_id,
                "t_start": inst.t_start,
                "t_end": inst.t_end,
                "action_label": inst.action_label,
                "delta_in": pair.delta_in,
                "delta_out": pair.delta_out,
                "input_frame_path": f"frames/{manifest.split}/{in_name}",
                "target_frame_path": f"frames/{manifest.split}/{out_name}",
                "similarity": pair.similarity,
                "prompt": pair.prompt,
                "dataset_tag": inst.dataset_tag,
            }
        )
    path = directory / f"manifest_{manifest.split}.jsonl"
    body = "".join(json.dumps(r) + "\n" for r in rows)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(body, encoding="utf-8")
    tmp.replace(path)
    meta = {"split": manifest.split, "seed": manifest.seed, "source_tags": manifest.source_tags}
    meta_path = directory / f"manifest_{manifest.split}.meta.json"
    meta_tmp = meta_path.with_suffix(".tmp")
    meta_tmp.write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    meta_tmp.replace(meta_path)
    return path


def load_manifest(directory: str | Path, split: str, load_frames: bool = True) -> Manifest:
    directory = Path(directory)
    path = directory / f"manifest_{split}.jsonl"
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise EmptyManifestError(f"{path} is empty")
    meta = json.loads((directory / f"manifest_{split}.meta.json").read_text(encoding="utf-8"))
    entries: list[CuratedPair] = []
    for line in lines:
        row = json.loads(line)
        inst = ActionInstance(
            video_id=row["video_id"],
            action_label=row["action_label"],
            t_start=row["t_start"],
            t_end=row["t_end"],
            dataset_tag=row["dataset_tag"],
        )
        if load_frames:
            in_img = images.load_png(directory / row["input_frame_path"])
            out_img = images.load_png(directory / row["target_frame_path"])
        else:
            in_img = out_img = np.zeros((0, 0, 3), dtype=np.float32)
        entries.append(
            CuratedPair(
                instance=inst,
                input_frame=FrameRecord(time=row["t_start"] - row["delta_in"], image=in_img),
                target_frame=FrameRecord(time=row["t_start"] + row["delta_out"], image=out_img),
                delta_in=row["delta_in"],
                delta_out=row["delta_out"],
                similarity=row["similarity"],
                prompt=row["prompt"],
            )
        )
    return Manifest(split=meta["split"], entries=entries, seed=meta["seed"], source_tags=meta["source_tags"])


def save_rejections(path: str | Path, rejections: Sequence[Rejection]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = "".join(json.dumps({"key": r.key, "reason": r.reason}) + "\n" for r in rejections)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(body, encoding="utf-8")
    tmp.replace(path)


def load_rejections(path: str | Path) -> list[Rejection]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            row = json.loads(line)
            out.append(Rejection(row["key"], row["reason"]))
    return out
