"""Procedurally rendered stand-in corpus with ground-truth annotations.

Each instance is one short "video": colored shapes over a drifting sinusoid
background with a hand cursor and continuous camera jitter. The action is a
deterministic scene edit (the hand drags one object along a vector), so the
before/after frames, the object boxes, and the action label are all known
exactly. Edit magnitude is sampled across a wide range so that input/target
similarity straddles the curation band on both sides.

Artifacts: ``instances.jsonl`` (annotations + ground-truth similarity),
``scenes.json`` (renderer parameters), ``frames/<video_id>.npz`` (uint8
frame stacks with timestamps, written with fixed zip metadata so reruns are
byte-identical).
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import rng
from .config import RunConfig
from .dataset_pipeline import (
    ActionInstance,
    Box,
    FeatureExtractor,
    FrameRecord,
    compute_frame_offsets,
    embed_similarity,
    select_best_frame,
)

VERBS = ("move", "slide", "push", "drag", "lift")
SHAPE_NOUNS = {"rect": "block", "disc": "ball", "diamond": "token"}
COLOR_NAMES = (
    ("red", (0.85, 0.15, 0.15)),
    ("green", (0.15, 0.75, 0.2)),
    ("blue", (0.2, 0.3, 0.9)),
    ("yellow", (0.9, 0.85, 0.15)),
    ("purple", (0.6, 0.2, 0.8)),
    ("orange", (0.95, 0.55, 0.1)),
)
HAND_COLOR = (0.87, 0.68, 0.52)


@dataclass
class SceneObject:
    kind: str            # rect | disc | diamond
    color_name: str
    color: tuple[float, float, float]
    x: float
    y: float
    size: float


@dataclass
class SceneSpec:
    video_id: str
    dataset_tag: str
    t_start: float
    t_end: float
    t_pre: float | None
    t_pnr: float | None
    objects: list[SceneObject]
    acted_index: int
    verb: str
    move_dx: float
    move_dy: float
    change_scale: float
    bg_freq_x: float
    bg_freq_y: float
    bg_phase: tuple[float, float, float]
    bg_drift: float
    jitter_amp: float
    jitter_fx: float
    jitter_fy: float
    jitter_phase: float

    @property
    def action_label(self) -> str:
        obj = self.objects[self.acted_index]
        return f"{self.verb} {obj.color_name} {SHAPE_NOUNS[obj.kind]}"


@dataclass
class SyntheticCorpusSpec:
    n_instances: int
    resolution: int
    frame_step: float
    seed: int
    ego4d_fraction: float


def corpus_spec_from_config(config: RunConfig) -> SyntheticCorpusSpec:
    return SyntheticCorpusSpec(
        n_instances=config.n_instances,
        resolution=config.resolution,
        frame_step=config.frame_step,
        seed=config.seed,
        ego4d_fraction=config.ego4d_fraction,
    )


def _smoothstep(s: np.ndarray | float) -> np.ndarray | float:
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def _object_center(scene: SceneSpec, index: int, t: float) -> tuple[float, float]:
    obj = scene.objects[index]
    if index != scene.acted_index:
        return obj.x, obj.y
    span = scene.t_end - scene.t_start
    eased = float(_smoothstep((t - scene.t_start) / span))
    return obj.x + eased * scene.move_dx, obj.y + eased * scene.move_dy


def _camera_offset(scene: SceneSpec, t: float) -> tuple[float, float, float]:
    """(dx, dy, speed) of the continuous camera jitter at time t."""
    wx = 2.0 * np.pi * scene.jitter_fx
    wy = 2.0 * np.pi * scene.jitter_fy
    dx = scene.jitter_amp * np.sin(wx * t + scene.jitter_phase)
    dy = scene.jitter_amp * np.cos(wy * t + 0.7 * scene.jitter_phase)
    vx = scene.jitter_amp * wx * np.cos(wx * t + scene.jitter_phase)
    vy = -scene.jitter_amp * wy * np.sin(wy * t + 0.7 * scene.jitter_phase)
    return float(dx), float(dy), float(np.hypot(vx, vy))


def _shape_mask(kind: str, xs: np.ndarray, ys: np.ndarray, cx: float, cy: float, size: float) -> np.ndarray:
    if kind == "rect":
        return (np.abs(xs - cx) < size) & (np.abs(ys - cy) < 0.8 * size)
    if kind == "disc":
        return (xs - cx) ** 2 + (ys - cy) ** 2 < size**2
    if kind == "diamond":
        return np.abs(xs - cx) + np.abs(ys - cy) < 1.2 * size
    raise ValueError(f"unknown shape kind {kind!r}")


def render_frame(scene: SceneSpec, t: float, resolution: int) -> np.ndarray:
    """Render one HxWx3 float32 frame in [0,1] at time t."""
    coords = (np.arange(resolution, dtype=np.float64) + 0.5) / resolution
    xs, ys = np.meshgrid(coords, coords)
    cam_x, cam_y, cam_speed = _camera_offset(scene, t)
    gx = xs + cam_x
    gy = ys + cam_y

    img = np.empty((resolution, resolution, 3), dtype=np.float64)
    arg = 2.0 * np.pi * (scene.bg_freq_x * gx + scene.bg_freq_y * gy) + scene.bg_drift * t
    for ch in range(3):
        img[:, :, ch] = 0.55 + 0.18 * np.sin(arg + scene.bg_phase[ch])

    for i, obj in enumerate(scene.objects):
        cx, cy = _object_center(scene, i, t)
        mask = _shape_mask(obj.kind, gx, gy, cx, cy, obj.size)
        for ch in range(3):
            img[:, :, ch][mask] = obj.color[ch]

    hand_cx, hand_cy = _object_center(scene, scene.acted_index, t)
    hand_mask = _shape_mask("disc", gx, gy, hand_cx + 0.07, hand_cy + 0.09, 0.035)
    for ch in range(3):
        img[:, :, ch][hand_mask] = HAND_COLOR[ch]

    blur_w = float(np.clip(cam_speed * 6.0, 0.0, 0.75))
    if blur_w > 0.0:
        blurred = img.copy()
        for axis in (0, 1):
            blurred = (np.roll(blurred, 1, axis=axis) + blurred + np.roll(blurred, -1, axis=axis)) / 3.0
        img = (1.0 - blur_w) * img + blur_w * blurred
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _object_box(obj: SceneObject, cx: float, cy: float) -> Box:
    half_x = obj.size if obj.kind != "diamond" else 1.2 * obj.size
    half_y = 0.8 * obj.size if obj.kind == "rect" else half_x
    name = f"{obj.color_name} {SHAPE_NOUNS[obj.kind]}"
    return Box(
        name=name,
        x0=float(np.clip(cx - half_x, 0.0, 1.0)),
        y0=float(np.clip(cy - half_y, 0.0, 1.0)),
        x1=float(np.clip(cx + half_x, 0.0, 1.0)),
        y1=float(np.clip(cy + half_y, 0.0, 1.0)),
    )


def generate_scene(spec: SyntheticCorpusSpec, index: int) -> SceneSpec:
    gen = rng.generator(spec.seed, "scene", index)
    video_id = f"vid{index:04d}"
    ego4d = index < round(spec.ego4d_fraction * spec.n_instances)

    t_start = float(gen.uniform(4.0, 6.0))
    duration = float(gen.uniform(1.5, 3.0)) if ego4d else float(gen.uniform(0.9, 2.4))
    t_end = t_start + duration
    if ego4d:
        tag = "ego4d_style"
        t_pre = t_start - float(gen.uniform(0.3, 1.2))
        t_pnr = t_start + float(gen.uniform(0.3, min(1.2, duration - 0.1)))
    else:
        tag = "ek_style"
        t_pre = None
        t_pnr = None

    n_objects = int(gen.integers(2, 4))
    kinds = list(SHAPE_NOUNS)
    color_order = gen.permutation(len(COLOR_NAMES))
    objects = []
    for j in range(n_objects):
        color_name, color = COLOR_NAMES[int(color_order[j])]
        objects.append(
            SceneObject(
                kind=kinds[int(gen.integers(len(kinds)))],
                color_name=color_name,
                color=tuple(float(c) for c in color),
                x=float(gen.uniform(0.2, 0.8)),
                y=float(gen.uniform(0.2, 0.8)),
                size=float(gen.uniform(0.06, 0.11)),
            )
        )

    # Edit magnitude: a mixture concentrated where pairs land inside the
    # similarity band, plus deliberate tails on both sides so the curation
    # filter always has work to do. Camera jitter and background drift scale
    # with it: calm scenes for tiny edits, busy scenes for large ones.
    bucket = float(gen.random())
    if bucket < 0.2:
        log_cs = float(gen.uniform(-2.2, -1.1))
    elif bucket < 0.8:
        log_cs = float(gen.uniform(-1.1, -0.35))
    else:
        log_cs = float(gen.uniform(-0.1, 0.4))
    change_scale = float(10.0**log_cs)
    angle = float(gen.uniform(0.0, 2.0 * np.pi))
    move_len = 0.38 * change_scale

    return SceneSpec(
        video_id=video_id,
        dataset_tag=tag,
        t_start=t_start,
        t_end=t_end,
        t_pre=t_pre,
        t_pnr=t_pnr,
        objects=objects,
        acted_index=int(gen.integers(n_objects)),
        verb=VERBS[int(gen.integers(len(VERBS)))],
        move_dx=move_len * float(np.cos(angle)),
        move_dy=move_len * float(np.sin(angle)),
        change_scale=change_scale,
        bg_freq_x=float(gen.uniform(1.0, 3.0)),
        bg_freq_y=float(gen.uniform(1.0, 3.0)),
        bg_phase=tuple(float(p) for p in gen.uniform(0.0, 2.0 * np.pi, size=3)),
        bg_drift=float(gen.uniform(1.5, 3.0)) * change_scale,
        jitter_amp=float(gen.uniform(0.001, 0.004)) + float(gen.uniform(0.002, 0.01)) * change_scale,
        jitter_fx=float(gen.uniform(0.3, 1.1)),
        jitter_fy=float(gen.uniform(0.3, 1.1)),
        jitter_phase=float(gen.uniform(0.0, 2.0 * np.pi)),
    )


def scene_instance(scene: SceneSpec) -> ActionInstance:
    boxes = []
    for i, obj in enumerate(scene.objects):
        cx, cy = _object_center(scene, i, scene.t_start)
        boxes.append(_object_box(obj, cx, cy))
    return ActionInstance(
        video_id=scene.video_id,
        action_label=scene.action_label,
        t_start=scene.t_start,
        t_end=scene.t_end,
        dataset_tag=scene.dataset_tag,
        t_pre=scene.t_pre,
        t_pnr=scene.t_pnr,
        boxes=boxes,
    )


def video_times(scene: SceneSpec, frame_step: float) -> np.ndarray:
    lo = scene.t_start - 2.0
    hi = scene.t_end + 1.0
    n = int(np.floor((hi - lo) / frame_step)) + 1
    return lo + frame_step * np.arange(n)


def render_video(scene: SceneSpec, resolution: int, frame_step: float) -> tuple[np.ndarray, np.ndarray]:
    """Returns (times float64 [T], frames uint8 [T,H,W,3])."""
    times = video_times(scene, frame_step)
    frames = np.stack(
        [np.round(render_frame(scene, float(t), resolution) * 255.0).astype(np.uint8) for t in times]
    )
    return times, frames


def _write_npz_deterministic(path: Path, arrays: dict[str, np.ndarray]) -> None:
    """np.savez with fixed zip timestamps so reruns are byte-identical."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED, compresslevel=6) as zf:
        for name in sorted(arrays):
            payload = io.BytesIO()
            np.lib.format.write_array(payload, np.asarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, payload.getvalue())
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def generate_corpus(
    config: RunConfig,
    out_dir: str | Path,
    extractor: FeatureExtractor | None = None,
) -> list[ActionInstance]:
    """Render the corpus and write instances.jsonl, scenes.json, frames/*.npz.

    Ground-truth similarity per instance is recorded by running the same
    frame-selection and scoring the curation stage will use.
    """
    if extractor is None:
        from .eval_harness.extractors import PerceptualExtractor

        extractor = PerceptualExtractor(seed=config.seed)
    spec = corpus_spec_from_config(config)
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)

    instances: list[ActionInstance] = []
    scene_dicts = []
    rows = []
    for index in range(spec.n_instances):
        scene = generate_scene(spec, index)
        inst = scene_instance(scene)
        inst.validate()
        times, frames = render_video(scene, spec.resolution, spec.frame_step)
        _write_npz_deterministic(frames_dir / f"{scene.video_id}.npz", {"times": times, "frames": frames})

        source = _ArrayWindow(times, frames)
        similarity = ground_truth_similarity(inst, source, config, extractor)

        instances.append(inst)
        scene_dicts.append(asdict(scene))
        rows.append(
            {
                "video_id": inst.video_id,
                "action_label": inst.action_label,
                "t_start": inst.t_start,
                "t_end": inst.t_end,
                "t_pre": inst.t_pre,
                "t_pnr": inst.t_pnr,
                "dataset_tag": inst.dataset_tag,
                "boxes": [[b.name] + b.as_list() for b in inst.boxes],
                "similarity": similarity,
            }
        )

    inst_path = out_dir / "instances.jsonl"
    tmp = inst_path.with_suffix(".tmp")
    tmp.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    tmp.replace(inst_path)

    scenes_path = out_dir / "scenes.json"
    tmp = scenes_path.with_suffix(".tmp")
    tmp.write_text(json.dumps(scene_dicts, indent=1) + "\n", encoding="utf-8")
    tmp.replace(scenes_path)
    return instances


class _ArrayWindow:
    """FramesSource over one in-memory (times, frames) pair."""

    def __init__(self, times: np.ndarray, frames: np.ndarray):
        self.times = times
        self.frames = frames

    def window(self, video_id: str, center_time: float, radius: int) -> tuple[list[FrameRecord], int]:
        center = int(np.argmin(np.abs(self.times - center_time)))
        lo = max(0, center - radius)
        hi = min(len(self.times) - 1, center + radius)
        records = [
            FrameRecord(time=float(self.times[i]), image=self.frames[i].astype(np.float32) / 255.0)
            for i in range(lo, hi + 1)
        ]
        return records, center - lo


def ground_truth_similarity(
    inst: ActionInstance,
    source,
    config: RunConfig,
    extractor: FeatureExtractor,
) -> float:
    delta_in, delta_out = compute_frame_offsets(inst, config.lambda_frac, config.default_delta_in)
    in_frames, in_center = source.window(inst.video_id, inst.t_start - delta_in, config.aesthetic_radius)
    out_frames, out_center = source.window(inst.video_id, inst.t_start + delta_out, config.aesthetic_radius)
    input_frame = select_best_frame(in_frames, in_center, config.aesthetic_radius)
    target_frame = select_best_frame(out_frames, out_center, config.aesthetic_radius)
    return embed_similarity(input_frame, target_frame, extractor)


def load_instances(corpus_dir: str | Path) -> tuple[list[ActionInstance], dict[str, float]]:
    """Read instances.jsonl; returns (instances, ground-truth similarity by key)."""
    rows = [
        json.loads(line)
        for line in (Path(corpus_dir) / "instances.jsonl").read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    instances = []
    similarities = {}
    for row in rows:
        inst = ActionInstance(
            video_id=row["video_id"],
            action_label=row["action_label"],
            t_start=row["t_start"],
            t_end=row["t_end"],
            dataset_tag=row["dataset_tag"],
            t_pre=row["t_pre"],
            t_pnr=row["t_pnr"],
            boxes=[Box(b[0], b[1], b[2], b[3], b[4]) for b in row["boxes"]],
        )
        instances.append(inst)
        similarities[inst.key] = row["similarity"]
    return instances, similarities


class NpzFramesSource:
    """FramesSource reading the per-video npz stacks written by generate_corpus."""

    def __init__(self, corpus_dir: str | Path, cache_size: int = 16):
        self.frames_dir = Path(corpus_dir) / "frames"

        @lru_cache(maxsize=cache_size)
        def _load(video_id: str) -> tuple[np.ndarray, np.ndarray]:
            with np.load(self.frames_dir / f"{video_id}.npz") as data:
                return data["times"].copy(), data["frames"].copy()

        self._load = _load

    def window(self, video_id: str, center_time: float, radius: int) -> tuple[list[FrameRecord], int]:
        times, frames = self._load(video_id)
        return _ArrayWindow(times, frames).window(video_id, center_time, radius)
