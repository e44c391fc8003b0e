"""Action-description enrichment via in-context prompting of an LLM backend.

A terse action label plus its object boxes goes into a prompt that carries a
dozen hand-written worked examples, and the backend answers with one detailed
sentence describing hands, objects, and motion. Backends are pluggable: a
deterministic template expander (default, hermetic), a recorded fixture file,
or a real HTTP endpoint. Results land in an append-only JSONL cache keyed by
a stable content hash, and concurrent requests for the same key coalesce
onto a single backend call.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import requests

from .dataset_pipeline import Box
from .errors import CompletionValidationError, ConfigError, TransportError

TEMPLATE_VERSION = "v1"

SYSTEM_TEXT = (
    "You describe everyday actions seen from a head-mounted camera. "
    "Given an action label and the visible objects with their bounding boxes, "
    "write one detailed sentence saying how the hands interact with the "
    "objects to perform the action. Follow the style of the examples."
)


@dataclass(frozen=True)
class InContextExample:
    action_label: str
    boxes: str                  # serialized with serialize_boxes
    detailed_description: str


@dataclass
class CurationPrompt:
    system_text: str
    examples: list[InContextExample]
    query_label: str
    query_boxes: str

    def validate(self) -> None:
        if not self.examples:
            raise ConfigError("curation prompt needs at least one in-context example")
        if not self.query_label:
            raise ConfigError("curation prompt query label is empty")
        for ex in self.examples:
            if not ex.detailed_description:
                raise ConfigError(f"example {ex.action_label!r} has an empty description")


@dataclass(frozen=True)
class EnrichedDescription:
    text: str
    source: str                 # curation_llm | tuned_vllm
    cache_key: str


def serialize_boxes(boxes: list[Box]) -> str:
    """Canonical 'name: [x0, y0, x1, y1]' lines, 2 decimals, order preserved."""
    return "\n".join(
        f"{b.name}: [{b.x0:.2f}, {b.y0:.2f}, {b.x1:.2f}, {b.y1:.2f}]" for b in boxes
    )


def parse_boxes(text: str) -> list[Box]:
    boxes = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        name, _, rest = line.partition(":")
        rest = rest.strip()
        if not (name and rest.startswith("[") and rest.endswith("]")):
            raise ValueError(f"unparseable box line {line!r}")
        coords = [float(v) for v in rest[1:-1].split(",")]
        if len(coords) != 4:
            raise ValueError(f"expected 4 coords in {line!r}")
        boxes.append(Box(name.strip(), *coords))
    return boxes


def cache_key(action_label: str, boxes: str, template_version: str = TEMPLATE_VERSION) -> str:
    payload = json.dumps(
        {"label": action_label, "boxes": boxes, "template": template_version},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def assemble_curation_prompt(prompt: CurationPrompt) -> str:
    """System block, worked examples, then the query with an empty answer slot."""
    prompt.validate()
    parts = [prompt.system_text.strip(), ""]
    for ex in prompt.examples:
        parts += [
            f"Action: {ex.action_label}",
            f"Objects:\n{ex.boxes}" if ex.boxes else "Objects: none",
            f"Description: {ex.detailed_description}",
            "",
        ]
    parts += [
        f"Action: {prompt.query_label}",
        f"Objects:\n{prompt.query_boxes}" if prompt.query_boxes else "Objects: none",
        "Description:",
    ]
    return "\n".join(parts)


# -- backends -------------------------------------------------------------

class Backend(Protocol):
    backend_id: str

    def complete(self, prompt: str) -> str: ...


class TemplateBackend:
    """Deterministic stand-in: expands the query into a stock description.

    Reads the last 'Action:' block of the prompt, names the first two objects,
    and fills a fixed sentence frame. Keeps the whole pipeline runnable with
    no network and no recorded data.
    """

    backend_id = "template"

    def complete(self, prompt: str) -> str:
        label, boxes = _parse_query(prompt)
        names = [b.name for b in parse_boxes(boxes)] if boxes else []
        verb = label.split()[0] if label.split() else "perform"
        rest = " ".join(label.split()[1:]) or "the object"
        if names:
            scene = f"while the {names[0]} stays in view"
            if len(names) > 1:
                scene = f"moving it toward the {names[1]}"
            return (
                f"The camera wearer reaches out with the right hand, grips the {rest} "
                f"firmly, and starts to {verb} it {scene}."
            )
        return (
            f"The camera wearer uses the right hand to {verb} {rest} with a steady, "
            f"deliberate motion."
        )


def _parse_query(prompt: str) -> tuple[str, str]:
    """Last action block of an assembled prompt -> (label, serialized boxes)."""
    lines = prompt.splitlines()
    action_idx = [i for i, ln in enumerate(lines) if ln.startswith("Action: ")]
    if not action_idx:
        raise ValueError("prompt has no action block")
    i = action_idx[-1]
    label = lines[i][len("Action: "):]
    boxes_lines: list[str] = []
    j = i + 1
    if j < len(lines) and lines[j].startswith("Objects"):
        j += 1
        while j < len(lines) and lines[j].strip() and not lines[j].startswith("Description:"):
            boxes_lines.append(lines[j])
            j += 1
    return label, "\n".join(boxes_lines)


class FixtureBackend:
    """Replays completions recorded in a JSON file keyed by cache_key."""

    backend_id = "fixture"

    def __init__(self, path: str | Path):
        self.path = Path(path)
        try:
            self.responses: dict[str, str] = json.loads(self.path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"fixture file not found: {self.path}") from exc

    def complete(self, prompt: str) -> str:
        label, boxes = _parse_query(prompt)
        key = cache_key(label, boxes)
        if key not in self.responses:
            raise TransportError(f"fixture has no recorded completion for {label!r} ({key[:12]})")
        return self.responses[key]


def record_fixture(path: str | Path, entries: dict[str, str]) -> None:
    """Write a fixture file mapping cache_key -> completion text."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(entries, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


class RemoteBackend:
    """Minimal JSON-over-HTTP completion client.

    POSTs {prompt, temperature, max_tokens} and expects {"text": ...} back.
    The bearer token comes from the EFL_API_TOKEN environment variable.
    """

    backend_id = "remote"

    def __init__(self, endpoint: str, temperature: float = 0.2, max_tokens: int = 160, timeout: float = 30.0):
        self.endpoint = endpoint
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.timeout = timeout

    def complete(self, prompt: str) -> str:
        headers = {}
        token = os.environ.get("EFL_API_TOKEN")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = requests.post(
                self.endpoint,
                json={"prompt": prompt, "temperature": self.temperature, "max_tokens": self.max_tokens},
                headers=headers,
                timeout=self.timeout,
            )
            resp.raise_for_status()
            return resp.json()["text"]
        except (requests.RequestException, KeyError, ValueError) as exc:
            raise TransportError(f"enrichment backend call failed: {exc}") from exc


def make_backend(spec: str, temperature: float = 0.2, max_tokens: int = 160) -> Backend:
    """Backend from a config string: 'template', 'fixture:<path>', 'remote:<url>'."""
    if spec == "template":
        return TemplateBackend()
    kind, _, arg = spec.partition(":")
    if kind == "fixture" and arg:
        return FixtureBackend(arg)
    if kind == "remote" and arg:
        return RemoteBackend(arg, temperature=temperature, max_tokens=max_tokens)
    raise ConfigError(f"unknown enrichment backend {spec!r}")


# -- cache ----------------------------------------------------------------

class DescriptionCache:
    """Append-only JSONL store; newest record per cache_key wins."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, dict] = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    row = json.loads(line)
                    self._entries[row["cache_key"]] = row

    def get(self, key: str) -> dict | None:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, label: str, boxes: str, text: str, backend_id: str) -> None:
        row = {
            "cache_key": key,
            "label": label,
            "boxes": boxes,
            "text": text,
            "backend_id": backend_id,
            "timestamp": time.time(),
        }
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")
            self._entries[key] = row

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


@dataclass
class Enricher:
    """Caching front end over a completion backend."""

    backend: Backend
    cache: DescriptionCache
    examples: list[InContextExample]
    system_text: str = SYSTEM_TEXT
    max_words: int = 128
    backend_calls: int = 0
    _inflight: dict[str, threading.Lock] = field(default_factory=dict)
    _guard: threading.Lock = field(default_factory=threading.Lock)

    def enrich(self, action_label: str, boxes: list[Box]) -> EnrichedDescription:
        serialized = serialize_boxes(boxes)
        key = cache_key(action_label, serialized)
        cached = self.cache.get(key)
        if cached is not None:
            return EnrichedDescription(text=cached["text"], source="curation_llm", cache_key=key)

        with self._guard:
            lock = self._inflight.setdefault(key, threading.Lock())
        with lock:
            cached = self.cache.get(key)
            if cached is not None:
                return EnrichedDescription(text=cached["text"], source="curation_llm", cache_key=key)
            prompt = assemble_curation_prompt(
                CurationPrompt(
                    system_text=self.system_text,
                    examples=self.examples,
                    query_label=action_label,
                    query_boxes=serialized,
                )
            )
            self.backend_calls += 1
            text = self.backend.complete(prompt).strip()
            self._validate(text)
            self.cache.put(key, action_label, serialized, text, self.backend.backend_id)
            return EnrichedDescription(text=text, source="curation_llm", cache_key=key)

    def _validate(self, text: str) -> None:
        if not text:
            raise CompletionValidationError("backend returned an empty description")
        words = len(text.split())
        if words > self.max_words:
            raise CompletionValidationError(
                f"description has {words} words, exceeds cap of {self.max_words}"
            )


# -- authored in-context examples -----------------------------------------

def _ex(label: str, boxes: list[tuple[str, float, float, float, float]], text: str) -> InContextExample:
    return InContextExample(
        action_label=label,
        boxes=serialize_boxes([Box(n, a, b, c, d) for n, a, b, c, d in boxes]),
        detailed_description=text,
    )


EGO4D_STYLE_EXAMPLES = [
    _ex("move red block",
        [("red block", 0.42, 0.55, 0.58, 0.68), ("left hand", 0.10, 0.60, 0.28, 0.92)],
        "The camera wearer slides the red block across the table with the right hand "
        "while the left hand rests near the table edge."),
    _ex("lift green ball",
        [("green ball", 0.45, 0.40, 0.55, 0.52)],
        "The camera wearer closes the right hand around the green ball and lifts it "
        "straight up from the surface."),
    _ex("push blue token",
        [("blue token", 0.30, 0.30, 0.44, 0.46), ("yellow block", 0.60, 0.62, 0.78, 0.74)],
        "The camera wearer extends the index finger and pushes the blue token toward "
        "the yellow block on the far side of the desk."),
    _ex("drag purple block",
        [("purple block", 0.52, 0.48, 0.70, 0.62)],
        "The camera wearer presses two fingertips on the purple block and drags it "
        "slowly toward the body."),
    _ex("slide orange ball",
        [("orange ball", 0.20, 0.20, 0.32, 0.34), ("right hand", 0.55, 0.55, 0.85, 0.95)],
        "The camera wearer flicks the orange ball with the right hand so it slides "
        "across the mat and away from the clutter."),
    _ex("move yellow token",
        [("yellow token", 0.61, 0.33, 0.75, 0.47)],
        "The camera wearer pinches the yellow token between thumb and forefinger and "
        "moves it to a clear spot nearby."),
    _ex("lift red ball",
        [("red ball", 0.38, 0.58, 0.50, 0.72), ("green block", 0.12, 0.18, 0.30, 0.32)],
        "The camera wearer scoops up the red ball with an open palm, raising it above "
        "the green block without touching it."),
    _ex("push green block",
        [("green block", 0.44, 0.44, 0.60, 0.58)],
        "The camera wearer plants the heel of the hand against the green block and "
        "pushes it forward in one steady motion."),
    _ex("drag blue ball",
        [("blue ball", 0.25, 0.64, 0.39, 0.80)],
        "The camera wearer traps the blue ball under curled fingers and drags it along "
        "the surface toward the left."),
    _ex("slide purple token",
        [("purple token", 0.70, 0.70, 0.84, 0.86), ("red block", 0.15, 0.40, 0.33, 0.54)],
        "The camera wearer slides the purple token diagonally with the fingertips, "
        "steering it around the red block."),
    _ex("move orange block",
        [("orange block", 0.33, 0.25, 0.51, 0.39)],
        "The camera wearer grips the orange block from above and moves it a short "
        "distance to line it up with the others."),
    _ex("lift yellow ball",
        [("yellow ball", 0.48, 0.48, 0.60, 0.62)],
        "The camera wearer cups the yellow ball in the right hand and lifts it off "
        "the desk in a smooth arc."),
]

EK_STYLE_EXAMPLES = [
    _ex("push red token",
        [("red token", 0.26, 0.36, 0.40, 0.50)],
        "The camera wearer nudges the red token forward with a knuckle, keeping the "
        "wrist low over the counter."),
    _ex("slide green token",
        [("green token", 0.58, 0.22, 0.72, 0.36), ("blue ball", 0.18, 0.66, 0.32, 0.80)],
        "The camera wearer slides the green token sideways with one finger while the "
        "blue ball sits untouched near the edge."),
    _ex("drag yellow block",
        [("yellow block", 0.40, 0.60, 0.58, 0.74)],
        "The camera wearer hooks two fingers behind the yellow block and drags it "
        "closer across the worktop."),
    _ex("move blue ball",
        [("blue ball", 0.50, 0.30, 0.62, 0.42)],
        "The camera wearer rolls the blue ball gently with the palm, moving it toward "
        "the middle of the counter."),
    _ex("lift purple token",
        [("purple token", 0.66, 0.52, 0.80, 0.66)],
        "The camera wearer peels the purple token off the surface with the fingertips "
        "and lifts it chest high."),
    _ex("push orange ball",
        [("orange ball", 0.12, 0.12, 0.26, 0.26), ("left hand", 0.05, 0.55, 0.25, 0.95)],
        "The camera wearer gives the orange ball a short push with the right hand as "
        "the left hand steadies the board."),
    _ex("move green block",
        [("green block", 0.35, 0.35, 0.50, 0.49)],
        "The camera wearer walks the green block across the counter with alternating "
        "fingertip presses."),
    _ex("slide red ball",
        [("red ball", 0.55, 0.66, 0.69, 0.80)],
        "The camera wearer sweeps the red ball along the surface with the side of the "
        "hand until it reaches the corner."),
    _ex("drag orange token",
        [("orange token", 0.21, 0.47, 0.35, 0.61)],
        "The camera wearer drags the orange token in a straight line with one finger, "
        "leaving the rest of the pieces in place."),
    _ex("lift blue block",
        [("blue block", 0.47, 0.18, 0.63, 0.32)],
        "The camera wearer squeezes the blue block between thumb and two fingers and "
        "lifts it clear of the table."),
    _ex("push purple ball",
        [("purple ball", 0.62, 0.44, 0.74, 0.56), ("yellow token", 0.28, 0.28, 0.42, 0.42)],
        "The camera wearer pushes the purple ball away with a flat palm so it stops "
        "beside the yellow token."),
    _ex("move yellow ball",
        [("yellow ball", 0.44, 0.57, 0.56, 0.69)],
        "The camera wearer taps the yellow ball repeatedly with the fingertips, moving "
        "it bit by bit toward the front edge."),
]


def default_examples(dataset_tag: str) -> list[InContextExample]:
    if dataset_tag == "ego4d_style":
        return list(EGO4D_STYLE_EXAMPLES)
    if dataset_tag == "ek_style":
        return list(EK_STYLE_EXAMPLES)
    raise ConfigError(f"no in-context examples for dataset_tag {dataset_tag!r}")
