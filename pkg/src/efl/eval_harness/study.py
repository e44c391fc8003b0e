"""Blinded preference-study export and response aggregation."""

from __future__ import annotations

from pathlib import Path

from .. import ioutil, rng
from ..errors import ConfigError


def user_study_export(
    samples: list[dict], models: list[str], n_raters: int, seed: int
) -> tuple[list[dict], dict]:
    """Build blinded rating tasks plus the key that unblinds them.

    Each sample dict needs a unique "key" and an "outputs" map from model
    name to an image path. Slot order is shuffled per sample so raters never
    see a stable model position.
    """
    if len(models) < 2:
        raise ConfigError("a preference study needs at least two models")
    if len(set(models)) != len(models):
        raise ConfigError("duplicate model names")
    if n_raters < 1:
        raise ConfigError("need at least one rater")
    if not samples:
        raise ConfigError("no samples to export")

    tasks = []
    key_map: dict[str, list[str]] = {}
    seen = set()
    for i, sample in enumerate(sorted(samples, key=lambda s: s["key"])):
        sample_key = sample["key"]
        if sample_key in seen:
            raise ConfigError(f"duplicate sample key {sample_key!r}")
        seen.add(sample_key)
        missing = [m for m in models if m not in sample["outputs"]]
        if missing:
            raise ConfigError(f"sample {sample_key!r} lacks outputs for {missing}")
        gen = rng.generator(seed, "study", sample_key)
        order = [models[j] for j in gen.permutation(len(models))]
        task_id = f"task-{i:05d}"
        task = {
            "task_id": task_id,
            "sample": sample_key,
            "slots": [sample["outputs"][m] for m in order],
        }
        if "input" in sample:
            task["input"] = sample["input"]
        tasks.append(task)
        key_map[task_id] = order
    key = {"seed": int(seed), "n_raters": int(n_raters), "tasks": key_map}
    return tasks, key


def write_study_package(tasks: list[dict], key: dict, directory: str | Path) -> dict[str, Path]:
    directory = Path(directory)
    return {
        "tasks": ioutil.write_jsonl(directory / "tasks.jsonl", tasks),
        "key": ioutil.atomic_write_json(directory / "key.json", key),
    }


def aggregate_winrates(responses: list[dict], key: dict) -> dict[str, float]:
    """Fraction of responses picking each model; rates sum to one."""
    if not responses:
        raise ConfigError("no responses to aggregate")
    picks: dict[str, int] = {}
    task_map = key["tasks"]
    for resp in responses:
        task_id = resp["task_id"]
        if task_id not in task_map:
            raise ConfigError(f"response references unknown task {task_id!r}")
        order = task_map[task_id]
        slot = resp["choice"]
        if not 0 <= slot < len(order):
            raise ConfigError(f"choice {slot} out of range for task {task_id!r}")
        model = order[slot]
        picks[model] = picks.get(model, 0) + 1
    total = len(responses)
    rates = {model: 0.0 for order in task_map.values() for model in order}
    for model, count in picks.items():
        rates[model] = count / total
    return rates
