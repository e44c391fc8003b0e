import json

import pytest

from efl.errors import ConfigError
from efl.eval_harness.study import aggregate_winrates, user_study_export, write_study_package

MODELS = ["ours", "baseline"]


def make_samples(n):
    return [
        {
            "key": f"vid{i}:1.000",
            "input": f"frames/vid{i}_in.png",
            "outputs": {m: f"gen/{m}/vid{i}.png" for m in MODELS},
        }
        for i in range(n)
    ]


def test_export_structure_and_blinding_roundtrip():
    tasks, key = user_study_export(make_samples(6), MODELS, n_raters=5, seed=3)
    assert len(tasks) == 6
    assert key["n_raters"] == 5
    for task in tasks:
        order = key["tasks"][task["task_id"]]
        assert sorted(order) == sorted(MODELS)
        # slot paths resolve back to the models the key claims
        for slot, model in enumerate(order):
            assert task["slots"][slot] == f"gen/{model}/{task['sample'].split(':')[0]}.png"


def test_export_shuffles_slots_across_samples():
    tasks, key = user_study_export(make_samples(40), MODELS, n_raters=1, seed=0)
    orders = {tuple(key["tasks"][t["task_id"]]) for t in tasks}
    assert len(orders) == 2


def test_export_deterministic_and_seed_sensitive():
    a = user_study_export(make_samples(8), MODELS, 3, seed=1)
    b = user_study_export(make_samples(8), MODELS, 3, seed=1)
    c = user_study_export(make_samples(8), MODELS, 3, seed=2)
    assert a == b
    assert a != c


def test_export_validation():
    with pytest.raises(ConfigError):
        user_study_export(make_samples(3), ["only"], 1, seed=0)
    with pytest.raises(ConfigError):
        user_study_export(make_samples(3), ["m", "m"], 1, seed=0)
    with pytest.raises(ConfigError):
        user_study_export([], MODELS, 1, seed=0)
    with pytest.raises(ConfigError):
        user_study_export(make_samples(3), MODELS, 0, seed=0)
    bad = make_samples(2)
    del bad[1]["outputs"]["baseline"]
    with pytest.raises(ConfigError):
        user_study_export(bad, MODELS, 1, seed=0)
    dup = make_samples(2)
    dup[1]["key"] = dup[0]["key"]
    with pytest.raises(ConfigError):
        user_study_export(dup, MODELS, 1, seed=0)


def test_write_study_package(tmp_path):
    tasks, key = user_study_export(make_samples(4), MODELS, 2, seed=5)
    paths = write_study_package(tasks, key, tmp_path / "study")
    lines = paths["tasks"].read_text().strip().split("\n")
    assert len(lines) == 4
    assert json.loads(lines[0])["task_id"] == "task-00000"
    loaded = json.loads(paths["key"].read_text())
    assert loaded["tasks"] == key["tasks"]


def slot_of(key, task_id, model):
    return key["tasks"][task_id].index(model)


def test_winrate_arithmetic_132_of_300():
    tasks, key = user_study_export(make_samples(1), MODELS, 300, seed=7)
    tid = tasks[0]["task_id"]
    responses = [{"task_id": tid, "choice": slot_of(key, tid, "ours")} for _ in range(132)]
    responses += [{"task_id": tid, "choice": slot_of(key, tid, "baseline")} for _ in range(168)]
    rates = aggregate_winrates(responses, key)
    assert rates["ours"] == pytest.approx(0.44)
    assert f"{100 * rates['ours']:.1f}%" == "44.0%"
    assert sum(rates.values()) == pytest.approx(1.0)


def test_winrate_single_model_rate_one():
    key = {"tasks": {"task-00000": ["solo"]}}
    responses = [{"task_id": "task-00000", "choice": 0} for _ in range(10)]
    assert aggregate_winrates(responses, key) == {"solo": 1.0}


def test_winrate_unpicked_model_appears_with_zero():
    tasks, key = user_study_export(make_samples(1), MODELS, 4, seed=9)
    tid = tasks[0]["task_id"]
    responses = [{"task_id": tid, "choice": slot_of(key, tid, "ours")} for _ in range(4)]
    rates = aggregate_winrates(responses, key)
    assert rates == {"ours": 1.0, "baseline": 0.0}


def test_winrate_errors():
    tasks, key = user_study_export(make_samples(1), MODELS, 1, seed=0)
    with pytest.raises(ConfigError):
        aggregate_winrates([], key)
    with pytest.raises(ConfigError):
        aggregate_winrates([{"task_id": "task-99999", "choice": 0}], key)
    with pytest.raises(ConfigError):
        aggregate_winrates([{"task_id": tasks[0]["task_id"], "choice": 5}], key)
