import re

import pytest

from efl.config import RunConfig


@pytest.fixture()
def desk_config(tmp_path):
    cfg = RunConfig(workspace=str(tmp_path / "ws"))
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """A small rendered corpus shared by read-only tests."""
    from efl import synthetic

    out = tmp_path_factory.mktemp("corpus")
    cfg = RunConfig(n_instances=40, workspace=str(out / "ws"))
    synthetic.generate_corpus(cfg, out)
    return out


@pytest.fixture(scope="session")
def corpus_config():
    return RunConfig(n_instances=40)


_CRITERION = re.compile(r"test_criterion_(\d+)_?(\w*)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = {}
    for outcome, label in (("passed", "PASS"), ("failed", "FAIL"), ("error", "ERROR")):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if getattr(rep, "when", "call") not in ("call", "setup"):
                continue
            m = _CRITERION.search(nodeid)
            if m:
                rows[int(m.group(1))] = (m.group(2) or "criterion", label)
    for rep in terminalreporter.stats.get("skipped", []):
        m = _CRITERION.search(getattr(rep, "nodeid", ""))
        if m and int(m.group(1)) not in rows:
            rows[int(m.group(1))] = (m.group(2) or "criterion", "SKIP")
    if rows:
        terminalreporter.write_sep("-", "acceptance criteria")
        for num in sorted(rows):
            name, label = rows[num]
            terminalreporter.write_line(f"criterion {num:2d} {name:<28s} {label}")
