"""Metric report assembly with deterministic serialization."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .. import ioutil

METRIC_KEYS = ("egovlp", "egovlp_plus", "clip", "fid", "psnr", "lpips", "blip_b", "blip_l")


def _round4(value: float) -> float:
    return round(float(value), 4)


@dataclass
class MetricReport:
    metrics: dict[str, float]
    bins: list[dict]
    extractor_fingerprints: dict[str, str]
    n: int
    notes: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.n <= 0:
            raise ValueError("report needs at least one evaluated sample")
        for key in METRIC_KEYS:
            if key not in self.metrics:
                raise ValueError(f"metric {key!r} missing from report")
        for key, value in self.metrics.items():
            if not math.isfinite(value):
                raise ValueError(f"metric {key!r} is not finite: {value}")
        for row in self.bins:
            for key, value in row.items():
                if isinstance(value, float) and not math.isfinite(value):
                    raise ValueError(f"bin entry {key!r} is not finite")


def build_report(
    metrics: dict[str, float],
    bins: list[dict],
    extractor_fingerprints: dict[str, str],
    n: int,
    notes: dict | None = None,
) -> MetricReport:
    report = MetricReport(
        metrics={k: _round4(v) for k, v in sorted(metrics.items())},
        bins=[
            {k: _round4(v) if isinstance(v, float) else v for k, v in sorted(row.items())}
            for row in bins
        ],
        extractor_fingerprints=dict(sorted(extractor_fingerprints.items())),
        n=int(n),
        notes=dict(notes or {}),
    )
    report.validate()
    return report


def report_payload(report: MetricReport) -> dict:
    return {
        "metrics": report.metrics,
        "bins": report.bins,
        "extractor_fingerprints": report.extractor_fingerprints,
        "n": report.n,
        "notes": report.notes,
    }


def render_report(report: MetricReport) -> bytes:
    return (json.dumps(report_payload(report), sort_keys=True, indent=2) + "\n").encode("utf-8")


def save_report(report: MetricReport, path: str | Path) -> Path:
    return ioutil.atomic_write_bytes(path, render_report(report))


def load_report(path: str | Path) -> MetricReport:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    report = MetricReport(
        metrics=payload["metrics"],
        bins=payload["bins"],
        extractor_fingerprints=payload["extractor_fingerprints"],
        n=payload["n"],
        notes=payload.get("notes", {}),
    )
    report.validate()
    return report
