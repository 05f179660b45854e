"""CSV loss/metric logs and the reproducibility manifest."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

from .loop import PhaseResult

LOSS_COLS = ("l_u", "l_v", "l_task", "l_total")


def _f(x) -> str:
    return repr(float(x))


def write_metrics_csv(path, result: PhaseResult) -> Path:
    """One row per (split, epoch); test metrics filled on each split's final epoch."""
    metric_keys = list(result.results[0].report.as_dict()) if result.results else []
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "epoch", "lr", *LOSS_COLS, *metric_keys])
        for r in result.results:
            last = len(r.history)
            for e in r.history:
                vals = [_f(v) for v in r.report.as_dict().values()] if e.epoch == last else [""] * len(metric_keys)
                w.writerow([r.split.name, e.epoch, _f(e.lr), *(_f(getattr(e, c)) for c in LOSS_COLS), *vals])
    return path


def write_steps_csv(path, result: PhaseResult) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "step", *LOSS_COLS])
        for r in result.results:
            for step, *losses in r.steps:
                w.writerow([r.split.name, step, *(_f(v) for v in losses)])
    return path


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, config: dict, seed: int, checkpoints=(), summary: dict | None = None,
                   extra: dict | None = None) -> Path:
    """Config snapshot, seed, checkpoint hashes and metric summary as JSON."""
    doc = {
        "config": config,
        "seed": seed,
        "checkpoints": {Path(p).name: file_sha256(p) for p in checkpoints},
        "summary": summary or {},
    }
    doc.update(extra or {})
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path
