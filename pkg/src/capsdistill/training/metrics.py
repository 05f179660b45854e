from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class MetricReport:
    task: str
    n: int
    accuracy: float | None = None
    rmse: float | None = None
    pcc: float | None = None
    pcc_undefined: bool = False

    @property
    def score(self) -> float:
        """Higher is better: accuracy, or negative RMSE for regression."""
        return self.accuracy if self.task == "classification" else -self.rmse

    def as_dict(self) -> dict:
        if self.task == "classification":
            return {"accuracy": self.accuracy}
        return {"rmse": self.rmse, "pcc": self.pcc}


def pearson(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den == 0:
        return 0.0, True
    return float(np.clip((a * b).sum() / den, -1.0, 1.0)), False


def metrics(preds, labels, task: str) -> MetricReport:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"predictions {preds.shape} and labels {labels.shape} differ")
    if task == "classification":
        return MetricReport(task, len(labels), accuracy=float(np.mean(preds == labels)))
    rmse = float(np.sqrt(np.mean((preds.astype(float) - labels) ** 2)))
    pcc, undefined = pearson(preds, labels)
    if undefined:
        log.warning("PCC undefined for constant predictions or labels; reported as 0")
    return MetricReport(task, len(labels), rmse=rmse, pcc=pcc, pcc_undefined=undefined)


def summarize(reports: list[MetricReport]) -> dict[str, tuple[float, float]]:
    """Mean and population SD of each metric across folds or subjects."""
    if not reports:
        return {}
    out = {}
    for key in reports[0].as_dict():
        vals = np.array([r.as_dict()[key] for r in reports], dtype=np.float64)
        out[key] = (float(vals.mean()), float(vals.std()))
    return out
