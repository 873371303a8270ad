"""Evaluation metrics and the comparison table."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import LengthMismatch, ShapeError

CLIP = 1e-7
COLUMNS = ("bce", "auroc", "iou")


def bce(target, pred, clip: float = CLIP) -> float:
    """Pixel-mean negated binary cross-entropy with ``pred`` clipped to [clip, 1-clip]."""
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeError(f"bce shapes differ: {t.shape} vs {p.shape}")
    p = np.clip(p, clip, 1.0 - clip)
    return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p)))


def auroc_detail(targets, scores) -> tuple[float, bool]:
    """Mann-Whitney AUROC with average ranks for ties, plus a degenerate-labels flag.

    With no positives or no negatives the statistic is undefined; 0.5 is
    returned and the flag is set.
    """
    t = np.ravel(np.asarray(targets))
    s = np.ravel(np.asarray(scores, dtype=np.float64))
    if t.shape != s.shape:
        raise LengthMismatch(f"{t.size} targets vs {s.size} scores")
    pos = t == 1
    n_pos = int(pos.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5, True
    ranks = rankdata(s, method="average")
    r_pos = ranks[pos].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)), False


def auroc(targets, scores) -> float:
    return auroc_detail(targets, scores)[0]


def iou(target, pred, threshold: float = 0.5) -> float:
    """Intersection over union of ``target == 1`` and ``pred > threshold``; 1.0 if both are empty."""
    t = np.asarray(target)
    p = np.asarray(pred)
    if t.shape != p.shape:
        raise ShapeError(f"iou shapes differ: {t.shape} vs {p.shape}")
    a, b = t == 1, p > threshold
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def horizon_scores(targets: np.ndarray, preds: np.ndarray) -> dict[str, float]:
    """All three metrics over a pooled stack of weeks for one (agent, horizon)."""
    return {"bce": bce(targets, preds), "auroc": auroc(targets, preds), "iou": iou(targets, preds)}


# ---------------------------------------------------------------- table
@dataclass
class MetricTable:
    """Rows keyed by (method, agent, horizon) with bce/auroc/iou columns."""

    rows: list[dict] = field(default_factory=list)

    def add(self, method: str, agent: int, horizon: int, bce: float, auroc: float, iou: float) -> None:
        self.rows.append({"method": method, "agent": agent, "horizon": horizon,
                          "bce": float(bce), "auroc": float(auroc), "iou": float(iou)})

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def average(self, method: str, horizon: int | None = None) -> dict[str, float]:
        sel = [r for r in self.rows if r["method"] == method and (horizon is None or r["horizon"] == horizon)]
        if not sel:
            raise KeyError(method)
        return {c: float(np.mean([r[c] for r in sel])) for c in COLUMNS}

    def extend(self, other: "MetricTable") -> None:
        self.rows.extend(other.rows)

    def by_agent(self) -> "MetricTable":
        """One row per (method, agent) averaged over horizons; horizon 0 marks the average."""
        out = MetricTable()
        keys = dict.fromkeys((r["method"], r["agent"]) for r in self.rows)
        for m, a in keys:
            sel = [r for r in self.rows if r["method"] == m and r["agent"] == a]
            out.add(m, a, 0, *(float(np.mean([r[c] for r in sel])) for c in COLUMNS))
        return out

    def to_csv(self, means: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("method", "agent", "horizon") + COLUMNS)
        for r in self.rows:
            w.writerow([r["method"], r["agent"], r["horizon"]] + [repr(r[c]) for c in COLUMNS])
        for m in self.methods() if means else ():
            avg = self.average(m)
            w.writerow([m, "mean", "mean"] + [repr(avg[c]) for c in COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricTable":
        table = cls()
        for r in csv.DictReader(io.StringIO(text)):
            if r["agent"] == "mean":
                continue
            table.add(r["method"], int(r["agent"]), int(r["horizon"]), *(float(r[c]) for c in COLUMNS))
        return table

    def to_text(self) -> str:
        """Aligned comparison: one row per method, columns bce, auroc, iou (means)."""
        header = ("method",) + COLUMNS
        body = []
        for m in self.methods():
            avg = self.average(m)
            body.append((m, f"{avg['bce']:.4f}", f"{100 * avg['auroc']:.1f}%", f"{100 * avg['iou']:.1f}%"))
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                 for r in [header] + body]
        return "\n".join(lines) + "\n"
