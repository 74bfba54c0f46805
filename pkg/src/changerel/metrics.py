"""Pixel confusion counts and the Pre / Rec / F1 / IoU / OA scores."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, ShapeError

SCORE_NAMES = ("precision", "recall", "f1", "iou", "oa")

# TP white, TN black, FP green, FN red
PALETTE = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fp": (0, 255, 0),
    "fn": (255, 0, 0),
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @classmethod
    def merge(cls, parts) -> "ConfusionCounts":
        out = cls()
        for p in parts:
            out = out + p
        return out


def _to_numpy(x):
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def confusion(pred, label, threshold: float = 0.5) -> ConfusionCounts:
    """Tally pixels with ``pred >= threshold`` as positive against a binary label."""
    p = _to_numpy(pred)
    y = _to_numpy(label)
    if p.shape != y.shape:
        raise ShapeError(f"prediction {p.shape} and label {y.shape} differ")
    pos = p >= threshold
    lab = y > 0
    tp = int(np.count_nonzero(pos & lab))
    fp = int(np.count_nonzero(pos & ~lab))
    fn = int(np.count_nonzero(~pos & lab))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


@dataclass
class Scores:
    precision: float
    recall: float
    f1: float
    iou: float
    oa: float
    degenerate: tuple = field(default_factory=tuple)  # names of scores whose ratio was 0/0

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in SCORE_NAMES}


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def scores(c: ConfusionCounts) -> Scores:
    if c.total <= 0:
        raise DegenerateInputError("no pixels were counted")
    flags = []
    p = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    r = _ratio(c.tp, c.tp + c.fn, "recall", flags)
    # 2PR/(P+R) reduces to 2tp/(2tp+fp+fn); the count form avoids rounding error
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f1", flags)
    iou = _ratio(c.tp, c.tp + c.fp + c.fn, "iou", flags)
    oa = (c.tp + c.tn) / c.total
    return Scores(p, r, f1, iou, oa, tuple(flags))


def f1_from_pr(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def color_map(pred, label, threshold: float = 0.5) -> np.ndarray:
    """Render the TP/TN/FP/FN palette as an (H, W, 3) uint8 image."""
    p = _to_numpy(pred) >= threshold
    y = _to_numpy(label) > 0
    if p.shape != y.shape:
        raise ShapeError(f"prediction {p.shape} and label {y.shape} differ")
    out = np.zeros(p.shape + (3,), dtype=np.uint8)
    out[p & y] = PALETTE["tp"]
    out[p & ~y] = PALETTE["fp"]
    out[~p & y] = PALETTE["fn"]
    return out


def format_table(rows, columns=SCORE_NAMES) -> str:
    """Aligned text table; ``rows`` maps a row name to a Scores or dict (values as fractions)."""
    header = ["name"] + [c for c in columns]
    body = []
    for name, s in rows.items():
        d = s.as_dict() if isinstance(s, Scores) else s
        body.append([str(name)] + [_fmt(d.get(c)) for c in columns])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    return "\n".join(lines)


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{100 * v:.2f}"
    return str(v)


def write_report(s: Scores, counts: ConfusionCounts, path) -> None:
    """Write ``metric=value`` lines, scores as percentages with two decimals."""
    lines = [f"{k}={100 * v:.2f}" for k, v in s.as_dict().items()]
    lines += [f"{k}={getattr(counts, k)}" for k in ("tp", "fp", "fn", "tn")]
    lines.append(f"degenerate={','.join(s.degenerate)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out
