"""Prediction quality and colour statistics: PSNR, Gini index of chroma
histograms, and per-size evaluation reports written as CSV."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import BlockSample, group_by_size, stack_blocks
from .model import ModelWeights, count_flops, count_params, forward_batch

SATURATED_DB = 99.0
DEFAULT_BINS = 64
REPORT_COLUMNS = ["model", "scheme", "phase", "size", "n_blocks", "psnr_db", "params", "flops", "gini_cb", "gini_cr"]


def psnr(pred: np.ndarray, gt: np.ndarray, peak: float = 1.0) -> float:
    """PSNR in dB over all samples jointly; identical inputs report 99 dB."""
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - gt) ** 2))
    if mse == 0.0:
        return SATURATED_DB
    return min(SATURATED_DB, 10.0 * math.log10(peak * peak / mse))


@dataclass
class Histogram:
    counts: np.ndarray
    label: str = ""

    @property
    def bins(self) -> int:
        return len(self.counts)

    def log_counts(self) -> np.ndarray:
        return np.log10(1.0 + self.counts)


def gini(h: Histogram | np.ndarray) -> float:
    """1 - sum of squared bin probabilities."""
    counts = np.asarray(h.counts if isinstance(h, Histogram) else h, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("gini needs a histogram with positive mass")
    p = counts / total
    return float(1.0 - np.sum(p * p))


def log_histogram(plane: np.ndarray, bins: int = DEFAULT_BINS, label: str = "") -> Histogram:
    """Raw counts over ``bins`` equal-width bins on [0, 1].

    Export and plotting use ``log10(1 + count)`` via :meth:`Histogram.log_counts`.
    """
    v = np.clip(np.asarray(plane, dtype=np.float64).ravel(), 0.0, 1.0)
    idx = np.minimum((v * bins).astype(np.int64), bins - 1)
    return Histogram(np.bincount(idx, minlength=bins).astype(np.int64), label)


def chroma_gini(cb: np.ndarray, cr: np.ndarray, bins: int = DEFAULT_BINS) -> tuple[float, float]:
    return gini(log_histogram(cb, bins, "cb")), gini(log_histogram(cr, bins, "cr"))


@dataclass
class SizeReport:
    size: int
    n_blocks: int
    psnr_db: float
    gini_cb: float
    gini_cr: float
    flops: int


@dataclass
class EvalReport:
    model: str
    scheme: str
    phase: str
    params: int
    rows: list[SizeReport] = field(default_factory=list)

    def psnr_by_size(self) -> dict[int, float]:
        return {r.size: r.psnr_db for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow([self.model, self.scheme, self.phase, r.size, r.n_blocks, repr(r.psnr_db),
                             self.params, r.flops, repr(r.gini_cb), repr(r.gini_cr)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty report")
        first = rows[0]
        rep = cls(first["model"], first["scheme"], first["phase"], int(first["params"]))
        for r in rows:
            rep.rows.append(SizeReport(int(r["size"]), int(r["n_blocks"]), float(r["psnr_db"]),
                                       float(r["gini_cb"]), float(r["gini_cr"]), int(r["flops"])))
        return rep


def predict_blocks(model, blocks: list[BlockSample]) -> list[np.ndarray]:
    """Normalised (2, N, N) predictions for float or integer models, in input order."""
    from .integerize import IntegerModel, int_forward_block

    out: list[np.ndarray | None] = [None] * len(blocks)
    if isinstance(model, IntegerModel):
        for i, blk in enumerate(blocks):
            out[i] = int_forward_block(model, blk).astype(np.float64) / blk.peak
        return out
    index = {id(b): i for i, b in enumerate(blocks)}
    for _, group in group_by_size(blocks).items():
        x0, s0, _ = stack_blocks(group)
        pred, _ = forward_batch(model, x0, s0)
        for blk, p in zip(group, pred):
            out[index[id(blk)]] = p
    return out


def evaluate_model(model, blocks: list[BlockSample], name: str = "model", bins: int = DEFAULT_BINS) -> EvalReport:
    """Per-size mean block PSNR, ground-truth chroma Gini and complexity figures.

    ``model`` may be a float :class:`ModelWeights`, an integer model, a
    plain float (constant predictor, e.g. 0.5 for mid-grey) or a callable
    mapping a block to its normalised (2, N, N) prediction.
    """
    from .integerize import IntegerModel

    if isinstance(model, (int, float)):
        preds = [np.full((2, b.n, b.n), float(model)) for b in blocks]
        spec = None
    elif callable(model):
        preds = [np.asarray(model(b), dtype=np.float64) for b in blocks]
        spec = None
    else:
        preds = predict_blocks(model, blocks)
        spec = model.spec if isinstance(model, ModelWeights) else model.float_spec()
    if spec is None:
        rep = EvalReport(name, "constant" if isinstance(model, (int, float)) else "external", "-", 0)
    else:
        phase = "integer" if isinstance(model, IntegerModel) else spec.phase
        rep = EvalReport(name, spec.scheme, phase, count_params(spec))
    by_size: dict[int, list[int]] = {}
    for i, b in enumerate(blocks):
        by_size.setdefault(b.n, []).append(i)
    for n in sorted(by_size):
        idx = by_size[n]
        scores = [psnr(preds[i], blocks[i].Z) for i in idx]
        cb = np.concatenate([blocks[i].Z[0].ravel() for i in idx])
        cr = np.concatenate([blocks[i].Z[1].ravel() for i in idx])
        g_cb, g_cr = chroma_gini(cb, cr, bins)
        rep.rows.append(SizeReport(n, len(idx), float(np.mean(scores)), g_cb, g_cr,
                                   count_flops(spec, n) if spec is not None else 0))
    return rep
