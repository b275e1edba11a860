"""Disparity and DSM scoring.

Disparity maps are scored with the same smooth-L1 used for training, per
regression output, plus end-point error and bad-pixel rates.  Bad-N counts
pixels whose absolute error is strictly greater than N pixels.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyResultError, ShapeError
from .groundtruth import SparseDisparity
from .nn.config import LOSS_WEIGHTS
from .nn.train import weighted_total_loss

BAD_THRESHOLDS = (1, 3)
BAD_CONVENTION = "bad-N% = share of valid pixels with |pred - gt| > N px (strict)"


def _as_arrays(gt):
    if isinstance(gt, SparseDisparity):
        return np.asarray(gt.values, np.float64), np.asarray(gt.valid, bool)
    values = np.asarray(gt, np.float64)
    return values, np.isfinite(values)


def _smooth_l1_sum(err):
    a = np.abs(err)
    return float(np.where(a < 1.0, 0.5 * err * err, a - 0.5).sum())


@dataclass
class EvalReport:
    regression_losses: list
    weighted_loss: float = None
    epe: float = 0.0
    bad: dict = field(default_factory=dict)
    pixels: int = 0
    dsm: dict = field(default_factory=dict)

    def to_dict(self):
        return {"convention": BAD_CONVENTION,
                "regression_losses": list(self.regression_losses),
                "weighted_loss": self.weighted_loss,
                "loss_weights": list(LOSS_WEIGHTS),
                "epe": self.epe,
                "bad": {f"bad{k}": v for k, v in self.bad.items()},
                "pixels": self.pixels,
                "dsm": dict(self.dsm)}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_table(self):
        """Aligned text table with one column per loss plus the supplementary metrics."""
        n = len(self.regression_losses)
        # Fewer than three regressions fill the trailing columns.
        cols = ["-"] * (3 - n) + [f"{v:.3f}" for v in self.regression_losses]
        weighted = "-" if self.weighted_loss is None else f"{self.weighted_loss:.3f}"
        headers = ["Regression Loss 1", "Regression Loss 2", "Regression Loss 3",
                   "Weighted Loss", "EPE"] + [f"bad-{k}%" for k in self.bad]
        row = cols + [weighted, f"{self.epe:.3f}"] + [f"{v:.2f}" for v in self.bad.values()]
        widths = [max(len(h), len(r)) for h, r in zip(headers, row)]
        lines = [f"# {BAD_CONVENTION}",
                 "  ".join(h.rjust(w) for h, w in zip(headers, widths)),
                 "  ".join(r.rjust(w) for r, w in zip(row, widths))]
        for k, v in sorted(self.dsm.items()):
            lines.append(f"# dsm {k}: {v}")
        return "\n".join(lines) + "\n"


def eval_report(pred_disparities, gts, weights=LOSS_WEIGHTS):
    """Score aligned lists of predictions against ground truth.

    Each prediction is either one disparity map or a sequence of the
    network's regression outputs (coarse to final).  Smooth-L1 is averaged
    over all valid pixels of all samples per regression; EPE and bad-N use
    the final regression.  The weighted loss is reported when there are
    exactly three regressions.
    """
    preds = list(pred_disparities)
    gts = list(gts)
    if not preds or len(preds) != len(gts):
        raise EmptyResultError("need equally long, non-empty prediction and gt lists")
    stacks = []
    for p in preds:
        if isinstance(p, SparseDisparity) or np.ndim(p) == 2:
            p = [p]
        stacks.append([np.asarray(getattr(m, "values", m), np.float64) for m in p])
    k = len(stacks[0])
    if any(len(s) != k for s in stacks):
        raise ShapeError("every sample needs the same number of regressions")
    sums = np.zeros(k)
    abs_sum = 0.0
    bad = {t: 0 for t in BAD_THRESHOLDS}
    count = 0
    for maps, gt in zip(stacks, gts):
        g, valid = _as_arrays(gt)
        for m in maps:
            if m.shape != g.shape:
                raise ShapeError(f"prediction {m.shape} and ground truth {g.shape} differ")
        for i, m in enumerate(maps):
            sums[i] += _smooth_l1_sum(m[valid] - g[valid])
        err = np.abs(maps[-1][valid] - g[valid])
        abs_sum += float(err.sum())
        for t in BAD_THRESHOLDS:
            bad[t] += int((err > t).sum())
        count += int(valid.sum())
    if count == 0:
        raise EmptyResultError("no valid ground-truth pixels")
    losses = [float(s / count) for s in sums]
    weighted = weighted_total_loss(*losses, weights=weights) if k == 3 else None
    return EvalReport(losses, weighted, abs_sum / count,
                      {t: 100.0 * bad[t] / count for t in BAD_THRESHOLDS}, count)


def interval_error(values, low, high):
    """Signed distance of ``values`` to ``[low, high]``; NaN where either side is."""
    values = np.asarray(values, np.float64)
    err = np.where(values < low, values - low, np.where(values > high, values - high, 0.0))
    return np.where(np.isfinite(values) & np.isfinite(low) & np.isfinite(high), err, np.nan)


def dsm_metrics(elevations, low, high=None):
    """RMSE, mean absolute error and coverage of a DSM against reference
    heights.  With ``high`` the reference is a per-cell interval."""
    high = low if high is None else high
    err = interval_error(elevations, low, high)
    scored = np.isfinite(err)
    reference = np.isfinite(low)
    if not scored.any():
        raise EmptyResultError("DSM and reference share no valid cell")
    e = err[scored]
    return {"rmse": float(np.sqrt(np.mean(e * e))), "mae": float(np.mean(np.abs(e))),
            "cells": int(scored.sum()),
            "coverage": float(scored.sum() / max(int(reference.sum()), 1))}
