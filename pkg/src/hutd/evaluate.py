"""Threshold-sweep ROC construction and the five AUC statistics, with a
pairwise Mann-Whitney oracle for the detection-vs-false-alarm area."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import GroundTruth


class EvalError(Exception):
    pass


@dataclass
class RocData:
    """(tau, P_d, P_f) triples, tau descending with a +inf sentinel first,
    plus the five derived area statistics. The tau-axis areas integrate over
    tau min-max normalized to [0, 1]; see `auc` for the degenerate case."""

    thresholds: np.ndarray
    pd: np.ndarray
    pf: np.ndarray
    auc_pd_pf: float
    auc_pd_tau: float
    auc_pf_tau: float
    auc_oa: float
    auc_snpr: float


def auc(xs, ys) -> float:
    """Trapezoidal area under (xs, ys); xs must be sorted ascending."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size < 2:
        raise EvalError("need at least 2 points to integrate")
    if np.any(np.diff(xs) < 0):
        raise EvalError("xs must be sorted ascending")
    return float(np.trapezoid(ys, xs))


def auc_oa(a_df: float, a_dt: float, a_ft: float) -> float:
    """Overall accuracy composite: detection area plus target visibility
    minus background leakage."""
    return a_df + a_dt - a_ft


def auc_snpr(a_dt: float, a_ft: float) -> float:
    """Signal-to-noise probability ratio; +inf when the false-alarm area
    vanishes."""
    if a_ft == 0.0:
        return math.inf
    return a_dt / a_ft


def _flat_scores(scores) -> np.ndarray:
    arr = scores.flat() if hasattr(scores, "flat") and callable(scores.flat) else np.asarray(scores)
    return np.asarray(arr, dtype=np.float64).reshape(-1)


def roc(scores, gt: GroundTruth) -> RocData:
    """Exact sweep over all unique scores (descending, +inf sentinel first).

    P_d(tau) and P_f(tau) are the fractions of target and background pixels
    scoring >= tau; tied scores share one threshold.
    """
    flat = _flat_scores(scores)
    mask = gt.mask.reshape(-1)
    if flat.shape[0] != mask.shape[0]:
        raise EvalError("score map and ground truth sizes differ")
    if not np.isfinite(flat).all():
        raise EvalError("scores must be finite")
    n_target = int(mask.sum())
    n_background = int((~mask).sum())
    if n_target == 0 or n_background == 0:
        raise EvalError("ground truth needs at least one target and one background pixel")

    uniq = np.unique(flat)  # ascending
    thresholds = np.concatenate([[np.inf], uniq[::-1]])
    # counts of scores >= tau via cumulative sums over the sorted unique values
    t_counts = np.bincount(np.searchsorted(uniq, flat[mask]), minlength=uniq.size)
    b_counts = np.bincount(np.searchsorted(uniq, flat[~mask]), minlength=uniq.size)
    t_ge = np.concatenate([[0], np.cumsum(t_counts[::-1])])  # aligned with thresholds
    b_ge = np.concatenate([[0], np.cumsum(b_counts[::-1])])
    pd = t_ge / n_target
    pf = b_ge / n_background

    a_df = auc(pf, pd)  # pf ascends as tau descends

    finite_tau = thresholds[1:]
    span = finite_tau[0] - finite_tau[-1]  # max - min
    if finite_tau.size >= 2 and span > 0:
        tau_hat = (finite_tau[::-1] - finite_tau[-1]) / span
        a_dt = auc(tau_hat, pd[1:][::-1])
        a_ft = auc(tau_hat, pf[1:][::-1])
    else:
        # all scores tied: P_d and P_f are constant over the unit tau range
        a_dt = float(pd[1])
        a_ft = float(pf[1])

    return RocData(
        thresholds=thresholds,
        pd=pd,
        pf=pf,
        auc_pd_pf=a_df,
        auc_pd_tau=a_dt,
        auc_pf_tau=a_ft,
        auc_oa=auc_oa(a_df, a_dt, a_ft),
        auc_snpr=auc_snpr(a_dt, a_ft),
    )


def mann_whitney_auc(scores, gt: GroundTruth) -> float:
    """Pairwise oracle: fraction of (target, background) pairs ranked
    correctly, ties counted one half."""
    flat = _flat_scores(scores)
    mask = gt.mask.reshape(-1)
    t = flat[mask]
    b = flat[~mask]
    if t.size == 0 or b.size == 0:
        raise EvalError("ground truth needs at least one target and one background pixel")
    wins = (t[:, None] > b[None, :]).sum()
    ties = (t[:, None] == b[None, :]).sum()
    return float((wins + 0.5 * ties) / (t.size * b.size))


def auc_oracle_check(scores, gt: GroundTruth) -> tuple:
    """(trapezoid area, pairwise statistic); the two must agree closely."""
    return roc(scores, gt).auc_pd_pf, mann_whitney_auc(scores, gt)


# ---------------------------------------------------------------------------
# Report emission


REPORT_HEADER = "detector,auc_pd_pf,auc_pd_tau,auc_pf_tau,auc_oa,auc_snpr"


def _fmt(x: float) -> str:
    return repr(float(x))


def report(score_maps: dict, gt: GroundTruth, out_dir) -> dict:
    """Write the per-detector AUC table and per-detector ROC point CSVs.

    score_maps: name -> ScoreMap (or raw (H, W) arrays). Returns the path
    map; every byte is deterministic given the inputs.
    """
    if not score_maps:
        raise EvalError("no score maps to report on")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    table = [REPORT_HEADER]
    for name, score_map in score_maps.items():
        data = roc(score_map, gt)
        table.append(
            f"{name},{_fmt(data.auc_pd_pf)},{_fmt(data.auc_pd_tau)},"
            f"{_fmt(data.auc_pf_tau)},{_fmt(data.auc_oa)},{_fmt(data.auc_snpr)}"
        )
        roc_lines = ["threshold,pd,pf"]
        for tau, d, f in zip(data.thresholds, data.pd, data.pf):
            roc_lines.append(f"{_fmt(tau)},{_fmt(d)},{_fmt(f)}")
        roc_path = out / f"roc_{name}.csv"
        roc_path.write_text("\n".join(roc_lines) + "\n")
        paths[f"roc_{name}"] = str(roc_path)
    report_path = out / "auc_report.csv"
    report_path.write_text("\n".join(table) + "\n")
    paths["auc_report"] = str(report_path)
    return paths
