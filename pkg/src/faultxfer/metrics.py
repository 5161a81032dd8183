"""Transfer metrics: jumpstart, asymptotic improvement, time to threshold."""

from __future__ import annotations

from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

NOT_REACHED = "not reached"
WINDOW = 5


class TransferMetrics(NamedTuple):
    jumpstart: float
    asymptotic: float
    time_to_threshold: Union[int, str]


def _values(curve) -> np.ndarray:
    """Reward series of a curve: the deterministic evaluation track when one
    was recorded, else the batch means; plain sequences pass through."""
    if not isinstance(curve, dict) and hasattr(curve, "mean_episodic_reward"):
        curve = {"mean_episodic_reward": curve.mean_episodic_reward, "eval_mean": curve.eval_mean}
    if isinstance(curve, dict):
        curve = curve.get("eval_mean") or curve["mean_episodic_reward"]
    vals = curve
    vals = np.asarray(vals, dtype=float)
    if vals.size == 0:
        raise ValueError("curve is empty")
    return vals


def moving_average(values: Sequence[float], window: int = WINDOW) -> np.ndarray:
    """Trailing mean; the first ``window - 1`` points average what is available."""
    v = np.asarray(values, dtype=float)
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def threshold_level(reference: float, fraction: float = 0.9) -> float:
    """Reward level counted as reaching ``fraction`` of a reference performance.

    Works for either sign: 90% of a positive reward is ``0.9 r``; for a
    (negative) cost-like reward it is ``r - 0.1 |r|``.
    """
    return reference - (1.0 - fraction) * abs(reference)


def time_to_threshold(curve, threshold: float, window: int = WINDOW):
    ma = moving_average(_values(curve), window)
    hits = np.nonzero(ma >= threshold)[0]
    return int(hits[0]) if hits.size else NOT_REACHED


def compute_metrics(curve_before, curve_after, baseline_curve, threshold: Optional[float] = None, k: int = WINDOW):
    """Compare a variant's post-fault curve with a baseline's.

    jumpstart: mean of the first ``k`` points of (variant - baseline).
    asymptotic: mean of the last ``k`` points of the variant minus the same
    for the baseline.
    time_to_threshold: first iteration whose ``k``-point moving average
    reaches ``threshold``, or ``"not reached"``.  Without a threshold, 90% of
    the converged pre-fault level (last ``k`` points of ``curve_before``) is
    used.
    """
    after = _values(curve_after)
    base = _values(baseline_curve)
    jump = float(np.mean(after[:k]) - np.mean(base[:k]))
    asym = float(np.mean(after[-k:]) - np.mean(base[-k:]))
    if threshold is None:
        if curve_before is None:
            raise ValueError("need a threshold or a pre-fault curve")
        threshold = threshold_level(float(np.mean(_values(curve_before)[-k:])))
    return TransferMetrics(jump, asym, time_to_threshold(after, threshold, k))
