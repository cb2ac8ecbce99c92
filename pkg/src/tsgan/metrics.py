"""Distribution and forecast metrics.

Generation quality is scored with a Jensen-Shannon divergence between the
pointwise marginals of a real and a generated window batch, one histogram
per channel over their joint range.  The divergence ignores autocorrelation
on purpose: it is a cheap model-selection signal, not a fidelity proof.
Forecasts are scored with MAE plus a peak/dry decomposition driven by an
observed-flow quantile mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError

EPS = 1e-10  # histogram smoothing; keeps KLD finite on disjoint supports
DEFAULT_BINS = 50
LN2 = math.log(2.0)


@dataclass
class Histogram:
    edges: np.ndarray  # bins + 1 equal-width edges
    counts: np.ndarray
    probs: np.ndarray  # (counts + EPS) / (total + bins * EPS)


def histogram_estimate(values, bins=DEFAULT_BINS, value_range=None):
    """Equal-width histogram; the upper range edge falls in the last bin."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ShapeError("histogram: empty input")
    if bins < 2:
        raise ContractError("histogram: need at least 2 bins")
    if value_range is None:
        value_range = (float(values.min()), float(values.max()))
    lo, hi = value_range
    if not hi > lo:
        hi = lo + 1.0  # degenerate point mass: any width works
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    probs = (counts + EPS) / (counts.sum() + bins * EPS)
    return Histogram(edges=edges, counts=counts, probs=probs)


def kld(p, q):
    """Kullback-Leibler divergence sum(p * ln(p / q)) over matching bins."""
    if not np.array_equal(p.edges, q.edges):
        raise ContractError("kld: histograms have different bin edges")
    return float(np.sum(p.probs * np.log(p.probs / q.probs)))


def jsd_histograms(p, q):
    m_probs = 0.5 * (p.probs + q.probs)
    m = Histogram(edges=p.edges, counts=p.counts + q.counts, probs=m_probs)
    return 0.5 * kld(p, m) + 0.5 * kld(q, m)


@dataclass
class JsdResult:
    per_channel: dict
    mean: float


def jsd(real_batch, fake_batch, bins=DEFAULT_BINS):
    """Per-channel JSD between two window batches, plus the channel mean.

    Accepts WindowBatch-like objects (with .data and .channels) or plain
    arrays shaped [count, steps, channels].
    """
    real, channels = _values_and_channels(real_batch)
    fake, fake_channels = _values_and_channels(fake_batch)
    if channels != fake_channels:
        raise ContractError("jsd: channel sets differ")
    if real.shape[-1] != fake.shape[-1]:
        raise ShapeError("jsd: channel counts differ")
    if real.size == 0 or fake.size == 0:
        raise ShapeError("jsd: empty batch")
    per = {}
    for i, name in enumerate(channels):
        rv = real[..., i].ravel()
        fv = fake[..., i].ravel()
        lo = min(rv.min(), fv.min())
        hi = max(rv.max(), fv.max())
        p = histogram_estimate(rv, bins, (lo, hi))
        q = histogram_estimate(fv, bins, (lo, hi))
        per[name] = jsd_histograms(p, q)
    return JsdResult(per_channel=per, mean=float(np.mean(list(per.values()))))


def _values_and_channels(batch):
    if hasattr(batch, "data") and hasattr(batch, "channels"):
        return np.asarray(batch.data, dtype=np.float64), tuple(batch.channels)
    arr = np.asarray(batch, dtype=np.float64)
    return arr, tuple(f"ch{i}" for i in range(arr.shape[-1]))


def mae(pred, obs):
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise ShapeError(f"mae: shapes {pred.shape} and {obs.shape} differ")
    return float(np.mean(np.abs(pred - obs)))


@dataclass
class PeakMetrics:
    overall_mae: float
    peak_mae: float  # None when no step clears the threshold
    dry_mae: float
    peak_bias: float  # signed mean error on peaks; negative = underestimation
    threshold: float
    peak_count: int
    dry_count: int


def peak_event_metrics(pred, obs, flow_threshold_quantile=0.95):
    """MAE split into peak and dry/ambient steps by an observed-flow quantile.

    The observed series defines the mask, so every model evaluated against
    the same observations is scored on identical step sets.  An empty peak
    mask reports peak metrics as None rather than failing.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    obs = np.asarray(obs, dtype=np.float64).ravel()
    if pred.shape != obs.shape:
        raise ShapeError("peak metrics: prediction/observation shapes differ")
    threshold = float(np.quantile(obs, flow_threshold_quantile))
    peak = obs > threshold
    dry = ~peak
    err = pred - obs
    overall = float(np.mean(np.abs(err)))
    if peak.any():
        peak_mae = float(np.mean(np.abs(err[peak])))
        peak_bias = float(np.mean(err[peak]))
    else:
        peak_mae = None
        peak_bias = None
    dry_mae = float(np.mean(np.abs(err[dry]))) if dry.any() else None
    return PeakMetrics(
        overall_mae=overall,
        peak_mae=peak_mae,
        dry_mae=dry_mae,
        peak_bias=peak_bias,
        threshold=threshold,
        peak_count=int(peak.sum()),
        dry_count=int(dry.sum()),
    )
