"""Correlation unit and filter unit for control-region feature suppression.

The correlation unit estimates, per feature, how strongly region-of-interest
activations track their control-region counterparts over the batch dimension
(Pearson correlation). The filter unit turns that estimate into a suppression
of the ROI feature: a hard factor, a smoothed sigmoid factor, or a Bernoulli
dropout whose probability grows with the correlation. The layer is exactly
transparent in the backward pass and at inference.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Layer, global_avg_pool

MODES = ("factor", "sigmoid", "dropout")


@dataclass(frozen=True)
class DecorreConfig:
    """Filter-unit mode and hyperparameters.

    factor mode multiplies a feature by ``low_factor`` once its correlation
    reaches ``threshold`` (boundary included). sigmoid mode applies the
    smooth curve (1 - floor) / (1 + exp(steepness * (d - midpoint))) + floor.
    dropout mode drops feature instances with probability d / guarantee
    (clamped to [0, 1]), so dropout is certain at correlations >= guarantee.
    """

    mode: str = "dropout"
    threshold: float = 0.3
    low_factor: float = 0.01
    midpoint: float = 0.3
    floor: float = 0.01
    steepness: float = 50.0
    guarantee: float = 0.3
    eps: float = 1e-8
    filter_cr: bool = False  # also filter the control-region stream (off by default)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.low_factor <= 1.0:
            raise ValueError(f"low_factor must be in [0,1], got {self.low_factor}")
        if not -1.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (-1,1), got {self.threshold}")
        if not 0.0 <= self.floor <= 1.0:
            raise ValueError(f"floor must be in [0,1], got {self.floor}")
        if not -1.0 < self.midpoint < 1.0:
            raise ValueError(f"midpoint must be in (-1,1), got {self.midpoint}")
        if self.steepness <= 0.0:
            raise ValueError(f"steepness must be positive, got {self.steepness}")
        if not 0.0 < self.guarantee <= 1.0:
            raise ValueError(f"guarantee must be in (0,1], got {self.guarantee}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")


@dataclass
class CorrelationRecord:
    """Per-feature correlation values captured at one layer during training."""

    layer_id: str
    epoch: int
    correlations: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __len__(self):
        return len(self.correlations)


def pearson_corr(x: np.ndarray, y: np.ndarray, eps: float = 1e-8) -> float:
    """Sample Pearson correlation of two vectors over the batch dimension.

    Returns 0 when either input is (near-)constant, i.e. its mean squared
    deviation falls below ``eps``: a constant stream carries no evidence of
    dependence. The result is clamped to [-1, 1] against rounding.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("pearson_corr needs at least 2 observations")
    xc = x - x.mean()
    yc = y - y.mean()
    vx = float(np.mean(xc * xc))
    vy = float(np.mean(yc * yc))
    if vx < eps or vy < eps:
        return 0.0
    r = float(np.mean(xc * yc) / np.sqrt(vx * vy))
    return min(1.0, max(-1.0, r))


def pearson_corr_columns(x: np.ndarray, y: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Column-wise Pearson correlation of two [B, F] matrices (float64)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"expected [B>=2, F] matrices, got shape {x.shape}")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    vx = np.mean(xc * xc, axis=0)
    vy = np.mean(yc * yc, axis=0)
    denom = np.sqrt(vx * vy)
    degenerate = (vx < eps) | (vy < eps)
    denom[degenerate] = 1.0
    r = np.mean(xc * yc, axis=0) / denom
    r[degenerate] = 0.0
    return np.clip(r, -1.0, 1.0)


def correlation_unit(roi: np.ndarray, cr: np.ndarray, cfg: DecorreConfig,
                     layer_id: str = "", epoch: int = 0) -> CorrelationRecord:
    """One correlation per feature, comparing ROI and CR over the batch.

    Flat [B, F] inputs are correlated column by column. Spatial [B, C, H, W]
    inputs are first reduced to per-channel virtual features by global
    average pooling, so the estimate is independent of where in the map the
    technical variation shows up.
    """
    if roi.shape != cr.shape:
        raise ValueError(f"roi shape {roi.shape} != cr shape {cr.shape}")
    if roi.ndim == 4:
        roi2d, cr2d = global_avg_pool(roi), global_avg_pool(cr)
    elif roi.ndim == 2:
        roi2d, cr2d = roi, cr
    else:
        raise ValueError(f"expected [B,F] or [B,C,H,W] features, got shape {roi.shape}")
    return CorrelationRecord(layer_id, epoch, pearson_corr_columns(roi2d, cr2d, cfg.eps))


def filter_factor(d, threshold: float, low_factor: float):
    """Hard filter: ``low_factor`` once d reaches the threshold, else 1.

    The boundary d == threshold already triggers filtering.
    """
    d = np.asarray(d, dtype=np.float64)
    out = np.where(d >= threshold, low_factor, 1.0)
    return out if out.ndim else float(out)


def filter_sigmoid(d, midpoint: float, floor: float, steepness: float):
    """Smooth filter in (floor, 1), strictly decreasing in d."""
    d = np.asarray(d, dtype=np.float64)
    out = (1.0 - floor) / (1.0 + np.exp(steepness * (d - midpoint))) + floor
    return out if out.ndim else float(out)


def dropout_keep_prob(d, guarantee: float):
    """Keep probability max(0, 1 - max(0, d) / guarantee).

    Negative correlations are never dropped; dropout is certain for
    d >= guarantee.
    """
    if guarantee <= 0:
        raise ValueError(f"guarantee must be positive, got {guarantee}")
    d = np.asarray(d, dtype=np.float64)
    out = np.maximum(0.0, 1.0 - np.maximum(0.0, d) / guarantee)
    return out if out.ndim else float(out)


@dataclass
class FilterDecision:
    """Outcome of the filter unit for one batch at one layer.

    factor/sigmoid modes fill ``factors`` (one multiplier in [0,1] per
    feature); dropout mode fills ``mask`` (binary keep indicator per
    (sample, feature)).
    """

    factors: np.ndarray | None = None
    mask: np.ndarray | None = None

    def apply(self, x: np.ndarray) -> np.ndarray:
        scale = self.factors if self.mask is None else self.mask
        return _apply_per_feature(x, scale)


def filter_decision(correlations: np.ndarray, cfg: DecorreConfig,
                    rng: np.random.Generator | None = None,
                    batch_size: int | None = None) -> FilterDecision:
    """Turn per-feature correlations into the filtering to apply."""
    if cfg.mode == "dropout":
        if rng is None or batch_size is None:
            raise ValueError("dropout mode needs an rng stream and a batch size")
        keep = dropout_keep_prob(correlations, cfg.guarantee)
        mask = (rng.random((batch_size, keep.size)) < keep[None, :]).astype(np.float64)
        return FilterDecision(mask=mask)
    return FilterDecision(factors=_feature_factors(correlations, cfg))


def _feature_factors(corr: np.ndarray, cfg: DecorreConfig) -> np.ndarray:
    if cfg.mode == "factor":
        return filter_factor(corr, cfg.threshold, cfg.low_factor)
    return filter_sigmoid(corr, cfg.midpoint, cfg.floor, cfg.steepness)


def _apply_per_feature(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Multiply a per-feature (or per sample-feature) scale into x.

    Spatial inputs are scaled per whole channel map; scale is cast to the
    activation dtype so float32 training stays float32.
    """
    scale = scale.astype(x.dtype, copy=False)
    if x.ndim == 4:
        if scale.ndim == 1:
            return x * scale[None, :, None, None]
        return x * scale[:, :, None, None]
    if scale.ndim == 1:
        return x * scale[None, :]
    return x * scale


def decorre_forward(roi: np.ndarray, cr: np.ndarray, cfg: DecorreConfig,
                    rng: np.random.Generator | None, training: bool,
                    layer_id: str = "", epoch: int = 0,
                    filter_enabled: bool = True) -> tuple[np.ndarray, CorrelationRecord]:
    """Filtered ROI features plus the correlation record that drove the filter.

    At inference (training=False) the input is returned unchanged, bit-exact,
    with an empty record. In training, factor/sigmoid modes scale every
    instance of a feature by its per-feature factor; dropout mode draws an
    independent Bernoulli keep mask per (sample, feature) and multiplies it
    in without any rescaling. ``filter_enabled=False`` computes the record
    but leaves the activations untouched (monitoring mode).
    """
    if not training:
        return roi, CorrelationRecord(layer_id, epoch)
    if roi.shape != cr.shape:
        raise ValueError(f"roi shape {roi.shape} != cr shape {cr.shape}")
    if roi.shape[0] < 2:
        raise ValueError("decorrelation needs batch size >= 2 in training mode")
    record = correlation_unit(roi, cr, cfg, layer_id, epoch)
    if not filter_enabled:
        return roi, record
    decision = filter_decision(record.correlations, cfg, rng, roi.shape[0])
    return decision.apply(roi), record


def decorre_backward(upstream: np.ndarray) -> np.ndarray:
    """Identity: the layer is ignored entirely in the backward pass.

    Errors caused by the filtering are attributed to the preceding layers;
    no gradient ever flows into the control-region stream.
    """
    return upstream


class DecorreLayer(Layer):
    """Model-stack layer pairing the correlation unit with the filter unit.

    Inside a plain forward pass (and at inference) the layer is the
    identity; the dual-stream training pass calls :meth:`filter` with the
    control-region activations at the same depth. No trainable parameters.
    """

    def __init__(self, cfg: DecorreConfig, layer_id: str):
        self.cfg = cfg
        self.layer_id = layer_id

    def forward(self, x, cache=None):
        return x

    def backward(self, grad_out, cache):
        return decorre_backward(grad_out)

    def filter(self, roi: np.ndarray, cr: np.ndarray, rng: np.random.Generator | None,
               epoch: int = 0, filter_enabled: bool = True
               ) -> tuple[np.ndarray, np.ndarray, CorrelationRecord]:
        """Dual-stream step: returns (filtered_roi, cr_out, record)."""
        out, record = decorre_forward(roi, cr, self.cfg, rng, True,
                                      self.layer_id, epoch, filter_enabled)
        cr_out = cr
        if filter_enabled and self.cfg.filter_cr and record.correlations.size:
            cr_out = filter_decision(record.correlations, self.cfg, rng,
                                     cr.shape[0]).apply(cr)
        return out, cr_out, record
