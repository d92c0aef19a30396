"""Consistency metrics for dream outcomes across seeds and RF positions.

``within`` is the mean pairwise RMS distance among outcomes for one node,
measured on that node's in-image RF.  ``cross`` compares outcomes of two
positions of the same channel after shifting one set by the nominal RF-centre
offset, on the overlap of the two in-image RFs.  Their ratio is about 1 when
the preferred pattern does not depend on position.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .dreamer import DreamConfig, DreamOutcome, batch_outcomes, initial_image, visualize_node
from .exceptions import NotApplicableError, ParameterError, ShapeError
from .netgraph import ModelGraph, NodeRef
from .rfgeom import RfParams, compose_rf, rf_rect
from .tensor import Rect, rms_distance, spatial_shift

EQUIVARIANCE_TOL = 1e-5


def _image(o):
    return o.image if isinstance(o, DreamOutcome) else np.asarray(o)


def within_position_dispersion(outcomes, region: Rect) -> float:
    """Mean pairwise RMS distance among outcomes of one target over ``region``."""
    images = [_image(o) for o in outcomes]
    if len(images) < 2:
        raise ParameterError("within-position dispersion needs at least two outcomes")
    return float(np.mean([rms_distance(a, b, region) for a, b in itertools.combinations(images, 2)]))


def alignment(pos_a, pos_b, params: RfParams) -> tuple[int, int]:
    """Pixel shift that moves the RF of ``pos_b`` onto the RF of ``pos_a``."""
    return ((pos_a[0] - pos_b[0]) * params.jump, (pos_a[1] - pos_b[1]) * params.jump)


def overlap_region(pos_a, pos_b, params: RfParams, image_hw) -> Rect:
    """Common in-image RF area of ``pos_a`` and the aligned ``pos_b``, in ``pos_a`` coordinates."""
    h, w = image_hw
    dy, dx = alignment(pos_a, pos_b, params)
    in_a = rf_rect(params, pos_a, image_hw).in_image(h, w)
    in_b = rf_rect(params, pos_b, image_hw).in_image(h, w).shifted(dy, dx)
    return in_a.intersect(in_b)


def cross_position_divergence(set_a, set_b, pos_a, pos_b, params: RfParams) -> float:
    """Mean RMS distance over all pairs of an A outcome and an aligned B outcome."""
    images_a = [_image(o) for o in set_a]
    images_b = [_image(o) for o in set_b]
    if not images_a or not images_b:
        raise ParameterError("cross-position divergence needs non-empty outcome sets")
    hw = images_a[0].shape[-2:]
    region = overlap_region(pos_a, pos_b, params, hw)
    if region.empty:
        raise ShapeError(f"positions {tuple(pos_a)} and {tuple(pos_b)} share no in-image RF area")
    dy, dx = alignment(pos_a, pos_b, params)
    aligned_b = [spatial_shift(b, dy, dx) for b in images_b]
    return float(np.mean([rms_distance(a, b, region) for a in images_a for b in aligned_b]))


def safe_ratio(cross: float, within: float):
    """``cross / within`` plus a flag.

    Returns ``(ratio, flag)``.  When both are exactly zero every outcome is
    the same pattern at every position, which is the invariant limit, so the
    ratio is reported as 1.0 with flag ``"degenerate"``.  A zero ``within``
    with a positive ``cross`` is ``None`` with flag ``"undefined"``.
    """
    if within > 0:
        return cross / within, None
    if cross == 0:
        return 1.0, "degenerate"
    return None, "undefined"


@dataclass
class PositionEntry:
    pos: tuple
    clipped_fraction: float
    within: float
    cross: dict = field(default_factory=dict)
    ratio: float | None = None
    flag: str | None = None

    def to_dict(self) -> dict:
        return {
            "pos": list(self.pos),
            "clipped_fraction": self.clipped_fraction,
            "within": self.within,
            "cross": {f"{r},{c}": v for (r, c), v in self.cross.items()},
            "ratio": self.ratio,
            "flag": self.flag,
        }


@dataclass
class SpecificityReport:
    layer: int
    channel: int
    positions: list
    model_digest: str = ""
    config_digest: str = ""
    outcomes: dict = field(default_factory=dict, repr=False)

    @property
    def mean_ratio(self) -> float | None:
        ratios = [p.ratio for p in self.positions if p.ratio is not None and p.cross]
        return float(np.mean(ratios)) if ratios else None

    def to_dict(self) -> dict:
        return {
            "model_digest": self.model_digest,
            "config_digest": self.config_digest,
            "layer": self.layer,
            "channel": self.channel,
            "positions": [p.to_dict() for p in self.positions],
            "summary": {"mean_ratio": self.mean_ratio},
        }


def specificity_report(model: ModelGraph, layer: int, channel: int, positions,
                       cfg: DreamConfig | None = None, n_outcomes: int = 3) -> SpecificityReport:
    """Dream ``n_outcomes`` times at every position and compare the results.

    Each position's ratio divides its mean cross-position divergence (over
    all other requested positions) by its within-position dispersion.
    """
    cfg = cfg or DreamConfig()
    if n_outcomes < 2:
        raise ParameterError("n_outcomes must be >= 2")
    positions = [tuple(int(v) for v in p) for p in positions]
    if not positions:
        raise ParameterError("no positions requested")
    params = compose_rf(model.layers)[layer]
    hw = model.input_shape[1:]
    outcomes = {p: batch_outcomes(model, NodeRef(layer, channel, *p), cfg, n_outcomes)
                for p in positions}
    entries = []
    for p in positions:
        rect = rf_rect(params, p, hw, layer)
        within = within_position_dispersion(outcomes[p], rect.in_image(*hw))
        cross = {q: cross_position_divergence(outcomes[p], outcomes[q], p, q, params)
                 for q in positions if q != p}
        entry = PositionEntry(p, rect.clipped_fraction, within, cross)
        if cross:
            entry.ratio, entry.flag = safe_ratio(float(np.mean(list(cross.values()))), within)
        entries.append(entry)
    return SpecificityReport(layer, channel, entries, model.digest(), cfg.digest(), outcomes)


def equivariance_check(model: ModelGraph, layer: int, channel: int, pos_a, pos_b,
                       cfg: DreamConfig | None = None) -> dict:
    """Dream at two unclipped positions from shift-aligned starts and compare RF crops.

    The start image for ``pos_b`` is the start image for ``pos_a`` shifted by
    the RF-centre offset, so an exactly equivariant node yields identical
    crops.
    """
    cfg = cfg or DreamConfig()
    params = compose_rf(model.layers)[layer]
    hw = model.input_shape[1:]
    for p in (pos_a, pos_b):
        if rf_rect(params, p, hw).clipped_fraction > 0:
            raise NotApplicableError(
                f"RF at position {tuple(p)} of layer {layer} is clipped by the image border"
            )
    dy, dx = alignment(pos_b, pos_a, params)
    # keep only pixels that survive the shift: the stopping rule looks at the
    # whole image, so both starts must hold the same content, not just the RF
    start_b = spatial_shift(initial_image(model, cfg), dy, dx)
    start_a = spatial_shift(start_b, -dy, -dx)
    out_a = visualize_node(model, NodeRef(layer, channel, *pos_a), cfg, init=start_a)
    out_b = visualize_node(model, NodeRef(layer, channel, *pos_b), cfg, init=start_b)
    rect_a = rf_rect(params, pos_a, hw).rect
    rows_a, cols_a = rect_a.slices()
    rows_b, cols_b = rect_a.shifted(dy, dx).slices()
    diff = np.abs(out_a.image[..., rows_a, cols_a].astype(np.float64)
                  - out_b.image[..., rows_b, cols_b].astype(np.float64))
    max_diff = float(diff.max())
    return {
        "max_abs_diff": max_diff,
        "verdict": "pass" if max_diff <= EQUIVARIANCE_TOL else "fail",
        "outcomes": (out_a, out_b),
    }


def ratio_summary(reports) -> float:
    """Mean of per-report mean ratios, skipping reports without one."""
    vals = [r.mean_ratio for r in reports if r.mean_ratio is not None]
    return float(np.mean(vals)) if vals else math.nan


def autocorrelation(image, max_lag: int = 16) -> np.ndarray:
    """Normalised spatial autocorrelation for lags in [-max_lag, max_lag]^2.

    Each channel is centred on its mean; the value at a lag is the mean
    product over the overlapping pixels, summed over channels and divided by
    the zero-lag value.  A constant image has no defined autocorrelation and
    yields all zeros.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 4:
        x = x[0]
    if x.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) image, got shape {x.shape}")
    _, h, w = x.shape
    if not 0 <= max_lag < min(h, w):
        raise ParameterError(f"max_lag must lie in 0..{min(h, w) - 1}")
    x = x - x.mean(axis=(1, 2), keepdims=True)
    fh, fw = 2 * h, 2 * w
    spec = np.fft.rfft2(x, s=(fh, fw))
    raw = np.fft.irfft2((spec * np.conj(spec)).sum(axis=0), s=(fh, fw))
    lags = np.arange(-max_lag, max_lag + 1)
    raw = raw[np.ix_(lags % fh, lags % fw)]
    overlap = np.outer(h - np.abs(lags), w - np.abs(lags))
    ac = raw / overlap
    zero = ac[max_lag, max_lag]
    if zero <= 1e-12 * max(1.0, float(np.abs(x).max())):
        return np.zeros_like(ac)
    return ac / zero


def secondary_peaks(ac: np.ndarray, threshold: float = 0.2, dip: float = 0.1) -> list:
    """Nonzero lags where ``ac`` has a separate peak.

    A lag qualifies when its value is at least ``threshold``, is not below any
    of its 8 neighbours, and the straight path back to lag 0 passes through a
    value at least ``dip`` lower.  The last condition separates a true repeat
    from the flank of the central peak or a ridge through the origin.
    Returned as ``(dy, dx, value)`` sorted by decreasing value.
    """
    m = ac.shape[0] // 2
    padded = np.pad(ac, 1, constant_values=-np.inf)
    neigh = np.max([padded[1 + dy:1 + dy + ac.shape[0], 1 + dx:1 + dx + ac.shape[1]]
                    for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx], axis=0)
    peaks = []
    for i, j in zip(*np.nonzero((ac >= threshold) & (ac >= neigh))):
        dy, dx = int(i) - m, int(j) - m
        if dy == 0 and dx == 0:
            continue
        steps = max(abs(dy), abs(dx))
        path = [ac[m + round(dy * t / steps), m + round(dx * t / steps)] for t in range(1, steps)]
        if path and min(path) <= ac[i, j] - dip:
            peaks.append((dy, dx, float(ac[i, j])))
    return sorted(peaks, key=lambda p: -p[2])
