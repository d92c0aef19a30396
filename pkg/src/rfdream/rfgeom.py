"""Receptive-field arithmetic and its empirical check.

The closed-form recurrence over a chain of layers with kernel ``k``, stride
``s`` and padding ``p``::

    size'  = size + (k - 1) * jump
    jump'  = jump * s
    start' = start + ((k - 1) / 2 - p) * jump

``start`` is the input coordinate of the RF centre of output position 0.
Max pooling uses the same recurrence as convolution; ReLU leaves the
parameters unchanged; global pooling and dense layers cover the whole image.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ParameterError, ShapeError
from .netgraph import CONV, MAXPOOL, RELU, Injection, LayerSpec, ModelGraph, NodeRef, \
    backward_injected, forward, infer_shapes, init_model
from .tensor import Rect, SplitMix64


@dataclass(frozen=True)
class RfParams:
    size: int
    jump: int
    start: float
    whole_image: bool = False

    def center(self, pos: int) -> float:
        return self.start + pos * self.jump


INPUT_RF = RfParams(size=1, jump=1, start=0.0)


@dataclass(frozen=True)
class RfRect:
    layer: int
    position: tuple[int, int]
    top: int
    left: int
    bottom: int
    right: int
    clipped_fraction: float

    @property
    def rect(self) -> Rect:
        return Rect(self.top, self.left, self.bottom, self.right)

    def in_image(self, height: int, width: int) -> Rect:
        return self.rect.intersect(Rect.image(height, width))


def compose_rf(specs: Sequence[LayerSpec], input_hw=None) -> list[RfParams]:
    """RF parameters for the input (index 0) and every layer output.

    When ``input_hw`` is given, the chain is also checked for layers that
    would produce an empty spatial output.
    """
    if input_hw is not None:
        infer_shapes((1, *input_hw), specs)
    out = [INPUT_RF]
    rf = INPUT_RF
    for spec in specs:
        if rf.whole_image:
            pass
        elif spec.kind in (CONV, MAXPOOL):
            k, s, p = spec.kernel, spec.stride, spec.padding
            rf = RfParams(
                size=rf.size + (k - 1) * rf.jump,
                jump=rf.jump * s,
                start=rf.start + ((k - 1) / 2 - p) * rf.jump,
            )
        elif spec.kind != RELU:
            rf = RfParams(rf.size, rf.jump, rf.start, whole_image=True)
        out.append(rf)
    return out


def rf_rect(params: RfParams, pos, image, layer: int = -1) -> RfRect:
    """Pixel rectangle of the RF at grid position ``pos`` on an ``image`` of (H, W)."""
    if params.whole_image:
        raise ParameterError("positions after global pooling or dense layers are undefined")
    row, col = (int(v) for v in pos)
    h, w = (int(v) for v in image)
    half = (params.size - 1) / 2
    top = int(np.floor(params.center(row) - half))
    left = int(np.floor(params.center(col) - half))
    rect = Rect(top, left, top + params.size - 1, left + params.size - 1)
    overlap = rect.intersect(Rect.image(h, w)).area
    clipped = 1.0 - overlap / float(params.size * params.size)
    return RfRect(layer, (row, col), *rect, clipped_fraction=clipped)


def _axis_overlaps(params: RfParams, n: int, extent: int) -> np.ndarray:
    half = (params.size - 1) / 2
    tops = np.floor(params.start + np.arange(n) * params.jump - half).astype(np.int64)
    lo = np.maximum(tops, 0)
    hi = np.minimum(tops + params.size - 1, extent - 1)
    return np.maximum(hi - lo + 1, 0)


def coverage_stats(params: RfParams, grid, image, bins: int = 10) -> dict:
    """Clipping statistics over every position of a ``grid`` of (rows, cols).

    Returns ``fully_inside_fraction``, ``mean_clipped_fraction`` and a
    ``histogram`` with ``bins`` equal-width bins over [0, 1] (the last bin is
    closed).  Counts are exact.
    """
    if params.whole_image:
        raise ParameterError("coverage is undefined after global pooling or dense layers")
    rows, cols = (int(v) for v in grid)
    h, w = (int(v) for v in image)
    area = params.size * params.size
    overlap = np.outer(_axis_overlaps(params, rows, h), _axis_overlaps(params, cols, w))
    clipped = 1.0 - overlap / float(area)
    counts, edges = np.histogram(clipped, bins=bins, range=(0.0, 1.0))
    return {
        "fully_inside_fraction": float(np.mean(overlap == area)),
        "mean_clipped_fraction": float(clipped.mean()),
        "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
    }


def layer_table(model: ModelGraph) -> list[dict]:
    """One row per spatial layer (input included) for the ``describe-rf`` output."""
    rfs = compose_rf(model.layers)
    h, w = model.input_shape[1:]
    rows = []
    for i, (name, rf) in enumerate(zip(model.layer_names(), rfs)):
        if rf.whole_image:
            continue
        stats = coverage_stats(rf, model.shapes[i][1:], (h, w))
        rows.append({
            "layer": i,
            "name": name,
            "size": rf.size,
            "jump": rf.jump,
            "start": rf.start,
            "fully_inside_fraction": stats["fully_inside_fraction"],
            "mean_clipped_fraction": stats["mean_clipped_fraction"],
        })
    return rows


def positive_probe_model(input_shape, layers, seed: int = 0) -> ModelGraph:
    """Linearized copy of an architecture with strictly positive weights.

    Positive weights rule out cancellation, so the input gradient of a node
    is nonzero exactly on its connected input pixels.
    """
    model = init_model(input_shape, layers, seed)
    rng = SplitMix64(seed ^ 0x5EED)
    params = {
        name: (0.5 + rng.uniform(v.size)).astype(np.float32).reshape(v.shape)
        if name.endswith(".weight") else np.zeros_like(v)
        for name, v in model.params.items()
    }
    return ModelGraph(input_shape, layers, params, linearize=True)


def empirical_rf_oracle(model: ModelGraph, node: NodeRef) -> Rect:
    """Tight bounding box of the nonzero input gradient of one node."""
    if not model.linearize:
        raise ParameterError("empirical RF oracle needs a linearized model")
    if any(np.any(v <= 0) for k, v in model.params.items() if k.endswith(".weight")):
        raise ParameterError("empirical RF oracle needs strictly positive weights")
    x = np.zeros((1, *model.input_shape), np.float32)
    cache = forward(model, x, upto=node.layer)
    g = backward_injected(model, cache, Injection.node(node))
    support = np.any(g[0] != 0, axis=0)
    if not support.any():
        raise ShapeError(f"node {tuple(node)} has an all-zero input gradient (disconnected)")
    rows = np.flatnonzero(support.any(axis=1))
    cols = np.flatnonzero(support.any(axis=0))
    return Rect(int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))
