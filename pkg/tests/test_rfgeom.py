import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfdream import netgraph as ng
from rfdream.exceptions import ParameterError, ShapeError
from rfdream.netgraph import LayerSpec, NodeRef
from rfdream.rfgeom import (RfParams, compose_rf, coverage_stats, empirical_rf_oracle, layer_table,
                            positive_probe_model, rf_rect)
from rfdream.tensor import Rect, SplitMix64


def recurrence_by_hand(chain):
    size, jump, start = 1, 1, 0.0
    for k, s, p in chain:
        size, jump, start = size + (k - 1) * jump, jump * s, start + ((k - 1) / 2 - p) * jump
    return size, jump, start


def test_single_conv():
    rf = compose_rf([LayerSpec.conv(4, 3, 1, 1)])
    assert rf[1] == RfParams(3, 1, 0.0)


def test_rfnet64_top_conv():
    layers = ng.rfnet64_layers()
    rfs = compose_rf(layers, (64, 64))
    assert (rfs[14].size, rfs[14].jump, rfs[14].start) == (70, 8, 3.5)
    chain = [(3, 1, 1), (2, 2, 0)] * 3 + [(3, 1, 1)] * 3
    assert recurrence_by_hand(chain) == (70, 8, 3.5)
    # relu leaves the parameters unchanged; global pooling ends the spatial chain
    assert rfs[15] == rfs[14]
    assert rfs[16].whole_image and rfs[17].whole_image


def test_whole_image_positions_rejected():
    rfs = compose_rf(ng.rfnet64_layers())
    with pytest.raises(ParameterError):
        rf_rect(rfs[16], (0, 0), (64, 64))
    with pytest.raises(ParameterError):
        coverage_stats(rfs[17], (1, 1), (64, 64))


def test_empty_output_rejected():
    with pytest.raises(ShapeError):
        compose_rf([LayerSpec.conv(1, 7, 1, 0)], (4, 4))


def test_rect_interior():
    r = rf_rect(RfParams(3, 1, 0.0), (5, 5), (64, 64))
    assert (r.top, r.left, r.bottom, r.right) == (4, 4, 6, 6)
    assert r.clipped_fraction == 0.0


def test_rect_corner():
    r = rf_rect(RfParams(5, 1, 0.0), (0, 0), (64, 64))
    assert (r.top, r.left, r.bottom, r.right) == (-2, -2, 2, 2)
    assert r.clipped_fraction == pytest.approx(16 / 25)
    assert r.in_image(64, 64) == Rect(0, 0, 2, 2)


def test_rect_off_image():
    r = rf_rect(RfParams(3, 4, 0.0), (30, 0), (64, 64))
    assert r.top > 63
    assert r.clipped_fraction == 1.0


def test_half_integer_start_renders_with_floor():
    # even kernel: centre at a half-integer, the rectangle is still size x size
    rf = compose_rf([LayerSpec.conv(1, 2, 2, 0)])[1]
    assert rf.start == 0.5
    r = rf_rect(rf, (3, 0), (8, 8))
    assert (r.top, r.bottom) == (6, 7)


def test_coverage_layer_one():
    stats = coverage_stats(RfParams(3, 1, 0.0), (64, 64), (64, 64))
    assert stats["fully_inside_fraction"] == pytest.approx(62 * 62 / 64**2)
    assert sum(stats["histogram"]["counts"]) == 64 * 64


def test_coverage_bigger_than_image():
    rfs = compose_rf(ng.rfnet64_layers())
    stats = coverage_stats(rfs[14], (8, 8), (64, 64))
    assert stats["fully_inside_fraction"] == 0.0
    assert stats["mean_clipped_fraction"] > 0.0


def test_coverage_identity():
    stats = coverage_stats(RfParams(1, 1, 0.0), (10, 12), (10, 12))
    assert stats["fully_inside_fraction"] == 1.0
    assert stats["mean_clipped_fraction"] == 0.0


def test_coverage_matches_rf_rect_per_position():
    rf = compose_rf(ng.rfnet64_layers())[7]
    grid = (16, 16)
    stats = coverage_stats(rf, grid, (64, 64), bins=5)
    fracs = [rf_rect(rf, (r, c), (64, 64)).clipped_fraction for r in range(16) for c in range(16)]
    assert stats["mean_clipped_fraction"] == pytest.approx(np.mean(fracs), abs=1e-12)
    assert stats["fully_inside_fraction"] == np.mean([f == 0.0 for f in fracs])
    assert stats["histogram"]["counts"] == np.histogram(fracs, bins=5, range=(0, 1))[0].tolist()


def test_layer_table_rows():
    rows = layer_table(ng.build("rfnet-64", 4, 0))
    by_layer = {r["layer"]: r for r in rows}
    assert by_layer[0]["size"] == 1 and by_layer[0]["name"] == "input"
    assert by_layer[14]["size"] == 70 and by_layer[14]["fully_inside_fraction"] == 0.0
    assert 16 not in by_layer
    sizes = [r["size"] for r in rows]
    assert sizes == sorted(sizes)


def random_chain(seed):
    """Spatial chain with no gaps (k >= s) and no truncated outputs.

    Past the first spatial layer padding is also kept below the kernel, so
    that no node is wired to padding alone.  Under these conditions the
    gradient support of a node fills its geometric rectangle and the bounding
    box comparison is exact.
    """
    rng = SplitMix64(seed)
    while True:
        size = 16 + rng.below(25)
        depth = 1 + rng.below(6)
        layers, h = [], size
        for _ in range(50):
            if len([l for l in layers if l.kind != "relu"]) == depth:
                break
            if layers and rng.below(4) == 0:
                layers.append(LayerSpec.relu())
                continue
            pool = rng.below(3) == 0
            k = (1, 3, 5, 7)[rng.below(4)]
            s = 1 + rng.below(2)
            p = rng.below(min(4, k) if pool else 4)
            n = h + 2 * p - k
            if k < s or n < 0 or n % s or (layers and p > k - 1):
                continue
            layers.append(LayerSpec.maxpool(k, s, p) if pool else LayerSpec.conv(1 + rng.below(2), k, s, p))
            h = n // s + 1
        else:
            continue
        if len([l for l in layers if l.kind != "relu"]) == depth:
            return size, layers


@pytest.mark.parametrize("seed", range(24))
def test_oracle_matches_arithmetic(seed):
    size, layers = random_chain(seed)
    model = positive_probe_model((1, size, size), layers, seed)
    top = model.n_layers
    rf = compose_rf(layers, (size, size))[top]
    _, gh, gw = model.shapes[top]
    rng = SplitMix64(seed + 1000)
    positions = {(0, 0), (0, gw - 1), (gh - 1, 0), (gh - 1, gw - 1)}
    while len(positions) < 9 and len(positions) < gh * gw:
        positions.add((rng.below(gh), rng.below(gw)))
    for row, col in sorted(positions):
        expected = rf_rect(rf, (row, col), (size, size)).in_image(size, size)
        node = NodeRef(top, 0, row, col)
        if expected.empty:
            with pytest.raises(ShapeError):
                empirical_rf_oracle(model, node)
        else:
            assert empirical_rf_oracle(model, node) == expected, (layers, row, col)


def test_oracle_rfnet64_top_centre():
    layers = ng.rfnet64_layers()[:14]
    model = positive_probe_model((1, 64, 64), layers, 3)
    rf = compose_rf(layers)[14]
    for pos in [(0, 0), (3, 4), (7, 7)]:
        expected = rf_rect(rf, pos, (64, 64)).in_image(64, 64)
        assert empirical_rf_oracle(model, NodeRef(14, 0, *pos)) == expected


def test_oracle_requires_linearized_positive_model():
    model = ng.init_model((1, 8, 8), [LayerSpec.conv(1, 3, 1, 1)], 0)
    with pytest.raises(ParameterError):
        empirical_rf_oracle(model, NodeRef(1, 0, 2, 2))
    with pytest.raises(ParameterError):
        empirical_rf_oracle(model.linearized(), NodeRef(1, 0, 2, 2))


@settings(max_examples=50, deadline=None)
@given(chain=st.lists(st.tuples(st.sampled_from([1, 3, 5, 7]), st.integers(1, 2), st.integers(0, 3)),
                      min_size=1, max_size=6))
def test_size_and_jump_monotone(chain):
    layers = [LayerSpec.conv(1, k, s, p) for k, s, p in chain]
    rfs = compose_rf(layers)
    assert all(b.size >= a.size for a, b in zip(rfs, rfs[1:]))
    assert all(b.jump >= a.jump for a, b in zip(rfs, rfs[1:]))
    assert (rfs[-1].size, rfs[-1].jump, rfs[-1].start) == recurrence_by_hand(chain)


@settings(max_examples=50, deadline=None)
@given(size=st.integers(1, 80), jump=st.integers(1, 8), start=st.integers(-8, 8),
       row=st.integers(-5, 20), col=st.integers(-5, 20), h=st.integers(1, 40), w=st.integers(1, 40))
def test_clipped_zero_iff_inside(size, jump, start, row, col, h, w):
    r = rf_rect(RfParams(size, jump, float(start)), (row, col), (h, w))
    inside = r.top >= 0 and r.left >= 0 and r.bottom < h and r.right < w
    assert (r.clipped_fraction == 0.0) == inside
    assert 0.0 <= r.clipped_fraction <= 1.0


@pytest.mark.parametrize("layer", [1, 4, 7, 10, 12, 14])
def test_clipping_symmetric_under_rotation(layer):
    # rfnet-64 is symmetric: padding (k-1)/2 for every conv, pools tile exactly
    rf = compose_rf(ng.rfnet64_layers())[layer]
    _, gh, gw = ng.build("rfnet-64").shapes[layer]
    for row in range(gh):
        for col in range(gw):
            a = rf_rect(rf, (row, col), (64, 64)).clipped_fraction
            b = rf_rect(rf, (gh - 1 - row, gw - 1 - col), (64, 64)).clipped_fraction
            assert a == pytest.approx(b, abs=1e-12)
