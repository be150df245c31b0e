import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import imagimap.eval_bench as eb
from imagimap.errors import ConfigError, DimensionError, InvariantViolation, ParameterError
from imagimap.eval_bench import (METHODS, BenchmarkReport, ViewpointSet, correct_pixels, iou,
                                 nearest_valid_cell, resolve_viewpoint, run_benchmark, run_episode,
                                 sparse_viewpoints)
from imagimap.imagination import ImaginationUnit, SceneData
from imagimap.mapper import MapperConfig
from imagimap.scene_sim import CLASS_IDS, SensorSpec, generate_scene

SMALL = (4, 8, 8, 4)


def enumerate_oracle(H, W, res, w, seed, valid):
    """Independent transcription of the viewpoint algorithm."""
    rng = np.random.default_rng(seed)
    ox = rng.uniform(-w / 2, w / 2)
    oy = rng.uniform(-w / 2, w / 2)
    out = []
    ny = int(math.ceil(H * res / w - 1e-12))
    nx = int(math.ceil(W * res / w - 1e-12))
    for iy in range(ny):
        for ix in range(nx):
            px, py = ix * w + ox, iy * w + oy
            r, c = int(py // res), int(px // res)
            if 0 <= r < H and 0 <= c < W and valid[r, c]:
                out.append((px + rng.uniform(-w / 6, w / 6), py + rng.uniform(-w / 6, w / 6)))
    return out


# --- Algorithm 1 ---------------------------------------------------------------

def test_empty_map_gives_no_points():
    assert sparse_viewpoints(np.zeros((50, 50), bool), 0.1, 1.0, 0).points == []


def test_fully_valid_ten_metre_map():
    valid = np.ones((100, 100), bool)
    for seed in range(50):
        vs = sparse_viewpoints(valid, 0.1, 3.0, seed)
        assert 9 <= len(vs.points) <= 16
        for (px, py), (nx, ny) in zip(vs.points, vs.nodes):
            assert math.hypot(px - nx, py - ny) <= 3.0 / 2 * math.sqrt(2) + 3.0 / 6 * math.sqrt(2)
            assert abs(px - nx) <= 1.5 + 0.5 and abs(py - ny) <= 1.5 + 0.5


def test_matches_enumeration_oracle():
    rng = np.random.default_rng(0)
    for seed in range(30):
        valid = rng.random((70, 90)) < 0.7
        for w in (3.0, 2.5, 2.0):
            got = sparse_viewpoints(valid, 0.1, w, seed).points
            want = enumerate_oracle(70, 90, 0.1, w, seed, valid)
            assert np.allclose(got, want) and len(got) == len(want)


def test_viewpoints_deterministic_and_validated():
    valid = np.ones((60, 60), bool)
    assert sparse_viewpoints(valid, 0.1, 2.0, 7).points == sparse_viewpoints(valid, 0.1, 2.0, 7).points
    with pytest.raises(ParameterError):
        sparse_viewpoints(valid, 0.1, 0.0, 1)


def test_nearest_valid_cell_minimises_grid_distance():
    rng = np.random.default_rng(1)
    for _ in range(30):
        valid = rng.random((25, 25)) < 0.1
        if not valid.any():
            continue
        start = tuple(rng.integers(0, 25, 2))
        got = nearest_valid_cell(valid, start)
        cells = np.argwhere(valid)
        best = np.abs(cells - np.array(start)).sum(axis=1).min()
        assert valid[got] and abs(got[0] - start[0]) + abs(got[1] - start[1]) == best
    assert nearest_valid_cell(np.zeros((5, 5), bool), (2, 2)) is None


def test_resolve_viewpoint():
    valid = np.zeros((10, 10), bool)
    valid[5, 7] = True
    assert resolve_viewpoint(valid, 0.1, (0.75, 0.55)) == (0.75, 0.55)
    assert resolve_viewpoint(valid, 0.1, (0.15, 0.15)) == pytest.approx((0.75, 0.55))


# --- metrics -------------------------------------------------------------------

def test_iou_examples():
    gt = np.zeros((10, 10), bool)
    gt[2:6, 2:6] = True
    assert iou(gt.astype(float), gt) == 1.0
    other = np.zeros((10, 10))
    other[7:9, 7:9] = 1
    assert iou(other, gt) == 0.0
    half = np.zeros((10, 10))
    half[2:4, 2:6] = 1
    assert iou(half, gt) == 0.5
    assert iou(np.zeros((4, 4)), np.zeros((4, 4), bool)) == 1.0
    assert iou(np.zeros((4, 4)), np.ones((4, 4), bool)) == 0.0
    with pytest.raises(DimensionError):
        iou(np.zeros((3, 3)), np.zeros((4, 4)))


def test_correct_pixels_examples():
    rng = np.random.default_rng(2)
    gt = rng.random((20, 20)) < 0.3
    assert correct_pixels(np.zeros((20, 20)), gt) == 0
    assert correct_pixels(gt.astype(float), gt) == gt.sum()
    for _ in range(50):
        p = rng.random((20, 20))
        g = rng.random((20, 20)) < 0.3
        count = sum(1 for i in range(20) for j in range(20) if p[i, j] > 0.5 and g[i, j])
        assert correct_pixels(p, g) == count


@settings(max_examples=50, deadline=None)
@given(arrays(bool, (12, 12)), arrays(bool, (12, 12)))
def test_metric_properties(a, b):
    assert iou(a.astype(float), b) == iou(b.astype(float), a)
    assert 0.0 <= iou(a.astype(float), b) <= 1.0
    assert correct_pixels(a.astype(float), b) <= b.sum()


# --- episodes and sweeps ---------------------------------------------------------

@pytest.fixture(scope="module")
def bench_setup():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        scenes = [SceneData.build(generate_scene(1_000_000 + i)) for i in range(2)]
    rng = np.random.default_rng(3)
    units = {k: ImaginationUnit.create(k, rng, SMALL) for k in CLASS_IDS}
    return scenes, units


def test_zero_viewpoints_gives_empty_maps(bench_setup):
    scenes, units = bench_setup
    ep = run_episode(scenes[0], ViewpointSet([], [], 3.0, 0), units, SensorSpec(), MapperConfig(), 0)
    for m in METHODS:
        assert not ep.maps[m].seen.values.any()
        assert all(not l.values.any() for l in ep.maps[m].class_layers.values())


def test_episode_inclusions_and_determinism(bench_setup):
    scenes, units = bench_setup
    data = scenes[0]
    vps = sparse_viewpoints(data.valid, 0.1, 2.0, 5)
    a = run_episode(data, vps, units, SensorSpec(), MapperConfig(), 11)
    b = run_episode(data, vps, units, SensorSpec(), MapperConfig(), 11)
    assert a.invalid_cells == 0 and len(a.poses) == 2 * len(vps.points)
    for k in CLASS_IDS:
        only = a.maps["imagination_seen_only"].class_layers[k].values
        full = a.maps["imagination"].class_layers[k].values
        assert (only <= full + 1e-7).all()
        for m in METHODS:
            assert np.array_equal(a.maps[m].class_layers[k].values, b.maps[m].class_layers[k].values)


def test_more_viewpoints_never_lower_baseline_pixels(bench_setup):
    scenes, units = bench_setup
    data = scenes[1]
    full = sparse_viewpoints(data.valid, 0.1, 1.5, 2)
    assert len(full.points) >= 4
    prev = None
    for n in range(1, len(full.points) + 1):
        sub = ViewpointSet(full.points[:n], full.nodes[:n], 1.5, 2)
        ep = run_episode(data, sub, units, SensorSpec(), MapperConfig(), 4)
        counts = [correct_pixels(ep.maps["seg_gt"].class_layers[k], data.gt[k]) for k in CLASS_IDS]
        if prev is not None:
            assert all(c >= p for c, p in zip(counts, prev))
        prev = counts


def test_benchmark_rows_aggregate_and_jobs(bench_setup):
    scenes, units = bench_setup
    rep = run_benchmark(scenes, units, cell_widths=(3.0, 2.0), sets_per_scene=2, seed=1)
    assert len(rep.rows) == 2 * 2 * 2 * 3 * 3
    assert all(0 <= r.iou <= 1 and r.correct_pixels >= 0 for r in rep.rows)
    again = run_benchmark(scenes, units, cell_widths=(3.0, 2.0), sets_per_scene=2, seed=1, jobs=2)
    assert rep.rows == again.rows
    # independent aggregation pass
    for (c, w, m), v in rep.aggregate().items():
        vals = [r.iou for r in rep.rows if (r.class_name, r.cell_width, r.method) == (c, w, m)]
        assert v["n"] == len(vals) and v["iou_mean"] == pytest.approx(sum(vals) / len(vals), rel=1e-12)
    assert "seg_gt" in rep.table() and '"invalid_cells": 0' in rep.aggregate_json()


def test_benchmark_csv(bench_setup, tmp_path):
    scenes, units = bench_setup
    rep = run_benchmark(scenes[:1], units, cell_widths=(3.0,), sets_per_scene=1, seed=0)
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "scene,set,class,cell_width,method,iou,correct_pixels"
    assert len(lines) == 1 + 3 * 3


def test_train_eval_overlap_rejected(bench_setup):
    scenes, units = bench_setup
    with pytest.raises(ConfigError):
        run_benchmark(scenes, units, cell_widths=(3.0,), sets_per_scene=1, train_seeds=[1_000_000])


def test_invalid_cells_raise(bench_setup, monkeypatch):
    scenes, units = bench_setup

    def leaky(unit, observations, cfg, batch_size=32):
        x = np.stack([o.channels(unit.class_id) for o in observations])
        return list(unit.forward(x).astype(np.float32))

    monkeypatch.setattr(eb, "imagine_valid_batch", leaky)
    with pytest.raises(InvariantViolation):
        run_benchmark(scenes[:1], units, cell_widths=(3.0,), sets_per_scene=1)
    rep = run_benchmark(scenes[:1], units, cell_widths=(3.0,), sets_per_scene=1, strict=False)
    assert rep.invalid_cells > 0
