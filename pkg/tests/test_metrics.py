import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcss import metrics
from mcss.errors import DegenerateGeometryError, ValidationError

from conftest import random_pose
from oracles import golden_section, naive_mpjpe, random_rotation


def test_mpjpe_identity(rng):
    p = random_pose(rng)
    assert metrics.mpjpe(p, p) == 0


def test_mpjpe_uniform_offset(rng):
    p = random_pose(rng)
    assert metrics.mpjpe(p, p + [3, 0, 4]) == pytest.approx(5.0, abs=1e-12)


def test_mpjpe_matches_loop(rng):
    for _ in range(20):
        p, q = random_pose(rng), random_pose(rng)
        assert abs(metrics.mpjpe(p, q) - naive_mpjpe(p.tolist(), q.tolist())) < 1e-12
        assert metrics.mpjpe(p, q) == metrics.mpjpe(q, p)


def test_mpjpe_shape_mismatch():
    with pytest.raises(ValidationError):
        metrics.mpjpe(np.zeros((16, 3)), np.zeros((15, 3)))


def test_nmpjpe_exact_rescale(rng):
    gt = random_pose(rng)
    assert metrics.n_mpjpe(2 * gt, gt) < 1e-12
    assert metrics.n_mpjpe(gt, gt) == 0


def test_nmpjpe_zero_prediction():
    with pytest.raises(DegenerateGeometryError):
        metrics.n_mpjpe(np.zeros((16, 3)), np.ones((16, 3)))


def test_scale_matches_golden_section(rng):
    # the scale is defined as the least-squares optimum, so the oracle minimises squared error
    for _ in range(20):
        pred, gt = random_pose(rng), random_pose(rng)
        sq = lambda s: float(np.sum((s * pred - gt) ** 2))
        assert abs(metrics.optimal_scale(pred, gt) - golden_section(sq, -5.0, 5.0)) < 1e-6


def _similarity(rng, p):
    R = random_rotation(rng)
    s = rng.uniform(0.3, 3.0)
    t = rng.normal(size=3) * 100
    return s, R, t, s * p @ R.T + t


def test_procrustes_exact_recovery(rng):
    for _ in range(20):
        p = random_pose(rng)
        s, R, t, g = _similarity(rng, p)
        T = metrics.procrustes(p, g)
        assert abs(T.scale - s) < 1e-9
        assert np.abs(T.rotation - R).max() < 1e-9
        assert np.abs(T.translation - t).max() < 1e-9
        assert metrics.mpjpe(T.apply(p), g) < 1e-9


def test_procrustes_excludes_reflection(rng):
    p = random_pose(rng)
    mirror = p * [-1, 1, 1]
    T = metrics.procrustes(mirror, p)
    assert abs(np.linalg.det(T.rotation) - 1) < 1e-9
    assert metrics.pa_mpjpe(mirror, p) > 1.0


def test_procrustes_beats_random_transforms(rng):
    p, g = random_pose(rng), random_pose(rng)
    T = metrics.procrustes(p, g)
    best = np.sum((T.apply(p) - g) ** 2)
    for _ in range(2000):
        R = random_rotation(rng)
        s = rng.uniform(0.01, 3.0)
        t = rng.normal(size=3) * 100
        assert best <= np.sum((s * p @ R.T + t - g) ** 2)


@pytest.mark.parametrize("points", [
    np.zeros((16, 3)),
    np.outer(np.arange(16.0), [1.0, 2.0, 3.0]),
])
def test_procrustes_degenerate(rng, points):
    with pytest.raises(DegenerateGeometryError):
        metrics.procrustes(points, random_pose(rng))
    with pytest.raises(DegenerateGeometryError):
        metrics.pa_mpjpe(random_pose(rng), points)


def test_pa_mpjpe_absorbs_similarity(rng):
    for _ in range(50):
        gt = random_pose(rng)
        *_, pred = _similarity(rng, gt)
        assert metrics.pa_mpjpe(pred, gt) < 1e-8
    assert metrics.pa_mpjpe(gt, gt) < 1e-8


def test_pa_mpjpe_below_mpjpe(rng):
    for _ in range(200):
        p, g = random_pose(rng), random_pose(rng)
        assert metrics.pa_mpjpe(p, g) <= metrics.mpjpe(p, g) + 1e-9


def test_batched_matches_single(rng):
    P = np.stack([random_pose(rng) for _ in range(6)])
    G = np.stack([random_pose(rng) for _ in range(6)])
    pa = metrics.pa_mpjpe(P, G)
    nm = metrics.n_mpjpe(P, G)
    for k in range(6):
        assert pa[k] == pytest.approx(metrics.pa_mpjpe(P[k], G[k]), abs=1e-10)
        assert nm[k] == pytest.approx(metrics.n_mpjpe(P[k], G[k]), abs=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pa_invariant_to_similarity_of_prediction(seed):
    rng = np.random.default_rng(seed)
    a, b = random_pose(rng), random_pose(rng)
    *_, ta = _similarity(rng, a)
    assert abs(metrics.pa_mpjpe(a, b) - metrics.pa_mpjpe(ta, b)) < 1e-8


def test_rotation_stays_proper(rng):
    P = rng.normal(size=(100000, 16, 3))
    G = rng.normal(size=(100000, 16, 3))
    _, R, _ = metrics._umeyama(P, G)
    det = np.linalg.det(R)
    assert np.all(np.abs(det - 1) <= 1e-9)
