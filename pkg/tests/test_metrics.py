import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vaemmd import metrics as mx

from oracles import (
    flood_fill_components,
    nearest_distances_loops,
    surface_voxels_scan,
)


def random_mask(shape, seed, density=0.1):
    g = np.random.Generator(np.random.Philox(seed))
    return (g.random(shape) < density).astype(np.uint8)


# ----------------------------------------------------------------------
# connected components
# ----------------------------------------------------------------------

def test_single_voxel_component():
    m = np.zeros((5, 5, 5), np.uint8)
    m[2, 2, 2] = 1
    _, n = mx.connected_components(m)
    assert n == 1


def test_corner_adjacency_by_connectivity():
    m = np.zeros((4, 4, 4), np.uint8)
    m[0, 0, 0] = 1
    m[1, 1, 1] = 1
    assert mx.connected_components(m, 26)[1] == 1
    assert mx.connected_components(m, 6)[1] == 2


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("connectivity", [6, 18, 26])
def test_components_match_flood_fill(seed, connectivity):
    m = random_mask((16, 16, 16), seed, density=0.08)
    _, n = mx.connected_components(m, connectivity)
    _, n_oracle = flood_fill_components(m, connectivity)
    assert n == n_oracle


def test_components_labeling_stable():
    m = random_mask((10, 10, 10), 42, density=0.1)
    l1, _ = mx.connected_components(m)
    l2, _ = mx.connected_components(m)
    assert np.array_equal(l1, l2)


def test_non_binary_rejected():
    m = np.full((3, 3, 3), 2, np.uint8)
    with pytest.raises(mx.MetricError, match="binary"):
        mx.connected_components(m)


# ----------------------------------------------------------------------
# lesion-wise detection
# ----------------------------------------------------------------------

def _blob(mask, center, r=1):
    z, y, x = center
    mask[max(0, z - r) : z + r + 1, max(0, y - r) : y + r + 1, max(0, x - r) : x + r + 1] = 1


def test_perfect_prediction_all_ones():
    gt = np.zeros((12, 12, 12), np.uint8)
    _blob(gt, (3, 3, 3))
    _blob(gt, (8, 8, 8))
    _, sens, prec, f1, f2 = mx.lesion_detection_metrics(gt, gt)
    assert sens == prec == f1 == f2 == 1.0


def test_two_of_three_plus_false_positive():
    gt = np.zeros((20, 20, 20), np.uint8)
    _blob(gt, (3, 3, 3))
    _blob(gt, (10, 10, 10))
    _blob(gt, (16, 16, 16))
    pred = np.zeros_like(gt)
    _blob(pred, (3, 3, 3))
    _blob(pred, (10, 10, 10))
    _blob(pred, (16, 3, 16))  # disjoint extra blob
    match, sens, prec, f1, f2 = mx.lesion_detection_metrics(gt, pred)
    assert match.tp == 2 and match.fn == 1 and match.fp == 1
    assert sens == pytest.approx(2 / 3)
    assert prec == pytest.approx(2 / 3)
    assert f1 == pytest.approx(2 / 3)
    assert f2 == pytest.approx(2 / 3)


def test_empty_prediction_conventions():
    gt = np.zeros((8, 8, 8), np.uint8)
    _blob(gt, (4, 4, 4))
    pred = np.zeros_like(gt)
    _, sens, prec, f1, _ = mx.lesion_detection_metrics(gt, pred)
    assert sens == 0.0 and prec == 0.0 and f1 == 0.0


def test_f1_is_harmonic_mean():
    for seed in range(5):
        gt = random_mask((12, 12, 12), 100 + seed, 0.05)
        pred = random_mask((12, 12, 12), 200 + seed, 0.05)
        _, sens, prec, f1, _ = mx.lesion_detection_metrics(gt, pred)
        if prec + sens > 0:
            assert f1 == pytest.approx(2 * prec * sens / (prec + sens), abs=1e-12)


# ----------------------------------------------------------------------
# dice
# ----------------------------------------------------------------------

def test_dice_identical():
    m = random_mask((8, 8, 8), 1, 0.2)
    assert mx.dice(m, m) == 1.0


def test_dice_disjoint():
    a = np.zeros((4, 4, 4), np.uint8)
    b = np.zeros((4, 4, 4), np.uint8)
    a[0, 0, 0] = 1
    b[3, 3, 3] = 1
    assert mx.dice(a, b) == 0.0


def test_dice_half_overlap():
    a = np.zeros((4, 4, 4), np.uint8)
    b = np.zeros((4, 4, 4), np.uint8)
    a[0, 0, 0] = a[0, 0, 1] = 1
    b[0, 0, 1] = b[0, 0, 2] = 1
    assert mx.dice(a, b) == 0.5


def test_dice_both_empty():
    z = np.zeros((4, 4, 4), np.uint8)
    assert mx.dice(z, z) == 1.0


# ----------------------------------------------------------------------
# surfaces
# ----------------------------------------------------------------------

def test_single_voxel_is_own_surface():
    m = np.zeros((5, 5, 5), np.uint8)
    m[2, 2, 2] = 1
    s = mx.surface_extract(m)
    assert s.shape == (1, 3)
    assert np.array_equal(s[0], [2, 2, 2])


def test_solid_cube_surface_count():
    m = np.zeros((8, 8, 8), np.uint8)
    m[2:6, 2:6, 2:6] = 1
    s = mx.surface_extract(m)
    assert len(s) == 4**3 - 2**3


@pytest.mark.parametrize("seed", range(5))
def test_surface_matches_neighborhood_scan(seed):
    m = random_mask((12, 12, 12), 300 + seed, 0.3)
    ours = set(map(tuple, mx.surface_extract(m).astype(int)))
    oracle = set(map(tuple, surface_voxels_scan(m)))
    assert ours == oracle


def test_surface_spacing_scales_coordinates():
    m = np.zeros((4, 4, 4), np.uint8)
    m[1, 2, 3] = 1
    s = mx.surface_extract(m, spacing=(2.0, 0.5, 1.5))
    assert np.allclose(s[0], [2.0, 1.0, 4.5])


# ----------------------------------------------------------------------
# surface dice / hd95
# ----------------------------------------------------------------------

def test_surface_dice_identical():
    m = random_mask((10, 10, 10), 2, 0.2)
    if m.any():
        assert mx.surface_dice(m, m) == 1.0


def test_surface_dice_far_voxels():
    a = np.zeros((10, 10, 10), np.uint8)
    b = np.zeros((10, 10, 10), np.uint8)
    a[0, 0, 0] = 1
    b[5, 0, 0] = 1
    assert mx.surface_dice(a, b, tolerance_mm=1.0) == 0.0


def test_surface_dice_empty_conventions():
    z = np.zeros((4, 4, 4), np.uint8)
    m = z.copy()
    m[1, 1, 1] = 1
    assert mx.surface_dice(z, z) == 1.0
    assert mx.surface_dice(z, m) == 0.0


def test_hd95_identical_zero():
    m = random_mask((8, 8, 8), 3, 0.2)
    if m.any():
        assert mx.hd95(m, m) == 0.0


def test_hd95_two_points():
    a = np.zeros((10, 10, 10), np.uint8)
    b = np.zeros((10, 10, 10), np.uint8)
    a[0, 0, 0] = 1
    b[5, 0, 0] = 1
    assert mx.hd95(a, b) == pytest.approx(5.0)


def test_hd95_empty_is_nan():
    z = np.zeros((4, 4, 4), np.uint8)
    m = z.copy()
    m[0, 0, 0] = 1
    assert math.isnan(mx.hd95(z, m))


@pytest.mark.parametrize("seed", range(8))
def test_surface_metrics_match_all_pairs_oracle(seed):
    spacing = (1.0, 1.3, 0.8)
    a = random_mask((16, 16, 16), 400 + seed, 0.08)
    b = random_mask((16, 16, 16), 500 + seed, 0.08)
    if not (a.any() and b.any()):
        return
    sa = mx.surface_extract(a, spacing)
    sb = mx.surface_extract(b, spacing)
    d_ab = nearest_distances_loops(sa, sb)
    d_ba = nearest_distances_loops(sb, sa)
    # surface dice against oracle distances
    tol = 1.0
    expected_sdice = (int((d_ab <= tol).sum()) + int((d_ba <= tol).sum())) / (len(sa) + len(sb))
    assert mx.surface_dice(a, b, spacing, tol) == pytest.approx(expected_sdice, abs=1e-12)
    # hd95 against oracle pooled percentile
    expected_hd = float(np.percentile(np.concatenate([d_ab, d_ba]), 95, method="linear"))
    assert mx.hd95(a, b, spacing) == pytest.approx(expected_hd, abs=1e-9)


def test_symmetry_and_translation_invariance():
    a = np.zeros((16, 16, 16), np.uint8)
    b = np.zeros((16, 16, 16), np.uint8)
    a[3:6, 3:6, 3:6] = 1
    b[4:8, 4:7, 3:6] = 1
    assert mx.hd95(a, b) == pytest.approx(mx.hd95(b, a))
    assert mx.surface_dice(a, b) == pytest.approx(mx.surface_dice(b, a))
    shift = 5
    a2 = np.roll(a, shift, axis=2)
    b2 = np.roll(b, shift, axis=2)
    assert mx.hd95(a2, b2) == pytest.approx(mx.hd95(a, b))
    assert mx.surface_dice(a2, b2) == pytest.approx(mx.surface_dice(a, b))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_rates_always_in_unit_interval(seed):
    gt = random_mask((8, 8, 8), seed, 0.1)
    pred = random_mask((8, 8, 8), seed + 1, 0.1)
    _, sens, prec, f1, f2 = mx.lesion_detection_metrics(gt, pred)
    d = mx.dice(gt, pred)
    sd = mx.surface_dice(gt, pred)
    for v in (sens, prec, f1, f2, d, sd):
        assert 0.0 <= v <= 1.0


# ----------------------------------------------------------------------
# aggregation
# ----------------------------------------------------------------------

def _case(cid, hd=1.0, **kw):
    base = dict(sensitivity=0.5, precision=0.5, f1=0.5, f2=0.5, dice=0.5, sdice=0.5)
    base.update(kw)
    return mx.CaseMetrics(case_id=cid, hd95_mm=hd, **base)


def test_aggregate_single_case():
    rep = mx.aggregate_cases([_case("a", hd=2.0, f1=0.7)])
    assert rep.mean_f1 == 0.7
    assert rep.median_hd95_mm == 2.0
    assert rep.n_cases == 1


def test_aggregate_median_is_outlier_robust():
    rep = mx.aggregate_cases([_case("a", 1.0), _case("b", 2.0), _case("c", 100.0)])
    assert rep.median_hd95_mm == 2.0


def test_aggregate_excludes_nan_hd95():
    rep = mx.aggregate_cases([_case("a", 1.0), _case("b", math.nan)])
    assert rep.median_hd95_mm == 1.0
    assert rep.n_hd95_undefined == 1


def test_aggregate_means_match_recomputation():
    g = np.random.Generator(np.random.Philox(9))
    cases = [_case(f"c{i}", hd=float(g.random()), f1=float(g.random())) for i in range(7)]
    rep = mx.aggregate_cases(cases)
    assert rep.mean_f1 == pytest.approx(np.mean([c.f1 for c in cases]), abs=1e-12)


# ----------------------------------------------------------------------
# domain classifier probe
# ----------------------------------------------------------------------

def test_classifier_separable_clusters():
    g = np.random.Generator(np.random.Philox(10))
    for seed in range(5):
        a = g.standard_normal((20, 4)) + 10.0
        b = g.standard_normal((20, 4)) - 10.0
        feats = np.vstack([a, b])
        labels = ["a"] * 20 + ["b"] * 20
        rep = mx.logistic_domain_classifier(feats, labels, seed=seed)
        assert rep.accuracy == 1.0


def test_classifier_permuted_labels_near_chance():
    g = np.random.Generator(np.random.Philox(11))
    feats = g.standard_normal((120, 4))
    labels = ["a"] * 60 + ["b"] * 60
    perm = g.permutation(120)
    labels = [labels[i] for i in perm]
    rep = mx.logistic_domain_classifier(feats, labels, seed=0)
    n_eval = int(rep.confusion.sum())
    sigma = math.sqrt(0.25 / n_eval)
    assert abs(rep.accuracy - 0.5) <= 3 * sigma + 1e-9


def test_classifier_confusion_consistency():
    g = np.random.Generator(np.random.Philox(12))
    feats = np.vstack([g.standard_normal((10, 3)) + 5, g.standard_normal((10, 3)) - 5])
    labels = ["x"] * 10 + ["y"] * 10
    rep = mx.logistic_domain_classifier(feats, labels, seed=1)
    assert rep.accuracy == pytest.approx(np.trace(rep.confusion) / rep.confusion.sum())
    assert rep.per_domain_counts == {d: int(rep.confusion[i].sum()) for i, d in enumerate(rep.domains)}


def test_classifier_single_domain_rejected():
    with pytest.raises(mx.MetricError):
        mx.logistic_domain_classifier(np.zeros((4, 2)), ["a"] * 4)


# ----------------------------------------------------------------------
# embedding projection
# ----------------------------------------------------------------------

def test_pca_planar_points_exact():
    g = np.random.Generator(np.random.Philox(13))
    basis = g.standard_normal((2, 6))
    coeffs = g.standard_normal((15, 2))
    x = coeffs @ basis
    proj = mx.embed_project(x, method="pca")
    # planar data: the top-2 subspace reconstructs exactly, and the
    # projection preserves all the centered norm (sign-invariant checks)
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    recon = xc @ vt[:2].T @ vt[:2]
    assert np.allclose(recon, xc, atol=1e-9)
    assert np.allclose(np.linalg.norm(proj, axis=1), np.linalg.norm(xc, axis=1), atol=1e-9)


def test_pca_duplicates_coincide():
    x = np.tile(np.arange(4.0), (6, 1))
    x[3:] += 1.0
    proj = mx.embed_project(x, method="pca")
    assert np.allclose(proj[0], proj[1])
    assert np.allclose(proj[3], proj[4])


def test_tsne_separated_clusters_positive_silhouette():
    g = np.random.Generator(np.random.Philox(14))
    a = g.standard_normal((12, 8)) + 12.0
    b = g.standard_normal((12, 8)) - 12.0
    x = np.vstack([a, b])
    for seed in range(3):
        proj = mx.embed_project(x, method="tsne", seed=seed)
        # silhouette via cluster centroids
        ca, cb = proj[:12].mean(axis=0), proj[12:].mean(axis=0)
        within = np.linalg.norm(proj[:12] - ca, axis=1).mean() + np.linalg.norm(proj[12:] - cb, axis=1).mean()
        between = np.linalg.norm(ca - cb)
        assert between > within / 2


def test_embedding_too_few_cases():
    with pytest.raises(mx.MetricError):
        mx.embed_project(np.zeros((2, 3)))
