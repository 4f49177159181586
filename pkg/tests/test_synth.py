import json

import numpy as np
import pytest

from vnn_brainage.covariance import sample_covariance
from vnn_brainage.dataset import Group, load_cohort, standardize
from vnn_brainage.errors import DataError
from vnn_brainage.synth import (
    GraphonSpec,
    PathologySpec,
    ScaleSpec,
    SiteSpec,
    aggregate,
    block_bounds,
    generate_multiscale,
    generate_site_variant,
    write_sample,
)
from vnn_brainage.training import TrainConfig, train_one
from vnn_brainage.vnn import VnnConfig


@pytest.fixture(scope="module")
def sample():
    return generate_multiscale(GraphonSpec(seed=11), ScaleSpec((50, 100, 300, 500)), 120, PathologySpec())


def test_paired_cohorts(sample):
    assert sorted(sample.cohorts) == [50, 100, 300, 500]
    ids = sample.at(50).ids
    for m, c in sample.cohorts.items():
        assert c.m == m and c.ids == ids and c.scale_tag == f"m{m}"
        np.testing.assert_array_equal(c.ages, sample.at(50).ages)
    assert all(55 <= a <= 85 for a in sample.at(50).ages)


def test_group_proportions(sample):
    counts = sample.at(50).group_counts()
    assert counts == {Group.HC: 72, Group.MCI: 24, Group.AD: 24}


def test_cdr_only_for_patients(sample):
    for s in sample.at(50).subjects:
        assert (s.cdr is None) == (s.group is Group.HC)


def test_deterministic():
    a = generate_multiscale(GraphonSpec(seed=5, fine_size=300), ScaleSpec((30,)), 20, PathologySpec())
    b = generate_multiscale(GraphonSpec(seed=5, fine_size=300), ScaleSpec((30,)), 20, PathologySpec())
    np.testing.assert_array_equal(a.at(30).X, b.at(30).X)
    assert a.ground_truth == b.ground_truth
    c = generate_multiscale(GraphonSpec(seed=6, fine_size=300), ScaleSpec((30,)), 20, PathologySpec())
    assert not np.array_equal(a.at(30).X, c.at(30).X)


def test_block_bounds():
    b = block_bounds(1500, 7)
    sizes = np.diff(b)
    assert b[0] == 0 and b[-1] == 1500 and sizes.max() - sizes.min() <= 1
    with pytest.raises(DataError):
        block_bounds(10, 11)


def test_block_bounds_spread_evenly():
    # every edge lies within one cell of its ideal position i*D/m
    for D, m in [(1500, 200), (1500, 96), (600, 120), (7, 3)]:
        b = block_bounds(D, m)
        assert np.all(np.abs(b - np.arange(m + 1) * D / m) < 1)


def test_nested_reaggregation(sample):
    fine500 = sample.at(500).X
    coarse = aggregate(fine500, np.arange(0, 501, 10))
    np.testing.assert_allclose(coarse, sample.at(50).X, atol=1e-12)


def test_covariance_convergence_through_aggregation(sample):
    # aggregation is linear, so the coarse covariance is A C_fine A^T exactly
    D = sample.fine.shape[1]
    bounds = block_bounds(D, 100)
    A = np.zeros((100, D))
    for i in range(100):
        A[i, bounds[i] : bounds[i + 1]] = 1.0 / (bounds[i + 1] - bounds[i])
    C_fine = sample_covariance(sample.fine).matrix
    C_coarse = sample_covariance(sample.at(100).X).matrix
    assert np.linalg.norm(A @ C_fine @ A.T - C_coarse) <= 1e-10


def test_pathology_ground_truth_monotone(sample):
    gt = sample.ground_truth
    lo, hi = gt["region_cells"]
    region_mean = sample.fine[:, lo:hi].mean(axis=1)
    # remove the age trend before comparing groups
    ages = sample.at(50).ages
    resid = region_mean - np.polyval(np.polyfit(ages, region_mean, 1), ages)
    groups = np.array([g.value for g in sample.at(50).groups])
    means = {g: resid[groups == g].mean() for g in ("HC", "MCI", "AD")}
    assert means["HC"] > means["MCI"] > means["AD"]  # thinner cortex = more pathology
    shifts = {g: np.mean([gt["shift_years"][i] for i, gg in zip(sample.at(50).ids, groups) if gg == g]) for g in means}
    assert shifts["HC"] == 0 < shifts["MCI"] < shifts["AD"]


def test_pathology_spec_validation():
    with pytest.raises(DataError):
        PathologySpec(proportions={"HC": 0.5, "AD": 0.6})
    with pytest.raises(DataError):
        PathologySpec(shifts={"HC": 1.0, "MCI": 2.0, "AD": 3.0})
    with pytest.raises(DataError):
        PathologySpec(shifts={"HC": 0.0, "MCI": 8.0, "AD": 4.0})
    with pytest.raises(DataError):
        generate_multiscale(GraphonSpec(), ScaleSpec((10,)), 5, PathologySpec())
    with pytest.raises(DataError):
        GraphonSpec(length_scale=0.0)


def test_noise_free_features_affine_in_age():
    s = generate_multiscale(
        GraphonSpec(variance=0.0, seed=2), ScaleSpec((50,)), 60, PathologySpec.null(proportions={"HC": 1.0})
    )
    X, ages = s.at(50).X, s.at(50).ages
    A = np.column_stack([ages, np.ones_like(ages)])
    coef, *_ = np.linalg.lstsq(A, X, rcond=None)
    np.testing.assert_allclose(A @ coef, X, atol=1e-12)


def test_noise_free_vnn_recovers_age():
    s = generate_multiscale(
        GraphonSpec(variance=0.0, seed=0), ScaleSpec((50,)), 200, PathologySpec.null(proportions={"HC": 1.0})
    )
    cohort = standardize(s.at(50))[0]
    _, report = train_one(cohort, VnnConfig(widths=(4, 4)), TrainConfig(learning_rate=0.01, epochs=300, ensemble_size=1))
    assert report.test_mae <= 0.2


def test_site_variant_identity(sample):
    site = generate_site_variant(sample, SiteSpec(gain_sd=0.0, offset_sd=0.0), scale=100)
    np.testing.assert_array_equal(site.X, sample.at(100).X)
    assert site.ids == sample.at(100).ids


def test_site_variant_shape_m96(sample):
    site = generate_site_variant(sample, SiteSpec(m=96, seed=3))
    assert site.m == 96 and site.n == sample.at(50).n
    assert site.X.shape == (120, 96) and np.all(np.isfinite(site.X))
    assert site.groups == sample.at(50).groups


def test_site_offsets_shift_feature_means():
    big = generate_multiscale(GraphonSpec(seed=4, fine_size=600), ScaleSpec((30,)), 3000, PathologySpec())
    base = big.at(30)
    site = generate_site_variant(big, SiteSpec(gain_sd=0.1, offset_sd=0.05, seed=8), scale=30)
    # with gain g and offset o, each per-feature mean moves to g*mean + o
    rng = np.random.default_rng(8)
    from vnn_brainage.synth import smooth_profile

    centers = (np.arange(30) + 0.5) / 30
    gain = 1.0 + 0.1 * smooth_profile(centers, 0.2, rng)
    offset = 0.05 * smooth_profile(centers, 0.2, rng)
    np.testing.assert_allclose(site.X.mean(axis=0), gain * base.X.mean(axis=0) + offset, atol=1e-12)
    # sample means of the shift agree with the offsets up to the gain effect and sampling error
    se = base.X.std(axis=0) / np.sqrt(base.n)
    shift = site.X.mean(axis=0) - base.X.mean(axis=0)
    expected = offset + (gain - 1) * base.X.mean(axis=0)
    assert np.all(np.abs(shift - expected) <= 4 * se + 1e-12)


def test_write_sample(tmp_path, sample):
    paths = write_sample(sample, tmp_path / "new" / "dir")
    names = sorted(p.name for p in paths)
    assert names == ["cohort_m100.csv", "cohort_m300.csv", "cohort_m50.csv", "cohort_m500.csv", "ground_truth.json"]
    back = load_cohort(tmp_path / "new" / "dir" / "cohort_m50.csv")
    np.testing.assert_array_equal(back.X, sample.at(50).X)
    gt = json.loads((tmp_path / "new" / "dir" / "ground_truth.json").read_text())
    assert gt["n"] == 120 and gt["scales"] == [50, 100, 300, 500]
