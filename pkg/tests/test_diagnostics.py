import numpy as np
import pytest
from scipy.stats import special_ortho_group

from mrsae.data import EmbeddingMatrix
from mrsae.diagnostics import effective_dim, geometry_report, negative_fraction, radial_eta2


def test_nonnegative_matrix(rng):
    assert negative_fraction(np.abs(rng.standard_normal((20, 5)))) == 0.0


def test_negative_fraction_counts_strict():
    assert negative_fraction(np.array([[-1.0, 0.0], [2.0, -0.0]])) == 0.25


def test_norm_only_classes(rng):
    base = rng.standard_normal((200, 8))
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    classes = np.repeat([0, 1, 2], [70, 70, 60])
    scale = np.array([1.0, 3.0, 6.0])[classes] * (1 + 0.01 * rng.standard_normal(200))
    assert radial_eta2(base * scale[:, None], classes) > 0.99


def test_same_norms_give_zero_eta(rng):
    X = rng.standard_normal((50, 4))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    X[0] *= 1.5  # one off-norm row so total variance is nonzero
    classes = np.r_[[0], np.arange(49) % 2]
    assert radial_eta2(X, classes) < 0.1


def test_isotropic_effective_dim():
    r = np.random.default_rng(0)
    for d in (4, 16, 32):
        X = r.standard_normal((50 * d, d))
        assert effective_dim(X) == pytest.approx(d, rel=0.10)


def test_rank_one_effective_dim(rng):
    X = np.outer(rng.standard_normal(100), rng.standard_normal(6))
    assert effective_dim(X) == pytest.approx(1.0)


def test_invariances(rng):
    X = rng.standard_normal((120, 6)) + 0.3
    classes = rng.integers(0, 3, 120)
    Q = special_ortho_group.rvs(6, random_state=1)
    perm = rng.permutation(120)
    assert negative_fraction(X[perm]) == negative_fraction(X)
    assert radial_eta2(X @ Q, classes) == pytest.approx(radial_eta2(X, classes), abs=1e-12)
    assert effective_dim(7.5 * X) == pytest.approx(effective_dim(X), rel=1e-12)


def test_single_class_flag(rng):
    rep = geometry_report(EmbeddingMatrix(rng.standard_normal((10, 3)), [f"s{i}" for i in range(10)]), np.zeros(10))
    assert not rep.eta2_defined and rep.to_dict()["radial_eta2"] is None


def test_report_ranges(tmp_path, small_cohort):
    H, cov, _ = small_cohort
    rep = geometry_report(H, cov.diagnosis)
    assert 0 <= rep.negative_fraction <= 1 and 0 <= rep.radial_eta2 <= 1 and 1 <= rep.effective_dim <= H.d
    rep.to_json(str(tmp_path / "g.json"), provenance={"seed": 0})
    assert (tmp_path / "g.json").exists()
