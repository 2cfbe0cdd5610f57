import math

import numpy as np
import pytest
from scipy import stats

from subriemann_gibbs.cc_distance import distance
from subriemann_gibbs.heisenberg import Observable
from subriemann_gibbs.inequality_lab import PASS
from subriemann_gibbs.single_site import (
    BoundarySummary,
    ContractViolation,
    PotentialSpec,
    constant_interaction,
    cosine_interaction,
    default_trial_family,
    full_potential,
    lsq_estimate,
    partition_importance,
    partition_quadrature,
    reduced_potential,
    rothaus_check,
    sample_exact,
    sample_reduced,
    sample_site,
    sg_estimate,
    sphere_parametrisation,
    ubound_check,
    _rng,
)


def unit_ball_volume(n=2_000_000, seed=0):
    """Monte Carlo volume of {d <= 1}; the ball sits in [-1,1]^2 x [-1/(2 pi), 1/(2 pi)]."""
    rng = np.random.default_rng(seed)
    y = rng.uniform(-1, 1, size=(n, 3))
    y[:, 2] /= 2 * math.pi
    frac = np.mean(distance(y) <= 1.0)
    return 4.0 / math.pi * frac, 4.0 / math.pi * math.sqrt(frac * (1 - frac) / n)


# --------------------------------------------------------------------------
# potentials


def test_reduced_potential_examples():
    spec = PotentialSpec(alpha=1.0, p=2.0)
    assert reduced_potential(spec, (0, 0, 0), BoundarySummary(0.0)) == 0.0
    assert reduced_potential(spec, (3, 4, 0), BoundarySummary(0.0)) == pytest.approx(25.0)
    spec = PotentialSpec(alpha=1.0, p=2.0, epsilon=0.1, rho=1.0, N=1)
    # 25 + 2*1*0.1*25 + 2*0.1*1*5*S with S = 2
    assert reduced_potential(spec, (3, 4, 0), BoundarySummary(2.0)) == pytest.approx(32.0)


def test_full_minus_reduced_is_boundary_constant():
    spec = PotentialSpec(alpha=0.7, p=3.0, epsilon=0.2, rho=1.5, N=2)
    nb = np.random.default_rng(0).normal(size=(4, 3))
    b = BoundarySummary.from_neighbors(nb)
    x = np.random.default_rng(1).normal(size=(50, 3))
    gap = full_potential(spec, x, b) - reduced_potential(spec, x, b)
    expect = spec.epsilon * spec.rho ** 2 * np.sum(distance(nb) ** 2)
    np.testing.assert_allclose(gap, expect, rtol=1e-10)


def test_constant_interaction_shifts_by_theta_k_M():
    base = PotentialSpec(alpha=1.0, epsilon=0.1, rho=1.0, N=2)
    spec = PotentialSpec(alpha=1.0, epsilon=0.1, rho=1.0, N=2, theta=0.3, M=2.0)
    nb = np.random.default_rng(2).normal(size=(4, 3))
    x = np.random.default_rng(3).normal(size=(20, 3))
    diff = full_potential(spec, x, nb, constant_interaction(2.0)) - full_potential(base, x, nb)
    np.testing.assert_allclose(diff, 2 * spec.N * 0.3 * 2.0)


def test_interaction_bound_contract():
    spec = PotentialSpec(alpha=1.0, theta=0.5, M=1.0)
    with pytest.raises(ContractViolation):
        full_potential(spec, np.zeros(3), np.ones((2, 3)), constant_interaction(2.0))
    liar = cosine_interaction(1.0)
    liar = type(liar)(lambda x, y: 5.0 * np.cos(x[..., 0] - y[..., 0]), 1.0, "liar")
    with pytest.raises(ContractViolation):
        full_potential(spec, np.zeros(3), np.zeros((2, 3)), liar)


@pytest.mark.parametrize(
    "kw",
    [dict(alpha=0.0), dict(alpha=1.0, p=1.5), dict(alpha=1.0, N=0), dict(alpha=1.0, M=-1.0),
     dict(alpha=1.0, epsilon=0.1, rho=-1.0), dict(alpha=1.0, epsilon=-0.5, rho=-1.0, N=1)],
)
def test_potential_spec_validation(kw):
    with pytest.raises(ValueError):
        PotentialSpec(**kw)


def test_conjugate_exponent():
    assert PotentialSpec(alpha=1.0, p=3.0).q == pytest.approx(1.5)
    with pytest.raises(TypeError):
        PotentialSpec(alpha=1.0, q=2.0)


def test_boundary_summary_consistency():
    with pytest.raises(ValueError):
        BoundarySummary(-1.0)
    with pytest.raises(ValueError):
        BoundarySummary(1.0, np.array([[3.0, 4.0, 0.0]]))
    b = BoundarySummary.constant(6.0, 2)
    assert b.S == pytest.approx(6.0)
    np.testing.assert_allclose(b.neighbor_distances(2), 1.5)


# --------------------------------------------------------------------------
# quadrature oracle


def test_sphere_parametrisation_lies_on_unit_sphere():
    phi = np.linspace(1e-4, math.pi - 1e-4, 50)
    r, z, jac = sphere_parametrisation(phi)
    pts = np.stack([r, np.zeros_like(r), z], axis=1)
    np.testing.assert_allclose(distance(pts), 1.0, rtol=1e-8)
    assert np.all(jac >= 0)


def test_quadrature_free_measure_matches_ball_volume():
    # Z = int exp(-d^2) dx = 4 |B_1| int t^3 exp(-t^2) dt = 2 |B_1|
    vol, se = unit_ball_volume()
    res = partition_quadrature(PotentialSpec(alpha=1.0), BoundarySummary(0.0))
    assert abs(res.Z - 2 * vol) < 4 * 2 * se
    # E d^2 under t^3 exp(-t^2) is 2
    assert res.moments["d^2"] == pytest.approx(2.0, rel=1e-8)


@pytest.mark.parametrize("p", [2.0, 3.0])
def test_quadrature_scaling_in_alpha(p):
    # exp(-alpha d^p) is the dilation of exp(-d^p) by alpha^{-1/p}
    b = BoundarySummary(0.0)
    z1 = partition_quadrature(PotentialSpec(alpha=1.0, p=p), b).Z
    z2 = partition_quadrature(PotentialSpec(alpha=2.0, p=p), b).Z
    assert z2 / z1 == pytest.approx(2.0 ** (-4.0 / p), rel=1e-8)
    assert z2 < z1


def test_quadrature_matches_importance_sampling():
    spec = PotentialSpec(alpha=1.0, p=2.0, epsilon=0.1, rho=1.0, N=2, theta=0.3, M=1.0)
    b = BoundarySummary.from_neighbors(np.random.default_rng(0).normal(size=(4, 3)))
    zq = partition_quadrature(spec, b).Z
    zi, se = partition_importance(spec, b)
    assert zi == pytest.approx(zq, rel=0.01)
    assert abs(zi - zq) < 4 * se


def test_quadrature_box_too_small():
    from subriemann_gibbs.single_site import BoxTooSmallError

    with pytest.raises(BoxTooSmallError):
        partition_quadrature(PotentialSpec(alpha=1.0), BoundarySummary(0.0), box=1.0)


def test_mean_distance_decreases_with_S():
    spec = PotentialSpec(alpha=1.0, epsilon=0.1, rho=1.0, N=2)
    means = [partition_quadrature(spec, BoundarySummary(S), reduced=True).moments["d^1"] for S in (0, 5, 20)]
    assert means[0] > means[1] > means[2]


# --------------------------------------------------------------------------
# samplers


def test_metropolis_matches_quadrature():
    spec = PotentialSpec(alpha=1.0, p=2.0, epsilon=0.1, rho=1.0, N=2)
    b = BoundarySummary.constant(2.0, 2)
    batch = sample_site(spec, b, n=20_000, seed=3)
    assert 0.1 <= batch.acceptance_rate <= 0.9 and not batch.flagged
    d2 = distance(batch.points) ** 2
    ref = partition_quadrature(spec, b).moments["d^2"]
    from subriemann_gibbs.stats import batch_means

    m, se = batch_means(d2)
    assert abs(m - ref) < 4 * se
    for k in (0, 1):
        mk, sek = batch_means(batch.points[:, k])
        assert abs(mk) < 4 * sek


def test_metropolis_reproducible():
    spec = PotentialSpec(alpha=1.0)
    a = sample_site(spec, BoundarySummary(0.0), n=500, seed=11, n_burnin=100)
    b = sample_site(spec, BoundarySummary(0.0), n=500, seed=11, n_burnin=100)
    assert np.array_equal(a.points, b.points)


def test_exact_sampler_matches_quadrature_with_theta():
    spec = PotentialSpec(alpha=1.0, p=2.0, epsilon=0.1, rho=1.0, N=1, theta=0.5, M=1.0)
    nb = np.array([[0.5, 0.0, 0.1], [-0.3, 0.4, 0.0]])
    x1 = Observable(lambda x: x[..., 0], None, "x1")
    ref = partition_quadrature(spec, BoundarySummary.from_neighbors(nb), observables=[x1])
    x = sample_exact(spec, np.repeat(nb[None], 40_000, axis=0), _rng(0, 5))
    d2 = distance(x) ** 2
    se = d2.std() / math.sqrt(d2.size)
    assert abs(d2.mean() - ref.moments["d^2"]) < 4 * se
    se1 = x[:, 0].std() / math.sqrt(x.shape[0])
    assert abs(x[:, 0].mean() - ref.expectations["x1"]) < 4 * se1


def test_reduced_sampler_distance_law():
    spec = PotentialSpec(alpha=1.0, p=3.0, epsilon=0.1, rho=2.0, N=2)
    x = sample_reduced(spec, 3.0, 20_000, seed=1)
    quad = partition_quadrature(spec, BoundarySummary(3.0), reduced=True).moments
    d = distance(x)
    assert abs(d.mean() - quad["d^1"]) < 4 * d.std() / math.sqrt(d.size)
    assert np.array_equal(x, sample_reduced(spec, 3.0, 20_000, seed=1))


# --------------------------------------------------------------------------
# per-site estimators


def test_ubound_with_constant_function():
    # f = 1 has zero gradient, so L = E W must sit below B
    one = Observable(lambda x: np.ones(x.shape[:-1]), lambda x: np.zeros(x.shape[:-1] + (2,)), "1")
    spec = PotentialSpec(alpha=1.0, p=2.0, epsilon=0.1, rho=10.0, N=2)
    rep = ubound_check(spec, [0.0, 5.0], [one], n=20_000)
    for row in rep.table:
        assert row["B_hat"] > 0
    assert rep.params["A_hat"] == 0.0


def test_sg_and_lsq_on_gaussian_like_measure():
    spec = PotentialSpec(alpha=1.0, p=2.0)
    fam = default_trial_family(2.0)
    sg = sg_estimate(spec, BoundarySummary(0.0), fam, n=20_000)
    lsq = lsq_estimate(spec, BoundarySummary(0.0), fam, n=20_000)
    assert sg.verdict == PASS and lsq.verdict == PASS
    assert 0 < sg.value < math.inf and 0 < lsq.value < math.inf
    assert [row["name"] for row in sg.table] == [f.name for f in fam]
    # for f = x1 (unit gradient, q = 2) the ratio is the variance of x1
    x1 = Observable(lambda x: x[..., 0] ** 2, None, "x1^2")
    var = partition_quadrature(spec, BoundarySummary(0.0), observables=[x1]).expectations["x1^2"]
    row = sg.table[0]
    assert abs(row["ratio"] - var) < 4 * row["se"]


def test_rothaus_slack_nonnegative():
    spec = PotentialSpec(alpha=1.0)
    f = default_trial_family()[0]
    rep = rothaus_check(spec, BoundarySummary(0.0), f, n=20_000)
    assert rep.verdict == PASS
    assert rep.value > 0
