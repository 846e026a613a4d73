import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from distrl.measures import (
    CategoricalMeasure,
    GridMismatchError,
    GridRangeError,
    MassError,
    NormKind,
    ReturnGrid,
    SignedCategorical,
    cdf,
    density_estimate,
    from_cdf,
    ks,
    make_dirac,
    mix,
    moment,
    norms_array,
    projection_matrix,
    pushforward_affine,
    quantile,
    random_measure,
    signed_norm,
    tv,
    uniform_advantage,
    w1,
    wp,
)

from conftest import two_point

G4 = ReturnGrid.from_k(4, 0.5)


def dirac_at(grid, k):
    w = np.zeros(grid.num_atoms)
    w[k] = 1.0
    return CategoricalMeasure(grid, w)


# -- grid -------------------------------------------------------------------


def test_grid_layout():
    g = ReturnGrid.from_k(1000, 0.9)
    assert g.K == 1000 and g.atoms[0] == 0.0
    assert np.all(np.diff(g.atoms) > 0)
    assert g.atoms[-1] < g.upper
    assert g.delta == pytest.approx(1 / (1001 * 0.1))


@pytest.mark.parametrize("args", [(1, 0.5), (5, 0.0), (5, 1.0), (2.5, 0.5)])
def test_grid_rejects_bad_parameters(args):
    with pytest.raises(ValueError):
        ReturnGrid(*args)


def test_atoms_are_read_only():
    with pytest.raises(ValueError):
        G4.atoms[0] = 1.0


# -- construction -----------------------------------------------------------


def test_measure_renormalizes_small_drift():
    w = np.full(5, 0.2) * (1 + 1e-10)
    mu = CategoricalMeasure(G4, w)
    assert abs(mu.weights.sum() - 1.0) <= 1e-12


@pytest.mark.parametrize("w", [[0.5, 0.5, 0.5, 0, 0], [1.1, -0.1, 0, 0, 0]])
def test_measure_rejects_bad_weights(w):
    with pytest.raises(MassError):
        CategoricalMeasure(G4, np.array(w))


def test_signed_requires_zero_total():
    with pytest.raises(MassError):
        SignedCategorical(G4, np.array([0.1, 0, 0, 0, 0]))


def test_dirac_on_atom():
    np.testing.assert_array_equal(make_dirac(G4, G4.atoms[2]).weights, [0, 0, 1, 0, 0])


def test_dirac_midpoint_splits_evenly():
    mid = 0.5 * (G4.atoms[1] + G4.atoms[2])
    np.testing.assert_allclose(make_dirac(G4, mid).weights, [0, 0.5, 0.5, 0, 0], atol=1e-15)


def test_dirac_preserves_mean():
    g = ReturnGrid.from_k(1000, 0.5)
    assert moment(make_dirac(g, 0.7), 1) == pytest.approx(0.7, abs=1e-12)


@pytest.mark.parametrize("value", [-0.1, 1.7])
def test_dirac_out_of_range(value):
    with pytest.raises(GridRangeError):
        make_dirac(G4, value)


def test_projection_collapses_overflow():
    P = projection_matrix(np.array([4.0, 7.5, 3.25]), 5).toarray()
    np.testing.assert_allclose(P[:, 0], [0, 0, 0, 0, 1])
    np.testing.assert_allclose(P[:, 1], [0, 0, 0, 0, 1])
    np.testing.assert_allclose(P[:, 2], [0, 0, 0, 0.75, 0.25])


def test_cdf_final_entry():
    mu = random_measure(G4, np.random.default_rng(0))
    c = cdf(mu)
    assert np.all(np.diff(c.cumulative) >= 0) and c.cumulative[-1] == pytest.approx(1.0)
    assert cdf(mu - mu).cumulative[-1] == 0.0


# -- pushforward and mixtures ---------------------------------------------


def test_pushforward_of_zero_dirac():
    for g in (G4, ReturnGrid.from_k(1000, 0.9)):
        d0 = dirac_at(g, 0)
        np.testing.assert_array_equal(pushforward_affine(d0, 0.0).weights, d0.weights)


def test_pushforward_of_zero_signed():
    out = pushforward_affine(SignedCategorical.zeros(G4), 0.3)
    assert isinstance(out, SignedCategorical)
    np.testing.assert_array_equal(out.weights, 0.0)


def test_pushforward_mean_matches_affine_image(rng):
    g = ReturnGrid.from_k(1000, 0.9)
    for _ in range(100):
        k = int(rng.integers(0, 800))
        r = float(rng.uniform(0, 1))
        target = r + g.gamma * g.atoms[k]
        mu = pushforward_affine(dirac_at(g, k), r)
        assert moment(mu, 1) == pytest.approx(target, abs=1e-12)
        assert np.count_nonzero(mu.weights) <= 2


def test_pushforward_rejects_large_reward():
    with pytest.raises(ValueError):
        pushforward_affine(dirac_at(G4, 0), 1.5)


def test_pushforward_contraction(rng):
    g = ReturnGrid.from_k(200, 0.8)
    for _ in range(200):
        mu, nu = random_measure(g, rng), random_measure(g, rng)
        r = float(rng.uniform())
        lhs = w1(pushforward_affine(mu, r), pushforward_affine(nu, r))
        assert lhs <= g.gamma * w1(mu, nu) + 2 * g.delta


def test_mix_identity_and_convexity():
    mu = random_measure(G4, np.random.default_rng(1))
    out = mix([(1.0, mu)])
    assert isinstance(out, CategoricalMeasure)
    np.testing.assert_allclose(out.weights, mu.weights)
    half = mix([(0.5, dirac_at(G4, 0)), (0.5, dirac_at(G4, 2))])
    np.testing.assert_allclose(half.weights, [0.5, 0, 0.5, 0, 0])


def test_mix_cancellation_is_signed():
    mu = random_measure(G4, np.random.default_rng(2))
    out = mix([(1.0, mu), (-1.0, mu)])
    assert isinstance(out, SignedCategorical)
    np.testing.assert_array_equal(out.weights, 0.0)


def test_mix_grid_mismatch():
    other = ReturnGrid.from_k(4, 0.6)
    with pytest.raises(GridMismatchError):
        mix([(0.5, dirac_at(G4, 0)), (0.5, dirac_at(other, 0))])


# -- metrics ----------------------------------------------------------------


@pytest.mark.parametrize("m", [1, 3, 4])
def test_point_mass_distances(m):
    a, b = dirac_at(G4, 0), dirac_at(G4, m)
    assert w1(a, b) == pytest.approx(G4.atoms[m])
    assert wp(a, b, 2) == pytest.approx(G4.atoms[m])
    assert ks(a, b) == 1.0 and tv(a, b) == 1.0


def test_two_atom_gaps():
    a, b = two_point(G4, 0.5), two_point(G4, 0.4)
    assert ks(a, b) == pytest.approx(0.1) and tv(a, b) == pytest.approx(0.1)


def test_w1_uniform_to_dirac(u02):
    d1 = make_dirac(u02.grid, 1.0)
    assert w1(u02, d1) == pytest.approx(0.5, abs=2 * u02.grid.delta)


@pytest.mark.parametrize("p", [1, 2, 3])
def test_wp_two_point_closed_form(p, rng):
    g = ReturnGrid.from_k(1000, 0.9)
    for q in rng.uniform(0, 1, 20):
        got = wp(two_point(g, 0.5), two_point(g, q), p)
        assert got == pytest.approx(g.atoms[-1] * abs(q - 0.5) ** (1 / p), rel=1e-12)


def test_wp1_equals_w1(rng):
    g = ReturnGrid.from_k(100, 0.7)
    for _ in range(50):
        mu, nu = random_measure(g, rng), random_measure(g, rng)
        assert wp(mu, nu, 1) == pytest.approx(w1(mu, nu), abs=1e-10)


def test_wp_rejects_small_p():
    with pytest.raises(ValueError):
        wp(dirac_at(G4, 0), dirac_at(G4, 1), 0.5)


def test_metrics_reject_grid_mismatch():
    other = dirac_at(ReturnGrid.from_k(4, 0.6), 0)
    for metric in (w1, ks, tv):
        with pytest.raises(GridMismatchError):
            metric(dirac_at(G4, 0), other)


def test_metric_axioms_random_triples(rng):
    g = ReturnGrid.from_k(30, 0.8)
    metrics = [w1, ks, tv] + [lambda a, b, p=p: wp(a, b, p) for p in (1, 2, 3)]
    for _ in range(1000):
        a, b, c = (random_measure(g, rng, 0.3) for _ in range(3))
        for d in metrics:
            ab = d(a, b)
            assert ab >= 0 and d(a, a) <= 1e-12
            assert ab == pytest.approx(d(b, a), abs=1e-9)
            assert ab <= d(a, c) + d(c, b) + 1e-9
        assert ks(a, b) <= tv(a, b) + 1e-12


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, 12, elements=st.floats(0, 1)),
    arrays(np.float64, 12, elements=st.floats(0, 1)),
)
def test_signed_norm_matches_metric(a, b):
    if a.sum() < 1e-3 or b.sum() < 1e-3:
        return
    g = ReturnGrid.from_k(11, 0.75)
    mu, nu = CategoricalMeasure(g, a / a.sum()), CategoricalMeasure(g, b / b.sum())
    diff = mu - nu
    assert signed_norm(diff, "W1") == pytest.approx(w1(mu, nu), abs=1e-10)
    assert signed_norm(diff, "KS") == pytest.approx(ks(mu, nu), abs=1e-10)
    assert signed_norm(diff, "TV") == pytest.approx(tv(mu, nu), abs=1e-10)


def test_signed_norm_examples():
    z = SignedCategorical.zeros(G4)
    assert all(signed_norm(z, k) == 0 for k in NormKind)
    assert signed_norm(SignedCategorical(G4, np.array([0.3, -0.3, 0, 0, 0])), NormKind.TV) == pytest.approx(0.3)


def test_norms_array_is_vectorized(rng):
    g = ReturnGrid.from_k(50, 0.9)
    rows = np.stack([random_measure(g, rng).weights - random_measure(g, rng).weights for _ in range(7)])
    for kind in NormKind:
        expected = [signed_norm(SignedCategorical(g, r), kind) for r in rows]
        np.testing.assert_allclose(norms_array(rows, g.delta, kind), expected, atol=1e-14)


def test_ks_bounded_by_w1_for_smooth_densities(rng):
    # KS <= sqrt(2 C W1) when densities are bounded by C, plus grid slack.
    g = ReturnGrid.from_k(1000, 0.9)
    x = g.atoms
    for _ in range(50):
        dens = []
        for _ in range(2):
            loc, sc = rng.uniform(2, 8), rng.uniform(0.5, 2)
            dens.append(np.exp(-0.5 * ((x - loc) / sc) ** 2))
        mu, nu = (CategoricalMeasure(g, d / d.sum()) for d in dens)
        C = max(mu.weights.max(), nu.weights.max()) / g.delta
        assert ks(mu, nu) <= np.sqrt(2 * C * w1(mu, nu)) + 4 * g.delta * C


def test_wp_power_bounded_by_w1(rng):
    g = ReturnGrid.from_k(200, 0.8)
    for _ in range(100):
        mu, nu = random_measure(g, rng), random_measure(g, rng)
        for p in (2, 3):
            assert wp(mu, nu, p) ** p <= g.upper ** (p - 1) * w1(mu, nu) + g.delta


# -- functionals ------------------------------------------------------------


def test_moments():
    assert moment(dirac_at(G4, 3), 2) == pytest.approx(G4.atoms[3] ** 2)
    assert moment(SignedCategorical.zeros(G4), 3) == 0.0


def test_uniform_moment_and_quantile(u02):
    d = u02.grid.delta
    assert moment(u02, 2) == pytest.approx(4 / 3, abs=4 * d)
    assert quantile(u02, 0.25) == pytest.approx(0.5, abs=2 * d)


def test_quantile_inf_convention():
    assert quantile(dirac_at(G4, 3), 0.7) == G4.atoms[3]
    half = mix([(0.5, dirac_at(G4, 0)), (0.5, dirac_at(G4, 2))])
    assert quantile(half, 0.5) == G4.atoms[0]


def test_uniform_advantage_examples():
    assert uniform_advantage(dirac_at(G4, 2), dirac_at(G4, 0)) == 1.0
    assert uniform_advantage(dirac_at(G4, 0), dirac_at(G4, 0)) == 1.0
    half = mix([(0.5, dirac_at(G4, 0)), (0.5, dirac_at(G4, 2))])
    assert uniform_advantage(half, half) == pytest.approx(0.75)


def test_uniform_advantage_self_at_least_half(rng):
    g = ReturnGrid.from_k(40, 0.5)
    for _ in range(100):
        mu = random_measure(g, rng)
        assert uniform_advantage(mu, mu) > 0.5


def test_density_of_uniform_weights():
    g = ReturnGrid.from_k(50, 0.9)
    mu = CategoricalMeasure(g, np.full(g.num_atoms, 1 / g.num_atoms))
    for window in (1, 5, 21, 51):
        np.testing.assert_allclose(density_estimate(mu, window), 1 / (g.num_atoms * g.delta), rtol=1e-12)


def test_density_of_dirac_window_one():
    d = density_estimate(dirac_at(G4, 2), 1)
    np.testing.assert_allclose(d, [0, 0, 1 / G4.delta, 0, 0])


def test_density_preserves_mass(rng):
    g = ReturnGrid.from_k(100, 0.9)
    mu = random_measure(g, rng)
    assert density_estimate(mu, 21).sum() * g.delta == pytest.approx(1.0, abs=1e-12)


def test_density_of_uniform02(u02):
    d = density_estimate(u02, 21)
    np.testing.assert_allclose(d[50:-50], 0.5, atol=0.02)


@pytest.mark.parametrize("window", [0, 4, 7])
def test_density_rejects_bad_window(window):
    with pytest.raises(ValueError):
        density_estimate(dirac_at(G4, 0), window)


def test_from_cdf_respects_max_index():
    g = ReturnGrid.from_k(10, 0.5)
    mu = from_cdf(g, lambda x: np.clip(x, 0, 1), max_index=5)
    assert mu.weights[6:].sum() == 0.0 and mu.weights.sum() == pytest.approx(1.0)
