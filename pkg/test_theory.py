"""
Test dei predittori in forma chiusa
"""
import math
import sys

import numpy as np

import theory
from landscape import QuadraticLandscape
from theory import TheoryError

# Corsa su larga scala (circa 4 miliardi di parametri) usata come riferimento per il fit del drift
LARGE_ALPHA = 7.5e-4
LARGE_N = 30
LARGE_D = 4_022_468_096


def test_flat_drift_large_scale_numbers():
    slope = theory.flat_drift_slope(LARGE_ALPHA, LARGE_D, LARGE_N)
    assert abs(slope - 75.42) < 0.01
    assert abs(theory.flat_drift(LARGE_ALPHA, 500, LARGE_D, LARGE_N) - 37_710) < 5


def test_flat_drift_edge_cases():
    assert theory.flat_drift(0.01, 0, 200, 30) == 0.0
    assert abs(theory.flat_drift(0.01, 500, 200, 30) - 1.0 / 3.0) < 1e-12
    assert theory.flat_step_variance(0.01, 30) == 0.01 ** 2 / 30
    for args in ((0.0, 1, 10, 30), (0.01, -1, 10, 30), (0.01, 1, 10, 0)):
        try:
            theory.flat_drift(*args)
        except TheoryError:
            continue
        raise AssertionError(f"parametri non validi accettati: {args}")


def test_rho_linear_values():
    assert abs(theory.rho_linear(0.5, 30, 20) - 16.5 / 35.5) < 1e-15
    assert abs(theory.rho_linear(0.0, 30, 20) - 1.0 / 20.0) < 1e-15
    assert abs(theory.rho_linear(1.0, 30, 20) - 32.0 / 51.0) < 1e-15
    assert theory.rho_linear(0.3, 30, 1) == 1.0
    for s in (-0.1, 1.1):
        try:
            theory.rho_linear(s, 30, 20)
        except TheoryError:
            continue
        raise AssertionError(f"s={s} accettato")


def test_finite_population_corrections():
    assert abs(theory.rho_linear_finite(0.5, 30, 20) - 15.0 / 34.0) < 1e-15
    factor = theory.population_std_factor(30, 'population')
    assert 0.970 < factor < 0.980
    assert abs(theory.population_std_factor(2, 'population') - 1.0 / math.sqrt(math.pi)) < 1e-12
    assert theory.population_std_factor(30, 'unbiased') < factor
    assert abs(theory.population_std_factor(10 ** 6) - 1.0) < 1e-5

    v = np.array([0.6, 0.8])
    mean = theory.es_linear_mean_finite(0.01, 0.02, v, 0.04, 30)
    assert np.allclose(mean, -0.01 * 0.02 * v / 0.04 * factor, rtol=1e-14)


def test_sigma_R_formulas():
    assert abs(theory.sigma_R_linear(0.5, 2.0, 0.3) - math.sqrt(1.09)) < 1e-15
    expected = math.sqrt(0.25 * 4.0 + 0.5 * 0.0625 * 10.0 + 0.09)
    assert abs(theory.sigma_R_quadratic(0.5, 2.0, 10.0, 0.3) - expected) < 1e-15
    assert abs(theory.signal_fraction(0.02, 1.0, 0.02 * math.sqrt(2.0)) - 0.5) < 1e-12
    try:
        theory.sigma_R_quadratic(0.5, 0.0, 0.0, 0.0)
    except TheoryError as e:
        assert "degenerate" in str(e)
    else:
        raise AssertionError("sigma_R = 0 non segnalato")


def test_linear_moments_fraction_equals_rho():
    v = np.array([0.0, 3.0, 4.0, 0.0, 0.0])
    sigma, alpha, N, sigma_xi = 0.1, 0.05, 30, 0.5
    moments = theory.es_step_moments('linear', v, None, sigma, alpha, N, sigma_xi)
    s = theory.signal_fraction(sigma, 5.0, moments.sigma_R)
    assert abs(moments.on_manifold_fraction() - theory.rho_linear(s, N, 5)) < 1e-14
    cov = moments.dense_covariance()
    assert abs(np.trace(cov) - moments.trace()) < 1e-15
    assert np.allclose(cov, cov.T)
    w = np.array([1.0, -1.0, 0.5, 0.0, 2.0])
    assert abs(w @ cov @ w - moments.variance_along(w)) < 1e-15


def test_quadratic_moments_fraction_equals_rho_quadratic():
    land = QuadraticLandscape([2.0, 1.0, 0.5, 0.0, 0.0, 3.0], basis='rotation', rotation_seed=3)
    theta0 = np.array([1.0, 0.5, -0.5, 2.0, 0.0, 1.0])
    v = land.q_times(theta0)
    sigma, alpha, N, sigma_xi = 0.3, 0.15, 30, 0.2
    moments = theory.es_step_moments('quadratic', v, land.eigenvalues, sigma, alpha, N, sigma_xi,
                                     land.basis_matrix)
    rho = theory.rho_quadratic(v, land.eigenvalues, sigma, N, 6, sigma_xi, land.basis_matrix)
    assert abs(moments.on_manifold_fraction() - rho) < 1e-12
    vh = v / np.linalg.norm(v)
    assert abs(theory.q_squared_form(vh, land.eigenvalues, land.basis_matrix) - land.q_squared_form(vh)) < 1e-12


def test_flat_moments_degenerate_without_noise():
    moments = theory.es_step_moments('flat', np.zeros(3), None, 0.1, 0.05, 30, 0.0)
    assert moments.degenerate and moments.trace() == 0.0
    noisy = theory.es_step_moments('flat', np.zeros(3), None, 0.1, 0.05, 30, 1.0)
    assert not noisy.degenerate
    assert np.allclose(noisy.dense_covariance(), 0.05 ** 2 / 30 * np.eye(3))


def test_ou_closed_forms():
    assert abs(theory.contraction_factor(0.01, 0.02, 1.0, 500.0) - 0.9) < 1e-15
    base = 0.01 ** 2 / 30
    assert theory.ou_projected_variance(0.01, 30, 1.0, 250) == base * 250
    assert abs(theory.ou_projected_variance(0.01, 30, 0.0, 7) - base) < 1e-20
    assert theory.ou_projected_variance(0.01, 30, 0.5, 0) == 0.0
    assert abs(theory.ou_projected_variance(0.01, 30, 1.0 - 1e-14, 100) - base * 100) < 1e-12
    assert abs(theory.ou_asymptotic_variance(0.01, 30, 0.5) - base / 0.75) < 1e-18
    assert theory.ou_projected_mean(2.0, -0.5, 3) == -0.25
    assert theory.convergence_timescale(0.0) == 0.0
    assert abs(theory.convergence_timescale(math.sqrt(0.5)) - 1.0) < 1e-12
    assert abs(theory.ou_stability_threshold(0.01, 0.02, 1.0) - 10_000.0) < 1e-9
    assert abs(theory.optimal_curvature(0.01, 0.02, 1.0) - 5_000.0) < 1e-9
    for gamma in (1.0, -1.5):
        try:
            theory.ou_asymptotic_variance(0.01, 30, gamma)
        except TheoryError:
            continue
        raise AssertionError(f"gamma={gamma} accettato")


def test_well_conditioned_variance_approximates_asymptote():
    # alpha*sigma/sigma_R = 2e-4: gap 1 - gamma = 2e-4 * lambda
    for lam, max_error in ((5.0, 1e-3), (50.0, 1e-2)):
        gamma = theory.contraction_factor(0.01, 0.02, 1.0, lam)
        exact = theory.ou_asymptotic_variance(0.01, 30, gamma)
        approx = theory.ou_asymptotic_variance_well_conditioned(0.01, 0.02, 1.0, 30, lam)
        assert approx < exact and abs(approx / exact - 1.0) < max_error
    assert abs(theory.ou_asymptotic_variance_well_conditioned(0.01, 0.02, 1.0, 30, 500.0)
               - 0.01 / (2 * 30 * 0.02 * 500.0)) < 1e-18
    # lontano dal limite l'approssimazione sottostima di (2 - gap) / 2
    gamma = theory.contraction_factor(0.01, 0.02, 1.0, 2500.0)
    ratio = (theory.ou_asymptotic_variance_well_conditioned(0.01, 0.02, 1.0, 30, 2500.0)
             / theory.ou_asymptotic_variance(0.01, 30, gamma))
    assert abs(ratio - 0.75) < 1e-12
    try:
        theory.ou_asymptotic_variance_well_conditioned(0.01, 0.02, 1.0, 30, 0.0)
    except TheoryError:
        return
    raise AssertionError("autovalore nullo accettato")


def test_gd_closed_forms():
    stable = theory.gd_projected(2.0, 0.5, 1.0, 3)
    assert stable.value == 0.25 and stable.stable
    unstable = theory.gd_projected(1.0, 0.5, 5.0, 4)
    assert unstable.value == 1.5 ** 4 and not unstable.stable
    assert not theory.gd_stable(0.5, 4.0)
    assert not theory.gd_stable(0.5, 0.0)
    assert theory.gd_projected(3.0, 0.5, 0.0, 100).value == 3.0
    assert abs(theory.gd_convergence_timescale(0.5, 2.0 - math.sqrt(2.0)) - 1.0) < 1e-12


def test_reference_values():
    assert abs(theory.flat_drift(0.1, 100, 50, 10) - 5.0) < 1e-12
    assert abs(theory.rho_linear(0.5, 30, 1000) - 0.016248) < 1e-6
    assert abs(theory.sigma_R_quadratic(1.0, 0.0, 2.0, 0.0) - 1.0) < 1e-15
    assert theory.ou_projected_mean(4.0, 1.0, 50) == 4.0
    assert theory.ou_projected_mean(4.0, 0.0, 1) == 0.0
    assert theory.ou_projected_mean(4.0, -0.5, 2) == 1.0
    base = 0.01 ** 2 / 30
    assert abs(theory.ou_projected_variance(0.01, 30, 0.9, 2) - 1.81 * base) < 1e-15
    assert theory.gd_projected(1.0, 0.5, 2.0, 1).value == 0.0
    overshoot = theory.gd_projected(1.0, 0.5, 5.0, 2)
    assert overshoot.value == 2.25 and not overshoot.stable
    assert theory.expected_cosine_scale(40, 40) == 1.0


def test_linear_moments_without_signal_are_isotropic():
    moments = theory.es_step_moments('linear', np.zeros(4), None, 0.02, 0.01, 30, 1.0)
    assert not moments.degenerate
    assert np.array_equal(moments.mean, np.zeros(4))
    assert np.allclose(moments.dense_covariance(), 0.01 ** 2 / 30 * np.eye(4), rtol=1e-14)


def test_rho_quadratic_edge_cases():
    try:
        theory.rho_quadratic(np.zeros(3), np.ones(3), 0.02, 30, 3, 0.1)
    except TheoryError:
        pass
    else:
        raise AssertionError("||v|| = 0 accettato")
    v = np.array([0.6, 0.8, 0.0, 0.0])
    flat = theory.rho_quadratic(v, np.zeros(4), 0.02, 30, 4, 0.01)
    s = theory.signal_fraction(0.02, 1.0, theory.sigma_R_linear(0.02, 1.0, 0.01))
    assert abs(flat - theory.rho_linear(s, 30, 4)) < 1e-12


def test_displacement_of_flat_spectrum_is_flat_drift():
    spectrum = np.zeros(40)
    params = {'alpha': 0.01, 'sigma': 0.02, 'sigma_R_fixed': 1.0, 'population': 30}
    result = theory.displacement_decomposition(np.ones(40), spectrum, params, 300)
    assert result['signal_sq_norm'] == 0.0
    assert abs(result['diffusion_sq_norm_expected'] - theory.flat_drift(0.01, 300, 40, 30)) < 1e-15


def test_hierarchy_on_rank_five_quadratic():
    d, r, T = 500, 5, 1000
    spectrum = np.zeros(d)
    spectrum[:r] = 1.0
    theta0 = np.full(d, 0.5)
    params = {'alpha': 0.1, 'sigma': 0.2, 'sigma_R_fixed': 0.25, 'population': 30}

    assert abs(theory.gd_displacement_sq(theta0, spectrum, 0.5, T) - r * 0.25) < 1e-12
    assert abs(theory.es_gd_difference_expected(0.1, T, d, r, 30) - 165.0) < 1e-9
    assert abs(theory.expected_cosine_scale(r, d) - 0.1) < 1e-15

    prediction = theory.hierarchy_prediction(theta0, spectrum, params, 0.5, T)
    assert prediction.ordered()
    assert prediction.gd_sq_norm_order < 2.0
    assert 165.0 < prediction.es_gd_diff_sq_norm < 166.0
    assert prediction.es_sq_norm > prediction.es_gd_diff_sq_norm


def test_cosine_scale_requires_rank():
    try:
        theory.expected_cosine_scale(0, 10)
    except TheoryError:
        return
    raise AssertionError("r = 0 accettato")


def main():
    """Esegue tutti i test del modulo"""
    tests = [(name, fn) for name, fn in globals().items() if name.startswith('test_') and callable(fn)]
    results = {}
    for name, test in tests:
        try:
            test()
            results[name] = True
        except Exception as e:
            print(f"X {name}: {e!r}")
            results[name] = False

    print("\n" + "=" * 60)
    print("RIEPILOGO theory")
    print("=" * 60)
    for name, passed in results.items():
        print(f"{name:60} {'OK' if passed else 'X FALLITO'}")
    print("=" * 60)
    return 0 if all(results.values()) else 1


if __name__ == '__main__':
    sys.exit(main())
