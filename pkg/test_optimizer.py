"""
Test degli ottimizzatori: passo ES con z-score, GD, iterazione OU, traiettorie e trial
"""
import sys

import numpy as np

import theory
from landscape import FlatLandscape, LinearLandscape, NoiseModel, QuadraticLandscape
from optimizer import (
    EsConfig,
    GdConfig,
    OptimizerError,
    OuConfig,
    RecordSpec,
    build_optimizer_config,
    es_step,
    es_update_samples,
    gd_step,
    ou_step,
    run_sequential,
    run_trajectory,
    run_trials,
    trial_seed,
    zscore_rewards,
)


def test_zscore_population_sums_to_n():
    rewards = np.random.default_rng(0).standard_normal(30) * 5.0 + 2.0
    z, mu, sd = zscore_rewards(rewards, 'population')
    assert abs(np.sum(z ** 2) - 30.0) < 1e-10
    assert abs(np.sum(z)) < 1e-10
    assert abs(sd - rewards.std()) < 1e-12
    z_unb, _, _ = zscore_rewards(rewards, 'unbiased')
    assert abs(np.sum(z_unb ** 2) - 29.0) < 1e-10


def test_zscore_degenerate_population():
    z, mu, sd = zscore_rewards(np.full(10, 3.0))
    assert z is None and mu == 3.0 and sd == 0.0


def test_es_config_defaults_and_validation():
    cfg = EsConfig(sigma=0.02)
    assert cfg.alpha == 0.01 and cfg.population == 30 and cfg.method == 'es'
    for kwargs in ({'sigma': 0.0}, {'sigma': 0.1, 'population': 1}, {'sigma': 0.1, 'zscore': 'altro'}):
        try:
            EsConfig(**kwargs)
        except OptimizerError:
            continue
        raise AssertionError(f"configurazione non valida accettata: {kwargs}")


def test_es_step_flat_noiseless_is_degenerate():
    land = FlatLandscape(5)
    theta = np.arange(5.0)
    new_theta, diag = es_step(theta, land, NoiseModel(0.0), EsConfig(sigma=0.1), np.random.default_rng(1))
    assert np.array_equal(new_theta, theta)
    assert diag['degenerate'] and diag['update_norm'] == 0.0


def test_es_step_is_reproducible_and_normalized():
    land = LinearLandscape(np.array([1.0, 0.0, -1.0, 2.0]))
    cfg = EsConfig(sigma=0.05, alpha=0.02, population=12)
    theta = np.zeros(4)
    a, diag_a = es_step(theta, land, NoiseModel(0.1), cfg, np.random.default_rng(7))
    b, _ = es_step(theta, land, NoiseModel(0.1), cfg, np.random.default_rng(7))
    assert np.array_equal(a, b)
    assert abs(diag_a['z_sq_sum'] - 12.0) < 1e-10
    assert not diag_a['degenerate']


def test_es_step_streamed_matches_block_statistics():
    land = LinearLandscape(np.array([1.0, 0.0, 0.0]))
    block = EsConfig(sigma=0.05, alpha=0.02, population=10)
    streamed = EsConfig(sigma=0.05, alpha=0.02, population=10, max_block_floats=1)
    new_theta, diag = es_step(np.zeros(3), land, NoiseModel(0.0), streamed, np.random.default_rng(3))
    assert np.all(np.isfinite(new_theta)) and abs(diag['z_sq_sum'] - 10.0) < 1e-10

    # Senza rumore la componente lungo v ha sempre lo stesso segno (ascesa del reward)
    for cfg in (block, streamed):
        updates, degenerate = es_update_samples(np.zeros(3), land, NoiseModel(0.0), cfg, 200,
                                                np.random.default_rng(5))
        assert degenerate == 0
        assert np.all(updates[:, 0] < 0.0)


def test_flat_step_variance_is_alpha_squared_over_n():
    land = FlatLandscape(4)
    cfg = EsConfig(sigma=0.02, alpha=0.01, population=30)
    updates, _ = es_update_samples(np.zeros(4), land, NoiseModel(1.0), cfg, 20_000, np.random.default_rng(11))
    expected = cfg.alpha ** 2 / cfg.population
    assert np.all(np.abs(updates.var(axis=0, ddof=1) - expected) < 0.05 * expected)


def test_gd_step_is_exact_contraction():
    land = QuadraticLandscape([0.5, 2.0, 0.0])
    theta = np.array([1.0, -2.0, 3.0])
    new_theta = gd_step(theta, land, GdConfig(beta=0.1))
    assert np.allclose(new_theta, [0.95, -1.6, 3.0], rtol=0, atol=1e-15)
    assert new_theta[2] == 3.0


def test_gd_step_critical_and_overshooting_curvature():
    cfg = GdConfig(beta=0.5)
    assert np.array_equal(gd_step(np.array([5.0, 7.0]), QuadraticLandscape([2.0, 0.0]), cfg), [0.0, 7.0])
    assert np.array_equal(gd_step(np.array([1.0]), QuadraticLandscape([6.0]), cfg), [-2.0])


def test_ou_noiseless_matches_gd_with_effective_rate():
    cfg = OuConfig(sigma_R_fixed=0.5, sigma=0.02, alpha=0.01, noiseless=True)
    land = QuadraticLandscape([100.0, 10.0, 0.0])
    theta = np.array([1.0, -2.0, 0.5])
    via_ou = ou_step(theta, cfg, land, np.random.default_rng(0))
    via_gd = gd_step(theta, land, GdConfig(beta=0.01 * 0.02 / 0.5))
    assert np.allclose(via_ou, via_gd, rtol=0, atol=1e-14)


def test_ou_step_noiseless_canonical():
    cfg = OuConfig(sigma_R_fixed=1.0, sigma=0.02, alpha=0.01, noiseless=True)
    spectrum = np.array([0.0, 50.0, 5000.0])
    theta = np.array([1.0, 1.0, 1.0])
    new_theta = ou_step(theta, cfg, spectrum, np.random.default_rng(0))
    assert new_theta[0] == 1.0
    assert abs(new_theta[1] - 0.99) < 1e-15
    assert abs(new_theta[2]) < 1e-15
    assert abs(cfg.contraction(500.0) - 0.9) < 1e-15


def test_ou_step_rotated_basis_matches_eigen_iteration():
    cfg = OuConfig(sigma_R_fixed=1.0, sigma=0.02, alpha=0.01, noiseless=True)
    land = QuadraticLandscape([50.0, 500.0, 0.0, 2500.0], basis='rotation', rotation_seed=4)
    theta = np.array([0.3, -1.0, 2.0, 0.5])
    new_theta = ou_step(theta, cfg, land, np.random.default_rng(0))
    gammas = np.array([cfg.contraction(lam) for lam in land.eigenvalues])
    expected = land.from_eigen_coordinates(gammas * land.eigen_coordinates(theta))
    assert np.allclose(new_theta, expected, atol=1e-12)


def test_ou_rejects_linear_landscape():
    cfg = OuConfig(sigma_R_fixed=1.0, sigma=0.02)
    try:
        run_trajectory(np.zeros(2), LinearLandscape(np.ones(2)), NoiseModel(0.0), cfg, 3)
    except OptimizerError:
        return
    raise AssertionError("OU su superficie lineare accettata")


def test_zero_steps_returns_initial_point():
    land = FlatLandscape(3)
    record = run_trajectory(np.ones(3), land, NoiseModel(1.0), EsConfig(sigma=0.1), 0,
                            RecordSpec(directions=(1,), keep_final=True))
    assert record.steps == 0 and record.drift.shape == (1,) and record.drift[0] == 0.0
    assert np.array_equal(record.final_theta, np.ones(3))
    assert record.projections[1][0] == 1.0


def test_gd_divergence_is_marked_not_raised():
    land = QuadraticLandscape([5.0, 0.0])
    record = run_trajectory(np.array([1.0, 1.0]), land, NoiseModel(0.0), GdConfig(beta=1.0), 200)
    assert record.diverged and record.diverged_at is not None
    assert record.steps == record.diverged_at - 1
    assert record.drift.shape[0] == record.steps + 1
    assert np.all(np.isfinite(record.drift))


def test_contraction_at_or_beyond_one_is_marked():
    # beta * lambda = 2: gamma = -1, ampiezza costante, soglia mai superata
    record = run_trajectory(np.array([1.0, 1.0, 1.0]), QuadraticLandscape([4.0, 1.0, 0.0]), NoiseModel(0.0),
                            GdConfig(beta=0.5), 10, RecordSpec(directions=(0,)))
    assert record.diverged and record.diverged_at is None
    assert record.unstable_directions == (0,)
    assert record.steps == 10 and np.all(np.abs(record.projections[0]) == 1.0)

    short = run_trajectory(np.ones(2), QuadraticLandscape([5.0, 0.0]), NoiseModel(0.0), GdConfig(beta=1.0), 2)
    assert short.diverged and short.diverged_at is None and short.unstable_directions == (0,)

    concave = run_trajectory(np.ones(2), QuadraticLandscape([-1.0, 0.0]), NoiseModel(0.0), GdConfig(beta=0.1), 3)
    assert concave.unstable_directions == (0,)

    stable = run_trajectory(np.ones(3), QuadraticLandscape([3.0, 1.0, 0.0]), NoiseModel(0.0), GdConfig(beta=0.5), 10)
    assert not stable.diverged and stable.unstable_directions == ()


def test_ou_unstable_direction_is_marked():
    cfg = OuConfig(sigma_R_fixed=1.0, sigma=0.02, alpha=0.01)
    land = QuadraticLandscape([500.0, 12_500.0, 0.0])
    record = run_trajectory(np.ones(3), land, NoiseModel(0.0), cfg, 5, rng=np.random.default_rng(0))
    assert record.diverged and record.unstable_directions == (1,)
    es = run_trajectory(np.ones(3), land, NoiseModel(0.0), EsConfig(sigma=0.02, alpha=0.01), 1,
                        rng=np.random.default_rng(0))
    assert es.unstable_directions == ()


def test_gd_steps_from_config():
    land = QuadraticLandscape([0.5, 0.0])
    record = run_trajectory(np.ones(2), land, NoiseModel(0.0), GdConfig(beta=0.5, steps=7))
    assert record.steps == 7 and record.drift.shape == (8,)
    explicit = run_trajectory(np.ones(2), land, NoiseModel(0.0), GdConfig(beta=0.5, steps=7), 3)
    assert explicit.steps == 3
    assert build_optimizer_config({'method': 'gd', 'beta': 0.5}, steps=4).steps == 4
    for call in (lambda: run_trajectory(np.ones(2), land, NoiseModel(0.0), EsConfig(sigma=0.1)),
                 lambda: GdConfig(beta=0.5, steps=-1)):
        try:
            call()
        except OptimizerError:
            continue
        raise AssertionError("numero di passi mancante o negativo accettato")


def test_ou_ensemble_follows_closed_forms():
    alpha, sigma, sigma_R, N = 0.01, 0.02, 1.0, 30
    # gamma = 1, 0.99, 0.9, 0, -0.5
    spectrum = [0.0, 50.0, 500.0, 5000.0, 7500.0]
    directions = tuple(range(len(spectrum)))
    land = QuadraticLandscape(spectrum)
    gammas = [theory.contraction_factor(alpha, sigma, sigma_R, lam) for lam in spectrum]

    exact = run_trajectory(np.ones(5), land, NoiseModel(0.0),
                           OuConfig(sigma_R_fixed=sigma_R, sigma=sigma, alpha=alpha, noiseless=True), 20,
                           RecordSpec(directions=directions))
    for k, gamma in enumerate(gammas):
        for t in (1, 5, 20):
            assert abs(exact.projections[k][t] - theory.ou_projected_mean(1.0, gamma, t)) < 1e-12

    trials = 400
    cfg = OuConfig(sigma_R_fixed=sigma_R, sigma=sigma, alpha=alpha, population=N)
    records = run_trials(np.ones(5), land, NoiseModel(0.0), cfg, 20, RecordSpec(directions=directions),
                         trials=trials, master_seed=4)
    for k, gamma in enumerate(gammas):
        paths = np.stack([r.projections[k] for r in records])
        for t in (1, 5, 20):
            variance = theory.ou_projected_variance(alpha, N, gamma, t)
            stderr = np.sqrt(variance / trials)
            mean = float(paths[:, t].mean())
            assert abs(mean - theory.ou_projected_mean(1.0, gamma, t)) < 5.0 * stderr, (k, t, mean)
        observed_var = float(paths[:, 20].var(ddof=1))
        variance = theory.ou_projected_variance(alpha, N, gamma, 20)
        assert abs(observed_var - variance) < 5.0 * variance * np.sqrt(2.0 / (trials - 1)), (k, observed_var)


def test_gd_trajectory_projections_and_frozen_coordinates():
    land = QuadraticLandscape([0.2, 1.0, 0.0])
    theta0 = np.array([1.0, 2.0, -3.0])
    record = run_trajectory(theta0, land, NoiseModel(0.0), GdConfig(beta=0.5), 50,
                            RecordSpec(directions=(0, 1, 2), keep_final=True))
    t = np.arange(51)
    assert np.allclose(record.projections[0], 0.9 ** t, rtol=1e-12)
    assert np.allclose(record.projections[1], 2.0 * 0.5 ** t, rtol=1e-12)
    assert np.all(record.projections[2] == -3.0)
    assert record.final_theta[2] == -3.0


def test_group_drift_sums_to_total():
    land = FlatLandscape(6)
    record_spec = RecordSpec(groups=(('a', 2), ('b', 4)))
    record = run_trajectory(np.zeros(6), land, NoiseModel(1.0), EsConfig(sigma=0.1), 20, record_spec,
                            rng=np.random.default_rng(2))
    total = record.group_drift['a'] + record.group_drift['b']
    assert np.allclose(total, record.drift, rtol=1e-12)


def test_run_trials_reproducible_and_ordered():
    land = FlatLandscape(10)
    cfg = EsConfig(sigma=0.02, alpha=0.01, population=8)
    first = run_trials(np.zeros(10), land, NoiseModel(1.0), cfg, 15, trials=4, master_seed=3)
    second = run_trials(np.zeros(10), land, NoiseModel(1.0), cfg, 15, trials=4, master_seed=3, threads=2)
    assert [r.trial for r in first] == [0, 1, 2, 3]
    for a, b in zip(first, second):
        assert np.array_equal(a.drift, b.drift)
    assert not np.array_equal(first[0].drift, first[1].drift)


def test_trial_seed_rule():
    a = np.random.default_rng(trial_seed(5, 2)).standard_normal(3)
    b = np.random.default_rng(np.random.SeedSequence(5, spawn_key=(2,))).standard_normal(3)
    assert np.array_equal(a, b)


def test_run_sequential_measures_from_base():
    stages = [(FlatLandscape(4), 10), (LinearLandscape(np.array([1.0, 0.0, 0.0, 0.0])), 10)]
    records, norms = run_sequential(np.zeros(4), stages, NoiseModel(0.5), EsConfig(sigma=0.05),
                                    rng=np.random.default_rng(1))
    assert len(records) == 2 and len(norms) == 2
    assert records[1].drift[0] == records[0].drift[-1]
    assert abs(norms[1] - np.linalg.norm(records[1].final_theta)) < 1e-12


def test_build_optimizer_config():
    assert isinstance(build_optimizer_config({'method': 'es', 'sigma': 0.1}), EsConfig)
    assert build_optimizer_config({'method': 'gd', 'beta': 0.3}).beta == 0.3
    ou = build_optimizer_config({'method': 'ou', 'sigma': 0.02, 'alpha': 0.01, 'sigma_R_fixed': 2.0})
    assert abs(ou.learning_rate - 1e-4) < 1e-18
    try:
        build_optimizer_config({'method': 'adam'})
    except OptimizerError:
        return
    raise AssertionError("metodo sconosciuto accettato")


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
    print("RIEPILOGO optimizer")
    print("=" * 60)
    for name, passed in results.items():
        print(f"{name:60} {'OK' if passed else 'X FALLITO'}")
    print("=" * 60)
    return 0 if all(results.values()) else 1


if __name__ == '__main__':
    sys.exit(main())
