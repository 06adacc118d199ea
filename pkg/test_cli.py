"""
Test end-to-end della riga di comando (codici di uscita e artefatti)
"""
import json
import os
import sys
import tempfile

import numpy as np

import artifacts
import main as cli
from scenario import ScenarioError

SCENARIO_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'scenarios')

SMALL_FLAT = {
    'name': 'cli_piatta',
    'landscape': {'kind': 'flat', 'dimension': 20},
    'noise': {'sigma_xi': 1.0},
    'optimizer': {'method': 'es', 'sigma': 0.02, 'alpha': 0.01, 'population': 10},
    'steps': 50,
    'trials': 40,
    'seed': 3,
    'validation': {'checks': [{'name': 'flat_drift', 'tolerance': 0.2, 'mode': 'relative'}]},
}

SMALL_HIERARCHY = {
    'name': 'cli_gerarchia',
    'landscape': {'kind': 'quadratic', 'dimension': 20, 'spectrum': {'mode': 'rank', 'rank': 2, 'value': 1.0}},
    'noise': {'sigma_xi': 0.1},
    'theta0': {'mode': 'constant', 'value': 0.5},
    'optimizer': {'method': 'es', 'sigma': 0.2, 'alpha': 0.1, 'population': 10},
    'gd': {'beta': 0.5},
    'steps': 100,
    'trials': 3,
    'seed': 2,
}


def _write_scenario(directory, values, name='scenario.json'):
    path = os.path.join(directory, name)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(values, f)
    return path


def _run(*argv):
    return cli.main(list(argv) + ['--quiet'])


def _load(path):
    with open(path, encoding='utf-8') as f:
        return json.load(f)


def test_usage_errors():
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(['sconosciuto']) == cli.EXIT_USAGE
    assert cli.main(['--help']) == cli.EXIT_OK
    with tempfile.TemporaryDirectory() as tmp:
        assert _run('predict', '--out', tmp) == cli.EXIT_USAGE
        assert _run('predict', '--scenario', os.path.join(tmp, 'manca.json'), '--out', tmp) == cli.EXIT_USAGE
        bad = _write_scenario(tmp, {'landscape': {'kind': 'flat'}})
        assert _run('predict', '--scenario', bad, '--out', tmp) == cli.EXIT_USAGE


def test_predict_writes_document():
    with tempfile.TemporaryDirectory() as tmp:
        code = _run('predict', '--scenario', os.path.join(SCENARIO_DIR, 'large_scale.json'), '--out', tmp)
        assert code == cli.EXIT_OK
        doc = _load(os.path.join(tmp, 'predictions.json'))
        assert abs(doc['flat.slope'] - 75.42) < 0.01
        assert doc['scenario.landscape']['kind'] == 'flat'
        assert doc['scenario.landscape']['dimension'] == 4022468096


def test_fit_from_slope_flags_only():
    with tempfile.TemporaryDirectory() as tmp:
        code = _run('fit', '--slope', '72.74', '--alpha', '0.00075', '--population', '30',
                    '--dimension', '4022468096', '--out', tmp)
        assert code == cli.EXIT_OK
        assert abs(_load(os.path.join(tmp, 'fit.json'))['d_eff_ratio'] - 0.964) < 0.001
        assert _run('fit', '--slope', '1.0', '--out', tmp) == cli.EXIT_USAGE


def test_simulate_then_fit_trajectory():
    with tempfile.TemporaryDirectory() as tmp:
        path = _write_scenario(tmp, dict(SMALL_FLAT, trials=3, steps=10))
        out = os.path.join(tmp, 'out')
        assert _run('simulate', '--scenario', path, '--out', out) == cli.EXIT_OK
        for name in ('trajectory_es_0000.csv', 'trajectory_es_0002.csv', 'ensemble.csv', 'summary.json'):
            assert os.path.exists(os.path.join(out, name)), name
        summary = _load(os.path.join(out, 'summary.json'))
        assert summary['trials'] == 3 and summary['diverged'] == 0
        assert summary['landscape'] == {'kind': 'flat', 'dimension': 20, 'rank': 0, 'constant': 0.0}
        assert artifacts.read_scenario_hash(os.path.join(out, 'ensemble.csv')) == summary['scenario_hash']

        assert _run('fit', '--scenario', path, '--trajectory', os.path.join(out, 'ensemble.csv'),
                    '--out', out) == cli.EXIT_OK
        fit = _load(os.path.join(out, 'fit.json'))
        assert fit['dimension'] == 20 and fit['slope'] > 0
        assert fit['scenario_hash'] == summary['scenario_hash']

        other = _write_scenario(tmp, dict(SMALL_FLAT, trials=3, steps=10, seed=4), 'altro.json')
        assert _run('fit', '--scenario', other, '--trajectory', os.path.join(out, 'ensemble.csv'),
                    '--out', out) == cli.EXIT_USAGE
        assert _run('fit', '--scenario', other, '--seed', '3', '--trajectory', os.path.join(out, 'ensemble.csv'),
                    '--out', out) == cli.EXIT_OK


def test_seed_flag_changes_hash_and_data():
    with tempfile.TemporaryDirectory() as tmp:
        path = _write_scenario(tmp, dict(SMALL_FLAT, trials=1, steps=5))
        a, b = os.path.join(tmp, 'a'), os.path.join(tmp, 'b')
        assert _run('simulate', '--scenario', path, '--out', a) == cli.EXIT_OK
        assert _run('simulate', '--scenario', path, '--out', b, '--seed', '99') == cli.EXIT_OK
        assert _load(os.path.join(a, 'summary.json'))['scenario_hash'] != _load(os.path.join(b, 'summary.json'))['scenario_hash']
        drift_a = artifacts.read_series_csv(os.path.join(a, 'trajectory_es_0000.csv'))['drift']
        drift_b = artifacts.read_series_csv(os.path.join(b, 'trajectory_es_0000.csv'))['drift']
        assert not np.array_equal(drift_a, drift_b)


def test_same_seed_reproduces_files_byte_for_byte():
    with tempfile.TemporaryDirectory() as tmp:
        path = _write_scenario(tmp, dict(SMALL_FLAT, trials=2, steps=5))
        a, b = os.path.join(tmp, 'a'), os.path.join(tmp, 'b')
        assert _run('simulate', '--scenario', path, '--out', a) == cli.EXIT_OK
        assert _run('simulate', '--scenario', path, '--out', b) == cli.EXIT_OK
        for name in ('trajectory_es_0000.csv', 'trajectory_es_0001.csv', 'ensemble.csv'):
            with open(os.path.join(a, name), 'rb') as fa, open(os.path.join(b, name), 'rb') as fb:
                assert fa.read() == fb.read(), name


def test_noiseless_flat_single_step_has_no_drift():
    values = dict(SMALL_FLAT, noise={'sigma_xi': 0.0}, trials=1, steps=1)
    with tempfile.TemporaryDirectory() as tmp:
        path = _write_scenario(tmp, values)
        assert _run('simulate', '--scenario', path, '--out', tmp) == cli.EXIT_OK
        drift = artifacts.read_series_csv(os.path.join(tmp, 'trajectory_es_0000.csv'))['drift']
        assert np.array_equal(drift, [0.0, 0.0])


def test_divergent_gd_exits_with_divergence_code():
    values = {
        'name': 'gd_divergente',
        'landscape': {'kind': 'quadratic', 'dimension': 2, 'spectrum': {'mode': 'explicit', 'values': [5.0, 0.0]}},
        'theta0': {'mode': 'constant', 'value': 1.0},
        'optimizer': {'method': 'gd', 'beta': 1.0},
        'steps': 200,
    }
    with tempfile.TemporaryDirectory() as tmp:
        path = _write_scenario(tmp, values)
        assert _run('simulate', '--scenario', path, '--out', tmp) == cli.EXIT_DIVERGED
        summary = _load(os.path.join(tmp, 'summary.json'))
        assert summary['diverged'] == 1 and summary['diverged_at']['0'] is not None
        assert os.path.exists(os.path.join(tmp, 'trajectory_gd_0000.csv'))


def test_critical_gd_rate_exits_with_divergence_code():
    values = {
        'name': 'gd_critico',
        'landscape': {'kind': 'quadratic', 'dimension': 2, 'spectrum': {'mode': 'explicit', 'values': [4.0, 0.0]}},
        'theta0': {'mode': 'constant', 'value': 1.0},
        'optimizer': {'method': 'gd', 'beta': 0.5},
        'steps': 5,
    }
    with tempfile.TemporaryDirectory() as tmp:
        path = _write_scenario(tmp, values)
        assert _run('simulate', '--scenario', path, '--out', tmp) == cli.EXIT_DIVERGED
        summary = _load(os.path.join(tmp, 'summary.json'))
        assert summary['diverged'] == 1 and summary['diverged_at']['0'] is None
        assert summary['unstable_directions'] == [0]


def test_errors_are_listed_in_final_report():
    cli.set_verbose(False)
    with tempfile.TemporaryDirectory() as tmp:
        workflow = cli.LabWorkflow(None, output_dir=tmp)
        try:
            workflow.run('predict', None)
        except ScenarioError:
            pass
        else:
            raise AssertionError("predict senza scenario accettato")
    assert len(workflow.stats['errors']) == 1
    assert workflow.stats['errors'][0].startswith('ScenarioError')


def test_validate_exit_codes():
    with tempfile.TemporaryDirectory() as tmp:
        good = _write_scenario(tmp, SMALL_FLAT, 'buono.json')
        assert _run('validate', '--scenario', good, '--out', os.path.join(tmp, 'buono')) == cli.EXIT_OK
        report = _load(os.path.join(tmp, 'buono', 'validation.json'))
        assert report['passed'] and report['results'][0]['verdict'] == 'PASS'

        wrong = dict(SMALL_FLAT, validation={'checks': SMALL_FLAT['validation']['checks'],
                                             'prediction_overrides': {'alpha': 0.02}})
        bad = _write_scenario(tmp, wrong, 'sbagliato.json')
        assert _run('validate', '--scenario', bad, '--out', os.path.join(tmp, 'sbagliato')) == cli.EXIT_FAIL
        assert not _load(os.path.join(tmp, 'sbagliato', 'validation.json'))['passed']


def test_hierarchy_interpolate_probe():
    with tempfile.TemporaryDirectory() as tmp:
        path = _write_scenario(tmp, SMALL_HIERARCHY)
        assert _run('hierarchy', '--scenario', path, '--out', tmp) == cli.EXIT_OK
        summary = _load(os.path.join(tmp, 'hierarchy.json'))
        assert summary['trials_used'] == 3 and 'hierarchy.es_gd_diff' in summary['predicted']

        assert _run('interpolate', '--scenario', path, '--out', tmp, '--points', '5') == cli.EXIT_OK
        interp = _load(os.path.join(tmp, 'interpolation.json'))
        assert interp['pairs'] == 3 and interp['barrier_mean'] >= 0.0

        theta_a, theta_b = os.path.join(tmp, 'a.csv'), os.path.join(tmp, 'b.csv')
        artifacts.write_vector(theta_a, np.full(20, 0.5), 'h')
        artifacts.write_vector(theta_b, np.zeros(20), 'h')
        assert _run('interpolate', '--scenario', path, '--out', tmp,
                    '--theta-a', theta_a, '--theta-b', theta_b) == cli.EXIT_OK
        assert _load(os.path.join(tmp, 'interpolation.json'))['barrier_max'] == 0.0

        assert _run('probe', '--scenario', path, '--out', tmp, '--theta-trained', theta_b) == cli.EXIT_OK
        columns = artifacts.read_series_csv(os.path.join(tmp, 'probe.csv'))
        assert 'reward_trained' in columns and 'reward_random' in columns

        assert _run('probe', '--scenario', path, '--out', tmp) == cli.EXIT_OK
        probe = _load(os.path.join(tmp, 'probe.json'))
        assert set(probe['delta_norms']) == {'es', 'gd'}


def test_sequential_stages():
    with tempfile.TemporaryDirectory() as tmp:
        code = _run('simulate', '--scenario', os.path.join(SCENARIO_DIR, 'sequential_stages.json'), '--out', tmp)
        assert code == cli.EXIT_OK
        stages = _load(os.path.join(tmp, 'stages.json'))
        assert stages['stage_steps'] == [100, 100, 100]
        assert len(stages['checkpoint_norms']) == 3
        assert os.path.exists(os.path.join(tmp, 'stage_02.csv'))


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
    print("RIEPILOGO cli")
    print("=" * 60)
    for name, passed in results.items():
        print(f"{name:60} {'OK' if passed else 'X FALLITO'}")
    print("=" * 60)
    return 0 if all(results.values()) else 1


if __name__ == '__main__':
    sys.exit(main())
