#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Script principale del laboratorio ES/GD
Orchestrazione di previsioni, simulazioni, analisi e validazione da file di scenario
"""

import os
import sys
from datetime import datetime
from typing import Dict, List, Optional

# Carica variabili d'ambiente da .env
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    print("Attenzione: python-dotenv non installato. Installa con: pip install python-dotenv", file=sys.stderr)
    print("Le variabili ESLAB_* devono essere configurate manualmente.\n", file=sys.stderr)

import numpy as np

import analysis
import artifacts
import optimizer
import scenario as scenario_module
import validation
from analysis import AnalysisError, DivergenceError
from artifacts import ArtifactError
from landscape import LandscapeError
from optimizer import OptimizerError, RecordSpec, run_sequential, run_trajectory, run_trials, trial_seed
from scenario import Scenario, ScenarioError, load_scenario
from theory import TheoryError

VERBOSE = True

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAIL = 2
EXIT_DIVERGED = 3

COMMANDS = ('predict', 'simulate', 'fit', 'interpolate', 'probe', 'hierarchy', 'validate')

# Ampiezze di sonda di default, in multipli di ||delta||
DEFAULT_PROBE_FACTORS = (0.0, 0.25, 0.5, 1.0, 1.5, 2.0)


def _log(message: str):
    if VERBOSE:
        print(message, file=sys.stderr)


def set_verbose(enabled: bool):
    """--quiet spegne i messaggi di tutti i moduli"""
    global VERBOSE
    VERBOSE = enabled
    for module in (analysis, artifacts, optimizer, scenario_module, validation):
        module.VERBOSE = enabled


def _env_int(name: str) -> Optional[int]:
    value = os.getenv(name)
    if not value:
        return None
    try:
        return int(value)
    except ValueError:
        raise ScenarioError(f"Variabile d'ambiente {name} non intera: {value!r}")


class LabWorkflow:
    """
    Workflow completo: scenario -> simulazione/teoria -> artefatti
    """

    def __init__(self, scenario: Optional[Scenario], output_dir: Optional[str] = None,
                 threads: Optional[int] = None):
        """Inizializza il workflow (la precedenza e': flag, ambiente, scenario)"""
        self.scenario = scenario
        self.output_dir = (output_dir or os.getenv('ESLAB_OUTPUT_DIR')
                           or (scenario.output_dir if scenario else 'output'))
        self.threads = threads or _env_int('ESLAB_THREADS') or (scenario.threads if scenario else 1)
        self.stats = {
            'start_time': datetime.now(),
            'command': '',
            'trials_run': 0,
            'diverged': 0,
            'checks_passed': 0,
            'checks_failed': 0,
            'files_written': [],
            'errors': []
        }

    def _require_scenario(self) -> Scenario:
        if self.scenario is None:
            raise ScenarioError(f"Il comando '{self.stats['command']}' richiede --scenario")
        return self.scenario

    def _path(self, filename: str) -> str:
        artifacts.ensure_output_dir(self.output_dir)
        path = os.path.join(self.output_dir, filename)
        self.stats['files_written'].append(path)
        return path

    def _hash(self) -> str:
        return self.scenario.hash() if self.scenario else 'nessuno'

    def run(self, command: str, args) -> int:
        """Esegue un sottocomando e restituisce il codice di uscita"""
        self.stats['command'] = command
        _log("\n" + "=" * 80)
        _log(f"AVVIO: {command}" + (f" (scenario '{self.scenario.name}')" if self.scenario else ""))
        _log("=" * 80 + "\n")
        handler = getattr(self, f"cmd_{command}")
        try:
            return handler(args)
        except Exception as e:
            self.stats['errors'].append(f"{type(e).__name__}: {e}")
            raise
        finally:
            self._print_final_report()

    # ------------------------------------------------------------------
    # predict
    # ------------------------------------------------------------------

    def cmd_predict(self, args) -> int:
        """Documento JSON con tutte le previsioni in forma chiusa"""
        sc = self._require_scenario()
        doc = validation.predict_all(sc)
        print(artifacts.dumps_json(doc))
        artifacts.write_json(self._path('predictions.json'), doc)
        for flag in doc['flags']:
            _log(f"[!] {flag}")
        return EXIT_OK

    # ------------------------------------------------------------------
    # simulate
    # ------------------------------------------------------------------

    def cmd_simulate(self, args) -> int:
        """Esegue i trial e salva traiettorie, insieme e riepilogo"""
        sc = self._require_scenario()
        if sc.config['stages']:
            return self._simulate_stages(sc)

        cfg = sc.optimizer()
        record_spec = sc.record_spec()
        records = run_trials(sc.theta0, sc.landscape, sc.noise, cfg, sc.steps, record_spec,
                             sc.trials, sc.seed, self.threads)
        self.stats['trials_run'] += len(records)

        digest = sc.hash()
        for record in records:
            artifacts.write_trajectory_csv(self._path(f"trajectory_{cfg.method}_{record.trial:04d}.csv"),
                                           record, digest)
            if record_spec.keep_final and record.final_theta is not None:
                artifacts.write_vector(self._path(f"theta_final_{record.trial:04d}.csv"), record.final_theta, digest)

        kept = [r for r in records if not r.diverged]
        self.stats['diverged'] = len(records) - len(kept)
        summary = {
            'scenario': sc.name,
            'scenario_hash': digest,
            'method': cfg.method,
            'landscape': sc.landscape.describe(),
            'steps': sc.steps,
            'trials': len(records),
            'diverged': self.stats['diverged'],
            'diverged_at': {str(r.trial): r.diverged_at for r in records if r.diverged},
            'unstable_directions': sorted({k for r in records for k in r.unstable_directions}),
            'degenerate_steps': int(sum(r.degenerate_steps for r in records)),
        }

        if kept:
            ens = analysis.ensemble_stats(kept)
            self._write_ensemble(ens, digest)
            summary['final_mean_drift'] = float(ens['mean_drift'][-1])
            summary['final_stderr_drift'] = float(ens['stderr_drift'][-1])
            if cfg.method in ('es', 'ou') and sc.steps >= 1:
                fit = analysis.fit_drift(ens['mean_drift'], cfg.alpha, cfg.population, sc.dimension)
                summary['fit'] = fit.to_dict()
                if ens['group_drift']:
                    sizes = {name: size for name, size in record_spec.groups}
                    groups = analysis.fit_group_drift(ens['group_drift'], sizes, cfg.alpha, cfg.population)
                    summary['group_fit'] = {
                        'groups': {name: f.to_dict() for name, f in groups['groups'].items()},
                        'ratio_mean': groups['ratio_mean'],
                        'ratio_std': groups['ratio_std'],
                    }

        artifacts.write_json(self._path('summary.json'), summary)
        if self.stats['diverged']:
            _log(f"[!] {self.stats['diverged']} traiettorie divergenti (dati parziali salvati)")
            return EXIT_DIVERGED
        return EXIT_OK

    def _write_ensemble(self, ens: Dict, digest: str):
        columns = {
            'step': np.arange(ens['mean_drift'].shape[0]),
            'mean_drift': ens['mean_drift'],
            'stderr_drift': ens['stderr_drift'],
            'mean_mu_R': ens['mean_mu_R'],
            'mean_sigma_R': ens['mean_sigma_R'],
        }
        units = {'step': 'passi', 'mean_drift': 'theta^2', 'stderr_drift': 'theta^2',
                 'mean_mu_R': 'reward', 'mean_sigma_R': 'reward'}
        for k, proj in ens['projections'].items():
            columns[f"proj_{k}_mean"] = proj['mean']
            columns[f"proj_{k}_var"] = proj['var']
            units[f"proj_{k}_mean"] = 'theta'
            units[f"proj_{k}_var"] = 'theta^2'
        artifacts.write_series_csv(self._path('ensemble.csv'), columns, digest, units)

    def _simulate_stages(self, sc: Scenario) -> int:
        """Addestramento sequenziale: un solo stream RNG, drift misurato dal punto base"""
        cfg = sc.optimizer()
        rng = np.random.default_rng(trial_seed(sc.seed, 0))
        records, norms = run_sequential(sc.theta0, sc.stage_landscapes(), sc.noise, cfg,
                                        sc.record_spec(), rng)
        self.stats['trials_run'] += 1
        digest = sc.hash()
        for index, record in enumerate(records):
            artifacts.write_trajectory_csv(self._path(f"stage_{index:02d}.csv"), record, digest)
        diverged = [i for i, r in enumerate(records) if r.diverged]
        self.stats['diverged'] = len(diverged)
        artifacts.write_json(self._path('stages.json'), {
            'scenario': sc.name,
            'scenario_hash': digest,
            'checkpoint_norms': norms,
            'stage_steps': [r.steps for r in records],
            'diverged_stages': diverged,
        })
        return EXIT_DIVERGED if diverged else EXIT_OK

    # ------------------------------------------------------------------
    # fit
    # ------------------------------------------------------------------

    def _fit_params(self, args) -> Dict:
        sc = self.scenario
        params = sc.prediction_params() if sc else {}
        values = {
            'alpha': args.alpha if args.alpha is not None else params.get('alpha'),
            'population': args.population if args.population is not None else params.get('population'),
            'dimension': args.dimension if args.dimension is not None else (sc.dimension if sc else None),
        }
        missing = [f"--{name}" for name, value in values.items() if value is None]
        if missing:
            raise ScenarioError("Parametri del fit mancanti (servono scenario o flag)", missing)
        return values

    def cmd_fit(self, args) -> int:
        """Dimensione effettiva da una traiettoria salvata o da una pendenza"""
        p = self._fit_params(args)
        result: Dict = {'alpha': p['alpha'], 'population': p['population'], 'dimension': p['dimension']}

        if args.slope is not None:
            fit = analysis.fit_from_slope(args.slope, p['alpha'], p['population'], p['dimension'])
            result['source'] = 'slope'
        elif args.trajectory:
            columns = artifacts.read_series_csv(args.trajectory)
            recorded = artifacts.read_scenario_hash(args.trajectory)
            if self.scenario and recorded is not None and recorded != self.scenario.hash():
                raise ArtifactError(f"{args.trajectory}: scritto dallo scenario {recorded}, "
                                    f"non da '{self.scenario.name}' ({self.scenario.hash()})")
            result['scenario_hash'] = recorded
            drift = columns.get('drift', columns.get('mean_drift'))
            if drift is None:
                raise ArtifactError(f"{args.trajectory}: colonna 'drift' o 'mean_drift' mancante")
            fit = analysis.fit_drift(drift, p['alpha'], p['population'], p['dimension'])
            result['source'] = args.trajectory
            groups = {name.split(':', 1)[1]: values for name, values in columns.items() if name.startswith('group:')}
            if groups and self.scenario:
                sizes = dict(self.scenario.record_spec().groups)
                group_fit = analysis.fit_group_drift(groups, sizes, p['alpha'], p['population'])
                result['group_fit'] = {name: f.to_dict() for name, f in group_fit['groups'].items()}
                result['group_ratio_mean'] = group_fit['ratio_mean']
                result['group_ratio_std'] = group_fit['ratio_std']
        else:
            raise ScenarioError("Il comando fit richiede --trajectory oppure --slope")

        result.update(fit.to_dict())
        print(artifacts.dumps_json(result))
        artifacts.write_json(self._path('fit.json'), result)
        _log(f"[OK] d_eff = {fit.d_eff:.6g}, d_eff/d = {fit.d_eff_ratio:.4f}")
        return EXIT_OK

    # ------------------------------------------------------------------
    # interpolate / probe / hierarchy
    # ------------------------------------------------------------------

    def _hierarchy(self, sc: Scenario) -> Dict:
        es_cfg, gd_cfg = sc.optimizer(), sc.gd_optimizer()
        if not isinstance(es_cfg, optimizer.EsConfig) or gd_cfg is None:
            raise ScenarioError("Scenario non valido", ["servono optimizer.method = es e la sezione gd"])
        result = analysis.hierarchy_measurement(sc.theta0, sc.landscape, es_cfg, gd_cfg, sc.steps, sc.trials,
                                                sc.noise, sc.seed, self.threads)
        self.stats['trials_run'] += result['trials_used'] + result['excluded']
        self.stats['diverged'] = result['excluded']
        return result

    def cmd_interpolate(self, args) -> int:
        """Interpolazione lineare fra checkpoint (file theta oppure endpoint ES/GD simulati)"""
        sc = self._require_scenario()
        points = args.points or int(sc.analysis.get('interpolate', {}).get('points', 9))
        landscape = sc.landscape
        digest = sc.hash()

        if args.theta_a and args.theta_b:
            pairs = [(artifacts.read_vector(args.theta_a), artifacts.read_vector(args.theta_b))]
            reference = None
        else:
            result = self._hierarchy(sc)
            pairs = [(theta_es, result['theta_gd']) for theta_es in result['theta_es']]
            reference = abs(landscape.reward(sc.theta0) - landscape.reward(result['theta_gd']))

        paths = [analysis.interpolate_path(a, b, landscape, points) for a, b in pairs]
        columns = {'mixing': paths[0].mixing, 'reward_mean': np.mean([p.rewards for p in paths], axis=0)}
        for i, path in enumerate(paths):
            columns[f"reward_{i:04d}"] = path.rewards
        units = {name: 'reward' for name in columns}
        units['mixing'] = '-'
        artifacts.write_series_csv(self._path('interpolation.csv'), columns, digest, units)

        barriers = [p.barrier for p in paths]
        summary = {
            'scenario_hash': digest,
            'points': points,
            'pairs': len(paths),
            'barrier_mean': float(np.mean(barriers)),
            'barrier_max': float(np.max(barriers)),
            'reference_gap': reference,
            'barrier_over_gap': None if not reference else float(np.mean(barriers)) / reference,
        }
        artifacts.write_json(self._path('interpolation.json'), summary)
        print(artifacts.dumps_json(summary))
        return EXIT_DIVERGED if self.stats['diverged'] else EXIT_OK

    def cmd_probe(self, args) -> int:
        """Sonde direzionali lungo il delta addestrato e lungo direzioni casuali"""
        sc = self._require_scenario()
        landscape = sc.landscape
        base = sc.theta0
        probe_cfg = sc.analysis.get('probe', {})
        digest = sc.hash()

        deltas = {}
        if args.theta_trained:
            deltas['trained'] = artifacts.read_vector(args.theta_trained) - base
        else:
            keep = RecordSpec(keep_final=True)
            rng = np.random.default_rng(trial_seed(sc.seed, 0))
            record = run_trajectory(base, landscape, sc.noise, sc.optimizer(), sc.steps, keep, rng=rng)
            self.stats['trials_run'] += 1
            if record.diverged:
                raise DivergenceError(f"La traiettoria addestrata diverge al passo {record.diverged_at}")
            deltas[sc.method] = record.final_theta - base
            gd_cfg = sc.gd_optimizer()
            if gd_cfg is not None and sc.method != 'gd':
                gd = run_trajectory(base, landscape, sc.noise, gd_cfg, record_spec=keep)
                if not gd.diverged:
                    deltas['gd'] = gd.final_theta - base

        deltas = {label: delta for label, delta in deltas.items() if np.any(delta)}
        if not deltas:
            raise AnalysisError("Spostamento addestrato nullo: nessuna direzione da sondare")
        first = next(iter(deltas.values()))
        magnitudes = probe_cfg.get('magnitudes')
        if magnitudes is None:
            magnitudes = [f * float(np.linalg.norm(first)) for f in DEFAULT_PROBE_FACTORS]
        magnitudes = np.asarray(magnitudes, dtype=float)

        columns = {'magnitude': magnitudes}
        units = {'magnitude': 'theta'}
        for label, delta in deltas.items():
            result = analysis.directional_probe(base, delta, landscape, magnitudes, label)
            columns[f"reward_{label}"] = result.rewards
            units[f"reward_{label}"] = 'reward'
        seeds = probe_cfg.get('random_seeds', list(analysis.DEFAULT_PROBE_SEEDS))
        control = analysis.random_direction_probes(base, landscape, magnitudes, seeds)
        columns['reward_random'] = control.rewards
        columns['stderr_random'] = control.stderr
        units.update({'reward_random': 'reward', 'stderr_random': 'reward'})
        artifacts.write_series_csv(self._path('probe.csv'), columns, digest, units)

        summary = {
            'scenario_hash': digest,
            'base_reward': landscape.reward(base),
            'delta_norms': {label: float(np.linalg.norm(d)) for label, d in deltas.items()},
            'random_seeds': list(seeds),
            'columns': list(columns),
        }
        artifacts.write_json(self._path('probe.json'), summary)
        print(artifacts.dumps_json(summary))
        return EXIT_OK

    def cmd_hierarchy(self, args) -> int:
        """Distanze ES / GD / theta_0 e coseni per trial"""
        sc = self._require_scenario()
        result = self._hierarchy(sc)
        digest = sc.hash()
        cosines = result['cosine_samples']
        artifacts.write_series_csv(
            self._path('hierarchy_cosines.csv'),
            {'trial': np.arange(len(cosines)), 'cosine': cosines},
            digest, {'trial': '-', 'cosine': '-'},
        )
        doc = validation.predict_all(sc)
        summary = {key: value for key, value in result.items() if key not in ('theta_gd', 'theta_es', 'cosine_samples')}
        summary['scenario_hash'] = digest
        summary['predicted'] = {key: value for key, value in doc.items()
                                if key.startswith(('displacement.', 'hierarchy.'))}
        artifacts.write_json(self._path('hierarchy.json'), summary)
        print(artifacts.dumps_json(summary))
        return EXIT_DIVERGED if result['excluded'] else EXIT_OK

    # ------------------------------------------------------------------
    # validate
    # ------------------------------------------------------------------

    def cmd_validate(self, args) -> int:
        """Confronto teoria / simulazione con tabella PASS/FAIL"""
        sc = self._require_scenario()
        run = validation.ValidationRun(sc, self.threads)
        results = validation.run_validation(sc, run)
        self.stats['checks_passed'] = sum(1 for r in results if r.passed)
        self.stats['checks_failed'] = len(results) - self.stats['checks_passed']
        if run.records is not None:
            self.stats['trials_run'] += len(run.records)
            self.stats['diverged'] = run.diverged
            self._write_ensemble(run.ensemble(), sc.hash())

        print(validation.format_table(results))
        artifacts.write_json(self._path('validation.json'), {
            'scenario': sc.name,
            'scenario_hash': sc.hash(),
            'passed': self.stats['checks_failed'] == 0,
            'results': [r.to_dict() for r in results],
        })
        if self.stats['checks_failed']:
            return EXIT_FAIL
        return EXIT_DIVERGED if self.stats['diverged'] else EXIT_OK

    # ------------------------------------------------------------------

    def _print_final_report(self):
        """Stampa report finale del comando"""
        duration = datetime.now() - self.stats['start_time']

        _log("\n" + "=" * 80)
        _log(f"REPORT FINALE: {self.stats['command']}")
        _log("=" * 80)
        _log(f"\nDurata: {duration}")
        if self.scenario:
            _log(f"Scenario: {self.scenario.name} (hash {self._hash()})")
        if self.stats['trials_run']:
            _log(f"\nTrial eseguiti: {self.stats['trials_run']}")
            _log(f"Traiettorie divergenti: {self.stats['diverged']}")
        checks = self.stats['checks_passed'] + self.stats['checks_failed']
        if checks:
            _log(f"Controlli superati: {self.stats['checks_passed']}/{checks}")

        if self.stats['files_written']:
            written = sorted(set(self.stats['files_written']))
            _log(f"\nFile scritti ({len(written)}) in {self.output_dir}")

        if self.stats['errors']:
            _log(f"\nErrori ({len(self.stats['errors'])}):")
            for error in self.stats['errors']:
                _log(f"  - {error}")

        _log("\n" + "=" * 80 + "\n")


def build_parser():
    import argparse

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--scenario', help='File di scenario JSON')
    common.add_argument('--out', help='Directory di output (default: ESLAB_OUTPUT_DIR o output.directory)')
    common.add_argument('--seed', type=int, help='Seed master (sovrascrive lo scenario)')
    common.add_argument('--threads', type=int, help='Worker paralleli (default: ESLAB_THREADS o threads)')
    common.add_argument('--quiet', action='store_true', help='Nessun messaggio su stderr')

    parser = argparse.ArgumentParser(description="Laboratorio ES / GD: teoria e simulazione su superfici analitiche")
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('predict', parents=[common], help='Previsioni in forma chiusa (JSON su stdout)')
    sub.add_parser('simulate', parents=[common], help='Esegue i trial e salva le traiettorie')

    fit = sub.add_parser('fit', parents=[common], help='Dimensione effettiva dal drift')
    fit.add_argument('--trajectory', help='CSV di traiettoria o di insieme')
    fit.add_argument('--slope', type=float, help='Pendenza gia\' stimata')
    fit.add_argument('--alpha', type=float)
    fit.add_argument('--population', type=int)
    fit.add_argument('--dimension', type=float)

    interpolate = sub.add_parser('interpolate', parents=[common], help='Interpolazione lineare fra checkpoint')
    interpolate.add_argument('--theta-a', help='CSV del primo checkpoint')
    interpolate.add_argument('--theta-b', help='CSV del secondo checkpoint')
    interpolate.add_argument('--points', type=int, help='Punti di interpolazione (estremi inclusi)')

    probe = sub.add_parser('probe', parents=[common], help='Sonde direzionali')
    probe.add_argument('--theta-trained', help='CSV del checkpoint addestrato')

    sub.add_parser('hierarchy', parents=[common], help='Gerarchia delle distanze ES / GD')
    sub.add_parser('validate', parents=[common], help='Confronto teoria / simulazione')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point principale"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    set_verbose(not args.quiet)
    try:
        sc = load_scenario(args.scenario) if args.scenario else None
        if sc is not None and args.seed is not None:
            sc = sc.with_seed(args.seed)
        if args.threads is not None and args.threads < 1:
            raise ScenarioError("--threads deve essere >= 1")
        workflow = LabWorkflow(sc, output_dir=args.out, threads=args.threads)
        return workflow.run(args.command, args)
    except DivergenceError as e:
        print(f"[X] {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ScenarioError, ArtifactError, LandscapeError, OptimizerError, TheoryError, AnalysisError) as e:
        print(f"[X] {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
