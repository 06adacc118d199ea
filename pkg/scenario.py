#!/usr/bin/env python3
"""
File di scenario: caricamento, valori di default, validazione, serializzazione

Uno scenario JSON descrive superficie, rumore, ottimizzatore, passi, trial,
seed, registrazione, output, analisi e controlli di validazione.
La struttura completa e' documentata in STRUTTURA_JSON.md.
"""

import copy
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Optional

import numpy as np

from landscape import (
    LANDSCAPE_KINDS,
    Landscape,
    LandscapeError,
    NoiseModel,
    QuadraticLandscape,
    build_landscape,
    build_v,
)
from optimizer import METHODS, ZSCORE_MODES, GdConfig, OptimizerConfig, RecordSpec, build_optimizer_config
from theory import TheoryError, sigma_R_quadratic

VERBOSE = True

THETA0_MODES = ('constant', 'explicit', 'gaussian')
CHECK_MODES = ('relative', 'absolute', 'stderr', 'upper_bound')


def _log(message: str):
    if VERBOSE:
        print(f"[IO] {message}", file=sys.stderr)


class ScenarioError(ValueError):
    """Scenario non valido; `fields` elenca i campi da correggere"""

    def __init__(self, message: str, fields: Optional[List[str]] = None):
        self.fields = list(fields or [])
        if self.fields:
            message = f"{message}: " + "; ".join(self.fields)
        super().__init__(message)


def _get_default_config() -> Dict:
    """Scenario di default: ogni chiave mancante nel file viene presa da qui"""
    return {
        'name': 'scenario',
        'landscape': {
            'kind': None,
            'dimension': None,
        },
        'noise': {
            'sigma_xi': 0.0,
        },
        'theta0': {
            'mode': 'constant',
            'value': 0.0,
        },
        'optimizer': {
            'method': 'es',
            'sigma': 0.02,
            'alpha': None,
            'population': 30,
            'zscore': 'population',
        },
        'gd': None,
        'steps': 100,
        'trials': 1,
        'seed': 0,
        'threads': 1,
        'record': {
            'directions': [],
            'keep_final': False,
            'groups': [],
        },
        'output': {
            'directory': 'output',
        },
        'analysis': {},
        'validation': {
            'checks': [],
            'prediction_overrides': {},
        },
        'stages': [],
    }


def _merge(defaults: Dict, values: Dict) -> Dict:
    """Unione ricorsiva: i valori del file vincono sui default"""
    merged = copy.deepcopy(defaults)
    for key, value in values.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _validate_landscape(section, prefix: str, errors: List[str]):
    if not isinstance(section, dict):
        errors.append(f"{prefix}: deve essere un oggetto")
        return
    if section.get('kind') not in LANDSCAPE_KINDS:
        errors.append(f"{prefix}.kind: atteso {' | '.join(LANDSCAPE_KINDS)}, ricevuto {section.get('kind')!r}")
    dimension = section.get('dimension')
    if not _is_int(dimension) or dimension < 1:
        errors.append(f"{prefix}.dimension: intero >= 1 obbligatorio, ricevuto {dimension!r}")
    basis = section.get('basis') or {}
    if basis.get('mode', 'canonical') not in ('canonical', 'rotation'):
        errors.append(f"{prefix}.basis.mode: atteso canonical | rotation")


def _validate_optimizer(section, prefix: str, errors: List[str]):
    if not isinstance(section, dict):
        errors.append(f"{prefix}: deve essere un oggetto")
        return
    method = section.get('method', 'es')
    if method not in METHODS:
        errors.append(f"{prefix}.method: atteso {' | '.join(METHODS)}, ricevuto {method!r}")
    for key in ('sigma', 'alpha', 'beta'):
        value = section.get(key)
        if value is not None and (not _is_number(value) or value <= 0):
            errors.append(f"{prefix}.{key}: numero > 0 atteso, ricevuto {value!r}")
    population = section.get('population', 30)
    if not _is_int(population) or population < 2:
        errors.append(f"{prefix}.population: intero >= 2 atteso, ricevuto {population!r}")
    if section.get('zscore', 'population') not in ZSCORE_MODES:
        errors.append(f"{prefix}.zscore: atteso {' | '.join(ZSCORE_MODES)}")
    fixed = section.get('sigma_R_fixed')
    if fixed is not None and fixed != 'auto' and (not _is_number(fixed) or fixed <= 0):
        errors.append(f"{prefix}.sigma_R_fixed: numero > 0 oppure 'auto', ricevuto {fixed!r}")
    if method == 'gd' and section.get('beta') is None:
        errors.append(f"{prefix}.beta: obbligatorio per method = gd")


def validate_config(config: Dict) -> List[str]:
    """Restituisce l'elenco dei campi non validi (vuoto se lo scenario e' corretto)"""
    errors: List[str] = []
    _validate_landscape(config.get('landscape'), 'landscape', errors)
    _validate_optimizer(config.get('optimizer'), 'optimizer', errors)
    gd = config.get('gd')
    if gd is not None:
        _validate_optimizer(dict(gd, method='gd') if isinstance(gd, dict) else gd, 'gd', errors)

    for key, minimum in (('steps', 0), ('trials', 1), ('seed', 0), ('threads', 1)):
        value = config.get(key)
        if not _is_int(value) or value < minimum:
            errors.append(f"{key}: intero >= {minimum} atteso, ricevuto {value!r}")

    noise = config.get('noise') or {}
    sigma_xi = noise.get('sigma_xi', 0.0)
    if not _is_number(sigma_xi) or sigma_xi < 0:
        errors.append(f"noise.sigma_xi: numero >= 0 atteso, ricevuto {sigma_xi!r}")
    fraction = noise.get('signal_fraction')
    if fraction is not None and (not _is_number(fraction) or not 0 < fraction <= 1):
        errors.append(f"noise.signal_fraction: atteso in (0, 1], ricevuto {fraction!r}")

    theta0 = config.get('theta0') or {}
    if theta0.get('mode', 'constant') not in THETA0_MODES:
        errors.append(f"theta0.mode: atteso {' | '.join(THETA0_MODES)}")

    dimension = (config.get('landscape') or {}).get('dimension')
    record = config.get('record') or {}
    for k in record.get('directions', []):
        if not _is_int(k) or (_is_int(dimension) and not 0 <= k < dimension):
            errors.append(f"record.directions: indice {k!r} fuori da [0, d)")
    groups = record.get('groups', [])
    if groups:
        sizes = [g.get('size') for g in groups]
        if not all(_is_int(s) and s >= 1 for s in sizes) or not all(g.get('name') for g in groups):
            errors.append("record.groups: ogni gruppo richiede name e size >= 1")
        elif _is_int(dimension) and sum(sizes) != dimension:
            errors.append(f"record.groups: le dimensioni sommano a {sum(sizes)}, attesa d={dimension}")

    for i, check in enumerate((config.get('validation') or {}).get('checks', [])):
        if not isinstance(check, dict) or not check.get('name'):
            errors.append(f"validation.checks[{i}]: name obbligatorio")
            continue
        if not _is_number(check.get('tolerance')):
            errors.append(f"validation.checks[{i}] ({check['name']}): tolerance mancante")
        if check.get('mode') is not None and check['mode'] not in CHECK_MODES:
            errors.append(f"validation.checks[{i}].mode: atteso {' | '.join(CHECK_MODES)}")
        steps = config.get('steps')
        for t in check.get('times', []):
            if not _is_int(t) or t < 0 or (_is_int(steps) and t > steps):
                errors.append(f"validation.checks[{i}].times: istante {t!r} fuori da [0, steps={steps}]")

    for i, stage in enumerate(config.get('stages') or []):
        _validate_landscape((stage or {}).get('landscape'), f"stages[{i}].landscape", errors)
        steps = (stage or {}).get('steps')
        if not _is_int(steps) or steps < 0:
            errors.append(f"stages[{i}].steps: intero >= 0 atteso")
    return errors


def canonical_json(config: Dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(',', ':'), ensure_ascii=False)


@dataclass
class Scenario:
    """Scenario completo (default gia' applicati); immutabile per convenzione"""
    config: Dict
    source: Optional[str] = None

    # Accesso ai campi

    @property
    def name(self) -> str:
        return self.config['name']

    @property
    def steps(self) -> int:
        return self.config['steps']

    @property
    def trials(self) -> int:
        return self.config['trials']

    @property
    def seed(self) -> int:
        return self.config['seed']

    @property
    def threads(self) -> int:
        return self.config['threads']

    @property
    def kind(self) -> str:
        return self.config['landscape']['kind']

    @property
    def dimension(self) -> int:
        return self.config['landscape']['dimension']

    @property
    def output_dir(self) -> str:
        return self.config['output']['directory']

    @property
    def optimizer_section(self) -> Dict:
        return self.config['optimizer']

    @property
    def method(self) -> str:
        return self.optimizer_section.get('method', 'es')

    @property
    def analysis(self) -> Dict:
        return self.config.get('analysis') or {}

    @property
    def checks(self) -> List[Dict]:
        return self.config['validation'].get('checks', [])

    # Serializzazione

    def to_json(self) -> str:
        return json.dumps(self.config, indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def hash(self) -> str:
        """Prime 16 cifre esadecimali dello SHA-256 del JSON canonico"""
        return hashlib.sha256(canonical_json(self.config).encode('utf-8')).hexdigest()[:16]

    def with_seed(self, seed: int) -> 'Scenario':
        """
        Copia con un altro seed master

        Directory di output e numero di worker non entrano nello scenario:
        non cambiano i risultati e quindi nemmeno l'hash.
        """
        return parse_scenario(_merge(self.config, {'seed': seed}), self.source)

    # Oggetti di dominio

    @cached_property
    def landscape(self) -> Landscape:
        return build_landscape(self.config['landscape'])

    @cached_property
    def noise(self) -> NoiseModel:
        """Rumore di osservazione; signal_fraction s fissa sigma_xi = sigma ||v|| sqrt((1-s)/s)"""
        noise = self.config['noise']
        fraction = noise.get('signal_fraction')
        if fraction is None:
            return NoiseModel(noise.get('sigma_xi', 0.0))
        if self.kind != 'linear':
            raise ScenarioError("Scenario non valido", ["noise.signal_fraction: ammesso solo per superfici lineari"])
        v = build_v(self.config['landscape'].get('v', {'mode': 'unit'}), self.dimension)
        sigma = self.optimizer_section.get('sigma', 0.02)
        return NoiseModel(sigma * float(np.linalg.norm(v)) * math.sqrt((1.0 - fraction) / fraction))

    @cached_property
    def theta0(self) -> np.ndarray:
        section = self.config['theta0']
        mode = section.get('mode', 'constant')
        d = self.dimension
        if mode == 'constant':
            return np.full(d, float(section.get('value', 0.0)))
        if mode == 'explicit':
            values = np.asarray(section.get('values', []), dtype=float)
            if values.shape[0] != d:
                raise ScenarioError("Scenario non valido", [f"theta0.values: lunghezza {values.shape[0]}, attesa d={d}"])
            return values
        rng = np.random.default_rng(section.get('seed', 0))
        return float(section.get('scale', 1.0)) * rng.standard_normal(d)

    def sigma_R_at_theta0(self) -> float:
        """sigma_R(theta_0) analitico, usato come sigma_R congelato con 'auto'"""
        landscape = self.landscape
        sigma = self.optimizer_section.get('sigma', 0.02)
        sigma_xi = self.noise.sigma_xi
        grad_norm = float(np.linalg.norm(landscape.gradient(self.theta0)))
        trace_q2 = landscape.trace_q2 if isinstance(landscape, QuadraticLandscape) else 0.0
        try:
            return sigma_R_quadratic(sigma, grad_norm, trace_q2, sigma_xi)
        except TheoryError as e:
            raise ScenarioError("Scenario non valido", [f"optimizer.sigma_R_fixed: 'auto' impossibile ({e})"])

    def _resolved_optimizer_section(self) -> Dict:
        section = dict(self.optimizer_section)
        if section.get('method') == 'ou' and section.get('sigma_R_fixed', 'auto') == 'auto':
            section['sigma_R_fixed'] = self.sigma_R_at_theta0()
        return section

    def optimizer(self) -> OptimizerConfig:
        return build_optimizer_config(self._resolved_optimizer_section(), self.seed, self.steps)

    def gd_optimizer(self) -> Optional[GdConfig]:
        """Ottimizzatore GD di confronto (sezione 'gd' oppure optimizer se gia' GD)"""
        if self.method == 'gd':
            return build_optimizer_config(self.optimizer_section, steps=self.steps)
        if self.config.get('gd') is None:
            return None
        return build_optimizer_config(dict(self.config['gd'], method='gd'), steps=self.steps)

    def record_spec(self) -> RecordSpec:
        record = self.config['record']
        return RecordSpec(
            directions=tuple(int(k) for k in record.get('directions', [])),
            keep_final=bool(record.get('keep_final', False)),
            groups=tuple((g['name'], int(g['size'])) for g in record.get('groups', [])),
        )

    def stage_landscapes(self) -> List:
        return [(build_landscape(stage['landscape']), int(stage['steps'])) for stage in self.config['stages']]

    def prediction_params(self) -> Dict:
        """Parametri usati dalle previsioni; prediction_overrides cambia solo questo lato"""
        section = self._resolved_optimizer_section()
        sigma = float(section.get('sigma', 0.02))
        params = {
            'sigma': sigma,
            'alpha': float(section['alpha']) if section.get('alpha') is not None else sigma / 2.0,
            'population': int(section.get('population', 30)),
            'sigma_R_fixed': section.get('sigma_R_fixed'),
        }
        gd = self.gd_optimizer()
        params['beta'] = gd.beta if gd is not None else None
        overrides = self.config['validation'].get('prediction_overrides') or {}
        params.update({k: v for k, v in overrides.items() if v is not None})
        return params


def parse_scenario(values: Dict, source: Optional[str] = None) -> Scenario:
    """Applica i default e valida; solleva ScenarioError con tutti i campi non validi"""
    if not isinstance(values, dict):
        raise ScenarioError("Lo scenario deve essere un oggetto JSON")
    config = _merge(_get_default_config(), values)
    errors = validate_config(config)
    if errors:
        raise ScenarioError("Scenario non valido", errors)
    scenario = Scenario(config, source)
    try:
        if config['landscape']['kind'] != 'flat':
            scenario.landscape
    except LandscapeError as e:
        raise ScenarioError("Scenario non valido", [f"landscape: {e}"])
    return scenario


def load_scenario(path: str) -> Scenario:
    """Carica uno scenario JSON da file"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            values = json.load(f)
    except FileNotFoundError:
        raise ScenarioError(f"File di scenario {path} non trovato")
    except json.JSONDecodeError as e:
        raise ScenarioError(f"JSON non valido in {path}", [f"riga {e.lineno}, colonna {e.colno}: {e.msg}"])
    scenario = parse_scenario(values, path)
    _log(f"[OK] Scenario '{scenario.name}' caricato da {path} (hash {scenario.hash()})")
    return scenario
