#!/usr/bin/env python3
"""
Previsioni in forma chiusa di uno scenario e confronto teoria / simulazione

predict_all() raccoglie tutte le previsioni applicabili in un documento
piatto con chiavi per famiglia ("flat.slope", "ou.gamma[3]", ...).
run_validation() esegue i controlli elencati in validation.checks.
"""

import math
import sys
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

import analysis
import theory
from landscape import LinearLandscape, QuadraticLandscape
from optimizer import (
    EsConfig,
    RecordSpec,
    es_update_samples,
    run_trajectory,
    run_trials,
    trial_seed,
)
from scenario import Scenario, ScenarioError

VERBOSE = True

# Quante direzioni attive riportare in predict se record.directions e' vuoto
MAX_PREDICTED_DIRECTIONS = 16

# Oltre questa dimensione la covarianza densa non viene costruita
MAX_DENSE_DIMENSION = 2000


def _log(message: str):
    if VERBOSE:
        print(f"[THEORY] {message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# Previsioni
# ---------------------------------------------------------------------------

def _directions(scenario: Scenario, landscape) -> List[int]:
    directions = list(scenario.config['record'].get('directions', []))
    if directions:
        return directions
    if isinstance(landscape, QuadraticLandscape):
        return [int(k) for k in landscape.active[:MAX_PREDICTED_DIRECTIONS]]
    return []


def _sigma_R_fixed(scenario: Scenario, params: Dict) -> float:
    fixed = params.get('sigma_R_fixed')
    if fixed is None or fixed == 'auto':
        return scenario.sigma_R_at_theta0()
    return float(fixed)


def predict_all(scenario: Scenario) -> Dict:
    """Documento JSON di tutte le previsioni applicabili allo scenario"""
    params = scenario.prediction_params()
    alpha, sigma, N = params['alpha'], params['sigma'], params['population']
    beta = params.get('beta')
    d, T, kind, method = scenario.dimension, scenario.steps, scenario.kind, scenario.method
    doc = {
        'scenario.name': scenario.name,
        'scenario.hash': scenario.hash(),
        'scenario.landscape': scenario.landscape.describe(),
        'flags': [],
    }

    if method in ('es', 'ou'):
        doc['flat.step_variance'] = theory.flat_step_variance(alpha, N)
        if kind == 'flat':
            doc['flat.slope'] = theory.flat_drift_slope(alpha, d, N)
            doc['flat.drift'] = theory.flat_drift(alpha, T, d, N)
            doc['flat.d_eff'] = float(d)
            if scenario.noise.sigma_xi == 0.0 and method == 'es':
                doc['flags'].append("superficie piatta senza rumore: popolazione degenere, aggiornamento nullo")

    if kind == 'linear':
        _predict_linear(scenario, doc, alpha, sigma, N)
    elif kind == 'quadratic':
        _predict_quadratic(scenario, doc, params, beta)

    _log(f"{len(doc) - 4} previsioni per '{scenario.name}' ({len(doc['flags'])} avvisi)")
    return doc


def _predict_linear(scenario: Scenario, doc: Dict, alpha: float, sigma: float, N: int):
    landscape: LinearLandscape = scenario.landscape
    sigma_xi = scenario.noise.sigma_xi
    v_norm = landscape.v_norm
    sigma_R = theory.sigma_R_linear(sigma, v_norm, sigma_xi)
    doc['linear.sigma_R'] = sigma_R
    if sigma_R == 0.0:
        doc['flags'].append("sigma_R = 0: distribuzione dei reward degenere")
        return
    s = theory.signal_fraction(sigma, v_norm, sigma_R)
    doc['linear.signal_fraction'] = s
    doc['linear.mean_norm'] = alpha * sigma * v_norm / sigma_R
    doc['linear.rho'] = theory.rho_linear(s, N, scenario.dimension)
    doc['linear.rho_finite_N'] = theory.rho_linear_finite(s, N, scenario.dimension)
    zscore = scenario.optimizer_section.get('zscore', 'population')
    doc['linear.mean_norm_finite_N'] = doc['linear.mean_norm'] * theory.population_std_factor(N, zscore)


def _predict_quadratic(scenario: Scenario, doc: Dict, params: Dict, beta: Optional[float]):
    landscape: QuadraticLandscape = scenario.landscape
    alpha, sigma, N = params['alpha'], params['sigma'], params['population']
    d, T, method = scenario.dimension, scenario.steps, scenario.method
    theta0 = scenario.theta0
    sigma_xi = scenario.noise.sigma_xi
    spectrum = np.asarray(landscape.eigenvalues)
    basis = landscape.basis_matrix
    coords = landscape.eigen_coordinates(theta0)
    directions = _directions(scenario, landscape)

    v = landscape.q_times(theta0)
    v_norm = float(np.linalg.norm(v))
    doc['quadratic.trace_Q2'] = landscape.trace_q2
    doc['quadratic.grad_norm'] = v_norm
    doc['quadratic.rank'] = landscape.rank
    try:
        sigma_R = theory.sigma_R_quadratic(sigma, v_norm, landscape.trace_q2, sigma_xi)
    except theory.TheoryError as e:
        doc['flags'].append(str(e))
        sigma_R = None
    if sigma_R is not None:
        sigma_R_lin = theory.sigma_R_linear(sigma, v_norm, sigma_xi)
        doc['quadratic.sigma_R'] = sigma_R
        doc['quadratic.sigma_R_linear'] = sigma_R_lin
        doc['quadratic.attenuation'] = sigma_R_lin / sigma_R
        doc['quadratic.mean_norm'] = alpha * sigma * v_norm / sigma_R
        if v_norm > 0:
            doc['quadratic.rho'] = theory.rho_quadratic(v, spectrum, sigma, N, d, sigma_xi, basis)

    if method in ('es', 'ou') and sigma_R is not None:
        fixed = _sigma_R_fixed(scenario, params)
        doc['ou.sigma_R_fixed'] = fixed
        doc['ou.stability_threshold'] = theory.ou_stability_threshold(alpha, sigma, fixed)
        doc['ou.optimal_curvature'] = theory.optimal_curvature(alpha, sigma, fixed)
        for k in directions:
            lam = float(spectrum[k])
            gamma = theory.contraction_factor(alpha, sigma, fixed, lam)
            stable = abs(gamma) < 1.0
            doc[f'ou.eigenvalue[{k}]'] = lam
            doc[f'ou.gamma[{k}]'] = gamma
            doc[f'ou.stable[{k}]'] = stable
            doc[f'ou.mean_T[{k}]'] = theory.ou_projected_mean(coords[k], gamma, T)
            doc[f'ou.variance_T[{k}]'] = theory.ou_projected_variance(alpha, N, gamma, T)
            if stable:
                doc[f'ou.asymptotic_variance[{k}]'] = theory.ou_asymptotic_variance(alpha, N, gamma)
                doc[f'ou.timescale[{k}]'] = theory.convergence_timescale(gamma)
                doc[f'ou.asymptotic_variance_approx[{k}]'] = theory.ou_asymptotic_variance_well_conditioned(
                    alpha, sigma, fixed, N, lam)
            elif abs(gamma) > 1.0:
                doc['flags'].append(f"OU direzione {k}: |gamma| = {abs(gamma):.6g} > 1, instabile")

    if beta is not None:
        for k in directions:
            lam = float(spectrum[k])
            projection = theory.gd_projected(coords[k], beta, lam, T)
            doc[f'gd.factor[{k}]'] = 1.0 - beta * lam
            doc[f'gd.stable[{k}]'] = projection.stable
            doc[f'gd.projection_T[{k}]'] = projection.value
            if projection.stable:
                doc[f'gd.timescale[{k}]'] = theory.gd_convergence_timescale(beta, lam)
            elif lam != 0.0:
                doc['flags'].append(f"GD direzione {k}: lambda = {lam:.6g} >= 2/beta, divergente")

    if beta is not None and method in ('es', 'ou') and sigma_R is not None:
        es_params = {'alpha': alpha, 'sigma': sigma, 'sigma_R_fixed': _sigma_R_fixed(scenario, params),
                     'population': N}
        decomposition = theory.displacement_decomposition(theta0, spectrum, es_params, T, basis)
        doc['displacement.signal_sq_norm'] = decomposition['signal_sq_norm']
        doc['displacement.diffusion_sq_norm'] = decomposition['diffusion_sq_norm_expected']
        doc['displacement.total'] = decomposition['total_expected']
        doc['hierarchy.gd_sq_norm'] = theory.gd_displacement_sq(theta0, spectrum, beta, T, basis)
        doc['hierarchy.es_gd_diff'] = theory.es_gd_difference_expected(alpha, T, d, landscape.rank, N)
        prediction = theory.hierarchy_prediction(theta0, spectrum, es_params, beta, T, basis)
        doc['hierarchy.es_gd_diff_full'] = prediction.es_gd_diff_sq_norm
        doc['hierarchy.es_over_diff'] = prediction.es_sq_norm / prediction.es_gd_diff_sq_norm
        if landscape.rank >= 1:
            doc['hierarchy.cosine_scale'] = prediction.expected_cosine_scale


# ---------------------------------------------------------------------------
# Controlli
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    quantity: str
    predicted: Optional[float]
    observed: Optional[float]
    tolerance: float
    mode: str
    passed: bool
    stderr: Optional[float] = None
    note: str = ''

    @property
    def verdict(self) -> str:
        return 'PASS' if self.passed else 'FAIL'

    def to_dict(self) -> Dict:
        return {
            'quantity': self.quantity,
            'predicted': self.predicted,
            'observed': self.observed,
            'tolerance': self.tolerance,
            'mode': self.mode,
            'stderr': self.stderr,
            'verdict': self.verdict,
            'note': self.note,
        }


def compare(quantity: str, predicted, observed, tolerance: float, mode: str,
            stderr: Optional[float] = None, note: str = '') -> CheckResult:
    """
    Confronta osservato e previsto

    relative:    |obs - pred| <= tol |pred|
    absolute:    |obs - pred| <= tol
    stderr:      |obs - pred| <= tol SE (+ 1e-12 max(1, |pred|))
    upper_bound: obs <= tol pred
    """
    defined = (predicted is not None and observed is not None
               and math.isfinite(predicted) and math.isfinite(observed))
    if not defined:
        return CheckResult(quantity, predicted, observed, tolerance, mode, False, stderr,
                           note or 'valore non definito')
    gap = abs(observed - predicted)
    if mode == 'relative':
        passed = gap <= tolerance * abs(predicted)
    elif mode == 'absolute':
        passed = gap <= tolerance
    elif mode == 'stderr':
        if stderr is None:
            raise ScenarioError("Controllo non valido", [f"{quantity}: modo stderr senza errore standard"])
        passed = gap <= tolerance * stderr + 1e-12 * max(1.0, abs(predicted))
    elif mode == 'upper_bound':
        passed = observed <= tolerance * predicted
    else:
        raise ScenarioError("Controllo non valido", [f"{quantity}: modo '{mode}' non supportato"])
    return CheckResult(quantity, float(predicted), float(observed), tolerance, mode, bool(passed),
                       None if stderr is None else float(stderr), note)


class ValidationRun:
    """
    Simulazioni pigre condivise dai controlli di uno scenario

    Ogni simulazione (insieme di trial, campioni di aggiornamento,
    gerarchia) viene eseguita al primo uso e riutilizzata.
    """

    def __init__(self, scenario: Scenario, threads: Optional[int] = None):
        self.scenario = scenario
        self.threads = threads or scenario.threads
        self.params = scenario.prediction_params()
        self.landscape = scenario.landscape
        self.noise = scenario.noise
        self.theta0 = scenario.theta0
        self.records = None
        self.diverged = 0
        self._ensemble = None
        self._updates = {}
        self._hierarchy = None
        self._gd_record = None

    # Simulazioni

    def ensemble(self) -> Dict:
        if self._ensemble is None:
            sc = self.scenario
            self.records = run_trials(self.theta0, self.landscape, self.noise, sc.optimizer(), sc.steps,
                                      sc.record_spec(), sc.trials, sc.seed, self.threads)
            kept = [r for r in self.records if not r.diverged]
            self.diverged = len(self.records) - len(kept)
            if not kept:
                raise analysis.DivergenceError("Tutte le traiettorie sono divergenti")
            self._ensemble = analysis.ensemble_stats(kept)
        return self._ensemble

    def updates(self, landscape=None, key: str = 'main') -> np.ndarray:
        """Campioni di un singolo aggiornamento ES da theta_0"""
        if key not in self._updates:
            cfg = self.scenario.optimizer()
            if not isinstance(cfg, EsConfig):
                raise ScenarioError("Controllo non valido", ["i controlli sui passi richiedono optimizer.method = es"])
            samples = int(self.scenario.analysis.get('moments', {}).get('samples', 10_000))
            stream = 0 if key == 'main' else 2
            rng = np.random.default_rng(trial_seed(self.scenario.seed, stream))
            updates, degenerate = es_update_samples(self.theta0, landscape or self.landscape, self.noise,
                                                    cfg, samples, rng)
            if degenerate:
                _log(f"[!] {degenerate} passi degeneri su {samples}")
            self._updates[key] = updates
        return self._updates[key]

    def hierarchy(self) -> Dict:
        if self._hierarchy is None:
            sc = self.scenario
            es_cfg, gd_cfg = sc.optimizer(), sc.gd_optimizer()
            if not isinstance(es_cfg, EsConfig) or gd_cfg is None:
                raise ScenarioError("Controllo non valido", ["la gerarchia richiede optimizer ES e sezione gd"])
            self._hierarchy = analysis.hierarchy_measurement(
                self.theta0, self.landscape, es_cfg, gd_cfg, sc.steps, sc.trials, self.noise, sc.seed, self.threads)
        return self._hierarchy

    def gd_record(self):
        if self._gd_record is None:
            sc = self.scenario
            gd_cfg = sc.gd_optimizer()
            if gd_cfg is None:
                raise ScenarioError("Controllo non valido", ["i controlli GD richiedono un ottimizzatore gd"])
            recorded = sc.record_spec()
            self._gd_record = run_trajectory(self.theta0, self.landscape, self.noise, gd_cfg,
                                             record_spec=RecordSpec(recorded.directions, True, recorded.groups))
        return self._gd_record

    # Quantita' previste condivise

    def gradient_vector(self) -> np.ndarray:
        """v tale che E[dtheta] = -alpha sigma v / sigma_R"""
        if isinstance(self.landscape, LinearLandscape):
            return np.asarray(self.landscape.v)
        if isinstance(self.landscape, QuadraticLandscape):
            return self.landscape.q_times(self.theta0)
        return np.zeros(self.landscape.dimension)

    def step_moments(self) -> theory.StepMoments:
        spectrum, basis = None, None
        if isinstance(self.landscape, QuadraticLandscape):
            spectrum, basis = np.asarray(self.landscape.eigenvalues), self.landscape.basis_matrix
        return theory.es_step_moments(self.landscape.kind, self.gradient_vector(), spectrum,
                                      self.params['sigma'], self.params['alpha'], self.params['population'],
                                      self.noise.sigma_xi, basis)

    def predicted_sigma_R(self) -> float:
        sigma, sigma_xi = self.params['sigma'], self.noise.sigma_xi
        v_norm = float(np.linalg.norm(self.gradient_vector()))
        if isinstance(self.landscape, QuadraticLandscape):
            return theory.sigma_R_quadratic(sigma, v_norm, self.landscape.trace_q2, sigma_xi)
        return theory.sigma_R_linear(sigma, v_norm, sigma_xi)

    def times(self, check: Dict) -> List[int]:
        return [int(t) for t in check.get('times', [self.scenario.steps])]

    def check_directions(self, check: Dict) -> List[int]:
        recorded = [int(k) for k in self.scenario.config['record'].get('directions', [])]
        directions = [int(k) for k in check.get('directions', recorded)]
        missing = [k for k in directions if k not in recorded]
        if missing:
            raise ScenarioError("Controllo non valido",
                                [f"{check['name']}: direzioni {missing} non presenti in record.directions"])
        return directions

    def gamma(self, k: int) -> float:
        fixed = _sigma_R_fixed(self.scenario, self.params)
        return theory.contraction_factor(self.params['alpha'], self.params['sigma'], fixed,
                                         self.landscape.eigenvalue(k))


def _mode(check: Dict, default: str) -> str:
    return check.get('mode') or default


def _check_flat_drift(run: ValidationRun, check: Dict) -> List[CheckResult]:
    ens = run.ensemble()
    p = run.params
    results = []
    for t in run.times(check):
        predicted = theory.flat_drift(p['alpha'], t, run.scenario.dimension, p['population'])
        results.append(compare(f"flat_drift[t={t}]", predicted, ens['mean_drift'][t], check['tolerance'],
                               _mode(check, 'relative'), ens['stderr_drift'][t]))
    return results


def _drift_fit(run: ValidationRun) -> analysis.DriftFit:
    p = run.params
    return analysis.fit_drift(run.ensemble()['mean_drift'], p['alpha'], p['population'], run.scenario.dimension)


def _check_drift_fit_ratio(run: ValidationRun, check: Dict) -> List[CheckResult]:
    fit = _drift_fit(run)
    d = run.scenario.dimension
    predicted = (d - run.landscape.rank) / d
    return [compare("drift_fit.d_eff_ratio", predicted, fit.d_eff_ratio, check['tolerance'],
                    _mode(check, 'relative'), note=f"slope {fit.slope:.6g}")]


def _check_drift_fit_r2(run: ValidationRun, check: Dict) -> List[CheckResult]:
    fit = _drift_fit(run)
    return [compare("drift_fit.r_squared", 1.0, fit.r_squared, check['tolerance'], _mode(check, 'absolute'))]


def _predicted_covariance(run: ValidationRun) -> np.ndarray:
    if run.landscape.dimension > MAX_DENSE_DIMENSION:
        raise ScenarioError("Controllo non valido", [f"covarianza densa limitata a d <= {MAX_DENSE_DIMENSION}"])
    return run.step_moments().dense_covariance()


def _check_step_variance(run: ValidationRun, check: Dict) -> List[CheckResult]:
    step_stats = analysis.sample_step_statistics(run.updates())
    predicted = np.diag(_predicted_covariance(run))
    observed = step_stats['variance']
    worst = int(np.argmax(np.abs(observed - predicted) / np.where(predicted > 0, predicted, 1.0)))
    return [compare(f"step_variance[{worst}] (peggiore)", predicted[worst], observed[worst], check['tolerance'],
                    _mode(check, 'relative'), step_stats['variance_stderr'][worst],
                    note=f"{observed.shape[0]} coordinate")]


def _check_step_offdiag(run: ValidationRun, check: Dict) -> List[CheckResult]:
    step_stats = analysis.sample_step_statistics(run.updates())
    predicted = _predicted_covariance(run)
    var = step_stats['variance']
    se = np.sqrt(np.outer(var, var) / step_stats['samples'])
    with np.errstate(divide='ignore', invalid='ignore'):
        z = np.where(se > 0, np.abs(step_stats['covariance'] - predicted) / se, 0.0)
    np.fill_diagonal(z, 0.0)
    return [compare("step_offdiag.max_z", 0.0, float(z.max()), check['tolerance'], _mode(check, 'absolute'),
                    note="massimo |cov_ij - previsto| in errori standard")]


def _check_linear_mean(run: ValidationRun, check: Dict) -> List[CheckResult]:
    step_stats = analysis.sample_step_statistics(run.updates())
    moments = run.step_moments()
    direction = moments.rank1_direction
    predicted_mean = moments.mean
    note = 'limite N grande'
    if check.get('finite_population') and isinstance(run.landscape, LinearLandscape):
        zscore = run.scenario.optimizer_section.get('zscore', 'population')
        predicted_mean = theory.es_linear_mean_finite(run.params['alpha'], run.params['sigma'],
                                                      run.gradient_vector(), moments.sigma_R,
                                                      run.params['population'], zscore)
        note = 'N finito'
    mean = step_stats['mean']
    along = float(mean @ direction)
    se_along = float(np.sqrt(run.updates().dot(direction).var(ddof=1) / step_stats['samples']))
    results = [compare("linear_mean.on", float(predicted_mean @ direction), along, check['tolerance'],
                       _mode(check, 'relative'), se_along, note)]

    residual = (mean - along * direction) - (predicted_mean - float(predicted_mean @ direction) * direction)
    z = np.abs(residual) / step_stats['mean_stderr']
    results.append(compare("linear_mean.off.max_z", 0.0, float(z.max()), float(check.get('off_tolerance', 4.0)),
                           'absolute', note="componenti ortogonali a v in errori standard"))
    return results


def _check_on_manifold_fraction(run: ValidationRun, check: Dict) -> List[CheckResult]:
    moments = run.step_moments()
    d, N = run.scenario.dimension, run.params['population']
    direction = moments.rank1_direction
    if not np.any(direction):
        direction = np.eye(d)[0]
    stats = analysis.manifold_projection_stats(run.updates(), direction)

    if isinstance(run.landscape, LinearLandscape):
        s = theory.signal_fraction(run.params['sigma'], moments.v_norm, moments.sigma_R)
        finite = bool(check.get('finite_population'))
        predicted = theory.rho_linear_finite(s, N, d) if finite else theory.rho_linear(s, N, d)
        note = 'N finito' if finite else 'limite N grande'
    elif isinstance(run.landscape, QuadraticLandscape):
        predicted = theory.rho_quadratic(run.gradient_vector(), run.landscape.eigenvalues, run.params['sigma'],
                                         N, d, run.noise.sigma_xi, run.landscape.basis_matrix)
        note = 'limite N grande'
    else:
        predicted, note = 1.0 / d, 'direzione e_0'
    return [compare("on_manifold_fraction", predicted, stats['on_fraction'], check['tolerance'],
                    _mode(check, 'relative'), stats['on_stderr'], note)]


def _check_sigma_R(run: ValidationRun, check: Dict) -> List[CheckResult]:
    samples = int(run.scenario.analysis.get('moments', {}).get('reward_samples', 1_000_000))
    rng = np.random.default_rng(trial_seed(run.scenario.seed, 1))
    # perturbazioni con il sigma effettivo; prediction_overrides tocca solo la previsione
    sigma = float(run.scenario.optimizer_section.get('sigma', 0.02))
    stats = analysis.sample_reward_statistics(run.landscape, run.noise, run.theta0, sigma, samples, rng)
    return [compare("sigma_R", run.predicted_sigma_R(), stats['std'], check['tolerance'],
                    _mode(check, 'relative'), note=f"{stats['samples']} perturbazioni")]


def _check_attenuation_ratio(run: ValidationRun, check: Dict) -> List[CheckResult]:
    if not isinstance(run.landscape, QuadraticLandscape):
        raise ScenarioError("Controllo non valido", ["attenuation_ratio richiede una superficie quadratica"])
    v = run.gradient_vector()
    v_norm = float(np.linalg.norm(v))
    if v_norm == 0.0:
        raise ScenarioError("Controllo non valido", ["attenuation_ratio richiede Q theta_0 != 0"])
    direction = v / v_norm
    quad_mean = float(run.updates().mean(axis=0) @ direction)
    linear_mean = float(run.updates(LinearLandscape(v), key='linear').mean(axis=0) @ direction)

    sigma, sigma_xi = run.params['sigma'], run.noise.sigma_xi
    predicted = theory.sigma_R_linear(sigma, v_norm, sigma_xi) / run.predicted_sigma_R()
    return [compare("attenuation_ratio", predicted, quad_mean / linear_mean, check['tolerance'],
                    _mode(check, 'relative'), note="media on-manifold quadratica / lineare")]


def _check_ou_mean(run: ValidationRun, check: Dict) -> List[CheckResult]:
    ens = run.ensemble()
    results = []
    for k in run.check_directions(check):
        c = float(run.landscape.projections(run.theta0, [k])[0])
        gamma = run.gamma(k)
        for t in run.times(check):
            proj = ens['projections'][k]
            results.append(compare(f"ou_mean[k={k},t={t}]", theory.ou_projected_mean(c, gamma, t),
                                   proj['mean'][t], check['tolerance'], _mode(check, 'stderr'),
                                   proj['mean_stderr'][t], f"gamma {gamma:.4g}"))
    return results


def _check_ou_variance(run: ValidationRun, check: Dict) -> List[CheckResult]:
    ens = run.ensemble()
    p = run.params
    results = []
    for k in run.check_directions(check):
        gamma = run.gamma(k)
        for t in run.times(check):
            proj = ens['projections'][k]
            predicted = theory.ou_projected_variance(p['alpha'], p['population'], gamma, t)
            results.append(compare(f"ou_variance[k={k},t={t}]", predicted, proj['var'][t], check['tolerance'],
                                   _mode(check, 'stderr'), proj['var_stderr'][t], f"gamma {gamma:.4g}"))
    return results


def _check_ou_flat_slope(run: ValidationRun, check: Dict) -> List[CheckResult]:
    ens = run.ensemble()
    flat = [k for k in run.check_directions(check) if run.landscape.eigenvalue(k) == 0.0]
    if not flat:
        raise ScenarioError("Controllo non valido", ["ou_flat_slope richiede direzioni piatte registrate"])
    pooled = np.mean([ens['projections'][k]['var'] for k in flat], axis=0)
    p = run.params
    return [compare("ou_flat_slope", p['alpha'] ** 2 / p['population'], analysis.variance_slope(pooled),
                    check['tolerance'], _mode(check, 'relative'), note=f"{len(flat)} direzioni piatte")]


def _check_gd_projection(run: ValidationRun, check: Dict) -> List[CheckResult]:
    record = run.gd_record()
    beta = run.params['beta']
    worst = 0.0
    for k in run.check_directions(check):
        c = float(run.landscape.projections(run.theta0, [k])[0])
        lam = run.landscape.eigenvalue(k)
        for t, observed in enumerate(record.projections[k]):
            predicted = theory.gd_projected(c, beta, lam, t).value
            error = abs(observed - predicted) / max(abs(predicted), np.finfo(float).tiny)
            worst = max(worst, 0.0 if observed == predicted else error)
    return [compare("gd_projection.max_rel_error", 0.0, worst, check['tolerance'], _mode(check, 'absolute'),
                    note=f"{record.steps} passi")]


def _check_gd_frozen(run: ValidationRun, check: Dict) -> List[CheckResult]:
    if not isinstance(run.landscape, QuadraticLandscape) or run.landscape.basis != 'canonical':
        raise ScenarioError("Controllo non valido", ["gd_frozen richiede una quadratica in base canonica"])
    record = run.gd_record()
    flat = np.flatnonzero(np.asarray(run.landscape.eigenvalues) == 0.0)
    changed = int(np.count_nonzero(record.final_theta[flat] != run.theta0[flat]))
    return [compare("gd_frozen.changed", 0.0, float(changed), check['tolerance'], _mode(check, 'absolute'),
                    note=f"{flat.shape[0]} coordinate piatte")]


def _check_hierarchy_gd(run: ValidationRun, check: Dict) -> List[CheckResult]:
    result = run.hierarchy()
    landscape = run.landscape
    predicted = theory.gd_displacement_sq(run.theta0, landscape.eigenvalues, run.params['beta'],
                                          run.scenario.steps, landscape.basis_matrix)
    return [compare("hierarchy.gd_sq", predicted, result['gd_sq'], check['tolerance'], _mode(check, 'relative'))]


def _check_hierarchy_diff(run: ValidationRun, check: Dict) -> List[CheckResult]:
    result = run.hierarchy()
    p = run.params
    predicted = theory.es_gd_difference_expected(p['alpha'], run.scenario.steps, run.scenario.dimension,
                                                 run.landscape.rank, p['population'])
    return [compare("hierarchy.diff_sq_mean", predicted, result['diff_sq_mean'], check['tolerance'],
                    _mode(check, 'relative'), result['diff_sq_stderr'],
                    f"{result['trials_used']} trial, {result['excluded']} esclusi")]


def _check_hierarchy_ratio(run: ValidationRun, check: Dict) -> List[CheckResult]:
    result = run.hierarchy()
    p = run.params
    es_params = {'alpha': p['alpha'], 'sigma': p['sigma'], 'population': p['population'],
                 'sigma_R_fixed': _sigma_R_fixed(run.scenario, p)}
    prediction = theory.hierarchy_prediction(run.theta0, run.landscape.eigenvalues, es_params, p['beta'],
                                             run.scenario.steps, run.landscape.basis_matrix)
    return [
        compare("hierarchy.es_over_diff", prediction.es_sq_norm / prediction.es_gd_diff_sq_norm,
                result['es_sq_mean'] / result['diff_sq_mean'], check['tolerance'], _mode(check, 'relative')),
        compare("hierarchy.gd_over_diff", 1.0, result['gd_sq'] / result['diff_sq_mean'], 1.0, 'upper_bound',
                note="ordinamento gd_sq < diff_sq"),
    ]


def _check_cosine_band(run: ValidationRun, check: Dict) -> List[CheckResult]:
    result = run.hierarchy()
    scale = theory.expected_cosine_scale(max(1, run.landscape.rank), run.scenario.dimension)
    observed = None if result['cosine_mean'] is None else abs(result['cosine_mean'])
    return [compare("cosine_band.abs_mean", scale, observed, check['tolerance'], _mode(check, 'upper_bound'),
                    note=f"{result['cosine_undefined']} coseni non definiti")]


def _check_interpolation_barrier(run: ValidationRun, check: Dict) -> List[CheckResult]:
    result = run.hierarchy()
    points = int(run.scenario.analysis.get('interpolate', {}).get('points', 9))
    barriers = [analysis.interpolate_path(theta_es, result['theta_gd'], run.landscape, points).barrier
                for theta_es in result['theta_es']]
    scale = abs(run.landscape.reward(run.theta0) - run.landscape.reward(result['theta_gd']))
    return [compare("interpolation_barrier.mean", scale, float(np.mean(barriers)), check['tolerance'],
                    _mode(check, 'upper_bound'), note=f"{points} punti, {len(barriers)} trial")]


CHECKS: Dict[str, Callable[[ValidationRun, Dict], List[CheckResult]]] = {
    'flat_drift': _check_flat_drift,
    'drift_fit_ratio': _check_drift_fit_ratio,
    'drift_fit_r2': _check_drift_fit_r2,
    'step_variance': _check_step_variance,
    'step_offdiag': _check_step_offdiag,
    'linear_mean': _check_linear_mean,
    'on_manifold_fraction': _check_on_manifold_fraction,
    'sigma_R': _check_sigma_R,
    'attenuation_ratio': _check_attenuation_ratio,
    'ou_mean': _check_ou_mean,
    'ou_variance': _check_ou_variance,
    'ou_flat_slope': _check_ou_flat_slope,
    'gd_projection': _check_gd_projection,
    'gd_frozen': _check_gd_frozen,
    'hierarchy_gd': _check_hierarchy_gd,
    'hierarchy_diff': _check_hierarchy_diff,
    'hierarchy_ratio': _check_hierarchy_ratio,
    'cosine_band': _check_cosine_band,
    'interpolation_barrier': _check_interpolation_barrier,
}


def run_validation(scenario: Scenario, run: Optional[ValidationRun] = None) -> List[CheckResult]:
    """Esegue tutti i controlli richiesti dallo scenario"""
    checks = scenario.checks
    if not checks:
        raise ScenarioError("Scenario non valido", ["validation.checks: nessun controllo richiesto"])
    unknown = [c['name'] for c in checks if c['name'] not in CHECKS]
    if unknown:
        raise ScenarioError("Scenario non valido",
                            [f"validation.checks: controllo sconosciuto '{name}'" for name in unknown])

    run = run or ValidationRun(scenario)
    results: List[CheckResult] = []
    for check in checks:
        rows = CHECKS[check['name']](run, check)
        for row in rows:
            status = "[OK]" if row.passed else "[X]"
            _log(f"{status} {row.quantity}: previsto {row.predicted} osservato {row.observed}")
        results.extend(rows)
    return results


def format_table(results: List[CheckResult]) -> str:
    """Tabella testuale (quantita', previsto, osservato, tolleranza, esito)"""
    lines = [f"{'quantita':42} {'previsto':>14} {'osservato':>14} {'tolleranza':>16} esito",
             "-" * 96]
    for r in results:
        predicted = 'n/d' if r.predicted is None else f"{r.predicted:.6g}"
        observed = 'n/d' if r.observed is None else f"{r.observed:.6g}"
        tolerance = f"{r.tolerance:g} {r.mode}"
        lines.append(f"{r.quantity:42} {predicted:>14} {observed:>14} {tolerance:>16} {r.verdict}")
    return "\n".join(lines)
