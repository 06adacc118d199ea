#!/usr/bin/env python3
"""
Stimatori Monte-Carlo e analisi geometriche nello spazio dei pesi

- statistiche d'insieme sulle traiettorie
- regressione del drift e dimensione effettiva
- frazione on/off-manifold degli aggiornamenti
- interpolazione lineare fra checkpoint (barriera)
- sonde direzionali (delta addestrato e direzioni casuali di controllo)
- gerarchia delle distanze ES / GD
"""

import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import stats

from landscape import Landscape, NoiseModel, observe_reward_batch
from optimizer import (
    EsConfig,
    GdConfig,
    RecordSpec,
    TrajectoryRecord,
    run_trajectory,
    run_trials,
)

VERBOSE = True

DEFAULT_PROBE_SEEDS = (0, 1, 2)


def _log(message: str):
    if VERBOSE:
        print(f"[FIT] {message}", file=sys.stderr)


class AnalysisError(ValueError):
    """Input non valido per un'analisi"""


class DivergenceError(AnalysisError):
    """Nessuna traiettoria utilizzabile: l'analisi richiede traiettorie finite"""


@dataclass
class DriftFit:
    """
    Regressione senza intercetta ||theta_t - theta_0||^2 ~ s t

    r_squared vale None quando non e' definito (curva costante o nulla).
    """
    slope: float
    r_squared: Optional[float]
    d_eff: float
    d_eff_ratio: float
    pearson_r: Optional[float] = None
    points: int = 0

    @property
    def r_squared_defined(self) -> bool:
        return self.r_squared is not None

    def to_dict(self) -> Dict:
        return {
            'slope': self.slope,
            'r_squared': self.r_squared,
            'd_eff': self.d_eff,
            'd_eff_ratio': self.d_eff_ratio,
            'pearson_r': self.pearson_r,
            'points': self.points,
        }


@dataclass
class ProbeResult:
    magnitudes: np.ndarray
    rewards: np.ndarray
    direction_label: str
    stderr: Optional[np.ndarray] = None
    per_seed: List[np.ndarray] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'direction_label': self.direction_label,
            'magnitudes': self.magnitudes.tolist(),
            'rewards': self.rewards.tolist(),
            'stderr': None if self.stderr is None else self.stderr.tolist(),
        }


@dataclass
class InterpolationResult:
    mixing: np.ndarray
    rewards: np.ndarray
    barrier: float
    reward_A: float
    reward_B: float

    def to_dict(self) -> Dict:
        return {
            'mixing': self.mixing.tolist(),
            'rewards': self.rewards.tolist(),
            'barrier': self.barrier,
            'reward_A': self.reward_A,
            'reward_B': self.reward_B,
        }


# ---------------------------------------------------------------------------
# Statistiche d'insieme
# ---------------------------------------------------------------------------

def _stderr(values: np.ndarray) -> np.ndarray:
    n = values.shape[0]
    if n < 2:
        return np.zeros(values.shape[1:])
    return np.std(values, axis=0, ddof=1) / np.sqrt(n)


def ensemble_stats(trial_records: Sequence[TrajectoryRecord]) -> Dict:
    """
    Media e errore standard puntuali su piu' trial

    I record vengono ordinati per indice di trial prima della riduzione,
    quindi il risultato non dipende dall'ordine di arrivo.

    Returns:
        dict con mean_drift, stderr_drift, mean_mu_R, mean_sigma_R,
        projections {k: {mean, var, var_stderr}}, group_drift {nome: media}
    """
    if not trial_records:
        raise AnalysisError("Nessun record da aggregare")
    records = sorted(trial_records, key=lambda r: r.trial)
    lengths = {r.drift.shape[0] for r in records}
    if len(lengths) != 1:
        raise AnalysisError(f"I record hanno lunghezze diverse: {sorted(lengths)}")
    keys = {tuple(r.projections) for r in records}
    if len(keys) != 1:
        raise AnalysisError("I record non condividono le stesse direzioni registrate")

    n = len(records)
    drift = np.stack([r.drift for r in records])
    result = {
        'trials': n,
        'steps': lengths.pop() - 1,
        'mean_drift': drift.mean(axis=0),
        'stderr_drift': _stderr(drift),
        'mean_mu_R': np.stack([r.mu_R for r in records]).mean(axis=0),
        'mean_sigma_R': np.stack([r.sigma_R for r in records]).mean(axis=0),
        'projections': {},
        'group_drift': {},
    }
    for k in records[0].projections:
        values = np.stack([r.projections[k] for r in records])
        var = np.var(values, axis=0, ddof=1) if n > 1 else np.zeros(values.shape[1])
        result['projections'][k] = {
            'mean': values.mean(axis=0),
            'mean_stderr': _stderr(values),
            'var': var,
            # Errore standard della varianza campionaria per dati gaussiani
            'var_stderr': var * np.sqrt(2.0 / max(1, n - 1)),
        }
    for name in records[0].group_drift:
        result['group_drift'][name] = np.stack([r.group_drift[name] for r in records]).mean(axis=0)
    return result


def variance_slope(variance_curve) -> float:
    """Pendenza senza intercetta di una curva di varianza (t = 0 escluso)"""
    curve = np.asarray(variance_curve, dtype=float)
    if curve.shape[0] < 2:
        raise AnalysisError("Servono almeno 2 punti per una pendenza")
    t = np.arange(1, curve.shape[0], dtype=float)
    return float(np.dot(t, curve[1:]) / np.dot(t, t))


# ---------------------------------------------------------------------------
# Regressione del drift
# ---------------------------------------------------------------------------

def _check_fit_params(alpha: float, N: float, d: float):
    for name, value in (('alpha', alpha), ('N', N), ('d', d)):
        if not value > 0:
            raise AnalysisError(f"{name} deve essere > 0, ricevuto {value}")


def fit_from_slope(slope: float, alpha: float, N: float, d: float) -> DriftFit:
    """d_eff = s N / alpha^2 a partire da una pendenza gia' stimata"""
    _check_fit_params(alpha, N, d)
    d_eff = slope * N / alpha ** 2
    return DriftFit(float(slope), None, float(d_eff), float(d_eff / d))


def fit_drift(drift_curve, alpha: float, N: float, d: float) -> DriftFit:
    """
    Fit senza intercetta del drift quadratico: s = sum t y_t / sum t^2

    Il punto t = 0 (identicamente nullo) e' escluso. R^2 e' quello centrato,
    quindi puo' essere negativo; con una curva tutta nulla vale None.
    Pearson r e' calcolato contro la retta teorica alpha^2 t d / N.
    """
    curve = np.asarray(drift_curve, dtype=float)
    if curve.ndim != 1 or curve.shape[0] < 2:
        raise AnalysisError(f"La curva di drift deve avere almeno 2 punti, ricevuti {curve.size}")
    _check_fit_params(alpha, N, d)

    t = np.arange(1, curve.shape[0], dtype=float)
    y = curve[1:]
    slope = float(np.dot(t, y) / np.dot(t, t))

    r_squared = None
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot > 0.0:
        ss_res = float(np.sum((y - slope * t) ** 2))
        r_squared = 1.0 - ss_res / ss_tot

    pearson = None
    if y.shape[0] >= 2 and ss_tot > 0.0:
        theory_line = alpha ** 2 * t * d / N
        pearson = float(stats.pearsonr(y, theory_line)[0])

    fit = fit_from_slope(slope, alpha, N, d)
    fit.r_squared = r_squared
    fit.pearson_r = pearson
    fit.points = int(y.shape[0])
    if r_squared is None:
        _log("[!] Curva di drift costante: R^2 non definito")
    else:
        _log(f"s = {slope:.6g}, R^2 = {r_squared:.4f}, d_eff/d = {fit.d_eff_ratio:.4f}")
    return fit


def fit_group_drift(group_curves: Dict[str, np.ndarray], sizes: Dict[str, int],
                    alpha: float, N: float) -> Dict:
    """Dimensione effettiva per gruppo di parametri, con media e deviazione standard dei rapporti"""
    if not group_curves:
        raise AnalysisError("Nessun gruppo da analizzare")
    missing = [name for name in group_curves if name not in sizes]
    if missing:
        raise AnalysisError(f"Dimensione mancante per i gruppi: {', '.join(missing)}")

    fits = {name: fit_drift(curve, alpha, N, sizes[name]) for name, curve in group_curves.items()}
    ratios = np.array([fit.d_eff_ratio for fit in fits.values()])
    return {
        'groups': fits,
        'ratio_mean': float(ratios.mean()),
        'ratio_std': float(ratios.std(ddof=1)) if ratios.shape[0] > 1 else 0.0,
    }


# ---------------------------------------------------------------------------
# Proiezioni on/off-manifold
# ---------------------------------------------------------------------------

def _projector_basis(v_or_basis, d: int) -> np.ndarray:
    basis = np.asarray(v_or_basis, dtype=float)
    if basis.ndim == 1:
        basis = basis[:, None]
    if basis.shape[0] != d:
        raise AnalysisError(f"Direzioni di dimensione {basis.shape[0]}, attesa d={d}")
    if not np.any(basis):
        raise AnalysisError("Direzione nulla: proiettore non definito")
    q, _ = np.linalg.qr(basis)
    return q


def manifold_projection_stats(update_samples, v_or_basis) -> Dict[str, float]:
    """
    Frazione E||P_par x||^2 / E||x||^2 su un campione di aggiornamenti

    v_or_basis e' un vettore (P = v v^T / ||v||^2) oppure una matrice d x r
    le cui colonne generano il sottospazio on-manifold.
    """
    samples = np.atleast_2d(np.asarray(update_samples, dtype=float))
    basis = _projector_basis(v_or_basis, samples.shape[1])

    along = np.sum((samples @ basis) ** 2, axis=1)
    total = np.sum(samples ** 2, axis=1)
    if total.sum() == 0.0:
        raise AnalysisError("Campioni tutti nulli: frazione non definita")

    on = float(along.sum() / total.sum())
    n = samples.shape[0]
    stderr = 0.0
    if n > 1:
        # Errore standard dello stimatore a rapporto (metodo delta)
        residual = along - on * total
        stderr = float(np.std(residual, ddof=1) / (np.sqrt(n) * total.mean()))
    return {
        'on_fraction': on,
        'off_fraction': float((total.sum() - along.sum()) / total.sum()),
        'on_stderr': stderr,
        'samples': n,
    }


def sample_step_statistics(updates) -> Dict:
    """Media, covarianza ed errori standard empirici di un blocco di aggiornamenti"""
    updates = np.atleast_2d(np.asarray(updates, dtype=float))
    n, d = updates.shape
    if n < 2:
        raise AnalysisError("Servono almeno 2 campioni")
    mean = updates.mean(axis=0)
    cov = np.cov(updates, rowvar=False, ddof=1).reshape(d, d)
    var = np.diag(cov).copy()
    offdiag_se = np.sqrt(np.outer(var, var) / n)
    with np.errstate(divide='ignore', invalid='ignore'):
        z = np.where(offdiag_se > 0, np.abs(cov) / offdiag_se, 0.0)
    np.fill_diagonal(z, 0.0)
    return {
        'samples': n,
        'mean': mean,
        'mean_stderr': np.sqrt(var / n),
        'covariance': cov,
        'variance': var,
        'variance_stderr': var * np.sqrt(2.0 / (n - 1)),
        'max_offdiag_z': float(z.max()) if d > 1 else 0.0,
    }


def sample_reward_statistics(landscape: Landscape, noise: NoiseModel, theta, sigma: float,
                             samples: int, rng: np.random.Generator,
                             block: int = 100_000) -> Dict[str, float]:
    """
    Media e deviazione standard di R(theta + sigma eps) + xi su molte perturbazioni

    Le perturbazioni sono generate a blocchi; media e varianza si combinano
    con la formula di Chan per gruppi.
    """
    theta = landscape._check(theta)
    count, mean, m2 = 0, 0.0, 0.0
    remaining = int(samples)
    while remaining > 0:
        size = min(block, remaining)
        eps = rng.standard_normal((size, landscape.dimension))
        rewards = observe_reward_batch(landscape, noise, theta + sigma * eps, rng)
        b_mean = float(rewards.mean())
        b_m2 = float(np.sum((rewards - b_mean) ** 2))
        delta = b_mean - mean
        total = count + size
        mean += delta * size / total
        m2 += b_m2 + delta ** 2 * count * size / total
        count = total
        remaining -= size
    return {'mean': mean, 'std': float(np.sqrt(m2 / count)), 'samples': count}


# ---------------------------------------------------------------------------
# Interpolazione e sonde
# ---------------------------------------------------------------------------

def interpolate_path(theta_A, theta_B, landscape: Landscape, k_points: int) -> InterpolationResult:
    """
    Reward esatto (senza rumore) lungo theta(a) = (1 - a) theta_A + a theta_B

    barrier = max_a [min(R(A), R(B)) - R(theta(a))], mai negativa.
    """
    theta_A = np.asarray(theta_A, dtype=float)
    theta_B = np.asarray(theta_B, dtype=float)
    if theta_A.shape != theta_B.shape:
        raise AnalysisError(f"Dimensioni diverse: {theta_A.shape} e {theta_B.shape}")
    if int(k_points) < 2:
        raise AnalysisError(f"Servono almeno 2 punti di interpolazione, ricevuti {k_points}")
    landscape._check(theta_A)

    mixing = np.linspace(0.0, 1.0, int(k_points))
    rewards = np.empty(mixing.shape[0])
    for i, a in enumerate(mixing):
        if i == 0:
            point = theta_A
        elif i == mixing.shape[0] - 1:
            point = theta_B
        else:
            point = (1.0 - a) * theta_A + a * theta_B
        rewards[i] = landscape.reward(point)

    floor = min(rewards[0], rewards[-1])
    barrier = max(0.0, float(np.max(floor - rewards)))
    return InterpolationResult(mixing, rewards, barrier, float(rewards[0]), float(rewards[-1]))


def directional_probe(theta_base, delta, landscape: Landscape, magnitudes,
                      label: str = 'delta') -> ProbeResult:
    """
    Reward in theta_base + m delta / ||delta|| per ogni ampiezza m

    Per m = ||delta|| si valuta esattamente theta_base + delta.
    """
    theta_base = landscape._check(theta_base)
    delta = landscape._check(delta)
    norm = float(np.linalg.norm(delta))
    if norm == 0.0:
        raise AnalysisError("Direzione di sonda nulla")
    unit = delta / norm
    magnitudes = np.asarray(magnitudes, dtype=float)

    rewards = np.empty(magnitudes.shape[0])
    for i, m in enumerate(magnitudes):
        point = theta_base + delta if m == norm else theta_base + m * unit
        rewards[i] = landscape.reward(point)
    return ProbeResult(magnitudes, rewards, label)


def random_direction_probes(theta_base, landscape: Landscape, magnitudes,
                            seeds: Sequence[int] = DEFAULT_PROBE_SEEDS) -> ProbeResult:
    """Sonda di controllo lungo direzioni uniformi sulla sfera, mediata sui seed"""
    if not seeds:
        raise AnalysisError("Serve almeno un seed per le direzioni casuali")
    per_seed = []
    for seed in seeds:
        direction = np.random.default_rng(int(seed)).standard_normal(landscape.dimension)
        per_seed.append(directional_probe(theta_base, direction, landscape, magnitudes).rewards)
    values = np.stack(per_seed)
    return ProbeResult(
        magnitudes=np.asarray(magnitudes, dtype=float),
        rewards=values.mean(axis=0),
        direction_label=f"random[{len(seeds)} seed]",
        stderr=_stderr(values),
        per_seed=per_seed,
    )


# ---------------------------------------------------------------------------
# Gerarchia delle distanze
# ---------------------------------------------------------------------------

def cosine_similarity(a, b) -> Optional[float]:
    """Coseno fra due vettori; None se uno dei due e' nullo"""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return None
    return float(a @ b / (na * nb))


def hierarchy_measurement(theta0, landscape: Landscape, es_cfg: EsConfig, gd_cfg: GdConfig,
                          T: int, trials: int, noise: Optional[NoiseModel] = None,
                          master_seed: int = 0, threads: int = 1) -> Dict:
    """
    Misura ||theta_GD - theta_0||^2, ||theta_ES - theta_0||^2 e ||theta_ES - theta_GD||^2

    GD e' deterministico ed eseguito una volta; ES su `trials` trial.
    Le traiettorie ES divergenti sono escluse e contate.
    """
    noise = noise or NoiseModel(0.0)
    theta0 = landscape._check(theta0)
    keep = RecordSpec(keep_final=True)

    gd = run_trajectory(theta0, landscape, noise, gd_cfg, T, keep)
    if gd.diverged:
        raise DivergenceError(f"La traiettoria GD diverge al passo {gd.diverged_at}")
    gd_delta = gd.final_theta - theta0

    records = run_trials(theta0, landscape, noise, es_cfg, T, keep, trials, master_seed, threads)
    kept = [r for r in records if not r.diverged]
    excluded = len(records) - len(kept)
    if not kept:
        raise DivergenceError("Tutte le traiettorie ES sono divergenti")

    es_sq = np.array([float(np.sum((r.final_theta - theta0) ** 2)) for r in kept])
    diff_sq = np.array([float(np.sum((r.final_theta - gd.final_theta) ** 2)) for r in kept])
    cosines = [cosine_similarity(r.final_theta - theta0, gd_delta) for r in kept]
    defined = [c for c in cosines if c is not None]

    result = {
        'gd_sq': float(gd_delta @ gd_delta),
        'es_sq_mean': float(es_sq.mean()),
        'es_sq_stderr': float(_stderr(es_sq[:, None])[0]),
        'diff_sq_mean': float(diff_sq.mean()),
        'diff_sq_stderr': float(_stderr(diff_sq[:, None])[0]),
        'cosine_samples': cosines,
        'cosine_mean': float(np.mean(defined)) if defined else None,
        'cosine_undefined': len(cosines) - len(defined),
        'trials_used': len(kept),
        'excluded': excluded,
        'theta_gd': gd.final_theta,
        'theta_es': [r.final_theta for r in kept],
    }
    if excluded:
        _log(f"[!] {excluded} traiettorie ES divergenti escluse")
    _log(f"GD {result['gd_sq']:.6g} | ES {result['es_sq_mean']:.6g} | ES-GD {result['diff_sq_mean']:.6g}")
    return result
