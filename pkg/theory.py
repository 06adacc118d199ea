#!/usr/bin/env python3
"""
Predittori in forma chiusa per ES e GD su superfici piatte, lineari e quadratiche

Funzioni pure di scalari e spettri: nessuna superficie necessaria.
Ogni funzione documenta la formula che implementa.
"""

import math
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional

import numpy as np
from scipy.special import gammaln

# Sotto questa distanza da gamma^2 = 1 si usa il ramo lineare in t
GAMMA_UNIT_TOLERANCE = 1e-12


class TheoryError(ValueError):
    """Parametri fuori dal dominio di validita' di una formula"""


def _require_positive(**values):
    for name, value in values.items():
        if not value > 0:
            raise TheoryError(f"{name} deve essere > 0, ricevuto {value}")


def _require_nonnegative(**values):
    for name, value in values.items():
        if not value >= 0:
            raise TheoryError(f"{name} deve essere >= 0, ricevuto {value}")


# ---------------------------------------------------------------------------
# Superficie piatta
# ---------------------------------------------------------------------------

def flat_step_variance(alpha: float, N: int) -> float:
    """Varianza per coordinata di un passo ES su superficie piatta: alpha^2/N"""
    _require_positive(alpha=alpha, N=N)
    return alpha ** 2 / N


def flat_drift(alpha: float, T: float, d: float, N: int) -> float:
    """E||theta_T - theta_0||^2 = alpha^2 T d / N"""
    _require_positive(alpha=alpha, d=d, N=N)
    _require_nonnegative(T=T)
    return alpha ** 2 * T * d / N


def flat_drift_slope(alpha: float, d: float, N: int) -> float:
    """Pendenza per passo del drift quadratico: alpha^2 d / N"""
    return flat_drift(alpha, 1, d, N)


# ---------------------------------------------------------------------------
# Superficie lineare
# ---------------------------------------------------------------------------

def sigma_R_linear(sigma: float, v_norm: float, sigma_xi: float) -> float:
    """sigma_R = sqrt(sigma^2 ||v||^2 + sigma_xi^2)"""
    _require_nonnegative(sigma=sigma, v_norm=v_norm, sigma_xi=sigma_xi)
    return math.sqrt(sigma ** 2 * v_norm ** 2 + sigma_xi ** 2)


def signal_fraction(sigma: float, v_norm: float, sigma_R: float) -> float:
    """s = sigma^2 ||v||^2 / sigma_R^2, quota di varianza del reward dovuta al gradiente"""
    _require_positive(sigma_R=sigma_R)
    return min(1.0, sigma ** 2 * v_norm ** 2 / sigma_R ** 2)


def rho_linear(s: float, N: int, d: int) -> float:
    """
    Frazione on-manifold dello spostamento quadratico per passo

    rho = (1 + (N+1) s) / (d + (N+1) s)
    """
    if not 0.0 <= s <= 1.0:
        raise TheoryError(f"La frazione di segnale s deve stare in [0, 1], ricevuta {s}")
    if N < 2:
        raise TheoryError(f"N deve essere >= 2, ricevuto {N}")
    if d < 1:
        raise TheoryError(f"d deve essere >= 1, ricevuto {d}")
    return (1.0 + (N + 1) * s) / (d + (N + 1) * s)


def population_std_factor(N: int, zscore: str = 'population') -> float:
    """
    E[sum_i Z_i u_i] / N per reward gaussiani u_i ~ N(0, 1)

    population: E[S_N] = c4(N) sqrt((N-1)/N);  unbiased: (N-1)/N c4(N).
    Tende a 1 per N -> inf; e' il fattore che riduce la media ES a N finito.
    """
    if N < 2:
        raise TheoryError(f"N deve essere >= 2, ricevuto {N}")
    c4 = math.sqrt(2.0 / (N - 1)) * math.exp(gammaln(N / 2.0) - gammaln((N - 1) / 2.0))
    if zscore == 'population':
        return c4 * math.sqrt((N - 1) / N)
    if zscore == 'unbiased':
        return c4 * (N - 1) / N
    raise TheoryError(f"zscore '{zscore}' non supportato")


def es_linear_mean_finite(alpha: float, sigma: float, v, sigma_R: float, N: int,
                          zscore: str = 'population') -> np.ndarray:
    """Media esatta a N finito su superficie lineare: -alpha sigma v / sigma_R * E[S]"""
    _require_positive(alpha=alpha, sigma=sigma, sigma_R=sigma_R)
    v = np.asarray(v, dtype=float)
    return -alpha * sigma * v / sigma_R * population_std_factor(N, zscore)


def rho_linear_finite(s: float, N: int, d: int) -> float:
    """
    Frazione on-manifold esatta a N finito: (1 + (N-2) s) / (d + (N-2) s)

    Vale per entrambi i denominatori dello z-score; differisce da rho_linear
    per un termine O(s/N).
    """
    rho_linear(s, N, d)
    return (1.0 + (N - 2) * s) / (d + (N - 2) * s)


# ---------------------------------------------------------------------------
# Superficie quadratica
# ---------------------------------------------------------------------------

def sigma_R_quadratic(sigma: float, v_norm: float, trace_Q2: float, sigma_xi: float) -> float:
    """sigma_R^2 = sigma^2 ||v||^2 + (sigma^4 / 2) Tr[Q^2] + sigma_xi^2"""
    _require_nonnegative(sigma=sigma, v_norm=v_norm, trace_Q2=trace_Q2, sigma_xi=sigma_xi)
    variance = sigma ** 2 * v_norm ** 2 + 0.5 * sigma ** 4 * trace_Q2 + sigma_xi ** 2
    if variance == 0.0:
        raise TheoryError("degenerate reward distribution: sigma_R = 0")
    return math.sqrt(variance)


def _eigen_coords(w: np.ndarray, basis_matrix: Optional[np.ndarray]) -> np.ndarray:
    return w if basis_matrix is None else basis_matrix.T @ w


def q_squared_form(w, spectrum, basis_matrix: Optional[np.ndarray] = None) -> float:
    """w^T Q^2 w = sum_k lambda_k^2 (u_k . w)^2"""
    spectrum = np.asarray(spectrum, dtype=float)
    c = _eigen_coords(np.asarray(w, dtype=float), basis_matrix)
    return float(np.sum((spectrum * c) ** 2))


def rho_quadratic(v, spectrum, sigma: float, N: int, d: int, sigma_xi: float,
                  basis_matrix: Optional[np.ndarray] = None) -> float:
    """
    Frazione on-manifold su superficie quadratica (v = Q theta_0)

    rho = ((N+1) s2 + 2 sigma^4 vh^T Q^2 vh + sigma_R^2)
          / ((N+1) s2 + 2 sigma^4 Tr[Q^2] + d sigma_R^2),   s2 = sigma^2 ||v||^2
    """
    v = np.asarray(v, dtype=float)
    spectrum = np.asarray(spectrum, dtype=float)
    v_norm = float(np.linalg.norm(v))
    if v_norm == 0.0:
        raise TheoryError("gradient direction undefined: ||v|| = 0")
    trace_q2 = float(np.sum(spectrum ** 2))
    sigma_R = sigma_R_quadratic(sigma, v_norm, trace_q2, sigma_xi)
    signal = (N + 1) * sigma ** 2 * v_norm ** 2
    along = q_squared_form(v / v_norm, spectrum, basis_matrix)
    numerator = signal + 2.0 * sigma ** 4 * along + sigma_R ** 2
    denominator = signal + 2.0 * sigma ** 4 * trace_q2 + d * sigma_R ** 2
    return numerator / denominator


@dataclass
class StepMoments:
    """
    Media e covarianza strutturata di un singolo aggiornamento ES

    Cov = isotropic_coeff * I + rank1_coeff * (vh vh^T) ||v||^2 + spectrum_coeff * Q^2
    """
    mean: np.ndarray
    isotropic_coeff: float
    rank1_direction: np.ndarray
    rank1_coeff: float
    spectrum_coeff: float
    v_norm: float = 0.0
    sigma_R: float = 0.0
    spectrum: Optional[np.ndarray] = None
    basis_matrix: Optional[np.ndarray] = None
    degenerate: bool = False

    @property
    def dimension(self) -> int:
        return int(self.mean.shape[0])

    def q_squared(self) -> np.ndarray:
        d = self.dimension
        if self.spectrum is None:
            return np.zeros((d, d))
        if self.basis_matrix is None:
            return np.diag(self.spectrum ** 2)
        return (self.basis_matrix * self.spectrum ** 2) @ self.basis_matrix.T

    def dense_covariance(self) -> np.ndarray:
        """Covarianza completa d x d (solo per d piccoli)"""
        d = self.dimension
        vh = self.rank1_direction
        cov = self.isotropic_coeff * np.eye(d)
        cov += self.rank1_coeff * self.v_norm ** 2 * np.outer(vh, vh)
        cov += self.spectrum_coeff * self.q_squared()
        return cov

    def trace(self) -> float:
        """E||dtheta - E dtheta||^2 senza costruire la matrice"""
        tr_q2 = 0.0 if self.spectrum is None else float(np.sum(self.spectrum ** 2))
        return (self.isotropic_coeff * self.dimension
                + self.rank1_coeff * self.v_norm ** 2
                + self.spectrum_coeff * tr_q2)

    def variance_along(self, w) -> float:
        """w^T Cov w"""
        w = np.asarray(w, dtype=float)
        value = self.isotropic_coeff * float(w @ w)
        value += self.rank1_coeff * self.v_norm ** 2 * float(self.rank1_direction @ w) ** 2
        if self.spectrum is not None:
            value += self.spectrum_coeff * q_squared_form(w, self.spectrum, self.basis_matrix)
        return value

    def on_manifold_fraction(self) -> float:
        """E||P_par dtheta||^2 / E||dtheta||^2 lungo la direzione di v"""
        total = self.trace() + float(self.mean @ self.mean)
        if total == 0.0:
            return 0.0
        along = self.variance_along(self.rank1_direction) + float(self.rank1_direction @ self.mean) ** 2
        return along / total


def es_step_moments(landscape_kind: str, v, spectrum, sigma: float, alpha: float, N: int,
                    sigma_xi: float, basis_matrix: Optional[np.ndarray] = None) -> StepMoments:
    """
    Momenti analitici di un passo ES

    linear:    mean = -alpha sigma v / sigma_R
               Cov  = (alpha^2/N) I + (alpha^2 sigma^2 / (N sigma_R^2)) v v^T
    quadratic: mean = -alpha sigma v / sigma_R, v = Q theta_0
               Cov  = alpha^2 / (N sigma_R^2) (sigma^2 v v^T + 2 sigma^4 Q^2 + sigma_R^2 I)
    flat:      mean = 0, Cov = (alpha^2/N) I; con sigma_xi = 0 aggiornamento nullo (degenere)
    """
    _require_positive(sigma=sigma, alpha=alpha, N=N)
    v = np.asarray(v, dtype=float)
    d = v.shape[0]
    v_norm = float(np.linalg.norm(v))
    direction = v / v_norm if v_norm > 0 else np.zeros(d)
    zeros = np.zeros(d)

    if landscape_kind == 'flat':
        if sigma_xi == 0.0:
            return StepMoments(zeros, 0.0, direction, 0.0, 0.0, degenerate=True)
        return StepMoments(zeros, alpha ** 2 / N, direction, 0.0, 0.0, sigma_R=sigma_xi)

    if landscape_kind == 'linear':
        sigma_R = sigma_R_linear(sigma, v_norm, sigma_xi)
        if sigma_R == 0.0:
            return StepMoments(zeros, 0.0, direction, 0.0, 0.0, degenerate=True)
        return StepMoments(
            mean=-alpha * sigma * v / sigma_R,
            isotropic_coeff=alpha ** 2 / N,
            rank1_direction=direction,
            rank1_coeff=alpha ** 2 * sigma ** 2 / (N * sigma_R ** 2),
            spectrum_coeff=0.0,
            v_norm=v_norm,
            sigma_R=sigma_R,
        )

    if landscape_kind == 'quadratic':
        spectrum = np.asarray(spectrum, dtype=float)
        if spectrum.shape[0] != d:
            raise TheoryError(f"Spettro di lunghezza {spectrum.shape[0]}, atteso d={d}")
        trace_q2 = float(np.sum(spectrum ** 2))
        if sigma ** 2 * v_norm ** 2 + 0.5 * sigma ** 4 * trace_q2 + sigma_xi ** 2 == 0.0:
            return StepMoments(zeros, 0.0, direction, 0.0, 0.0, degenerate=True)
        sigma_R = sigma_R_quadratic(sigma, v_norm, trace_q2, sigma_xi)
        scale = alpha ** 2 / (N * sigma_R ** 2)
        return StepMoments(
            mean=-alpha * sigma * v / sigma_R,
            isotropic_coeff=scale * sigma_R ** 2,
            rank1_direction=direction,
            rank1_coeff=scale * sigma ** 2,
            spectrum_coeff=scale * 2.0 * sigma ** 4,
            v_norm=v_norm,
            sigma_R=sigma_R,
            spectrum=spectrum,
            basis_matrix=basis_matrix,
        )

    raise TheoryError(f"Tipo di superficie '{landscape_kind}' non supportato")


# ---------------------------------------------------------------------------
# Dinamica OU (ES semplificata) e GD
# ---------------------------------------------------------------------------

def contraction_factor(alpha: float, sigma: float, sigma_R_fixed: float, eigenvalue: float) -> float:
    """gamma_k = 1 - (alpha sigma / sigma_R) lambda_k"""
    _require_positive(alpha=alpha, sigma=sigma, sigma_R_fixed=sigma_R_fixed)
    return 1.0 - alpha * sigma / sigma_R_fixed * eigenvalue


def ou_stability_threshold(alpha: float, sigma: float, sigma_R_fixed: float) -> float:
    """Stabile se 0 < lambda_k < 2 sigma_R / (alpha sigma); con alpha = sigma/2 vale 4 sigma_R / sigma^2"""
    _require_positive(alpha=alpha, sigma=sigma, sigma_R_fixed=sigma_R_fixed)
    return 2.0 * sigma_R_fixed / (alpha * sigma)


def optimal_curvature(alpha: float, sigma: float, sigma_R_fixed: float) -> float:
    """Curvatura con gamma = 0: convergenza in un passo e varianza minima alpha^2/N"""
    _require_positive(alpha=alpha, sigma=sigma, sigma_R_fixed=sigma_R_fixed)
    return sigma_R_fixed / (alpha * sigma)


def ou_projected_mean(theta0_proj: float, gamma_k: float, t: int) -> float:
    """E[u_k . theta_t] = gamma_k^t (u_k . theta_0)"""
    _require_nonnegative(t=t)
    return float(np.float64(gamma_k) ** t * theta0_proj)


def ou_projected_variance(alpha: float, N: int, gamma_k: float, t: int) -> float:
    """
    Var[u_k . theta_t] = (alpha^2/N) (1 - gamma^{2t}) / (1 - gamma^2)

    Per |gamma^2 - 1| < 1e-12 si usa il ramo (alpha^2/N) t.
    """
    _require_positive(alpha=alpha, N=N)
    _require_nonnegative(t=t)
    g2 = float(gamma_k) ** 2
    base = alpha ** 2 / N
    if abs(g2 - 1.0) < GAMMA_UNIT_TOLERANCE:
        return base * t
    with np.errstate(over='ignore'):
        return float(base * (1.0 - np.float64(g2) ** t) / (1.0 - g2))


def _require_convergent(gamma_k: float):
    if not abs(gamma_k) < 1.0:
        raise TheoryError(f"non-convergent direction: |gamma| = {abs(gamma_k)} >= 1")


def ou_asymptotic_variance(alpha: float, N: int, gamma_k: float) -> float:
    """lim Var[u_k . theta_t] = (alpha^2/N) / (1 - gamma^2), solo per |gamma| < 1"""
    _require_positive(alpha=alpha, N=N)
    _require_convergent(gamma_k)
    return alpha ** 2 / N / (1.0 - gamma_k ** 2)


def convergence_timescale(gamma_k: float) -> float:
    """tau_k = -log 2 / log gamma_k^2 (tempo di dimezzamento), solo per |gamma| < 1"""
    _require_convergent(gamma_k)
    if gamma_k == 0.0:
        return 0.0
    return -math.log(2.0) / math.log(gamma_k ** 2)


def ou_asymptotic_variance_well_conditioned(alpha: float, sigma: float, sigma_R_fixed: float,
                                            N: int, eigenvalue: float) -> float:
    """Approssimazione per direzioni ben condizionate: alpha sigma_R / (2 N sigma lambda)"""
    _require_positive(alpha=alpha, sigma=sigma, sigma_R_fixed=sigma_R_fixed, N=N, eigenvalue=eigenvalue)
    return alpha * sigma_R_fixed / (2.0 * N * sigma * eigenvalue)


class GdProjection(NamedTuple):
    value: float
    stable: bool


def gd_stable(beta: float, eigenvalue: float) -> bool:
    """La direzione converge sse 0 < lambda_k < 2/beta"""
    return 0.0 < eigenvalue < 2.0 / beta


def gd_projected(theta0_proj: float, beta: float, lambda_k: float, t: int) -> GdProjection:
    """u_k . theta_t = (1 - beta lambda_k)^t (u_k . theta_0), con flag di stabilita'"""
    _require_positive(beta=beta)
    _require_nonnegative(t=t)
    with np.errstate(over='ignore'):
        value = float(np.float64(1.0 - beta * lambda_k) ** t * theta0_proj)
    return GdProjection(value, gd_stable(beta, lambda_k))


def gd_convergence_timescale(beta: float, lambda_k: float) -> float:
    """tau_k^GD = -log 2 / log (1 - beta lambda_k)^2"""
    _require_positive(beta=beta)
    return convergence_timescale(1.0 - beta * lambda_k)


# ---------------------------------------------------------------------------
# Geometria delle soluzioni
# ---------------------------------------------------------------------------

def _es_params(es_params) -> Dict:
    """Accetta un dict o un oggetto con alpha, sigma, sigma_R_fixed, population"""
    if isinstance(es_params, dict):
        params = dict(es_params)
    else:
        params = {name: getattr(es_params, name) for name in ('alpha', 'sigma', 'sigma_R_fixed', 'population')}
    missing = [name for name in ('alpha', 'sigma', 'sigma_R_fixed', 'population') if name not in params]
    if missing:
        raise TheoryError(f"Parametri ES mancanti: {', '.join(missing)}")
    return params


def displacement_decomposition(theta0, spectrum, es_params, T: int,
                               basis_matrix: Optional[np.ndarray] = None) -> Dict[str, float]:
    """
    Scomposizione segnale + diffusione dello spostamento ES dopo T passi

    signal    = sum_{lambda!=0} (1 - gamma_k^T)^2 (u_k . theta_0)^2
    diffusion = sum_{lambda!=0} (alpha^2/N)(1 - gamma^{2T})/(1 - gamma^2) + (d - r) alpha^2 T / N
    """
    params = _es_params(es_params)
    alpha, N = float(params['alpha']), int(params['population'])
    spectrum = np.asarray(spectrum, dtype=float)
    d = spectrum.shape[0]
    coords = _eigen_coords(np.asarray(theta0, dtype=float), basis_matrix)
    rank = int(np.count_nonzero(spectrum))

    signal = 0.0
    diffusion = (d - rank) * alpha ** 2 * T / N
    for k in np.flatnonzero(spectrum):
        gamma = contraction_factor(alpha, params['sigma'], params['sigma_R_fixed'], spectrum[k])
        signal += (1.0 - np.float64(gamma) ** T) ** 2 * coords[k] ** 2
        diffusion += ou_projected_variance(alpha, N, gamma, T)

    return {
        'signal_sq_norm': float(signal),
        'diffusion_sq_norm_expected': float(diffusion),
        'total_expected': float(signal + diffusion),
    }


def gd_displacement_sq(theta0, spectrum, beta: float, T: int,
                       basis_matrix: Optional[np.ndarray] = None) -> float:
    """||theta_GD - theta_0||^2 = sum_{lambda!=0} ((1 - beta lambda)^T - 1)^2 (u_k . theta_0)^2"""
    _require_positive(beta=beta)
    spectrum = np.asarray(spectrum, dtype=float)
    coords = _eigen_coords(np.asarray(theta0, dtype=float), basis_matrix)
    active = np.flatnonzero(spectrum)
    factors = (1.0 - beta * spectrum[active]) ** T - 1.0
    return float(np.sum(factors ** 2 * coords[active] ** 2))


def es_gd_difference_expected(alpha: float, T: int, d: int, r: int, N: int) -> float:
    """E||theta_ES - theta_GD||^2 ~ alpha^2 T (d - r) / N a convergenza sulle direzioni attive"""
    _require_positive(alpha=alpha, N=N)
    if not 0 <= r <= d:
        raise TheoryError(f"Il rango r={r} deve stare in [0, d={d}]")
    return alpha ** 2 * T * (d - r) / N


def es_gd_difference_full(theta0, spectrum, es_params, beta: float, T: int,
                          basis_matrix: Optional[np.ndarray] = None) -> float:
    """Versione completa: residui di segnale e varianze attive piu' diffusione off-manifold"""
    params = _es_params(es_params)
    alpha, N = float(params['alpha']), int(params['population'])
    spectrum = np.asarray(spectrum, dtype=float)
    coords = _eigen_coords(np.asarray(theta0, dtype=float), basis_matrix)
    rank = int(np.count_nonzero(spectrum))
    total = es_gd_difference_expected(alpha, T, spectrum.shape[0], rank, N)
    for k in np.flatnonzero(spectrum):
        gamma_es = contraction_factor(alpha, params['sigma'], params['sigma_R_fixed'], spectrum[k])
        gamma_gd = 1.0 - beta * spectrum[k]
        total += (np.float64(gamma_es) ** T - np.float64(gamma_gd) ** T) ** 2 * coords[k] ** 2
        total += ou_projected_variance(alpha, N, gamma_es, T)
    return float(total)


def expected_cosine_scale(r: int, d: int) -> float:
    """Scala caratteristica sqrt(r/d) del coseno fra spostamenti ES e GD (ordine, non valore atteso)"""
    if not 1 <= r <= d:
        raise TheoryError(f"Serve 1 <= r <= d, ricevuti r={r}, d={d}")
    return math.sqrt(r / d)


@dataclass
class HierarchyPrediction:
    """Le tre distanze quadratiche attese: O(r), O(r) + O(d), O(d)"""
    gd_sq_norm_order: float
    es_sq_norm: float
    es_gd_diff_sq_norm: float
    expected_cosine_scale: float

    def ordered(self) -> bool:
        return self.gd_sq_norm_order < self.es_gd_diff_sq_norm <= self.es_sq_norm + self.gd_sq_norm_order


def hierarchy_prediction(theta0, spectrum, es_params, beta: float, T: int,
                         basis_matrix: Optional[np.ndarray] = None) -> HierarchyPrediction:
    spectrum = np.asarray(spectrum, dtype=float)
    rank = max(1, int(np.count_nonzero(spectrum)))
    decomposition = displacement_decomposition(theta0, spectrum, es_params, T, basis_matrix)
    return HierarchyPrediction(
        gd_sq_norm_order=gd_displacement_sq(theta0, spectrum, beta, T, basis_matrix),
        es_sq_norm=decomposition['total_expected'],
        es_gd_diff_sq_norm=es_gd_difference_full(theta0, spectrum, es_params, beta, T, basis_matrix),
        expected_cosine_scale=expected_cosine_scale(min(rank, spectrum.shape[0]), spectrum.shape[0]),
    )
