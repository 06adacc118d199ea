#!/usr/bin/env python3
"""
Superfici di reward analitiche per il laboratorio ES/GD
Piatta, lineare e quadratica: reward esatti, gradienti esatti e reward osservati con rumore
"""

import sys
from typing import Dict, Optional, Sequence

import numpy as np

# Flag debug - impostare a True solo per debugging approfondito
DEBUG_MODE = False

# La base ruotata materializza una matrice ortogonale d x d
MAX_ROTATION_DIM = 4096

LANDSCAPE_KINDS = ('flat', 'linear', 'quadratic')


def _log(message: str):
    if DEBUG_MODE:
        print(f"[LAND] {message}", file=sys.stderr)


class LandscapeError(ValueError):
    """Errore di costruzione o di dimensione di una superficie di reward"""


class NoiseModel:
    """Rumore di osservazione gaussiano sul reward: R_oss = R + sigma_xi * xi"""

    def __init__(self, sigma_xi: float = 0.0):
        sigma_xi = float(sigma_xi)
        if not np.isfinite(sigma_xi) or sigma_xi < 0:
            raise LandscapeError(f"sigma_xi deve essere >= 0, ricevuto {sigma_xi}")
        self.sigma_xi = sigma_xi

    def sample(self, rng: np.random.Generator, size: Optional[int] = None):
        """Estrae sigma_xi * xi; con sigma_xi = 0 non consuma lo stream RNG"""
        if self.sigma_xi == 0.0:
            return 0.0 if size is None else np.zeros(size)
        return self.sigma_xi * rng.standard_normal(size)

    def __repr__(self):
        return f"NoiseModel(sigma_xi={self.sigma_xi})"


class Landscape:
    """
    Base comune delle superfici di reward

    Le superfici sono immutabili dopo la costruzione e si possono condividere
    fra trial concorrenti; lo stato RNG appartiene sempre al singolo trial.
    """

    kind = ''

    def __init__(self, dimension: int):
        dimension = int(dimension)
        if dimension < 1:
            raise LandscapeError(f"La dimensione d deve essere >= 1, ricevuta {dimension}")
        self.dimension = dimension

    def _check(self, theta) -> np.ndarray:
        """Converte theta in vettore float e verifica la dimensione"""
        theta = np.asarray(theta, dtype=float)
        if theta.ndim != 1 or theta.shape[0] != self.dimension:
            actual = theta.shape[-1] if theta.ndim >= 1 else 0
            raise LandscapeError(
                f"Dimensione errata: attesa d={self.dimension}, ricevuta d={actual}"
            )
        return theta

    def _check_batch(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != self.dimension:
            actual = points.shape[-1] if points.ndim >= 1 else 0
            raise LandscapeError(
                f"Dimensione errata: attesa d={self.dimension}, ricevuta d={actual}"
            )
        return points

    def reward(self, theta) -> float:
        raise NotImplementedError

    def gradient(self, theta) -> np.ndarray:
        raise NotImplementedError

    def reward_batch(self, points) -> np.ndarray:
        """Reward esatto per ogni riga di points (shape n x d)"""
        raise NotImplementedError

    # Autosistema: di default la base canonica

    @property
    def rank(self) -> int:
        return 0

    def eigenvalue(self, k: int) -> float:
        self._check_index(k)
        return 0.0

    def _check_index(self, k: int):
        if not 0 <= int(k) < self.dimension:
            raise LandscapeError(f"Indice di direzione {k} fuori da [0, {self.dimension})")

    def direction(self, k: int) -> np.ndarray:
        """Versore u_k della k-esima autodirezione"""
        self._check_index(k)
        u = np.zeros(self.dimension)
        u[k] = 1.0
        return u

    def projections(self, theta, ks: Sequence[int]) -> np.ndarray:
        """Coordinate u_k . theta per gli indici richiesti"""
        theta = self._check(theta)
        for k in ks:
            self._check_index(k)
        return theta[np.asarray(ks, dtype=int)]

    def describe(self) -> Dict:
        """Parametri strutturali della superficie (per i documenti JSON)"""
        return {'kind': self.kind, 'dimension': self.dimension, 'rank': self.rank}


class FlatLandscape(Landscape):
    """R(theta) = costante: ogni variazione di reward viene dal rumore di osservazione"""

    kind = 'flat'

    def __init__(self, dimension: int, constant_reward: float = 0.0):
        super().__init__(dimension)
        self.constant_reward = float(constant_reward)

    def reward(self, theta) -> float:
        self._check(theta)
        return self.constant_reward

    def gradient(self, theta) -> np.ndarray:
        self._check(theta)
        return np.zeros(self.dimension)

    def reward_batch(self, points) -> np.ndarray:
        points = self._check_batch(points)
        return np.full(points.shape[0], self.constant_reward)

    def describe(self) -> Dict:
        info = super().describe()
        info['constant'] = self.constant_reward
        return info


class LinearLandscape(Landscape):
    """R(theta) = -v . theta, gradiente costante -v"""

    kind = 'linear'

    def __init__(self, v):
        v = np.asarray(v, dtype=float)
        if v.ndim != 1 or v.shape[0] < 1:
            raise LandscapeError("Il vettore v deve essere unidimensionale e non vuoto")
        if not np.all(np.isfinite(v)):
            raise LandscapeError("Il vettore v contiene valori non finiti")
        super().__init__(v.shape[0])
        self.v = v
        self.v.setflags(write=False)

    @property
    def v_norm(self) -> float:
        return float(np.linalg.norm(self.v))

    def reward(self, theta) -> float:
        theta = self._check(theta)
        return float(-(self.v @ theta))

    def gradient(self, theta) -> np.ndarray:
        self._check(theta)
        return -self.v.copy()

    def reward_batch(self, points) -> np.ndarray:
        points = self._check_batch(points)
        return -(points @ self.v)

    def describe(self) -> Dict:
        info = super().describe()
        info['v_norm'] = self.v_norm
        return info


class QuadraticLandscape(Landscape):
    """
    R(theta) = -1/2 sum_k lambda_k (u_k . theta)^2

    Q = sum_k lambda_k u_k u_k^T non viene mai materializzata: tutte le forme
    quadratiche passano per lo spettro e per la base. Autovalori nulli
    (direzioni piatte) e negativi (direzioni concave) sono ammessi.
    """

    kind = 'quadratic'

    def __init__(self, eigenvalues, basis: str = 'canonical', rotation_seed: Optional[int] = None):
        eigenvalues = np.asarray(eigenvalues, dtype=float)
        if eigenvalues.ndim != 1 or eigenvalues.shape[0] < 1:
            raise LandscapeError("Lo spettro deve essere un vettore non vuoto")
        if not np.all(np.isfinite(eigenvalues)):
            raise LandscapeError("Lo spettro contiene valori non finiti")
        super().__init__(eigenvalues.shape[0])

        self.eigenvalues = eigenvalues
        self.eigenvalues.setflags(write=False)
        self.active = np.flatnonzero(np.abs(eigenvalues) > 0)
        self._active_lambdas = eigenvalues[self.active]

        if basis not in ('canonical', 'rotation'):
            raise LandscapeError(f"Base '{basis}' non supportata (canonical | rotation)")
        self.basis = basis
        self.rotation_seed = rotation_seed
        self._basis_matrix = None
        self._active_basis = None

        if basis == 'rotation':
            if self.dimension > MAX_ROTATION_DIM:
                raise LandscapeError(
                    f"Base ruotata limitata a d <= {MAX_ROTATION_DIM}, ricevuta d={self.dimension}"
                )
            if self.dimension == 1:
                self._basis_matrix = np.ones((1, 1))
            else:
                from scipy.stats import ortho_group
                self._basis_matrix = ortho_group.rvs(self.dimension, random_state=rotation_seed)
            self._active_basis = self._basis_matrix[:, self.active]
            _log(f"Base ruotata generata (d={self.dimension}, seed={rotation_seed})")

    @property
    def rank(self) -> int:
        return int(self.active.shape[0])

    @property
    def basis_matrix(self) -> Optional[np.ndarray]:
        """Autovettori per colonne (None in base canonica)"""
        return self._basis_matrix

    @property
    def trace_q2(self) -> float:
        return float(np.sum(self._active_lambdas ** 2))

    def eigenvalue(self, k: int) -> float:
        self._check_index(k)
        return float(self.eigenvalues[k])

    def _active_coords(self, theta: np.ndarray) -> np.ndarray:
        if self._active_basis is None:
            return theta[self.active]
        return self._active_basis.T @ theta

    def reward(self, theta) -> float:
        theta = self._check(theta)
        c = self._active_coords(theta)
        return float(-0.5 * np.sum(self._active_lambdas * c * c))

    def q_times(self, theta) -> np.ndarray:
        """Q theta (il gradiente negativo), senza costruire Q"""
        theta = self._check(theta)
        weighted = self._active_lambdas * self._active_coords(theta)
        if self._active_basis is None:
            out = np.zeros(self.dimension)
            out[self.active] = weighted
            return out
        return self._active_basis @ weighted

    def gradient(self, theta) -> np.ndarray:
        # le direzioni piatte restano a +0.0 esatto
        grad = self.q_times(theta)
        np.negative(grad, out=grad, where=grad != 0)
        return grad

    def q_squared_form(self, w) -> float:
        """w^T Q^2 w"""
        w = self._check(w)
        c = self._active_coords(w)
        return float(np.sum((self._active_lambdas * c) ** 2))

    def reward_batch(self, points) -> np.ndarray:
        points = self._check_batch(points)
        if self._active_basis is None:
            coords = points[:, self.active]
        else:
            coords = points @ self._active_basis
        return -0.5 * ((coords * coords) @ self._active_lambdas)

    def direction(self, k: int) -> np.ndarray:
        self._check_index(k)
        if self._basis_matrix is None:
            return super().direction(k)
        return self._basis_matrix[:, k].copy()

    def projections(self, theta, ks: Sequence[int]) -> np.ndarray:
        if self._basis_matrix is None:
            return super().projections(theta, ks)
        theta = self._check(theta)
        for k in ks:
            self._check_index(k)
        return self._basis_matrix[:, np.asarray(ks, dtype=int)].T @ theta

    def eigen_coordinates(self, theta) -> np.ndarray:
        """Tutte le coordinate di theta nell'autobase"""
        theta = self._check(theta)
        if self._basis_matrix is None:
            return theta.copy()
        return self._basis_matrix.T @ theta

    def from_eigen_coordinates(self, coords) -> np.ndarray:
        coords = self._check(coords)
        if self._basis_matrix is None:
            return coords.copy()
        return self._basis_matrix @ coords

    def describe(self) -> Dict:
        info = super().describe()
        info.update({
            'trace_q2': self.trace_q2,
            'basis': self.basis,
        })
        return info


def observe_reward(landscape: Landscape, noise: NoiseModel, theta, rng: np.random.Generator) -> float:
    """Reward vero piu' rumore gaussiano; con sigma_xi = 0 identico a reward()"""
    value = landscape.reward(theta)
    if noise.sigma_xi == 0.0:
        return value
    return float(value + noise.sample(rng))


def observe_reward_batch(landscape: Landscape, noise: NoiseModel, points,
                         rng: np.random.Generator) -> np.ndarray:
    """Versione vettoriale di observe_reward su righe di points"""
    values = landscape.reward_batch(points)
    if noise.sigma_xi == 0.0:
        return values
    return values + noise.sample(rng, values.shape[0])


def finite_difference_gradient(landscape: Landscape, theta, step: Optional[float] = None) -> np.ndarray:
    """
    Gradiente per differenze centrali, coordinata per coordinata

    Args:
        landscape: superficie da derivare
        theta: punto di valutazione
        step: passo; default 1e-5 * max(1, ||theta||)

    Returns:
        Stima del gradiente (costo O(d) valutazioni, solo per d piccoli)
    """
    theta = landscape._check(theta)
    if step is None:
        step = 1e-5 * max(1.0, float(np.linalg.norm(theta)))
    grad = np.zeros(landscape.dimension)
    probe = theta.copy()
    for i in range(landscape.dimension):
        original = probe[i]
        probe[i] = original + step
        upper = landscape.reward(probe)
        probe[i] = original - step
        lower = landscape.reward(probe)
        probe[i] = original
        grad[i] = (upper - lower) / (2.0 * step)
    return grad


# Costruzione da sezione di scenario

def build_spectrum(section: Dict, dimension: int) -> np.ndarray:
    """
    Spettro da descrizione di scenario

    Modalita':
        explicit: {'mode': 'explicit', 'values': [...]}
        rank:     {'mode': 'rank', 'rank': r, 'value': lam}  (r valori lam, poi zeri)
        uniform:  {'mode': 'uniform', 'rank': r, 'low': a, 'high': b, 'seed': s}
    """
    mode = section.get('mode', 'explicit')

    if mode == 'explicit':
        values = np.asarray(section.get('values', []), dtype=float)
        if values.shape[0] != dimension:
            raise LandscapeError(
                f"Spettro esplicito di lunghezza {values.shape[0]}, attesa d={dimension}"
            )
        return values

    rank = int(section.get('rank', dimension))
    if not 0 <= rank <= dimension:
        raise LandscapeError(f"Rango {rank} fuori da [0, {dimension}]")
    spectrum = np.zeros(dimension)

    if mode == 'rank':
        spectrum[:rank] = float(section.get('value', 1.0))
    elif mode == 'uniform':
        rng = np.random.default_rng(section.get('seed', 0))
        spectrum[:rank] = rng.uniform(float(section.get('low', 0.0)), float(section.get('high', 1.0)), size=rank)
    else:
        raise LandscapeError(f"Modalita' spettro '{mode}' non supportata")
    return spectrum


def build_v(section: Dict, dimension: int) -> np.ndarray:
    """
    Vettore v da descrizione di scenario

    Modalita':
        explicit: {'mode': 'explicit', 'values': [...]}
        unit:     {'mode': 'unit', 'norm': n, 'axis': k}   (n * e_k)
        random:   {'mode': 'random', 'norm': n, 'seed': s} (n * versore casuale)
    """
    mode = section.get('mode', 'explicit')

    if mode == 'explicit':
        values = np.asarray(section.get('values', []), dtype=float)
        if values.shape[0] != dimension:
            raise LandscapeError(f"v esplicito di lunghezza {values.shape[0]}, attesa d={dimension}")
        return values

    norm = float(section.get('norm', 1.0))
    if mode == 'unit':
        axis = int(section.get('axis', 0))
        if not 0 <= axis < dimension:
            raise LandscapeError(f"Asse {axis} fuori da [0, {dimension})")
        v = np.zeros(dimension)
        v[axis] = norm
        return v
    if mode == 'random':
        rng = np.random.default_rng(section.get('seed', 0))
        direction = rng.standard_normal(dimension)
        return norm * direction / np.linalg.norm(direction)
    raise LandscapeError(f"Modalita' v '{mode}' non supportata")


def build_landscape(section: Dict) -> Landscape:
    """Crea la superficie descritta dalla sezione 'landscape' dello scenario"""
    kind = section.get('kind')
    if kind not in LANDSCAPE_KINDS:
        raise LandscapeError(f"Tipo di superficie '{kind}' non supportato ({' | '.join(LANDSCAPE_KINDS)})")
    dimension = int(section.get('dimension', 0))

    if kind == 'flat':
        return FlatLandscape(dimension, section.get('constant', 0.0))

    if kind == 'linear':
        return LinearLandscape(build_v(section.get('v', {'mode': 'unit'}), dimension))

    basis = section.get('basis', {}) or {}
    return QuadraticLandscape(
        build_spectrum(section.get('spectrum', {'mode': 'rank', 'rank': dimension}), dimension),
        basis=basis.get('mode', 'canonical'),
        rotation_seed=basis.get('seed'),
    )


def build_noise(section: Optional[Dict]) -> NoiseModel:
    """Crea il modello di rumore dalla sezione 'noise' dello scenario"""
    return NoiseModel((section or {}).get('sigma_xi', 0.0))
