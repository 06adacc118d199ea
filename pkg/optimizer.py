#!/usr/bin/env python3
"""
Ottimizzatori del laboratorio: ES con reward z-score, discesa del gradiente,
iterazione OU semplificata, esecuzione di traiettorie e di trial paralleli
"""

import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from landscape import (
    Landscape,
    NoiseModel,
    QuadraticLandscape,
    FlatLandscape,
    observe_reward_batch,
)

VERBOSE = True

ZSCORE_MODES = ('population', 'unbiased')
METHODS = ('es', 'gd', 'ou')

# Oltre questa soglia (o con valori non finiti) la traiettoria e' divergente
DIVERGENCE_THRESHOLD = 1e30


def _log(message: str):
    if VERBOSE:
        print(f"[SIM] {message}", file=sys.stderr)


class OptimizerError(ValueError):
    """Configurazione o chiamata non valida di un ottimizzatore"""


def _positive(name: str, value: float) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise OptimizerError(f"{name} deve essere > 0, ricevuto {value}")
    return value


@dataclass(frozen=True)
class EsConfig:
    """
    Iperparametri ES (aggiornamento con reward z-score)

    alpha di default vale sigma/2. Il denominatore dello z-score e'
    'population' (divide per N) oppure 'unbiased' (divide per N-1).
    max_block_floats limita la memoria: oltre N*d float le perturbazioni
    vengono generate e consumate una alla volta.
    """
    sigma: float
    alpha: Optional[float] = None
    population: int = 30
    zscore: str = 'population'
    seed: int = 0
    max_block_floats: int = 1 << 24
    method: str = field(default='es', init=False)

    def __post_init__(self):
        _positive('sigma', self.sigma)
        object.__setattr__(self, 'sigma', float(self.sigma))
        alpha = self.sigma / 2.0 if self.alpha is None else _positive('alpha', self.alpha)
        object.__setattr__(self, 'alpha', float(alpha))
        if int(self.population) < 2:
            raise OptimizerError(f"La popolazione N deve essere >= 2 (z-score indefinito), ricevuta {self.population}")
        object.__setattr__(self, 'population', int(self.population))
        if self.zscore not in ZSCORE_MODES:
            raise OptimizerError(f"zscore '{self.zscore}' non supportato ({' | '.join(ZSCORE_MODES)})")
        if int(self.max_block_floats) < 1:
            raise OptimizerError("max_block_floats deve essere >= 1")


@dataclass(frozen=True)
class GdConfig:
    """
    Discesa (ascesa sul reward) del gradiente con learning rate beta

    steps e' il numero di passi T usato da run_trajectory quando la chiamata
    non ne indica uno esplicito (None: va sempre passato).
    """
    beta: float
    steps: Optional[int] = None
    method: str = field(default='gd', init=False)

    def __post_init__(self):
        object.__setattr__(self, 'beta', _positive('beta', self.beta))
        if self.steps is not None:
            if int(self.steps) < 0:
                raise OptimizerError(f"steps deve essere >= 0, ricevuto {self.steps}")
            object.__setattr__(self, 'steps', int(self.steps))


@dataclass(frozen=True)
class OuConfig:
    """
    Iterazione OU semplificata: theta' = H theta + eta

    H = I - (alpha*sigma/sigma_R_fixed) Q con sigma_R congelato;
    eta ~ N(0, alpha^2/N I). Con noiseless=True si ottiene il limite N -> inf.
    """
    sigma_R_fixed: float
    sigma: float
    alpha: Optional[float] = None
    population: int = 30
    seed: int = 0
    noiseless: bool = False
    method: str = field(default='ou', init=False)

    def __post_init__(self):
        _positive('sigma_R_fixed', self.sigma_R_fixed)
        _positive('sigma', self.sigma)
        object.__setattr__(self, 'sigma_R_fixed', float(self.sigma_R_fixed))
        object.__setattr__(self, 'sigma', float(self.sigma))
        alpha = self.sigma / 2.0 if self.alpha is None else _positive('alpha', self.alpha)
        object.__setattr__(self, 'alpha', float(alpha))
        if int(self.population) < 1:
            raise OptimizerError(f"population deve essere >= 1, ricevuta {self.population}")
        object.__setattr__(self, 'population', int(self.population))

    @property
    def learning_rate(self) -> float:
        """Learning rate efficace alpha*sigma/sigma_R"""
        return self.alpha * self.sigma / self.sigma_R_fixed

    @property
    def noise_variance(self) -> float:
        return 0.0 if self.noiseless else self.alpha ** 2 / self.population

    def contraction(self, eigenvalue: float) -> float:
        """gamma_k = 1 - (alpha*sigma/sigma_R) lambda_k"""
        return 1.0 - self.learning_rate * float(eigenvalue)


OptimizerConfig = Union[EsConfig, GdConfig, OuConfig]


@dataclass(frozen=True)
class RecordSpec:
    """Cosa registrare a ogni passo di una traiettoria"""
    directions: Tuple[int, ...] = ()
    keep_final: bool = False
    groups: Tuple[Tuple[str, int], ...] = ()


@dataclass
class TrajectoryRecord:
    """Statistiche per passo di una singola esecuzione (indice 0 = punto iniziale)"""
    method: str
    drift: np.ndarray
    mu_R: np.ndarray
    sigma_R: np.ndarray
    update_norm: np.ndarray
    projections: Dict[int, np.ndarray] = field(default_factory=dict)
    group_drift: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0
    final_theta: Optional[np.ndarray] = None
    diverged_at: Optional[int] = None
    degenerate_steps: int = 0
    trial: int = 0
    unstable_directions: Tuple[int, ...] = ()

    @property
    def diverged(self) -> bool:
        """Soglia superata durante l'iterazione oppure contrazione prevista |gamma_k| >= 1"""
        return self.diverged_at is not None or bool(self.unstable_directions)


# ---------------------------------------------------------------------------
# Passi singoli
# ---------------------------------------------------------------------------

def zscore_rewards(rewards: np.ndarray, mode: str = 'population') -> Tuple[Optional[np.ndarray], float, float]:
    """
    Normalizza i reward della popolazione: Z_i = (R_i - mu_R) / sigma_R

    Returns:
        (Z oppure None se la popolazione e' degenere, mu_R, sigma_R)
    """
    rewards = np.asarray(rewards, dtype=float)
    ddof = 0 if mode == 'population' else 1
    mu = float(np.mean(rewards))
    if np.ptp(rewards) == 0.0:
        return None, mu, 0.0
    sd = float(np.std(rewards, ddof=ddof))
    if not sd > 0.0:
        return None, mu, 0.0
    return (rewards - mu) / sd, mu, sd


def _step_diag(mu: float, sd: float, update: Optional[np.ndarray], z: Optional[np.ndarray]) -> Dict:
    return {
        'mu_R': mu,
        'sigma_R': sd,
        'update_norm': 0.0 if update is None else float(np.linalg.norm(update)),
        'degenerate': z is None,
        'z_sq_sum': 0.0 if z is None else float(np.sum(z * z)),
    }


def es_step(theta, landscape: Landscape, noise: NoiseModel, cfg: EsConfig,
            rng: np.random.Generator) -> Tuple[np.ndarray, Dict]:
    """
    Un passo ES: theta' = theta + alpha/N * sum_i Z_i eps_i

    Con popolazione degenere (tutti i reward identici) l'aggiornamento e'
    nullo e step_diag['degenerate'] vale True.
    """
    theta = landscape._check(theta)
    n, d = cfg.population, landscape.dimension

    if n * d <= cfg.max_block_floats:
        eps = rng.standard_normal((n, d))
        rewards = observe_reward_batch(landscape, noise, theta + cfg.sigma * eps, rng)
        z, mu, sd = zscore_rewards(rewards, cfg.zscore)
        if z is None:
            return theta.copy(), _step_diag(mu, sd, None, None)
        update = (cfg.alpha / n) * (z @ eps)
        return theta + update, _step_diag(mu, sd, update, z)

    # Perturbazioni in streaming: un seed per membro, rigenerato nel secondo passaggio
    member_seeds = rng.integers(0, np.iinfo(np.int64).max, size=n)
    rewards = np.empty(n)
    for i, seed in enumerate(member_seeds):
        eps_i = np.random.default_rng(int(seed)).standard_normal(d)
        rewards[i] = landscape.reward(theta + cfg.sigma * eps_i)
    rewards = rewards + noise.sample(rng, n)
    z, mu, sd = zscore_rewards(rewards, cfg.zscore)
    if z is None:
        return theta.copy(), _step_diag(mu, sd, None, None)
    update = np.zeros(d)
    for i, seed in enumerate(member_seeds):
        update += z[i] * np.random.default_rng(int(seed)).standard_normal(d)
    update *= cfg.alpha / n
    return theta + update, _step_diag(mu, sd, update, z)


def gd_step(theta, landscape: Landscape, cfg: GdConfig) -> np.ndarray:
    """Ascesa del gradiente sul reward: theta' = theta + beta * grad R(theta)"""
    theta = landscape._check(theta)
    return theta + cfg.beta * landscape.gradient(theta)


def _as_quadratic(spectrum, dimension: Optional[int] = None) -> QuadraticLandscape:
    """Accetta una superficie quadratica, una piatta o uno spettro (base canonica)"""
    if isinstance(spectrum, QuadraticLandscape):
        return spectrum
    if isinstance(spectrum, FlatLandscape):
        return QuadraticLandscape(np.zeros(spectrum.dimension))
    if isinstance(spectrum, Landscape):
        raise OptimizerError(f"L'iterazione OU richiede uno spettro, non una superficie '{spectrum.kind}'")
    values = np.asarray(spectrum, dtype=float)
    if dimension is not None and values.shape[0] != dimension:
        raise OptimizerError(f"Spettro di lunghezza {values.shape[0]}, atteso d={dimension}")
    return QuadraticLandscape(values)


def ou_step(theta, cfg: OuConfig, spectrum, rng: np.random.Generator) -> np.ndarray:
    """
    Un passo OU: theta' = H theta + eta, con H applicata nell'autobase

    spectrum puo' essere una QuadraticLandscape (anche con base ruotata)
    oppure il vettore degli autovalori in base canonica.
    """
    quad = _as_quadratic(spectrum)
    theta = quad._check(theta)

    if quad.basis == 'canonical':
        new_theta = theta.copy()
        gammas = 1.0 - cfg.learning_rate * quad.eigenvalues[quad.active]
        new_theta[quad.active] = gammas * theta[quad.active]
    else:
        new_theta = theta - cfg.learning_rate * quad.q_times(theta)

    if not cfg.noiseless:
        new_theta += np.sqrt(cfg.noise_variance) * rng.standard_normal(quad.dimension)
    return new_theta


# ---------------------------------------------------------------------------
# Traiettorie
# ---------------------------------------------------------------------------

def _is_divergent(theta: np.ndarray) -> bool:
    if not np.all(np.isfinite(theta)):
        return True
    return bool(np.max(np.abs(theta)) > DIVERGENCE_THRESHOLD)


def _group_offsets(groups: Sequence[Tuple[str, int]], dimension: int) -> np.ndarray:
    sizes = [int(size) for _, size in groups]
    if any(size < 1 for size in sizes):
        raise OptimizerError("Ogni gruppo di parametri deve avere dimensione >= 1")
    if sum(sizes) != dimension:
        raise OptimizerError(f"I gruppi coprono {sum(sizes)} parametri, attesi d={dimension}")
    return np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)


def _unstable_directions(landscape: Landscape, optimizer_cfg: OptimizerConfig) -> Tuple[int, ...]:
    """Autodirezioni non piatte con contrazione |gamma_k| >= 1 (GD e OU su quadratica)"""
    if optimizer_cfg.method == 'es' or not isinstance(landscape, QuadraticLandscape):
        return ()
    eigenvalues = np.asarray(landscape.eigenvalues, dtype=float)
    rate = optimizer_cfg.beta if optimizer_cfg.method == 'gd' else optimizer_cfg.learning_rate
    gammas = 1.0 - rate * eigenvalues
    return tuple(int(k) for k in np.flatnonzero((eigenvalues != 0.0) & (np.abs(gammas) >= 1.0)))


def run_trajectory(theta0, landscape: Landscape, noise: NoiseModel, optimizer_cfg: OptimizerConfig,
                   steps: Optional[int] = None, record_spec: Optional[RecordSpec] = None,
                   rng: Optional[np.random.Generator] = None,
                   reference=None, trial: int = 0) -> TrajectoryRecord:
    """
    Itera il passo scelto per T passi registrando drift e proiezioni

    Args:
        theta0: punto iniziale
        landscape: superficie di reward (per OU deve essere quadratica o piatta)
        noise: rumore di osservazione (usato solo da ES)
        optimizer_cfg: EsConfig | GdConfig | OuConfig
        steps: numero di passi T (T = 0 restituisce il solo punto iniziale;
            None usa GdConfig.steps)
        record_spec: direzioni da proiettare, gruppi, conservazione di theta_T
        rng: generatore; di default np.random.default_rng(cfg.seed)
        reference: origine del drift (default theta0)

    Returns:
        TrajectoryRecord; il superamento della soglia tronca la traiettoria e
        imposta diverged_at, una contrazione prevista |gamma_k| >= 1 riempie
        unstable_directions (in entrambi i casi diverged e' True)
    """
    record_spec = record_spec or RecordSpec()
    if steps is None:
        steps = getattr(optimizer_cfg, 'steps', None)
        if steps is None:
            raise OptimizerError("Numero di passi mancante (argomento steps o GdConfig.steps)")
    steps = int(steps)
    if steps < 0:
        raise OptimizerError(f"Il numero di passi deve essere >= 0, ricevuto {steps}")

    theta = landscape._check(theta0).copy()
    origin = theta.copy() if reference is None else landscape._check(reference).copy()
    method = optimizer_cfg.method
    if method not in METHODS:
        raise OptimizerError(f"Metodo '{method}' non supportato")
    if rng is None:
        rng = np.random.default_rng(getattr(optimizer_cfg, 'seed', 0))

    quad = _as_quadratic(landscape) if method == 'ou' else None

    directions = [int(k) for k in record_spec.directions]
    offsets = _group_offsets(record_spec.groups, landscape.dimension) if record_spec.groups else None

    drift = np.zeros(steps + 1)
    mu_R = np.zeros(steps + 1)
    sigma_R = np.zeros(steps + 1)
    update_norm = np.zeros(steps + 1)
    proj = np.zeros((len(directions), steps + 1))
    groups = np.zeros((len(record_spec.groups), steps + 1))

    def _record(t: int):
        diff = theta - origin
        sq = np.square(diff)
        drift[t] = np.sum(sq)
        if directions:
            proj[:, t] = landscape.projections(theta, directions)
        if offsets is not None:
            groups[:, t] = np.add.reduceat(sq, offsets)

    _record(0)
    mu_R[0] = landscape.reward(theta)
    sigma_R[0] = optimizer_cfg.sigma_R_fixed if method == 'ou' else 0.0

    diverged_at = None
    degenerate = 0
    completed = steps

    for t in range(1, steps + 1):
        if method == 'es':
            new_theta, diag = es_step(theta, landscape, noise, optimizer_cfg, rng)
            mu_R[t], sigma_R[t], update_norm[t] = diag['mu_R'], diag['sigma_R'], diag['update_norm']
            degenerate += int(diag['degenerate'])
        elif method == 'gd':
            new_theta = gd_step(theta, landscape, optimizer_cfg)
        else:
            new_theta = ou_step(theta, optimizer_cfg, quad, rng)

        if _is_divergent(new_theta):
            diverged_at = t
            completed = t - 1
            break

        if method != 'es':
            update_norm[t] = float(np.linalg.norm(new_theta - theta))
            mu_R[t] = landscape.reward(new_theta)
            sigma_R[t] = optimizer_cfg.sigma_R_fixed if method == 'ou' else 0.0
        theta = new_theta
        _record(t)

    n = completed + 1
    record = TrajectoryRecord(
        method=method,
        drift=drift[:n],
        mu_R=mu_R[:n],
        sigma_R=sigma_R[:n],
        update_norm=update_norm[:n],
        projections={k: proj[i, :n] for i, k in enumerate(directions)},
        group_drift={name: groups[i, :n] for i, (name, _) in enumerate(record_spec.groups)},
        steps=completed,
        final_theta=theta.copy() if record_spec.keep_final else None,
        diverged_at=diverged_at,
        degenerate_steps=degenerate,
        trial=trial,
        unstable_directions=_unstable_directions(landscape, optimizer_cfg),
    )
    if diverged_at is not None:
        _log(f"[!] Trial {trial}: divergenza al passo {diverged_at}")
    elif record.unstable_directions:
        _log(f"[!] Trial {trial}: direzioni instabili {list(record.unstable_directions)} (|gamma| >= 1)")
    return record


def trial_seed(master_seed: int, trial_index: int) -> np.random.SeedSequence:
    """Regola di suddivisione dei seed: SeedSequence(master, spawn_key=(trial,))"""
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(trial_index),))


def _run_single_trial(args) -> TrajectoryRecord:
    theta0, landscape, noise, cfg, steps, record_spec, master_seed, index = args
    rng = np.random.default_rng(trial_seed(master_seed, index))
    return run_trajectory(theta0, landscape, noise, cfg, steps, record_spec, rng=rng, trial=index)


def run_trials(theta0, landscape: Landscape, noise: NoiseModel, optimizer_cfg: OptimizerConfig,
               steps: int, record_spec: Optional[RecordSpec] = None, trials: int = 1,
               master_seed: int = 0, threads: int = 1) -> List[TrajectoryRecord]:
    """
    Esegue trial indipendenti (in parallelo su processi se threads > 1)

    L'ordine dei risultati segue l'indice di trial, qualunque sia l'ordine
    di completamento; ogni trial possiede il proprio generatore.
    """
    trials = int(trials)
    if trials < 1:
        raise OptimizerError(f"Il numero di trial deve essere >= 1, ricevuto {trials}")

    theta0 = landscape._check(theta0)
    jobs = [(theta0, landscape, noise, optimizer_cfg, steps, record_spec, master_seed, i)
            for i in range(trials)]

    start = time.time()
    _log(f"Avvio {trials} trial '{optimizer_cfg.method}' (T={steps}, d={landscape.dimension}, worker={threads})")

    if threads <= 1 or trials == 1:
        records = []
        for i, job in enumerate(jobs, 1):
            records.append(_run_single_trial(job))
            if i % max(1, trials // 10) == 0:
                _log(f"[>] Trial {i}/{trials} completati")
    else:
        chunk = max(1, trials // (4 * threads))
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_run_single_trial, jobs, chunksize=chunk))

    diverged = sum(1 for r in records if r.diverged)
    _log(f"[OK] {trials} trial in {time.time() - start:.1f}s ({diverged} divergenti)")
    return records


def run_sequential(theta_base, stages: Sequence[Tuple[Landscape, int]], noise: NoiseModel,
                   optimizer_cfg: OptimizerConfig, record_spec: Optional[RecordSpec] = None,
                   rng: Optional[np.random.Generator] = None) -> Tuple[List[TrajectoryRecord], List[float]]:
    """
    Addestramento sequenziale su piu' superfici con un solo stream RNG

    Ogni stadio parte dal punto finale del precedente; il drift e' sempre
    misurato dal punto base. Restituisce i record per stadio e la norma
    ||theta - theta_base|| a ogni checkpoint.
    """
    if not stages:
        raise OptimizerError("Serve almeno uno stadio")
    record_spec = record_spec or RecordSpec()
    keep = RecordSpec(record_spec.directions, True, record_spec.groups)
    if rng is None:
        rng = np.random.default_rng(getattr(optimizer_cfg, 'seed', 0))

    theta = np.asarray(theta_base, dtype=float).copy()
    base = theta.copy()
    records, norms = [], []
    for index, (stage_landscape, stage_steps) in enumerate(stages):
        record = run_trajectory(theta, stage_landscape, noise, optimizer_cfg, stage_steps,
                                keep, rng=rng, reference=base)
        records.append(record)
        norms.append(float(np.sqrt(record.drift[-1])))
        _log(f"Stadio {index + 1}/{len(stages)}: ||delta theta|| = {norms[-1]:.6g}")
        if record.diverged:
            break
        theta = record.final_theta
    return records, norms


def es_update_samples(theta, landscape: Landscape, noise: NoiseModel, cfg: EsConfig,
                      samples: int, rng: np.random.Generator) -> Tuple[np.ndarray, int]:
    """
    Campioni indipendenti di un singolo aggiornamento ES dallo stesso punto

    Returns:
        (matrice samples x d degli aggiornamenti, numero di passi degeneri)
    """
    theta = landscape._check(theta)
    updates = np.empty((int(samples), landscape.dimension))
    degenerate = 0
    for i in range(int(samples)):
        new_theta, diag = es_step(theta, landscape, noise, cfg, rng)
        updates[i] = new_theta - theta
        degenerate += int(diag['degenerate'])
    return updates, degenerate


def build_optimizer_config(section: Dict, seed: int = 0, steps: Optional[int] = None) -> OptimizerConfig:
    """Crea la configurazione dalla sezione 'optimizer' dello scenario (steps vale solo per GD)"""
    method = section.get('method', 'es')
    if method == 'es':
        return EsConfig(
            sigma=section.get('sigma', 0.02),
            alpha=section.get('alpha'),
            population=section.get('population', 30),
            zscore=section.get('zscore', 'population'),
            seed=seed,
            max_block_floats=int(section.get('max_block_floats', 1 << 24)),
        )
    if method == 'gd':
        return GdConfig(beta=section.get('beta', 0.1), steps=steps)
    if method == 'ou':
        return OuConfig(
            sigma_R_fixed=section.get('sigma_R_fixed', 1.0),
            sigma=section.get('sigma', 0.02),
            alpha=section.get('alpha'),
            population=section.get('population', 30),
            seed=seed,
            noiseless=bool(section.get('noiseless', False)),
        )
    raise OptimizerError(f"Metodo '{method}' non supportato ({' | '.join(METHODS)})")
