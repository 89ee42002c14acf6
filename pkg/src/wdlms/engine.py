"""
Adapt-then-combine diffusion LMS over impaired wireless links.

Two layers live here:

* per-node reference operations (:func:`draw_measurement`, :func:`adapt`,
  :func:`combine`) that mirror the algorithm one node at a time;
* a batched engine (:func:`run_iteration`, :func:`simulate`) that advances
  many independent trials at once. Trials form the leading axis of every
  array, and each trial owns a random stream derived from
  ``(master_seed, trial_index)`` so results do not depend on how trials are
  grouped into batches or workers.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import channel as ch
from .combiners import Combiner
from .topology import NetworkTopology

DRAW_CHUNK = 50
COLUMN_SUM_TOL = 1e-10
# squared error beyond which a trial is declared divergent and frozen
DIVERGENCE_LIMIT = 1e30


class ContractError(RuntimeError):
    """An invariant of the recursion was violated during a run."""


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(cov)
    if w.min() < -1e-12 * max(1.0, abs(w).max()):
        raise ValueError("regressor covariance must be positive semi-definite")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.conj().T


def _as_covs(value, K: int, M: int) -> np.ndarray:
    arr = np.asarray(value, dtype=complex)
    if arr.ndim == 0:
        return np.broadcast_to(arr * np.eye(M), (K, M, M)).copy()
    if arr.ndim == 1 and arr.shape[0] == K:
        return arr[:, None, None] * np.eye(M)
    if arr.ndim == 2 and arr.shape == (M, M):
        return np.broadcast_to(arr, (K, M, M)).copy()
    if arr.ndim == 3 and arr.shape == (K, M, M):
        return arr.copy()
    raise ValueError("regressor_cov must be a scalar, K scalars, an MxM or KxMxM array")


def _as_vector(value, K: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(K, float(arr))
    if arr.shape != (K,):
        raise ValueError(f"{name} must be a scalar or a length-{K} list")
    return arr


@dataclass(frozen=True, eq=False)
class NodeParams:
    """Statistics of all ``K`` nodes: step sizes, regressor covariances and
    measurement-noise variances."""

    step_sizes: np.ndarray
    regressor_covs: np.ndarray
    meas_noise_vars: np.ndarray
    cov_sqrt: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mu = np.asarray(self.step_sizes, dtype=float)
        R = np.asarray(self.regressor_covs, dtype=complex)
        s2 = np.asarray(self.meas_noise_vars, dtype=float)
        K = mu.shape[0]
        if R.ndim != 3 or R.shape[0] != K or R.shape[1] != R.shape[2]:
            raise ValueError("regressor_covs must have shape (K, M, M)")
        if s2.shape != (K,):
            raise ValueError("meas_noise_vars must have length K")
        if np.any(mu <= 0):
            raise ValueError("step sizes must be positive")
        if np.any(s2 < 0):
            raise ValueError("measurement noise variances must be nonnegative")
        if not np.allclose(R, np.conj(np.swapaxes(R, 1, 2)), atol=1e-12):
            raise ValueError("regressor covariances must be Hermitian")
        sq = np.stack([_psd_sqrt(r) for r in R])
        object.__setattr__(self, "step_sizes", mu)
        object.__setattr__(self, "regressor_covs", R)
        object.__setattr__(self, "meas_noise_vars", s2)
        object.__setattr__(self, "cov_sqrt", sq)

    @classmethod
    def build(cls, node_count: int, dim: int, *, step_size=0.01,
              meas_noise_var=0.1, regressor_cov=1.0) -> "NodeParams":
        return cls(_as_vector(step_size, node_count, "step_size"),
                   _as_covs(regressor_cov, node_count, dim),
                   _as_vector(meas_noise_var, node_count, "meas_noise_var"))

    @property
    def node_count(self) -> int:
        return self.step_sizes.shape[0]

    @property
    def dim(self) -> int:
        return self.regressor_covs.shape[1]

    @property
    def regressor_traces(self) -> np.ndarray:
        return np.trace(self.regressor_covs, axis1=1, axis2=2).real

    @property
    def lambda_max(self) -> np.ndarray:
        return np.array([np.linalg.eigvalsh(r).max() for r in self.regressor_covs])

    def relative_variance(self) -> np.ndarray:
        """``mu_k^2 sigma^2_{v,k} Tr(R_{u,k})`` per node."""
        return self.step_sizes ** 2 * self.meas_noise_vars * self.regressor_traces

    def node(self, k: int, estimate=None) -> "NodeState":
        M = self.dim
        est = np.zeros(M, dtype=complex) if estimate is None else np.asarray(estimate, complex)
        return NodeState(est, est.copy(), float(self.step_sizes[k]),
                         self.regressor_covs[k], float(self.meas_noise_vars[k]))


@dataclass
class NodeState:
    estimate: np.ndarray
    intermediate: np.ndarray
    step_size: float
    regressor_cov: np.ndarray
    meas_noise_var: float

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        self._sqrt = _psd_sqrt(np.asarray(self.regressor_cov, dtype=complex))


def draw_measurement(node: NodeState, truth: np.ndarray, rng: np.random.Generator):
    """Regressor row ``u`` and observation ``d = u w_o + v`` for one node."""
    M = len(truth)
    u = ch.complex_normal(rng, (M,)) @ node._sqrt
    v = ch.complex_normal(rng, (), node.meas_noise_var)
    return u, complex(u @ truth + v)


def adapt(node: NodeState, regressor: np.ndarray, observation: complex) -> np.ndarray:
    """LMS step from the node's previous estimate."""
    w = node.estimate
    err = observation - regressor @ w
    return w + node.step_size * np.conj(regressor) * err


def combine(k: int, received: Mapping[int, tuple], own: np.ndarray,
            weights: Mapping[int, float]) -> np.ndarray:
    """Equalised combination at node ``k``.

    ``received[l] = (psi_lk, g_lk)``; the own intermediate bypasses the
    channel. ``weights`` must sum to one over the active set.
    """
    total = sum(weights.values())
    if abs(total - 1.0) > COLUMN_SUM_TOL:
        raise ContractError(f"weights at node {k} sum to {total!r}, not 1")
    out = weights.get(k, 0.0) * np.asarray(own, dtype=complex)
    for l, a in weights.items():
        if l == k or a == 0:
            continue
        psi_lk, g = received[l]
        out = out + a * g * np.asarray(psi_lk)
    return out


@dataclass(frozen=True, eq=False)
class NetworkSetup:
    """Everything static about a simulated network."""

    topology: NetworkTopology
    channel: ch.ChannelParams
    nodes: NodeParams
    truth: np.ndarray
    equalizer: str = ch.ZF

    def __post_init__(self):
        truth = np.asarray(self.truth, dtype=complex)
        if truth.ndim != 1:
            raise ValueError("truth must be a vector")
        if self.nodes.dim != truth.shape[0]:
            raise ValueError("regressor dimension does not match the truth vector")
        if self.nodes.node_count != self.topology.node_count:
            raise ValueError("node statistics and topology disagree on K")
        if self.equalizer not in ch.EQUALIZERS:
            raise ValueError(f"unknown equalizer {self.equalizer!r}")
        object.__setattr__(self, "truth", truth)
        object.__setattr__(self, "_beta_scale",
                           np.sqrt(ch.beta_variance(self.channel, self.topology)))
        object.__setattr__(self, "_ini_var", ch.ini_variance_matrix(self.channel, self.topology))
        noise_scale = np.where(self.topology.link_mask, np.sqrt(self.channel.chan_noise_var), 0.0)
        object.__setattr__(self, "_noise_scale", noise_scale)

    @property
    def node_count(self) -> int:
        return self.topology.node_count

    @property
    def dim(self) -> int:
        return self.truth.shape[0]

    def with_equalizer(self, equalizer: str) -> "NetworkSetup":
        return NetworkSetup(self.topology, self.channel, self.nodes, self.truth, equalizer)


@dataclass
class IterationDraws:
    """Standardised random inputs of one iteration, leading axis = trials.

    ``u`` ``(n, K, M)``, ``v`` ``(n, K)``, ``h`` ``(n, K, K)`` and
    ``noise`` ``(n, K, K, M)`` are all ``CN(0, 1)``; the engine applies the
    node and link statistics.
    """

    u: np.ndarray
    v: np.ndarray
    h: np.ndarray
    noise: np.ndarray

    def __getitem__(self, idx) -> "IterationDraws":
        return IterationDraws(self.u[idx], self.v[idx], self.h[idx], self.noise[idx])


def trial_rng(master_seed: int, trial: int) -> np.random.Generator:
    """Independent stream of one trial."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(1, trial)))


class TrialStreams:
    """Chunked draws for a set of trials; one generator per trial."""

    def __init__(self, master_seed: int, trials: Sequence[int], K: int, M: int):
        self.rngs = [trial_rng(master_seed, t) for t in trials]
        self.K, self.M = K, M
        self._buf: IterationDraws | None = None
        self._pos = 0

    def _refill(self, size: int = DRAW_CHUNK):
        K, M = self.K, self.M
        parts = []
        for rng in self.rngs:
            parts.append((ch.complex_normal(rng, (size, K, M)),
                          ch.complex_normal(rng, (size, K)),
                          ch.complex_normal(rng, (size, K, K)),
                          ch.complex_normal(rng, (size, K, K, M))))
        self._buf = IterationDraws(*(np.stack(p, axis=1) for p in zip(*parts)))
        self._pos = 0

    def next(self) -> IterationDraws:
        if self._buf is None or self._pos == self._buf.u.shape[0]:
            self._refill()
        d = self._buf[self._pos]
        self._pos += 1
        return d


@dataclass
class IterationRecord:
    """Everything realised in one iteration (all arrays lead with trials)."""

    omega: np.ndarray
    psi: np.ndarray
    sq_err: np.ndarray
    regressors: np.ndarray
    meas_noise: np.ndarray
    beta: np.ndarray
    link_noise: np.ndarray
    ini: np.ndarray
    gain: np.ndarray
    active: np.ndarray
    weights: np.ndarray


def _sum_over(x: np.ndarray, axis: int) -> np.ndarray:
    # fixed left-to-right order keeps results independent of batch size
    x = np.moveaxis(x, axis, 0)
    out = x[0].copy()
    for part in x[1:]:
        out += part
    return out


def run_iteration(setup: NetworkSetup, omega: np.ndarray, draws: IterationDraws,
                  combiner: Combiner) -> IterationRecord:
    """Advance every trial by one ATC iteration.

    Order of effects: all nodes adapt; every in-range neighbour transmits;
    links are realised with one shared ``beta`` per pair; SINR gating
    selects the active sets; the combiner weights them; each node forms the
    equalised combination.
    """
    nodes, params = setup.nodes, setup.channel
    K = setup.node_count

    u = _sum_over(draws.u[..., :, None] * nodes.cov_sqrt[None], axis=-2)
    v = draws.v * np.sqrt(nodes.meas_noise_vars)
    d = _sum_over(u * setup.truth, axis=-1) + v
    err = d - _sum_over(u * omega, axis=-1)
    psi = omega + nodes.step_sizes[:, None] * np.conj(u) * err[..., None]

    links = ch.realize_links(params, setup.topology, draws.h, setup.equalizer,
                             setup._beta_scale, setup._ini_var)
    beta = links.beta
    desired = beta[..., None] * psi[:, :, None, :]
    if params.ideal:
        ini = np.zeros_like(desired)
        noise = np.zeros_like(desired)
    else:
        total = _sum_over(desired, axis=1)
        ini = total[:, None, :, :] - desired
        ini[:, np.arange(K), np.arange(K)] = 0.0
        noise = draws.noise * setup._noise_scale[..., None]
    received = desired + ini + noise

    eq = links.gain[..., None] * received
    eq = np.where(links.active[..., None], eq, 0.0)
    eq[:, np.arange(K), np.arange(K)] = psi

    weights = combiner.weights(links.active, eq, omega)
    new_omega = _sum_over(weights[..., None] * eq, axis=1)
    diff = setup.truth - new_omega
    sq_err = _sum_over((diff * diff.conj()).real, axis=-1)
    return IterationRecord(new_omega, psi, sq_err, u, v, beta, noise, ini,
                           links.gain, links.active, weights)


@dataclass
class SimulationResult:
    """Per-trial outputs of :func:`simulate`.

    ``sq_err`` has shape ``(trials, T, K)``; ``tail_error`` holds the
    per-trial time average of ``w_o - w_{k,i}`` over the last
    ``tail_window`` iterations, shape ``(trials, K, M)``.
    """

    trials: list[int]
    sq_err: np.ndarray
    tail_error: np.ndarray
    max_column_dev: float
    active_fraction: float
    diverged: np.ndarray

    @property
    def diverged_count(self) -> int:
        return int(self.diverged.sum())


def _simulate_batch(setup: NetworkSetup, combiner: Combiner, trials: Sequence[int],
                    master_seed: int, horizon: int, tail_window: int) -> SimulationResult:
    n = len(trials)
    K, M = setup.node_count, setup.dim
    streams = TrialStreams(master_seed, trials, K, M)
    combiner.start(n, K)
    omega = np.zeros((n, K, M), dtype=complex)
    sq_err = np.empty((n, horizon, K))
    tail = np.zeros((n, K, M), dtype=complex)
    worst = 0.0
    active_links = 0
    diverged = np.zeros(n, dtype=bool)
    link_count = int(setup.topology.link_mask.sum())
    start_tail = horizon - tail_window
    for i in range(horizon):
        with np.errstate(over="ignore", invalid="ignore"):
            rec = run_iteration(setup, omega, streams.next(), combiner)
        live = ~diverged
        dev = float(np.max(np.abs(rec.weights[live].sum(axis=-2) - 1.0), initial=0.0))
        if not dev <= COLUMN_SUM_TOL:
            raise ContractError(f"combination matrix not left-stochastic at iteration {i}: {dev!r}")
        worst = max(worst, dev)
        offdiag = rec.active & setup.topology.link_mask
        active_links += int(offdiag.sum())
        omega = rec.omega
        err = rec.sq_err
        blown = live & ~np.all(err <= DIVERGENCE_LIMIT, axis=-1)
        if blown.any():
            diverged |= blown
        if diverged.any():
            omega[diverged] = 0.0
            err = np.where(diverged[:, None], np.inf, err)
        sq_err[:, i, :] = err
        if i >= start_tail:
            tail += setup.truth - omega
    tail = tail / max(tail_window, 1)
    tail[diverged] = np.nan
    frac = active_links / (n * horizon * link_count) if link_count else 1.0
    return SimulationResult(list(trials), sq_err, tail, worst, frac, diverged)


def simulate(setup: NetworkSetup, combiner: Combiner, trials: int | Sequence[int],
             master_seed: int, horizon: int, tail_window: int | None = None,
             workers: int = 1) -> SimulationResult:
    """Run independent trials of the network and keep per-trial errors.

    With ``workers > 1`` contiguous trial blocks run in separate processes;
    the merged result is identical to a single-process run.
    """
    trial_ids = list(range(trials)) if isinstance(trials, (int, np.integer)) else list(trials)
    if not trial_ids:
        raise ValueError("at least one trial is required")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if tail_window is None:
        tail_window = max(1, horizon // 5)
    if not 1 <= tail_window <= horizon:
        raise ValueError("tail window must lie in [1, horizon]")
    if workers <= 1 or len(trial_ids) == 1:
        return _simulate_batch(setup, combiner, trial_ids, master_seed, horizon, tail_window)
    blocks = [b.tolist() for b in np.array_split(trial_ids, min(workers, len(trial_ids)))]
    with ProcessPoolExecutor(max_workers=len(blocks)) as pool:
        parts = list(pool.map(_simulate_batch, [setup] * len(blocks),
                              [combiner] * len(blocks), blocks,
                              [master_seed] * len(blocks), [horizon] * len(blocks),
                              [tail_window] * len(blocks)))
    weights = [len(b) for b in blocks]
    frac = sum(p.active_fraction * w for p, w in zip(parts, weights)) / sum(weights)
    return SimulationResult(trial_ids,
                            np.concatenate([p.sq_err for p in parts]),
                            np.concatenate([p.tail_error for p in parts]),
                            max(p.max_column_dev for p in parts), frac,
                            np.concatenate([p.diverged for p in parts]))


@dataclass
class MsdEstimate:
    """Trial-averaged MSD: ``node`` ``(T, K)``, ``network`` ``(T,)``."""

    node: np.ndarray
    network: np.ndarray
    steady_node: np.ndarray
    steady_network: float
    steady_stderr: float
    trials: int


def measure_msd(sq_err: np.ndarray, tail_window: int | None = None) -> MsdEstimate:
    """Average squared errors over trials; steady state over the tail window."""
    sq_err = np.asarray(sq_err, dtype=float)
    if sq_err.ndim != 3 or sq_err.shape[0] == 0 or sq_err.shape[1] == 0:
        raise ValueError("need squared errors shaped (trials, T, K) with at least one trial")
    n, T, _ = sq_err.shape
    W = max(1, T // 5) if tail_window is None else tail_window
    if not 1 <= W <= T:
        raise ValueError("tail window must lie in [1, horizon]")
    node = sq_err.mean(axis=0)
    network = node.mean(axis=1)
    steady_node = node[T - W:].mean(axis=0)
    per_trial = sq_err[:, T - W:, :].mean(axis=(1, 2))
    if n > 1 and np.all(np.isfinite(per_trial)):
        stderr = float(per_trial.std(ddof=1) / np.sqrt(n))
    else:
        stderr = float("inf") if n > 1 else float("nan")
    return MsdEstimate(node, network, steady_node, float(steady_node.mean()), stderr, n)
