"""
Combination-weight rules.

All vectorised helpers take link arrays shaped ``(..., K, K)`` where
column ``k`` holds the weights node ``k`` applies to its neighbours, so a
valid weight array is left-stochastic along axis ``-2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

UNIFORM = "uniform"
MAX_DEGREE = "max_degree"
LAPLACIAN = "laplacian"
RELATIVE_VARIANCE = "relative_variance"
OPTIMAL = "optimal"
ADAPTIVE = "adaptive"

BASELINES = (UNIFORM, MAX_DEGREE, LAPLACIAN, RELATIVE_VARIANCE)
COMBINERS = (OPTIMAL, ADAPTIVE) + BASELINES


class CombinerError(ValueError):
    pass


def optimal_alpha_sq(l: int, k: int, *, step_size: float, meas_noise_var: float,
                     regressor_trace: float, eq_gain_sq: float = 0.0,
                     ini_var: float = 0.0, noise_var: float = 0.0,
                     dim: int = 1) -> float:
    """Noise proxy ``alpha^2_lk`` of link ``l -> k``.

    ``step_size``, ``meas_noise_var`` and ``regressor_trace`` describe the
    transmitting node ``l``. The channel terms are ignored for ``l == k``.
    """
    vals = (step_size, meas_noise_var, regressor_trace, eq_gain_sq, ini_var, noise_var)
    if any(v < 0 for v in vals):
        raise CombinerError("alpha^2 inputs must be nonnegative")
    own = step_size ** 2 * meas_noise_var * regressor_trace
    if l == k:
        return own
    return own + eq_gain_sq * dim * (ini_var + noise_var)


def optimal_alpha_sq_matrix(step_sizes, meas_noise_vars, regressor_traces,
                            eq_gain_sq, ini_var, noise_var, dim: int,
                            adjacency: np.ndarray) -> np.ndarray:
    """All ``alpha^2_lk`` at once; ``inf`` where a link is out of range or
    its equaliser moment is unavailable (so it never gets weight)."""
    mu = np.asarray(step_sizes, dtype=float)
    own = mu ** 2 * np.asarray(meas_noise_vars, float) * np.asarray(regressor_traces, float)
    chan = np.asarray(eq_gain_sq, float) * dim * (np.asarray(ini_var, float)
                                                   + np.asarray(noise_var, float))
    out = own[:, None] + chan
    out = np.where(np.isnan(out), np.inf, out)
    out[~adjacency] = np.inf
    np.fill_diagonal(out, own)
    return out


def optimal_weights(alpha_sq: Mapping[int, float]) -> dict[int, float]:
    """Inverse-``alpha^2`` weights over an active set."""
    if not alpha_sq:
        raise CombinerError("active set is empty")
    if any(v <= 0 for v in alpha_sq.values()):
        raise CombinerError("alpha^2 must be positive on the active set")
    inv = {l: 1.0 / v for l, v in alpha_sq.items()}
    total = sum(inv.values())
    return {l: v / total for l, v in inv.items()}


def weights_from_alpha_sq(alpha_sq: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Vectorised form of :func:`optimal_weights` over ``(..., K, K)``."""
    if np.any(active & ~(alpha_sq > 0)):
        raise CombinerError("alpha^2 must be positive on the active set")
    with np.errstate(divide="ignore"):
        inv = np.where(active, 1.0 / alpha_sq, 0.0)
    return inv / inv.sum(axis=-2, keepdims=True)


def kkt_nominal_weights(alpha_sq, succ_prob) -> np.ndarray:
    """Minimiser of ``sum zeta^2 p alpha^2`` subject to ``sum p zeta = 1``.

    With every ``p = 1`` this reduces to :func:`optimal_weights`.
    """
    a2 = np.asarray(alpha_sq, dtype=float)
    p = np.asarray(succ_prob, dtype=float)
    if np.any(a2 <= 0) or np.any(p <= 0):
        raise CombinerError("alpha^2 and success probabilities must be positive")
    inv = 1.0 / a2
    return inv / np.sum(p * inv)


def nominal_objective(zeta, succ_prob, alpha_sq) -> np.ndarray:
    """``sum_l zeta_l^2 p_l alpha^2_l`` (last axis summed)."""
    zeta = np.asarray(zeta, dtype=float)
    return np.sum(zeta ** 2 * np.asarray(succ_prob) * np.asarray(alpha_sq), axis=-1)


def baseline_weights(kind: str, active: np.ndarray,
                     relvar: np.ndarray | None = None) -> np.ndarray:
    """Literature combination rules on the active graph.

    Parameters
    ----------
    kind : str
        One of ``uniform``, ``max_degree``, ``laplacian``,
        ``relative_variance``.
    active : ndarray of bool, shape (..., K, K)
        Active links, diagonal included.
    relvar : ndarray, shape (K,)
        ``mu_l^2 sigma^2_{v,l} Tr(R_{u,l})``; only for ``relative_variance``.
    """
    K = active.shape[-1]
    eye = np.eye(K, dtype=bool)
    act = active | eye
    n = act.sum(axis=-2, keepdims=True).astype(float)
    off = act & ~eye
    if kind == UNIFORM:
        return act / n
    if kind in (MAX_DEGREE, LAPLACIAN):
        if kind == MAX_DEGREE:
            scale = float(K)
        else:
            scale = n.max(axis=-1, keepdims=True)
        w = off / scale
        return np.where(eye, 1.0 - (n - 1.0) / scale, w)
    if kind == RELATIVE_VARIANCE:
        if relvar is None:
            raise CombinerError("relative_variance needs per-node noise proxies")
        rv = np.asarray(relvar, dtype=float)
        if np.any(rv <= 0):
            raise CombinerError("relative-variance proxies must be positive")
        inv = np.where(act, 1.0 / rv[:, None], 0.0)
        return inv / inv.sum(axis=-2, keepdims=True)
    raise CombinerError(f"unknown baseline {kind!r}")


@dataclass
class AdaptiveCombinerState:
    """Running ``alpha^2`` estimates, shape ``(..., K, K)``."""

    alpha_sq_est: np.ndarray
    learning_factor: float

    def __post_init__(self):
        if not 0 < self.learning_factor <= 1:
            raise CombinerError("learning factor must lie in (0, 1]")

    @classmethod
    def initial(cls, shape, tau: float = 0.1, init: float = 1.0):
        return cls(np.full(shape, float(init)), float(tau))


def adaptive_update(state: AdaptiveCombinerState, k: int,
                    received: Mapping[int, np.ndarray], own: np.ndarray,
                    previous: np.ndarray, active) -> AdaptiveCombinerState:
    """Update column ``k`` from one iteration's equalised receptions.

    ``received[l]`` is ``g_lk psi_lk`` for active neighbours; ``own`` is
    ``psi_k`` and ``previous`` is ``omega_{k,i-1}``. Estimates of links
    outside ``active`` are held.
    """
    tau = state.learning_factor
    est = state.alpha_sq_est.copy()
    for l in active:
        x = own if l == k else received[l]
        diff = np.asarray(x) - np.asarray(previous)
        inst = float(np.sum((diff * diff.conj()).real))
        est[..., l, k] = (1.0 - tau) * est[..., l, k] + tau * inst
    return AdaptiveCombinerState(est, tau)


def adaptive_update_batch(est: np.ndarray, tau: float, eq_received: np.ndarray,
                          omega_prev: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Vectorised update; ``eq_received[..., l, k, :]`` holds ``g_lk psi_lk``
    off the diagonal and ``psi_k`` on it."""
    diff = eq_received - omega_prev[..., None, :, :]
    inst = np.sum((diff * diff.conj()).real, axis=-1)
    return np.where(active, (1.0 - tau) * est + tau * inst, est)


def adaptive_weights(state: AdaptiveCombinerState, k: int, active) -> dict[int, float]:
    return optimal_weights({l: float(state.alpha_sq_est[..., l, k]) for l in active})


class Combiner:
    """Per-iteration weight producer used by the simulation engine."""

    name = "combiner"
    stateful = False

    def start(self, batch: int, K: int) -> None:
        pass

    def weights(self, active, eq_received=None, omega_prev=None) -> np.ndarray:
        raise NotImplementedError

    def static_rule(self):
        """Weight rule of the active mask alone, used for theory moments."""
        return lambda active: self.weights(active)


class OptimalCombiner(Combiner):
    name = OPTIMAL

    def __init__(self, alpha_sq: np.ndarray):
        self.alpha_sq = np.asarray(alpha_sq, dtype=float)

    def weights(self, active, eq_received=None, omega_prev=None):
        return weights_from_alpha_sq(self.alpha_sq, active)


class BaselineCombiner(Combiner):
    def __init__(self, kind: str, relvar=None):
        if kind not in BASELINES:
            raise CombinerError(f"unknown baseline {kind!r}")
        self.name = kind
        self.relvar = relvar

    def weights(self, active, eq_received=None, omega_prev=None):
        return baseline_weights(self.name, active, self.relvar)


class AdaptiveCombiner(Combiner):
    """Recursive ``alpha^2`` estimation with inverse-estimate weights.

    ``theory_alpha_sq`` is the closed-form ``alpha^2`` the estimates are
    expected to approach; theory moments use it in place of the state.
    """

    name = ADAPTIVE
    stateful = True

    def __init__(self, tau: float = 0.1, init: float = 1.0, theory_alpha_sq=None):
        if not 0 < tau < 1:
            raise CombinerError("tau must lie in (0, 1)")
        if not init > 0:
            raise CombinerError("initial alpha^2 estimate must be positive")
        self.tau = float(tau)
        self.init = float(init)
        self.theory_alpha_sq = theory_alpha_sq
        self.est = None

    def start(self, batch: int, K: int) -> None:
        self.est = np.full((batch, K, K), self.init)

    def weights(self, active, eq_received=None, omega_prev=None):
        if eq_received is not None:
            self.est = adaptive_update_batch(self.est, self.tau, eq_received,
                                             omega_prev, active)
        return weights_from_alpha_sq(self.est, active)

    def static_rule(self):
        if self.theory_alpha_sq is None:
            raise CombinerError("adaptive combiner has no closed-form surrogate")
        return lambda active: weights_from_alpha_sq(self.theory_alpha_sq, active)


def make_combiner(name: str, *, alpha_sq=None, relvar=None, tau: float = 0.1,
                  init: float = 1.0) -> Combiner:
    if name == OPTIMAL:
        if alpha_sq is None:
            raise CombinerError("optimal combiner needs alpha^2")
        return OptimalCombiner(alpha_sq)
    if name == ADAPTIVE:
        return AdaptiveCombiner(tau, init, theory_alpha_sq=alpha_sq)
    if name in BASELINES:
        return BaselineCombiner(name, relvar)
    raise CombinerError(f"unknown combiner {name!r}; choose from {', '.join(COMBINERS)}")
