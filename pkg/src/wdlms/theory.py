"""
Closed-form performance predictions for ATC diffusion LMS over fading
links with interference.

Stacked network quantities have size ``MK``; node ``k`` occupies rows
``k*M:(k+1)*M``. The expected combination matrices are expanded with
``kron(X, I_M)``. The mean-square recursion is propagated in covariance
form, ``P_i = B P_{i-1} B^* + G_i``, which is the vec-identity equivalent of
iterating ``F = B^T (x) B^*`` on a weighting vector without ever forming
the ``(MK)^2 x (MK)^2`` matrix ``F``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import channel as ch
from .combiners import Combiner
from .engine import NetworkSetup

ILL_CONDITIONED = 1e12
UNIT_TOL = 1e-10


class DivergenceError(ArithmeticError):
    """The mean recursion is unstable, so the requested limit does not exist."""


class UnreliableSolveWarning(RuntimeWarning):
    pass


def expand(X: np.ndarray, M: int) -> np.ndarray:
    return np.kron(X, np.eye(M))


def blockdiag(blocks) -> np.ndarray:
    return sla.block_diag(*blocks)


def vec(X: np.ndarray) -> np.ndarray:
    """Column-stacking vectorisation."""
    return np.asarray(X).reshape(-1, order="F")


def unvec(x: np.ndarray, n: int) -> np.ndarray:
    return np.asarray(x).reshape((n, n), order="F")


def stack_truth(truth: np.ndarray, K: int) -> np.ndarray:
    return np.kron(np.ones(K), np.asarray(truth, dtype=complex))


@dataclass(frozen=True, eq=False)
class MomentMatrices:
    """Expected network matrices, all ``MK x MK``.

    ``A`` is the expected combination matrix expansion, ``Q`` the expected
    equalised gain expansion and ``E = A - Q``.
    """

    A: np.ndarray
    Q: np.ndarray
    E: np.ndarray
    B: np.ndarray
    Rint: np.ndarray
    Rn: np.ndarray
    Z: np.ndarray
    Mstep: np.ndarray
    Ru: np.ndarray
    dim: int

    @property
    def node_count(self) -> int:
        return self.A.shape[0] // self.dim

    @property
    def size(self) -> int:
        return self.A.shape[0]

    def noise_covariance(self) -> np.ndarray:
        """Covariance of the additive drive ``-Q^T M z - i - n``."""
        QT = self.Q.T
        return QT @ self.Mstep @ self.Z @ self.Mstep @ QT.conj().T + self.Rint + self.Rn


def assemble_moments(setup: NetworkSetup, moments: ch.LinkMoments) -> MomentMatrices:
    """Build the expected recursion matrices from per-link moments.

    ``moments`` must have been estimated under the weight rule of the
    combiner being analysed (see :func:`combiner_moments`).
    """
    K, M = setup.node_count, setup.dim
    nodes = setup.nodes
    mask = setup.topology.adjacency
    need = setup.topology.link_mask
    if moments.weight_mean.shape != (K, K):
        raise ValueError("link moments do not match the network size")
    if np.any(~np.isfinite(moments.weight_sq_gain[need])):
        raise ValueError("missing link moments for an in-range link")

    A = np.where(mask, moments.weight_mean, 0.0)
    if setup.equalizer == ch.ZF or setup.channel.ideal:
        Qs = A.astype(complex)
    else:
        Qs = np.where(mask, moments.q_mean, 0.0)
    S = np.where(need, moments.weight_sq_gain, 0.0)
    int_k = (S * moments.ini_var).sum(axis=0)
    n_k = (S * np.where(need, setup.channel.chan_noise_var, 0.0)).sum(axis=0)
    if setup.channel.ideal:
        int_k = np.zeros(K)
        n_k = np.zeros(K)

    I = np.eye(M)
    Ru = blockdiag(nodes.regressor_covs)
    Mstep = np.diag(np.repeat(nodes.step_sizes, M)).astype(complex)
    Z = blockdiag([s * r for s, r in zip(nodes.meas_noise_vars, nodes.regressor_covs)])
    Aexp = expand(A, M).astype(complex)
    Qexp = expand(Qs, M)
    B = Qexp.T @ (np.eye(K * M) - Mstep @ Ru)
    return MomentMatrices(
        A=Aexp, Q=Qexp, E=Aexp - Qexp, B=B,
        Rint=blockdiag([v * I for v in int_k]).astype(complex),
        Rn=blockdiag([v * I for v in n_k]).astype(complex),
        Z=Z, Mstep=Mstep, Ru=Ru, dim=M)


def combiner_moments(setup: NetworkSetup, combiner: Combiner, n_samples: int,
                     rng: np.random.Generator) -> ch.LinkMoments:
    """Link moments under the weights ``combiner`` assigns to each active set."""
    return ch.estimate_link_moments(setup.channel, setup.topology, setup.equalizer,
                                    n_samples=n_samples, rng=rng,
                                    weight_rule=combiner.static_rule())


def spectral_radius(X: np.ndarray) -> float:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise ValueError("spectral radius needs a square matrix")
    return float(np.max(np.abs(np.linalg.eigvals(X))))


def _blocks(X: np.ndarray, M: int) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise ValueError("block maximum norm needs a square matrix")
    if X.shape[0] % M:
        raise ValueError(f"matrix size {X.shape[0]} is not divisible by block size {M}")
    K = X.shape[0] // M
    return X.reshape(K, M, K, M).transpose(0, 2, 1, 3)


def _row_ascent(row: np.ndarray, rng: np.random.Generator, starts: int = 8,
                iters: int = 500) -> float:
    """Local maximum of ``||sum_k X_k x_k||`` over unit ``x_k``."""
    K, M, _ = row.shape
    best = 0.0
    inits = [np.linalg.svd(row[k])[2][0].conj() for k in range(K)]
    for s in range(starts):
        if s == 0:
            x = np.array(inits)
        else:
            x = ch.complex_normal(rng, (K, M))
        x /= np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-300)
        prev = -1.0
        for _ in range(iters):
            y = np.einsum("kij,kj->i", row, x)
            val = np.linalg.norm(y)
            if val == 0 or val - prev <= 1e-15 * val:
                break
            prev = val
            z = np.einsum("kji,j->ki", row.conj(), y)
            nz = np.linalg.norm(z, axis=1, keepdims=True)
            x = np.where(nz > 0, z / np.where(nz > 0, nz, 1.0), x)
        best = max(best, float(np.linalg.norm(np.einsum("kij,kj->i", row, x))))
    return best


def block_max_norm(X: np.ndarray, M: int) -> float:
    """Induced block maximum norm with ``M x M`` blocks.

    For block-diagonal matrices and matrices whose blocks are all multiples
    of the identity (every ``kron(A, I_M)``) this is exactly
    ``max_l sum_k ||X_lk||_2``. Otherwise that sum is only an upper bound
    and each block row is maximised numerically.
    """
    blk = _blocks(X, M)
    K = blk.shape[0]
    eye = np.eye(M)
    scalar = np.all(blk == blk[:, :, :1, :1] * eye)
    offdiag_zero = all(not np.any(blk[l, k]) for l in range(K) for k in range(K) if l != k)
    if scalar:
        norms = np.abs(blk[:, :, 0, 0])
    else:
        norms = np.linalg.norm(blk, ord=2, axis=(2, 3))
    rows = [math.fsum(r) for r in norms]
    if scalar or offdiag_zero or M == 1:
        return float(max(rows))
    rng = np.random.default_rng(0)
    return float(max(min(_row_ascent(blk[l], rng), rows[l]) for l in range(K)))


class UnboundedStepSize(ValueError):
    pass


def step_size_interval(regressor_cov: np.ndarray, q_norm: float) -> tuple[float, float]:
    """Mean-stability interval for one node's step size.

    ``q_norm`` is ``||Q^T||_{b,inf}``; values within 1e-10 of one are
    treated as exactly one so left-stochastic matrices give ``(0, 2/lambda)``.
    """
    if not q_norm > 0:
        raise ValueError("q_norm must be positive")
    lam = float(np.linalg.eigvalsh(np.asarray(regressor_cov)).max())
    if lam <= 0:
        raise UnboundedStepSize("lambda_max(R_u) = 0: every step size is mean-stable")
    if abs(q_norm - 1.0) <= UNIT_TOL:
        q_norm = 1.0
    inv = 1.0 / q_norm
    return (1.0 - inv) / lam, (1.0 + inv) / lam


def _solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(A)
    if not cond < ILL_CONDITIONED:
        warnings.warn(f"linear solve is ill-conditioned (cond={cond:.3g})",
                      UnreliableSolveWarning, stacklevel=3)
    return np.linalg.solve(A, b)


def mean_error_limit(moments: MomentMatrices, omega_c: np.ndarray) -> np.ndarray:
    """Steady-state network mean error ``(I - B)^{-1} E w_c``."""
    rho = spectral_radius(moments.B)
    if not rho < 1:
        raise DivergenceError(f"mean recursion is unstable (rho(B) = {rho:.6g})")
    n = moments.size
    return _solve(np.eye(n) - moments.B, moments.E @ omega_c)


def mean_error_step(moments: MomentMatrices, mean_prev: np.ndarray,
                    omega_c: np.ndarray) -> np.ndarray:
    return moments.B @ mean_prev + moments.E @ omega_c


def _drive(moments: MomentMatrices, omega_c: np.ndarray, mean_prev: np.ndarray) -> np.ndarray:
    G = moments.noise_covariance()
    Ew = moments.E @ omega_c
    if np.any(Ew):
        Bm = moments.B @ mean_prev
        G = G + np.outer(Ew, Ew.conj()) + np.outer(Bm, Ew.conj()) + np.outer(Ew, Bm.conj())
    return G


def compute_gamma(moments: MomentMatrices, omega_c: np.ndarray,
                  mean_prev: np.ndarray | None = None) -> np.ndarray:
    """Additive term ``gamma`` of the weighted variance recursion.

    ``gamma^T vec(Sigma) = Tr(Sigma G)`` where ``G`` is the covariance of
    the per-iteration drive. ``mean_prev`` is ``E{w~_{i-1}}``; by default
    the steady-state mean error is used.
    """
    if mean_prev is None:
        mean_prev = mean_error_limit(moments, omega_c) if np.any(moments.E) \
            else np.zeros(moments.size, dtype=complex)
    return vec(_drive(moments, omega_c, mean_prev).T)


@dataclass
class TheoryTrace:
    """Predicted MSD: ``node`` ``(T, K)``, ``network`` ``(T,)`` for
    ``i = 0 .. T-1``; ``initial`` is the value at ``i = -1``."""

    node: np.ndarray
    network: np.ndarray
    initial: np.ndarray


def msd_trace(moments: MomentMatrices, omega_c: np.ndarray, horizon: int,
              gamma: np.ndarray | None = None) -> TheoryTrace:
    """Per-node and network MSD learning curves from ``w_{k,-1} = 0``.

    With ``gamma`` given it is used as a constant drive; otherwise the
    drive is recomputed each step from the propagated mean error.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rho = spectral_radius(moments.B)
    if rho >= 1:
        warnings.warn(f"rho(B) = {rho:.4g} >= 1: the predicted MSD grows without bound",
                      RuntimeWarning, stacklevel=2)
    K, M, n = moments.node_count, moments.dim, moments.size
    B = moments.B
    Bh = B.conj().T
    omega_c = np.asarray(omega_c, dtype=complex)
    P = np.outer(omega_c, omega_c.conj())
    mean = omega_c.copy()
    fixed = None if gamma is None else unvec(gamma, n).T
    out = np.empty((horizon, K))
    for i in range(horizon):
        G = fixed if fixed is not None else _drive(moments, omega_c, mean)
        P = B @ P @ Bh + G
        mean = mean_error_step(moments, mean, omega_c)
        d = np.diagonal(P).real.reshape(K, M).sum(axis=1)
        out[i] = d
    init = np.abs(omega_c.reshape(K, M)) ** 2
    return TheoryTrace(out, out.mean(axis=1), init.sum(axis=1))


def steady_state_covariance(moments: MomentMatrices, omega_c: np.ndarray) -> np.ndarray:
    rho = spectral_radius(moments.B)
    if not rho < 1:
        raise DivergenceError(f"no steady state: rho(B) = {rho:.6g}")
    mean = mean_error_limit(moments, omega_c) if np.any(moments.E) \
        else np.zeros(moments.size, dtype=complex)
    G = _drive(moments, omega_c, mean)
    return sla.solve_discrete_lyapunov(moments.B, G)


def steady_state_msd(moments: MomentMatrices, omega_c: np.ndarray) -> tuple[np.ndarray, float]:
    """``(per-node MSD, network MSD)`` in the ``i -> inf`` limit."""
    P = steady_state_covariance(moments, omega_c)
    K, M = moments.node_count, moments.dim
    node = np.diagonal(P).real.reshape(K, M).sum(axis=1)
    return node, float(node.mean())


def identity_deviation(moments: MomentMatrices) -> float:
    """``delta = ||I - M R_u||_{b,inf}`` (block diagonal Hermitian, so this is
    its spectral radius)."""
    X = np.eye(moments.size) - moments.Mstep @ moments.Ru
    return block_max_norm(X, moments.dim)


def msd_upper_bound(moments: MomentMatrices, c: float | None = None,
                    delta: float | None = None) -> float:
    """Steady-state network MSD bound with the geometric series summed.

    ``c`` defaults to ``MK``.
    """
    K, M = moments.node_count, moments.dim
    c = float(M * K) if c is None else float(c)
    if not c > 0:
        raise ValueError("bound constant must be positive")
    delta = identity_deviation(moments) if delta is None else float(delta)
    if not delta < 1:
        raise DivergenceError(f"bound undefined for delta = {delta:.6g} >= 1")
    A = moments.A
    core = A.T @ moments.Mstep @ moments.Z.T @ moments.Mstep @ A + moments.Rint + moments.Rn
    return float(c * c / K * np.trace(core).real / (1.0 - delta * delta))


def global_error_step(err_prev: np.ndarray, *, A: np.ndarray, Q: np.ndarray,
                      Ru: np.ndarray, z: np.ndarray, ini: np.ndarray,
                      noise: np.ndarray, step_sizes: np.ndarray,
                      omega_c: np.ndarray) -> np.ndarray:
    """One step of the stacked error recursion for a single realisation.

    ``A`` and ``Q`` are the realised ``K x K`` weight and equalised-gain
    matrices, ``Ru`` the block diagonal of ``u^* u``, ``z`` the stacked
    ``u^* v``, and ``ini``/``noise`` the stacked combined interference and
    channel noise seen by each node.
    """
    A = np.asarray(A)
    K = A.shape[0]
    n = err_prev.shape[0]
    if n % K or Ru.shape != (n, n) or any(x.shape != (n,) for x in (z, ini, noise, omega_c)):
        raise ValueError("inconsistent stacked dimensions")
    M = n // K
    Qt = expand(np.asarray(Q), M).T
    Et = expand(A - np.asarray(Q), M)
    Mstep = np.diag(np.repeat(np.asarray(step_sizes, dtype=float), M))
    B = Qt @ (np.eye(n) - Mstep @ Ru)
    return B @ err_prev - Qt @ Mstep @ z + Et.T @ omega_c - ini - noise


@dataclass
class TheoryReport:
    trace: TheoryTrace
    moments: MomentMatrices
    rho_B: float
    q_norm: float
    delta: float
    steady_node: np.ndarray | None
    steady_network: float
    upper_bound: float | None
    mean_limit: np.ndarray | None


def predict(setup: NetworkSetup, combiner: Combiner, horizon: int,
            n_samples: int, rng: np.random.Generator,
            bound_constant: float | None = None) -> TheoryReport:
    """Moments, learning curve and steady-state summaries for one combiner."""
    lm = combiner_moments(setup, combiner, n_samples, rng)
    mom = assemble_moments(setup, lm)
    omega_c = stack_truth(setup.truth, setup.node_count)
    trace = msd_trace(mom, omega_c, horizon)
    rho = spectral_radius(mom.B)
    qn = block_max_norm(mom.Q.T, mom.dim)
    delta = identity_deviation(mom)
    steady_node, steady_net, limit = None, math.inf, None
    if rho < 1:
        steady_node, steady_net = steady_state_msd(mom, omega_c)
        limit = mean_error_limit(mom, omega_c)
    bound = None
    if delta < 1:
        bound = msd_upper_bound(mom, bound_constant, delta)
    return TheoryReport(trace, mom, rho, qn, delta, steady_node, steady_net, bound, limit)
