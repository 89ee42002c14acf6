"""
Wireless link model: Rayleigh fading with path loss, additive channel
noise, inter-node interference (INI), SINR gating and equalisation.

Conventions
-----------
* A complex Gaussian of "variance s" has ``E|x|^2 = s`` (real and
  imaginary parts each ``N(0, s/2)``).
* Link arrays are indexed ``[..., l, k]``: transmitter ``l``, receiver
  ``k``. The diagonal is the lossless self path.
* Every in-range neighbour transmits at every iteration. The interferers
  on link ``(l, k)`` are all of ``N_k \\ {k, l}``; gating only decides which
  received copies enter the combination.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .topology import NetworkTopology

ZF = "zf"
MMSE = "mmse"
NO_EQ = "none"
EQUALIZERS = (ZF, MMSE, NO_EQ)


class ChannelError(ValueError):
    """Invalid channel parameters or an undefined link operation."""


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def complex_normal(rng: np.random.Generator, shape=(), var=1.0) -> np.ndarray:
    """Circular complex Gaussian samples with ``E|x|^2 = var``."""
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return (re + 1j * im) * np.sqrt(np.asarray(var, dtype=float) / 2.0)


def _as_link_matrix(value, K: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full((K, K), float(arr))
    if arr.shape != (K, K):
        raise ChannelError(f"{name} must be a scalar or a {K}x{K} matrix")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ChannelError(f"{name} entries must be finite and nonnegative")
    arr = arr.copy()
    np.fill_diagonal(arr, 0.0)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ChannelParams:
    """Link-level channel statistics.

    ``ideal=True`` models a perfect channel: ``beta = 1`` on every
    in-range link, no noise, no interference and no gating.
    """

    tx_power: float
    pathloss_exp: float
    fading_var: np.ndarray
    chan_noise_var: np.ndarray
    sinr_threshold: float
    ideal: bool = False

    def __post_init__(self):
        if not self.tx_power > 0:
            raise ChannelError("tx_power must be positive")
        if not self.pathloss_exp > 0:
            raise ChannelError("pathloss_exp must be positive")
        if not self.sinr_threshold >= 0:
            raise ChannelError("sinr_threshold must be nonnegative (linear scale)")

    @classmethod
    def build(cls, node_count: int, *, tx_power=1.0, pathloss_exp=2.5,
              fading_var=1.0, chan_noise_var=0.01, sinr_threshold=None,
              sinr_threshold_db=None, ideal=False) -> "ChannelParams":
        """Broadcast scalar variances and convert a dB threshold."""
        if sinr_threshold is not None and sinr_threshold_db is not None:
            raise ChannelError("give sinr_threshold or sinr_threshold_db, not both")
        if sinr_threshold_db is not None:
            sinr_threshold = db_to_linear(sinr_threshold_db)
        if sinr_threshold is None:
            sinr_threshold = db_to_linear(-10.0)
        return cls(float(tx_power), float(pathloss_exp),
                   _as_link_matrix(fading_var, node_count, "fading_var"),
                   _as_link_matrix(chan_noise_var, node_count, "chan_noise_var"),
                   float(sinr_threshold), bool(ideal))

    @property
    def node_count(self) -> int:
        return self.fading_var.shape[0]


@dataclass(frozen=True)
class LinkRealization:
    """One link ``(l, k)`` at one iteration."""

    beta: complex
    noise: np.ndarray
    ini: np.ndarray
    sinr: float
    active: bool
    eq_gain: complex


@dataclass(frozen=True, eq=False)
class LinkMoments:
    """Per-link second-order statistics, each a ``(K, K)`` array.

    ``eq_gain_sq`` is ``nan`` (and ``available`` False) for in-range links
    that were never active in the Monte Carlo run.
    """

    beta_var: np.ndarray
    ini_var: np.ndarray
    succ_prob: np.ndarray
    eq_gain_sq: np.ndarray
    weight_mean: np.ndarray
    weight_sq_gain: np.ndarray
    q_mean: np.ndarray
    available: np.ndarray
    n_samples: int


def _check_sizes(params: ChannelParams, topology: NetworkTopology):
    if params.node_count != topology.node_count:
        raise ChannelError(
            f"channel parameters are for {params.node_count} nodes, "
            f"topology has {topology.node_count}")


def path_gain(params: ChannelParams, topology: NetworkTopology) -> np.ndarray:
    """``P_o / r_lk^alpha`` on in-range links, zero elsewhere."""
    _check_sizes(params, topology)
    mask = topology.link_mask
    r = topology.distances
    if np.any(mask & (r <= 0)):
        l, k = np.argwhere(mask & (r <= 0))[0]
        raise ChannelError(f"coincident nodes {l} and {k}: path loss is singular")
    gain = np.zeros_like(r)
    gain[mask] = params.tx_power / r[mask] ** params.pathloss_exp
    return gain


def beta_variance(params: ChannelParams, topology: NetworkTopology) -> np.ndarray:
    if params.ideal:
        return topology.link_mask.astype(float)
    return params.fading_var * path_gain(params, topology)


def draw_beta(params: ChannelParams, topology: NetworkTopology, l: int, k: int,
              rng: np.random.Generator) -> complex:
    """Draw ``beta_lk = h_lk sqrt(P_o / r_lk^alpha)`` for a single link."""
    if l == k:
        raise ChannelError("the self link is ideal; no beta is drawn for l == k")
    r = topology.distances[l, k]
    if r <= 0:
        raise ChannelError(f"coincident nodes {l} and {k}: path loss is singular")
    h = complex_normal(rng, (), params.fading_var[l, k])
    return complex(h * math.sqrt(params.tx_power / r ** params.pathloss_exp))


def ini_variance(params: ChannelParams, topology: NetworkTopology,
                 l: int, k: int) -> float:
    """Analytic INI variance on link ``(l, k)`` over the static set ``N_k``."""
    if not topology.adjacency[l, k]:
        raise ChannelError(f"node {l} is not a neighbour of node {k}")
    bv = beta_variance(params, topology)
    if params.ideal:
        return 0.0
    return float(sum(bv[m, k] for m in np.flatnonzero(topology.adjacency[:, k])
                     if m != l and m != k))


def ini_variance_matrix(params: ChannelParams, topology: NetworkTopology) -> np.ndarray:
    """``sigma^2_{i,lk}`` for all in-range links (zero elsewhere)."""
    K = topology.node_count
    out = np.zeros((K, K))
    if params.ideal:
        return out
    bv = beta_variance(params, topology)
    for l in range(K):
        others = bv.copy()
        others[l, :] = 0.0
        out[l, :] = others.sum(axis=0)
    out[~topology.adjacency] = 0.0
    np.fill_diagonal(out, 0.0)
    return out


def draw_ini(transmissions: Mapping[int, np.ndarray],
             betas: Mapping[tuple[int, int], complex], k: int, l: int) -> np.ndarray:
    """Superpose the transmissions of every node other than ``k`` and ``l``.

    ``transmissions`` holds the vectors sent by the in-range neighbours of
    ``k``; ``betas[(m, k)]`` is the gain of interferer ``m`` at ``k``.
    """
    out = None
    for m, psi in transmissions.items():
        if m == k or m == l:
            continue
        if (m, k) not in betas:
            raise ChannelError(f"missing beta for interferer {m} at node {k}")
        term = betas[(m, k)] * np.asarray(psi, dtype=complex)
        out = term if out is None else out + term
    if out is None:
        some = next(iter(transmissions.values()), None)
        size = 0 if some is None else np.asarray(some).shape[0]
        return np.zeros(size, dtype=complex)
    return out


def compute_sinr(betas_into_k: Mapping[int, complex], l: int,
                 chan_noise_var: float) -> float:
    """SINR of link ``l -> k`` with every other transmitter as interference."""
    signal = abs(betas_into_k[l]) ** 2
    interference = sum(abs(b) ** 2 for m, b in betas_into_k.items() if m != l)
    denom = interference + chan_noise_var
    if denom == 0:
        return math.inf if signal > 0 else 0.0
    return signal / denom


def gate_links(sinrs: Mapping[int, float], threshold: float, k: int) -> frozenset[int]:
    """Active set ``N_{k,i}``: ``k`` plus links meeting the SINR threshold."""
    return frozenset([k] + [l for l, s in sinrs.items() if l != k and s >= threshold])


def zf_gain(beta: complex) -> complex:
    mag2 = abs(beta) ** 2
    if mag2 == 0:
        raise ChannelError("zero-forcing gain undefined for beta = 0 (link should be gated out)")
    return beta.conjugate() / mag2


def mmse_gain(beta: complex, ini_var: float, noise_var: float) -> complex:
    denom = ini_var + noise_var + abs(beta) ** 2
    if denom <= 0:
        raise ChannelError("MMSE gain undefined: beta, INI and noise variance all zero")
    return complex(beta).conjugate() / denom


@dataclass(frozen=True, eq=False)
class LinkBatch:
    """Vectorised link state for a batch of channel uses, shape ``(..., K, K)``.

    ``gain`` is the equaliser gain on active links, 1 on the diagonal and 0
    on inactive links.
    """

    beta: np.ndarray
    sinr: np.ndarray
    active: np.ndarray
    gain: np.ndarray


def realize_links(params: ChannelParams, topology: NetworkTopology,
                  h_std: np.ndarray, equalizer: str,
                  beta_scale: np.ndarray | None = None,
                  ini_var: np.ndarray | None = None) -> LinkBatch:
    """Turn standard fading draws ``h_std ~ CN(0, 1)`` into gated links.

    ``beta_scale`` and ``ini_var`` may be passed in precomputed (they only
    depend on the static parameters).
    """
    if equalizer not in EQUALIZERS:
        raise ChannelError(f"unknown equalizer {equalizer!r}")
    K = topology.node_count
    mask = topology.link_mask
    eye = np.eye(K, dtype=bool)
    shape = h_std.shape
    if params.ideal:
        beta = np.broadcast_to(mask.astype(complex), shape).copy()
        active = np.broadcast_to(mask | eye, shape).copy()
        sinr = np.where(mask, np.inf, 0.0) * np.ones(shape)
        gain = active.astype(complex)
        return LinkBatch(beta, sinr, active, gain)

    if beta_scale is None:
        beta_scale = np.sqrt(beta_variance(params, topology))
    beta = h_std * beta_scale
    power = (beta * beta.conj()).real
    offdiag = 1.0 - np.eye(K)
    interference = np.matmul(offdiag, power)
    denom = interference + params.chan_noise_var
    with np.errstate(divide="ignore", invalid="ignore"):
        sinr = np.where(power > 0, power / denom, 0.0)
    sinr = np.where(mask, sinr, 0.0)
    active = (mask & (sinr >= params.sinr_threshold)) | eye

    link_active = active & mask
    if equalizer == ZF:
        if np.any(link_active & (power == 0)):
            raise ChannelError("active link with beta = 0 under zero-forcing")
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(link_active, beta.conj() / power, 0.0)
    elif equalizer == MMSE:
        if ini_var is None:
            ini_var = ini_variance_matrix(params, topology)
        d = ini_var + params.chan_noise_var + power
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(link_active, beta.conj() / d, 0.0)
        if np.any(link_active & (d <= 0)):
            raise ChannelError("MMSE gain undefined on an active link")
    else:
        g = link_active.astype(complex)
    g = g + eye
    return LinkBatch(beta, sinr, active, g)


WeightRule = Callable[[np.ndarray], np.ndarray]


def nominal_zeta(topology: NetworkTopology) -> np.ndarray:
    """Default nominal weights ``zeta_lk = 1/|N_k|`` on the static sets."""
    adj = topology.adjacency.astype(float)
    return adj / adj.sum(axis=0, keepdims=True)


def estimate_link_moments(params: ChannelParams, topology: NetworkTopology,
                          equalizer: str, zeta: np.ndarray | None = None,
                          n_samples: int = 100_000,
                          rng: np.random.Generator | None = None,
                          weight_rule: WeightRule | None = None,
                          chunk: int = 10_000) -> LinkMoments:
    """Monte Carlo link statistics.

    By default the weights follow ``a_lk(i) = zeta_lk * Gamma_lk(i)``;
    ``weight_rule`` maps an active mask ``(n, K, K)`` to weights of the
    same shape and replaces that nominal rule.
    """
    if n_samples < 1:
        raise ChannelError("n_samples must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    K = topology.node_count
    if weight_rule is None:
        z = nominal_zeta(topology) if zeta is None else np.asarray(zeta, dtype=float)
        weight_rule = lambda active: z * active  # noqa: E731
    beta_scale = np.sqrt(beta_variance(params, topology))
    ini_var = ini_variance_matrix(params, topology)

    count = np.zeros((K, K))
    g2_sum = np.zeros((K, K))
    a_sum = np.zeros((K, K))
    a2g2_sum = np.zeros((K, K))
    q_sum = np.zeros((K, K), dtype=complex)
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        h = complex_normal(rng, (n, K, K))
        links = realize_links(params, topology, h, equalizer, beta_scale, ini_var)
        a = weight_rule(links.active)
        g2 = (links.gain * links.gain.conj()).real
        count += links.active.sum(axis=0)
        g2_sum += np.where(links.active, g2, 0.0).sum(axis=0)
        a_sum += a.sum(axis=0)
        a2g2_sum += (a * a * g2).sum(axis=0)
        if equalizer == ZF or params.ideal:
            q_sum += a.sum(axis=0)
        else:
            gb = np.where(np.eye(K, dtype=bool), 1.0, links.gain * links.beta)
            q_sum += (a * gb).sum(axis=0)
        done += n

    mask = topology.adjacency
    available = count > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        eq_gain_sq = np.where(available, g2_sum / np.maximum(count, 1), np.nan)
    eq_gain_sq[~mask] = 0.0
    succ = count / n_samples
    succ[~mask] = 0.0
    return LinkMoments(
        beta_var=beta_variance(params, topology),
        ini_var=ini_var,
        succ_prob=succ,
        eq_gain_sq=eq_gain_sq,
        weight_mean=a_sum / n_samples,
        weight_sq_gain=a2g2_sum / n_samples,
        q_mean=q_sum / n_samples,
        available=available & mask,
        n_samples=int(n_samples),
    )
