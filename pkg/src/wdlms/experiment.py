"""
Seeded Monte Carlo experiments: build the network from a config, run every
(combiner, equalizer) pair on common random numbers, and attach the
theoretical learning curves.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import channel as ch
from . import combiners as cb
from . import theory as th
from .config import ConfigError, ExperimentConfig
from .engine import NetworkSetup, NodeParams, measure_msd, simulate

SIMULATION = "sim"
THEORY = "theory"

_ALPHA_STREAM = 2
_THEORY_STREAM = 3


def to_db(x):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(x)


@dataclass
class MsdTrace:
    """Learning curve of one (combiner, equalizer, source) triple.

    ``node`` is ``(T, K)`` and ``network`` ``(T,)``, both linear.
    """

    combiner: str
    equalizer: str
    source: str
    node: np.ndarray
    network: np.ndarray

    @property
    def node_db(self) -> np.ndarray:
        return to_db(self.node)

    @property
    def network_db(self) -> np.ndarray:
        return to_db(self.network)

    @property
    def horizon(self) -> int:
        return self.network.shape[0]


@dataclass
class SteadyState:
    """Tail-window averages; ``mean_error`` is the trial mean of
    ``w_o - w_k`` per node, ``(K, M)``, for simulated runs only."""

    combiner: str
    equalizer: str
    source: str
    node: np.ndarray
    network: float
    stderr: float = math.nan
    mean_error: np.ndarray | None = None

    @property
    def network_db(self) -> float:
        return float(to_db(self.network))


@dataclass
class ResultBundle:
    traces: list[MsdTrace] = field(default_factory=list)
    steady: list[SteadyState] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def trace(self, combiner: str, equalizer: str, source: str = SIMULATION) -> MsdTrace:
        for t in self.traces:
            if (t.combiner, t.equalizer, t.source) == (combiner, equalizer, source):
                return t
        raise KeyError((combiner, equalizer, source))

    def steady_state(self, combiner: str, equalizer: str,
                     source: str = SIMULATION) -> SteadyState:
        for s in self.steady:
            if (s.combiner, s.equalizer, s.source) == (combiner, equalizer, source):
                return s
        raise KeyError((combiner, equalizer, source))


def build_nodes(config: ExperimentConfig, K: int) -> NodeParams:
    M = len(config.truth)
    n = config.nodes
    try:
        return NodeParams.build(K, M, step_size=np.asarray(n.step_size, dtype=float),
                                meas_noise_var=np.asarray(n.meas_noise_var, dtype=float),
                                regressor_cov=config.regressor_cov_array())
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("nodes", str(exc)) from exc


def build_setup(config: ExperimentConfig, equalizer: str) -> NetworkSetup:
    topo = config.build_topology()
    K = topo.node_count
    channel = config.build_channel(K)
    nodes = build_nodes(config, K)
    try:
        return NetworkSetup(topo, channel, nodes, config.truth_vector, equalizer)
    except ValueError as exc:
        raise ConfigError("", str(exc)) from exc


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def link_alpha_sq(setup: NetworkSetup, n_samples: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Closed-form ``alpha^2`` matrix, with the equaliser moment estimated
    by Monte Carlo over the gated link distribution."""
    lm = ch.estimate_link_moments(setup.channel, setup.topology, setup.equalizer,
                                  n_samples=n_samples, rng=rng)
    nodes = setup.nodes
    return cb.optimal_alpha_sq_matrix(
        nodes.step_sizes, nodes.meas_noise_vars, nodes.regressor_traces,
        lm.eq_gain_sq, lm.ini_var, setup.channel.chan_noise_var, setup.dim,
        setup.topology.adjacency)


def build_combiner(config: ExperimentConfig, setup: NetworkSetup, name: str,
                   alpha_sq: np.ndarray | None) -> cb.Combiner:
    c = config.combiners
    return cb.make_combiner(name, alpha_sq=alpha_sq, relvar=setup.nodes.relative_variance(),
                            tau=c.adaptive_tau, init=c.adaptive_init)


def _theory(setup, combiner, config, eq_index, comb_index):
    rng = _stream(config.seed, _THEORY_STREAM, eq_index, comb_index)
    with warnings.catch_warnings(), np.errstate(over="ignore", invalid="ignore"):
        warnings.simplefilter("ignore", RuntimeWarning)
        return th.predict(setup, combiner, config.horizon, config.moment_samples, rng,
                          bound_constant=config.bound_constant)


def run_experiment(config: ExperimentConfig, *, simulate_runs: bool = True,
                   theory: bool | None = None,
                   combiners: list[str] | None = None) -> ResultBundle:
    """Simulate and/or predict every configured (combiner, equalizer) pair.

    Trials use the same random streams for every pair, so differences
    between combiners are not blurred by sampling noise.
    """
    theory = config.theory if theory is None else theory
    names = list(dict.fromkeys(combiners or config.combiners.names))
    W = config.window
    bundle = ResultBundle(meta={
        "config_hash": config.digest(),
        "seed": config.seed,
        "version": __version__,
        "trials": config.trials,
        "horizon": config.horizon,
        "tail_window": W,
        "runs": [],
    })
    for eq in config.equalizers:
        setup = build_setup(config, eq)
        eq_index = ch.EQUALIZERS.index(eq)
        alpha_sq = None
        if {cb.OPTIMAL, cb.ADAPTIVE} & set(names):
            alpha_sq = link_alpha_sq(setup, config.moment_samples,
                                     _stream(config.seed, _ALPHA_STREAM, eq_index))
        for name in names:
            combiner = build_combiner(config, setup, name, alpha_sq)
            info = {"combiner": name, "equalizer": eq}
            if simulate_runs:
                res = simulate(setup, combiner, config.trials, config.seed,
                               config.horizon, W, workers=config.workers)
                est = measure_msd(res.sq_err, W)
                bundle.traces.append(MsdTrace(name, eq, SIMULATION, est.node, est.network))
                bundle.steady.append(SteadyState(name, eq, SIMULATION, est.steady_node,
                                                 est.steady_network, est.steady_stderr,
                                                 res.tail_error.mean(axis=0)))
                info.update(diverged_trials=res.diverged_count,
                            max_column_deviation=res.max_column_dev,
                            active_link_fraction=res.active_fraction)
            if theory:
                rep = _theory(setup, combiner, config, eq_index, cb.COMBINERS.index(name))
                tr = rep.trace
                bundle.traces.append(MsdTrace(name, eq, THEORY, tr.node, tr.network))
                tail = tr.node[-W:].mean(axis=0)
                bundle.steady.append(SteadyState(name, eq, THEORY, tail, float(tail.mean())))
                info.update(rho_B=rep.rho_B, q_norm=rep.q_norm, delta=rep.delta,
                            theory_limit_msd=rep.steady_network,
                            msd_upper_bound=rep.upper_bound)
            bundle.meta["runs"].append(info)
    return bundle


@dataclass
class RankRow:
    combiner: str
    equalizer: str
    network_db: float
    node_db: np.ndarray
    stderr: float


def compare_combiners(config: ExperimentConfig, names: list[str]) -> list[RankRow]:
    """Steady-state network MSD of each combiner, best first."""
    if len(names) < 2:
        raise ValueError("comparison needs at least two combiners")
    bad = [n for n in names if n not in cb.COMBINERS]
    if bad:
        raise ConfigError("combiners", f"unknown combiner(s) {bad}")
    bundle = run_experiment(config, theory=False, combiners=names)
    rows = []
    for eq in config.equalizers:
        for name in names:
            s = bundle.steady_state(name, eq)
            rows.append(RankRow(name, eq, s.network_db, to_db(s.node), s.stderr))
    # stable sort keeps repeated combiners adjacent and in input order
    return sorted(rows, key=lambda r: r.network_db)
