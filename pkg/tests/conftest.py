import numpy as np
import pytest

from wdlms import channel as ch
from wdlms.engine import NetworkSetup, NodeParams
from wdlms.topology import NetworkTopology

TRUTH = np.array([1 + 1j, -0.5 - 0.5j])


def triangle(side=0.3):
    """Three mutually in-range nodes."""
    pts = np.array([[0.2, 0.2], [0.2 + side, 0.2], [0.2 + side / 2, 0.2 + side * 0.8]])
    return NetworkTopology(pts, 0.5)


def make_setup(topology=None, *, equalizer="zf", ideal=False, tx_power=1.0,
               chan_noise_var=0.01, threshold_db=-10.0, step_size=0.01,
               meas_noise_var=0.01, regressor_cov=1.0, truth=TRUTH):
    topology = topology or triangle()
    K = topology.node_count
    params = ch.ChannelParams.build(K, tx_power=tx_power, chan_noise_var=chan_noise_var,
                                    sinr_threshold_db=threshold_db, ideal=ideal)
    nodes = NodeParams.build(K, len(truth), step_size=step_size,
                             meas_noise_var=meas_noise_var, regressor_cov=regressor_cov)
    return NetworkSetup(topology, params, nodes, truth, equalizer)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
