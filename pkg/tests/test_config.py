import pytest

from pnosim.config import ConfigError, load
from pnosim.testbed import SimConfig


def test_defaults_match_sim_config():
    sim, wl = load(text="")
    assert sim == SimConfig() and wl.workload == "echo"


def test_sections_and_aliases():
    sim, wl = load(text="""
[dma]
ordering = unordered
seed = 9
base_latency_us = 3.0
[link]
loss_prob = 0.01
[bridge]
batch = no
batch_window_us = 5
[workload]
connections = 7
qd = 1, 2, 3
seed = none
""")
    assert sim.dma.completion_ordering == "unordered" and sim.dma.rng_seed == 9
    assert sim.dma.base_latency_us == 3.0 and sim.link.loss_prob == 0.01
    assert sim.bridge.batch is False and sim.bridge.batch_window_us == 5.0
    assert wl.connections == 7 and wl.qd == (1, 2, 3) and wl.seed is None


def test_overrides_apply_on_top():
    sim, wl = load(text="[workload]\nconnections = 7\n",
                   overrides={"workload": {"connections": 9, "cores": 2}})
    assert wl.connections == 9 and sim.cores == 2


@pytest.mark.parametrize("text", [
    "[nosuch]\nx = 1\n",
    "[dma]\nwarp = 1\n",
    "[dma]\nbase_latency_us = fast\n",
    "[bridge]\nbatch = maybe\n",
    "[dma]\nbase_latency_us = 0\n",
    "[workload]\nmode = turbo\n",
    "no section header\n",
])
def test_invalid_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        load(text=text)


def test_load_from_file(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[tcp]\nmss = 1000   ; inline comment\n[dma]\nseed = 3  # another\n")
    sim, _ = load(path)
    assert sim.tcp.mss == 1000 and sim.dma.rng_seed == 3
