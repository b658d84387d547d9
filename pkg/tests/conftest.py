import pytest

from timebinqkd.model import parse_config

BASE_CONFIG_TEXT = """\
# 251.7 km reference link
protocol.mu1 = 0.49
protocol.mu2 = 0.18
channel.length_km = 251.7
security.eps_sec = 1e-9
security.eps_cor = 1e-9
block.n_z_target = 8.2e6
"""

# Small lossy link that a Monte Carlo session can chew through quickly.
TOY_CONFIG_TEXT = """\
protocol.mu1 = 0.49
protocol.mu2 = 0.18
protocol.p_mu1 = 0.7
protocol.p_z_alice = 0.8
protocol.p_z_bob = 0.5
channel.length_km = 50.0
security.eps_sec = 1e-9
security.eps_cor = 1e-9
block.n_z_target = 4096
"""


@pytest.fixture
def base_config():
    return parse_config(BASE_CONFIG_TEXT)


@pytest.fixture
def toy_config():
    return parse_config(TOY_CONFIG_TEXT, analysis=False)
