from pathlib import Path

import numpy as np
import pytest

from ccmkit.config import ConfigError, ProjectConfig

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("name", ["andrieu.ini", "planar.ini", "unstable_x2.ini", "consensus.ini"])
def test_shipped_configs_parse(name):
    cfg = ProjectConfig.load(CONFIGS / name)
    assert cfg.build_system().n >= 2


def test_andrieu_config_contents():
    cfg = ProjectConfig.load(CONFIGS / "andrieu.ini")
    sys = cfg.build_system()
    assert (sys.n, sys.m) == (3, 1)
    assert cfg.lam == 0.5
    assert cfg.W_variables() == [0, 1]
    assert cfg.rho_variables() == [0]
    np.testing.assert_array_equal(cfg.x0_list()[1], [9, 9, 9])
    g = cfg.grid()
    assert g.size == 15 ** 3
    assert cfg.grid(2.0).size == 30 ** 3


def test_roundtrip_and_digest():
    cfg = ProjectConfig.load(CONFIGS / "andrieu.ini")
    again = ProjectConfig.parse(cfg.to_text())
    assert again.to_text() == cfg.to_text()
    assert again.digest == cfg.digest
    assert len(cfg.digest) == 16


@pytest.mark.parametrize("text, match", [
    ("[synthesis]\nlambda = 1\n", "system"),
    ("[system]\nf = x1 ; x2\nB = 1\n", "rows"),
    ("[system]\nn = 3\nf = x1 ; x2\n", "n = 3"),
    ("[system]\nf = x1 +* ; x2\n", "bad system"),
    ("[system]\nf = -x1\nB = 1\n[simulation]\nx0 = 1, 2\n", "initial condition"),
    ("[system\nf = x1", "section header"),
])
def test_invalid_configs(text, match):
    with pytest.raises(ConfigError, match=match):
        ProjectConfig.parse(text)
