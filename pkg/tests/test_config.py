import numpy as np
import pytest

from natadiff_lab.config import DATA_DIR, load_config, parse_config_text, parse_cov, parse_world_text
from natadiff_lab.errors import ConfigError

INLINE = """\
[schedule]
num_timesteps = 100
alpha_bar = linear(1, 1e-3)
sampling_times = uniform(11)

[world]
num_classes = 2

[component a]
mean = -1, 0
cov = iso(0.7071067811865476)
weight = 0.5
labels = 0

[component b]
mean = 1, 0
cov = 0.5 0; 0 0.5
weight = 0.5
labels = 1
"""


def test_demo_config_loads(demo_cfg):
    table = demo_cfg.build_schedule()
    world = demo_cfg.build_world()
    assert table.T == 1000 and table.sampling_times.size == 100
    assert world.dim == 3 and world.num_classes == 3
    g = demo_cfg.build_guidance()
    assert (g.omega, g.rho, g.mu, g.s, g.c_l, g.c_u) == (7.5, 7.5, 0.2, 50.0, 0, 700)
    a = demo_cfg.build_attack()
    assert (a.R, a.k, a.r_l, a.r_u, a.S, a.delta_mu, a.delta_s) == (5, 1, 500, 800, 5, 0.0, 15.0)


def test_inline_components():
    cfg = parse_config_text(INLINE)
    world = cfg.build_world()
    assert world.num_classes == 2
    assert np.allclose(world.components[0].cov, 0.5 * np.eye(2), atol=1e-15)
    assert np.array_equal(world.components[1].cov, 0.5 * np.eye(2))
    assert cfg.build_schedule().T == 100


def test_digest_tracks_text():
    a = parse_config_text(INLINE)
    b = parse_config_text(INLINE.replace("1e-3", "2e-3"))
    assert a.digest != b.digest
    assert a.digest == parse_config_text(INLINE).digest


@pytest.mark.parametrize("text,line,column", [
    ("[guidance]\nomeg = 3\n", 2, 1),
    ("[guidance]\n  omeg = 3\n", 2, 3),
    ("[guidance]\nomega = abc\n", 2, 9),
    ("omega = 1\n", 1, 1),
    ("[bogus]\nx = 1\n", 1, 1),
    ("[attack]\nR = 1\nR = 2\n", 3, 1),
])
def test_errors_carry_position(text, line, column):
    with pytest.raises(ConfigError) as info:
        parse_config_text(text)
    assert (info.value.line, info.value.column) == (line, column)
    assert f"line {line}, column {column}" in str(info.value)


def test_component_error_lines():
    bad = INLINE.replace("weight = 0.5\nlabels = 1", "weight = x\nlabels = 1")
    cfg = parse_config_text(bad)
    with pytest.raises(ConfigError) as info:
        cfg.build_world()
    assert info.value.line == bad.splitlines().index("weight = x") + 1


def test_missing_world_and_include(tmp_path):
    with pytest.raises(ConfigError, match="no world"):
        parse_config_text("[schedule]\nnum_timesteps = 100\n")
    with pytest.raises(ConfigError, match="not found"):
        parse_config_text("[world]\ninclude = nowhere.world\n", base_dir=tmp_path)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.cfg")


def test_include_relative_to_config(tmp_path):
    (tmp_path / "w.world").write_text((DATA_DIR / "demo_shortcut.world").read_text())
    (tmp_path / "c.cfg").write_text("[world]\ninclude = w.world\n")
    cfg = load_config(tmp_path / "c.cfg")
    assert cfg.build_world().dim == 3
    assert cfg.includes == [str(tmp_path / "w.world")]


def test_world_weights_named():
    text = (DATA_DIR / "demo_shortcut.world").read_text().replace("weight = 0.05", "weight = 0.04")
    with pytest.raises(ValueError, match="world.weights"):
        parse_world_text(text)


def test_parse_cov_forms():
    assert np.array_equal(parse_cov("iso(2)", 3), 4 * np.eye(3))
    assert np.array_equal(parse_cov("diag(1, 2)", 2), np.diag([1.0, 2.0]))
    assert np.array_equal(parse_cov("1 0.5; 0.5 2", 2), [[1.0, 0.5], [0.5, 2.0]])
    with pytest.raises(ValueError):
        parse_cov("1 2 3", 2)
    with pytest.raises(ValueError):
        parse_cov("diag(1)", 2)
