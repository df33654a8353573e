import time

import numpy as np
import pytest

from natadiff_lab.config import DATA_DIR, load_config
from natadiff_lab.schedule import ScheduleTable
from natadiff_lab.world import Component, MixtureWorld


@pytest.fixture(scope="session")
def demo_cfg():
    return load_config(DATA_DIR / "demo.cfg")


@pytest.fixture(scope="session")
def demo_lab(demo_cfg):
    from natadiff_lab.cli import Lab

    return Lab(demo_cfg)


@pytest.fixture(scope="session")
def demo_world(demo_lab):
    return demo_lab.world


@pytest.fixture(scope="session")
def demo_table(demo_lab):
    return demo_lab.table


@pytest.fixture(scope="session")
def small_table():
    return ScheduleTable.linear(100, 1e-3, 21)


@pytest.fixture(scope="session")
def two_blob_world():
    """Two classes plus a dual-labelled bridge in 2-D."""
    comps = [
        Component([-2.0, 0.0], np.diag([0.3, 0.5]), 0.45, frozenset({0})),
        Component([2.0, 0.5], [[0.4, 0.1], [0.1, 0.3]], 0.45, frozenset({1})),
        Component([0.0, 0.2], 0.2 * np.eye(2), 0.10, frozenset({0, 1})),
    ]
    return MixtureWorld(comps, 2, name="two_blob")


@pytest.fixture(scope="session")
def trained_demo(demo_cfg, demo_lab):
    """Denoiser trained with the demo configuration (shared by several modules)."""
    from natadiff_lab.denoiser import DenoiserNet, TrainConfig, train
    from natadiff_lab.rng import make_rng

    d = demo_cfg.section("denoiser")
    net = DenoiserNet.for_world(demo_lab.world, demo_lab.table, rng=make_rng(d["seed"], 0xD0),
                                hidden=tuple(d["hidden"]), t_embed=d["t_embed"], c_embed=d["c_embed"],
                                activation=d["activation"])
    cfg = TrainConfig(steps=d["steps"], batch_size=d["batch_size"], learning_rate=d["learning_rate"],
                      drop_prob=d["drop_prob"], seed=d["seed"], loss_weighting=d["loss_weighting"])
    start = time.perf_counter()
    result = train(net, demo_lab.world, demo_lab.table, cfg)
    result.elapsed = time.perf_counter() - start
    return result


ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(ok, detail)``, then assert."""

    def record(ok, detail):
        num = request.node.get_closest_marker("criterion").args[0]
        line = f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE.append((num, line))
        print(line)
        assert ok, line

    return record


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
