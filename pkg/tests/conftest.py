import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from semimap import autodiff as ad
from semimap.config import RunConfig
from semimap.toyhand import generate_dataset

# tiny network and dataset used by the training and CLI tests
TINY = dict(
    gen_count=60,
    gen_resolution=16,
    gen_footprint_mm=48.0,
    arch_latent=16,
    arch_stem=8,
    arch_stages=(8, 8),
    arch_decoder=(8, 8, 4),
    batch=16,
    pretrain_iters=3,
    joint_iters=3,
    augment=True,
)


@pytest.fixture
def f64():
    prev = np.dtype(ad.get_dtype()).itemsize * 8
    ad.set_precision(64)
    yield
    ad.set_precision(prev)


@pytest.fixture(autouse=True)
def _restore_precision():
    prev = np.dtype(ad.get_dtype()).itemsize * 8
    yield
    ad.set_precision(prev)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.mrds"
    cfg = RunConfig(data=str(path), **TINY)
    generate_dataset(path, cfg.gen())
    return str(path)


@pytest.fixture
def tiny_cfg(tiny_data):
    return RunConfig(data=tiny_data, **TINY)


_ACCEPTANCE = []


@pytest.fixture
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k, ok, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"CRITERION {k}: {'PASS' if ok else 'FAIL'} - {detail}")
