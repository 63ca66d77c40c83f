import hashlib
import json
import pickle
import time
from pathlib import Path

import numpy as np
import pytest

import markboard
from markboard.watermark import TrainConfig, clean_dataset, config_triggers, train_pair

TINY = dict(n_train=1500, n_test=500, hidden=[64, 32], n_bits=4, router_hidden=16,
            epochs_base=8, epochs_inactive=8, epochs_warmup=8, epochs_active=10,
            accuracy_floor=0.0, route_accuracy_floor=0.0, bit_success_floor=0.0,
            probe_size=32, wm_ratio=0.02)


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(markboard.__file__).parent.glob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def train_cached(request, cfg: TrainConfig):
    """Train (or reload) a pair. Cache entries are keyed by the config and
    the package source, so any code change retrains."""
    key = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    cache_dir = Path(request.config.cache.mkdir("markboard-pairs"))
    path = cache_dir / f"{key}-{_source_digest()}.pkl"
    if path.exists():
        with open(path, "rb") as fh:
            return pickle.load(fh)
    data = clean_dataset(cfg)
    metrics = []
    t0 = time.perf_counter()
    pair = train_pair(data, config_triggers(cfg), cfg, metrics)
    seconds = time.perf_counter() - t0
    entry = {"pair": pair, "data": data, "seconds": seconds}
    with open(path, "wb") as fh:
        pickle.dump(entry, fh)
    return entry


@pytest.fixture(scope="session")
def tiny_config():
    return TrainConfig.from_dict(TINY)


@pytest.fixture(scope="session")
def tiny(request, tiny_config):
    return train_cached(request, tiny_config)


@pytest.fixture(scope="session")
def tiny_pair(tiny):
    return tiny["pair"]


@pytest.fixture(scope="session")
def tiny_data(tiny):
    return tiny["data"]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance bookkeeping -----------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), title, detail)
    print(f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
