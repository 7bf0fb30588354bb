import sys
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from cosal import cli  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_AC_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_AC_KEY] = {}


@pytest.fixture
def ac_report(request):
    """Record an acceptance line; the terminal summary prints them in order."""
    store = request.config.stash[_AC_KEY]

    def record(name, passed, detail):
        store[name] = (bool(passed), detail)
        print(f"{name} {'PASS' if passed else 'FAIL'}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_AC_KEY, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(store, key=lambda k: int(k.split("-")[1])):
        passed, detail = store[name]
        terminalreporter.write_line(f"{name} {'PASS' if passed else 'FAIL'}: {detail}")


# ---------------------------------------------------------------------------
# trained desk models, shared by the acceptance and cli tests


class DeskRun:
    def __init__(self, out, seconds, code):
        self.out = Path(out)
        self.seconds = seconds
        self.code = code

    @property
    def log(self):
        from cosal.training import read_log

        return read_log(self.out / cli.LOG_NAME)

    @property
    def checkpoint(self):
        return self.out / cli.FINAL_NAME

    def model(self):
        return cli.load_model(self.checkpoint)


def _train(tmp_path_factory, name, ini=None):
    out = tmp_path_factory.mktemp(name)
    argv = ["train", "--seed", "0", "--out", str(out)]
    if ini:
        cfg = out / "arm.ini"
        cfg.write_text(ini)
        argv += ["--config", str(cfg)]
    t = time.perf_counter()
    code = cli.main(argv)
    return DeskRun(out, time.perf_counter() - t, code)


@pytest.fixture(scope="session")
def online_run(tmp_path_factory):
    return _train(tmp_path_factory, "online")


@pytest.fixture(scope="session")
def online_run_repeat(tmp_path_factory):
    return _train(tmp_path_factory, "online_repeat")


@pytest.fixture(scope="session")
def offline_run(tmp_path_factory):
    return _train(tmp_path_factory, "offline", "[run]\nmode = offline\n")


@pytest.fixture(scope="session")
def backbone_run(tmp_path_factory):
    return _train(tmp_path_factory, "backbone", "[loss]\nbeta = 0\ngamma = 0\n")


@pytest.fixture(scope="session")
def heldout():
    from cosal.data import synth_generate

    return synth_generate(200, 64, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
