import numpy as np
import pytest

from cotolab.adapters import AdapterPair, build_model


def randomize_adapters(model, rng, scale=0.5):
    """Same model with non-zero random adapter factors."""
    return model.with_adapters(
        AdapterPair(rng.normal(0, scale, ad.a.shape), rng.normal(0, scale, ad.b.shape), ad.alpha)
        for ad in model.adapters
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model(rng):
    """Depth-4 tanh network with random adapters, 5 inputs, 3 outputs."""
    base = build_model(rng, 5, [6, 6, 6, 6], 3, rank=2)
    return randomize_adapters(base, rng)


_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and not report.failed:
        return
    number, name = mark.args
    ok = report.passed and _VERDICTS.get(number, True)
    _VERDICTS[number] = ok
    item.config._criteria = {**getattr(item.config, "_criteria", {}), number: (name, ok)}


def pytest_terminal_summary(terminalreporter, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        name, ok = criteria[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {name}")
