import socket
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"

_acceptance: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    number, description = marker
    entry = _acceptance.setdefault(number, {"description": description, "outcomes": []})
    if report.when == "call" or report.outcome != "passed":
        entry["outcomes"].append("xfailed" if hasattr(report, "wasxfail") else report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        rep.acceptance = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        entry = _acceptance[number]
        outs = entry["outcomes"]
        if any(o == "failed" for o in outs):
            status = "FAIL"
        elif outs and all(o == "skipped" for o in outs):
            status = "SKIP"
        else:
            status = "PASS"
        notes = []
        if outs.count("skipped") and status != "SKIP":
            notes.append(f"{outs.count('skipped')} of {len(outs)} checks skipped")
        if outs.count("xfailed"):
            notes.append(f"{outs.count('xfailed')} known discrepancy recorded as xfail")
        note = f" ({'; '.join(notes)})" if notes else ""
        terminalreporter.write_line(f"[{status}] criterion {number}: {entry['description']}{note}")


class NetworkBlocked(RuntimeError):
    pass


@pytest.fixture
def no_network(monkeypatch):
    """Fail loudly on any outbound connection attempt."""

    def guard(*args, **kwargs):
        raise NetworkBlocked(f"network access attempted: {args!r}")

    monkeypatch.setattr(socket.socket, "connect", guard)
    monkeypatch.setattr(socket.socket, "connect_ex", guard)
    monkeypatch.setattr(socket, "create_connection", guard)
    monkeypatch.setattr(socket, "getaddrinfo", guard)
    yield


@pytest.fixture
def fixtures_dir():
    return FIXTURES


def synthetic_train_config(**overrides):
    """Stub-encoder training settings for the constructed separable corpus.

    Randomly initialised stubs need a far larger step size than pretrained
    encoders do; see the README section on the synthetic corpus.
    """
    from shield.fusion import TrainConfig

    values = dict(learning_rate=3e-3, batch_size=8, hidden_dim=64, epochs=3, seed=13,
                  hsd_encoder="stub-16", fe_encoder="stub-16", max_tokens=64)
    values.update(overrides)
    return TrainConfig(**values)
