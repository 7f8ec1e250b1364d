import json
from pathlib import Path

import pytest

from tapellm.machine.engine import init_configuration, run
from tapellm.machine.tape import RunOptions
from tapellm.model import generate_spec
from tapellm.tokeniser import regime_tokeniser, synthetic_vocab

GOLDEN = json.loads((Path(__file__).with_name("golden") / "derived.json").read_text())


def spec_of(case):
    seed, layers, heads, d_model, d_ff, l_max, vocab = case
    return generate_spec(seed, layers, heads, d_model, d_ff, l_max, vocab)


def run_ids(prompt, spec, max_tokens=6, rand=None, max_steps=10**6, **opts):
    cfg = init_configuration(list(prompt), synthetic_vocab(spec.vocab_size), spec, RunOptions(**opts), rand)
    return run(cfg, max_steps=max_steps, max_tokens=max_tokens)


@pytest.fixture(scope="session")
def golden():
    return GOLDEN


@pytest.fixture(scope="session")
def tok_a():
    return regime_tokeniser("A")


@pytest.fixture(scope="session")
def tok_b():
    return regime_tokeniser("B")


@pytest.fixture(scope="session")
def tok_byte():
    return regime_tokeniser("byte")


def dominant_key_alpha():
    """Alpha row where one cached key is aligned with the query and the rest are orthogonal."""
    from tapellm import numerics as nx
    from tapellm.forward import AttentionWorkspace, attention_head
    from tapellm.machine.tape import Tape
    from tapellm.model import zero_spec

    spec = zero_spec(d_model=4, l_max=8)
    ws = AttentionWorkspace(Tape(5), spec)
    lay = ws.lay
    big = 8 * nx.ONE
    keys = [[big, 0, 0, 0]] + [[0, big, 0, 0]] * 3
    for i, k in enumerate(keys):
        ws = ws.put(lay.k_base(0, 0) + 4 * i, k).put(lay.v_base(0, 0) + 4 * i, [i * nx.ONE, 0, 0, 0])
    _, ws = attention_head(3, 0, 0, ws, [big, 0, 0, 0])
    return ws.alpha(0, 0, 3)


# --- acceptance summary -----------------------------------------------------------

_ACCEPTANCE: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): one acceptance check, reported in the summary")


def pytest_runtest_logreport(report):
    label = getattr(report, "acceptance_label", None)
    if label is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[label] = "PASS" if report.outcome == "passed" else "FAIL"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        outcome.get_result().acceptance_label = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for label, verdict in _ACCEPTANCE.items():
        terminalreporter.write_line(f"{verdict}  {label}")
