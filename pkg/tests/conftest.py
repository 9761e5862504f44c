import numpy as np
import pytest

from racl.audio import AudioClip, Provenance
from racl.synthcorpus import CorpusSpec, generate


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Ten clips per class of the synthetic corpus, with augmentation pools."""
    root = tmp_path_factory.mktemp("corpus")
    rows = generate(CorpusSpec(n_per_class=10), root)
    return root, rows


@pytest.fixture
def harmonic_clip():
    """Half a second of a vibrato harmonic tone, the kind of signal the corpus is built from."""
    sr, n = 16000, 8000
    t = np.arange(n) / sr
    f0 = 150 * (1 + 0.02 * np.sin(2 * np.pi * 5 * t))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    x = sum(np.sin(k * phase) / k for k in range(1, 12))
    return AudioClip(0.2 * x / np.max(np.abs(x)), sr, Provenance.BONAFIDE, "harm")


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion and assert on it."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(label: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {label}  {detail}"
        _ACCEPTANCE.append(line)
        if reporter is not None:
            reporter.write_line(f"\n[acceptance] {line}")
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
