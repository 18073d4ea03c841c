import os
import time
from pathlib import Path

import numpy as np
import pytest

from protokws import cli
from protokws.audio_io import SAMPLE_RATE
from protokws.datasets import SynthSpec, synth_dataset
from protokws.manifest import load_manifest
from protokws.trainer import load_checkpoint

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def pytest_collection_modifyitems(items):
    # anything touching the 50-class corpus or its training run takes minutes
    for item in items:
        if {"trained", "corpus_dir"} & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)


def sine(freq, seconds=1.0, rate=SAMPLE_RATE, amp=1.0, phase=0.0):
    t = np.arange(int(round(seconds * rate))) / rate
    return amp * np.sin(2 * np.pi * freq * t + phase)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """12 classes x 20 clips on disk, for fast pipeline tests."""
    root = tmp_path_factory.mktemp("small_corpus")
    synth_dataset(SynthSpec(n_classes=12, clips_per_class=20, seed=3), str(root))
    return load_manifest(str(root / "manifest.csv"))


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """The 50-class x 30-clip synthetic corpus, written through the CLI.

    Setting PROTOKWS_TEST_CACHE to a directory keeps the corpus and the
    trained run between sessions (development only).
    """
    cached = os.environ.get("PROTOKWS_TEST_CACHE")
    if cached and os.path.exists(os.path.join(cached, "split", "test.csv")):
        return Path(cached)
    root = Path(cached) if cached else tmp_path_factory.mktemp("corpus")
    assert cli.run(["synth", "--out", str(root / "syn"), "--classes", "50",
                    "--clips", "30", "--seed", "0"]) == 0
    assert cli.run(["prepare", "--manifest", str(root / "syn" / "manifest.csv"),
                    "--out", str(root / "split"), "--ratio", "0.8", "--seed", "0"]) == 0
    return root


@pytest.fixture(scope="session")
def trained(corpus_dir):
    """Default encoder trained 10-way x 5-shot for 2000 episodes via the CLI."""
    out = corpus_dir / "run"
    t0 = time.perf_counter()
    reused = (out / "final.pkws").exists() and bool(os.environ.get("PROTOKWS_TEST_CACHE"))
    code = 0
    if not reused:
        code = cli.run(["train", "--manifest", str(corpus_dir / "split" / "train.csv"),
                        "--out", str(out), "--episodes", "2000", "--n-way", "10",
                        "--k-shot", "5", "--queries", "10", "--seed", "0"])
    elapsed = time.perf_counter() - t0
    assert code == 0
    return {
        "dir": out,
        "checkpoint": load_checkpoint(str(out / "final.pkws")),
        "checkpoint_path": str(out / "final.pkws"),
        "metrics_path": str(out / "metrics.csv"),
        "train": load_manifest(str(corpus_dir / "split" / "train.csv")),
        "test": load_manifest(str(corpus_dir / "split" / "test.csv")),
        "seconds": elapsed,
        "reused": reused,
    }


def read_metrics(path):
    """(episode, loss, acc) rows of a metrics.csv, wall-clock column dropped."""
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("episode,"):
                continue
            ep, loss, acc, _ = line.strip().split(",")
            rows.append((int(ep), float(loss), float(acc)))
    return rows


@pytest.fixture
def run_in(tmp_path):
    """Run the CLI with cwd set to a directory (relative paths stay identical)."""
    def _run(cwd, argv):
        old = os.getcwd()
        os.makedirs(cwd, exist_ok=True)
        os.chdir(cwd)
        try:
            return cli.run(argv)
        finally:
            os.chdir(old)
    return _run
