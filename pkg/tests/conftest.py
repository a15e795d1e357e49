import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import numpy as np
import pytest

from pif.synthetic import flip_labels, keyword_sentences, to_corpus, to_tsv

# Small dimensions shared by the pipeline, CLI and acceptance tests.
SMALL_FLAGS = ["--d-e", "8", "--d-h", "6", "--hidden", "8", "--batch-size", "16", "--epochs", "2"]


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    """Keyword corpus on disk: 200 training sentences, a noisy test split and an unlabeled corpus."""
    d = tmp_path_factory.mktemp("synthetic")
    rng = np.random.default_rng(2024)
    (d / "train.tsv").write_text(to_tsv(keyword_sentences(200, rng)), encoding="utf-8")
    (d / "valid.tsv").write_text(to_tsv(keyword_sentences(20, rng)), encoding="utf-8")
    test = flip_labels(keyword_sentences(40, rng), 0.2, 2, rng)
    (d / "test.tsv").write_text(to_tsv(test), encoding="utf-8")
    (d / "corpus.txt").write_text(to_corpus(keyword_sentences(300, rng)), encoding="utf-8")
    return d


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
