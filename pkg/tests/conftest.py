"""Shared fixtures."""
from __future__ import annotations

import pytest

from rulegraph.corpus import Corpus

from helpers import one_doc, sent  # noqa: F401  (re-exported for convenience)


@pytest.fixture
def tiny_corpus() -> Corpus:
    s1 = sent("the red cell grows quickly .", "DT JJ NN VB RB .",
              spans=[(1, 3, "Cell")])
    s2 = sent("a cell divides .", "DT NN VB .", spans=[(1, 2, "Cell")])
    s3 = sent("green cells and red cells .", "JJ NN CC JJ NN .",
              spans=[(0, 2, "Cell"), (3, 5, "Cell")])
    return Corpus(documents=(("d0", (s1, s2)), ("d1", (s3,))))
