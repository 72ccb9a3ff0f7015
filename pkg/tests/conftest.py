from pathlib import Path
import sys

import numpy as np
import pytest


ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from dataset_ingest import ArrayDatasetView, synth_glyphs  # noqa: E402
from tensor_core import Rng  # noqa: E402


@pytest.fixture(scope="session")
def synth_cache():
    return synth_glyphs(Rng(7), n_classes=12, n_examples=20)


@pytest.fixture
def synth_view(synth_cache):
    return synth_cache.view()


@pytest.fixture
def tiny_view():
    """Four classes of 2x2 images, ten examples each; image k of class c is filled with c/10 + k/100."""
    return ArrayDatasetView(
        {c: np.stack([np.full((2, 2), c / 10 + k / 100) for k in range(10)]) for c in range(4)}
    )
