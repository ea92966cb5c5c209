import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pansr.data import synthetic_image  # noqa: E402
from pansr.imaging import write_png  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def hr_dir(tmp_path):
    """Three small HR PNGs with sizes that are not all multiples of 2 or 3."""
    d = tmp_path / "hr"
    for i, (h, w) in enumerate([(48, 40), (50, 37), (45, 44)]):
        write_png(d / f"img{i}.png", synthetic_image(h, w, seed=i))
    return d


TINY_CONFIG = """\
# tiny model for fast CLI tests
scale = 2
nf = 8
unf = 6
num_blocks = 1
batch_size = 2
hr_patch = 16
total_iters = 6
checkpoint_every = 3
seed = 3
"""


@pytest.fixture
def tiny_config_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_CONFIG)
    return p
