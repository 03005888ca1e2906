import numpy as np
import pytest

from edvtlab.attention import AttentionParams, ModalityMask, PositionalStrategy
from edvtlab.numerics import SeededRng, Tensor, gaussian_init
from edvtlab.rope import RotaryTable


@pytest.fixture
def rng():
    return SeededRng(1234)


def make_attention_case(seed, n, heads, head_dim, n_visual, scale=0.5, max_positions=256):
    """Seeded (params, x, mask, positions, table) tuple for attention tests."""
    r = SeededRng(seed)
    d = heads * head_dim
    params = AttentionParams.init(r, heads, head_dim, scale)
    x = gaussian_init(r, (n, d), 1.0)
    flags = [i < n_visual for i in range(n)]
    mask = ModalityMask(flags)
    positions = list(range(n))
    table = RotaryTable(head_dim, max_positions)
    return params, x, mask, positions, table


def read_nonhash_lines(path):
    with open(path) as fh:
        return [line for line in fh.read().splitlines() if not line.startswith("#")]
