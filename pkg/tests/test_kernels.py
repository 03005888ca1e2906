"""Backend parity: the compiled extension and the pure-Python twins must
produce bit-identical bytes on the same inputs.
"""

import hashlib
import os
import subprocess
import sys

import numpy as np
import pytest

from edvtlab import _kernels
from edvtlab._kernels import _pyref

_core = pytest.importorskip("edvtlab._kernels._core")


def _mm_pair(seed, n, m, k):
    r = np.random.default_rng(seed)
    return r.standard_normal((n, m)), r.standard_normal((m, k))


class TestParity:
    @pytest.mark.parametrize("n,m,k", [(1, 1, 1), (3, 5, 2), (16, 16, 16),
                                       (33, 17, 9), (64, 128, 32)])
    def test_matmul_bitwise(self, n, m, k):
        a, b = _mm_pair(n * 1000 + m * 10 + k, n, m, k)
        out_py = np.empty((n, k))
        out_c = np.empty((n, k))
        _pyref.matmul(a, b, out_py)
        _core.matmul(a, b, out_c)
        assert out_py.tobytes() == out_c.tobytes()

    @pytest.mark.parametrize("n", [1, 4, 17, 64])
    def test_softmax_bitwise(self, n):
        r = np.random.default_rng(n)
        x = 4.0 * r.standard_normal((n, n))
        mask = np.tril(np.ones((n, n), dtype=np.uint8))
        out_py = np.empty((n, n))
        out_c = np.empty((n, n))
        _pyref.softmax_rows(x, mask, out_py)
        _core.softmax_rows(x, mask, out_c)
        assert out_py.tobytes() == out_c.tobytes()

    @pytest.mark.parametrize("n,d", [(1, 2), (5, 4), (16, 8), (40, 16)])
    def test_rotary_bitwise(self, n, d):
        r = np.random.default_rng(n * 100 + d)
        x = r.standard_normal((n, d))
        pos = r.integers(-1, 128, size=n).astype(np.int64)
        half = d // 2
        angles = np.outer(np.arange(128, dtype=np.float64),
                          10000.0 ** (-(np.arange(half) / half)))
        cos, sin = np.cos(angles), np.sin(angles)
        out_py = np.empty((n, d))
        out_c = np.empty((n, d))
        _pyref.rotary(x, cos, sin, pos, out_py)
        _core.rotary(x, cos, sin, pos, out_c)
        assert out_py.tobytes() == out_c.tobytes()

    def test_rotary_nonpositive_positions_copy_rows(self):
        r = np.random.default_rng(77)
        x = r.standard_normal((3, 6))
        pos = np.array([0, -1, 5], dtype=np.int64)
        angles = np.outer(np.arange(16, dtype=np.float64),
                          10000.0 ** (-(np.arange(3) / 3)))
        cos, sin = np.cos(angles), np.sin(angles)
        for impl in (_pyref, _core):
            out = np.empty((3, 6))
            impl.rotary(x, cos, sin, pos, out)
            assert out[0].tobytes() == x[0].tobytes()
            assert out[1].tobytes() == x[1].tobytes()
            assert out[2].tobytes() != x[2].tobytes()

    def test_fully_masked_row_raises_in_both(self):
        x = np.zeros((2, 2))
        mask = np.array([[1, 1], [0, 0]], dtype=np.uint8)
        for impl in (_pyref, _core):
            out = np.empty((2, 2))
            with pytest.raises(ValueError, match="fully masked"):
                impl.softmax_rows(x, mask, out)


class TestBackendSelection:
    def test_default_backend_is_compiled_when_available(self):
        assert _kernels.BACKEND == "compiled"

    def test_env_var_selects_python_and_results_match(self):
        digest_here = _digest_with_current_process()
        script = (
            "import sys; sys.path.insert(0, %r); "
            "from test_kernels import _digest_with_current_process; "
            "from edvtlab import _kernels; "
            "assert _kernels.BACKEND == 'python', _kernels.BACKEND; "
            "print(_digest_with_current_process())"
        ) % os.path.dirname(os.path.abspath(__file__))
        env = dict(os.environ, EDVTLAB_KERNELS="python")
        proc = subprocess.run([sys.executable, "-c", script], env=env,
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert proc.stdout.strip() == digest_here

    def test_env_var_rejects_unknown_backend(self):
        env = dict(os.environ, EDVTLAB_KERNELS="fortran")
        proc = subprocess.run([sys.executable, "-c", "import edvtlab"], env=env,
                              capture_output=True, text=True)
        assert proc.returncode != 0
        assert "fortran" in proc.stderr


def _digest_with_current_process():
    """Hash the wrapper-level outputs of all three kernels on fixed inputs."""
    r = np.random.default_rng(2024)
    a = r.standard_normal((19, 23))
    b = r.standard_normal((23, 11))
    x = r.standard_normal((12, 12))
    mask = np.tril(np.ones((12, 12), dtype=bool))
    y = r.standard_normal((9, 8))
    pos = np.array([-1, 0, 1, 2, 3, 5, 8, 13, 21], dtype=np.int64)
    angles = np.outer(np.arange(32, dtype=np.float64),
                      10000.0 ** (-(np.arange(4) / 4)))
    h = hashlib.sha256()
    h.update(_kernels.matmul(a, b).tobytes())
    h.update(_kernels.softmax_rows(x, mask.astype(np.uint8)).tobytes())
    h.update(_kernels.rotary(y, np.cos(angles), np.sin(angles), pos).tobytes())
    return h.hexdigest()
