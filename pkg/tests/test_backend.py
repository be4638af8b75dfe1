"""Kernel backend selection and cross-backend agreement."""

import numpy as np
import pytest

from attnpop import backend


def _rng():
    return np.random.default_rng(101)


class TestSelection:
    def test_numpy_backend_always_available(self):
        assert "numpy" in backend.available()

    def test_use_switches_and_restores(self):
        original = backend.kernels.NAME
        try:
            backend.use("numpy")
            assert backend.kernels.NAME == "numpy"
        finally:
            backend.use(original)
        assert backend.kernels.NAME == original

    def test_unknown_backend_rejected(self):
        with pytest.raises(ValueError):
            backend.use("fortran")


@pytest.mark.skipif(len(backend.available()) < 2,
                    reason="compiled backend not built")
class TestAgreement:
    """Both backends must produce closely matching numbers.

    Matmul kernels may order the reduction differently, so those get a
    tight tolerance; elementwise kernels must agree exactly.
    """

    def setup_method(self):
        self.a = backend._BACKENDS["compiled"]
        self.b = backend._BACKENDS["numpy"]

    def test_matmul_family(self):
        rng = _rng()
        for _ in range(10):
            m, k, n = rng.integers(1, 12, size=3)
            x = rng.standard_normal((m, k))
            y = rng.standard_normal((k, n))
            g = rng.standard_normal((m, n))
            v = rng.standard_normal(k)
            u = rng.standard_normal(m)
            for name, args in [
                ("matmul", (x, y)),
                ("matmul_nt", (g, rng.standard_normal((k, n)))),
                ("matmul_tn", (x, g)),
                ("matvec", (x, v)),
                ("vecmat", (u, x)),
                ("outer", (u, v)),
            ]:
                got = getattr(self.a, name)(*args)
                want = getattr(self.b, name)(*args)
                assert np.allclose(got, want, rtol=1e-13, atol=1e-13), name

    def test_matmul_above_blas_cutoff(self):
        rng = _rng()
        x = rng.standard_normal((96, 512))
        y = rng.standard_normal((512, 96))
        got = self.a.matmul(x, y)
        want = self.b.matmul(x, y)
        assert np.allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_elementwise_backward_bitwise(self):
        # Backward kernels are plain products in the same association on
        # both backends, so IEEE determinism forces identical bits.
        rng = _rng()
        x = rng.standard_normal(64) * 5
        g = rng.standard_normal(64)
        for name, args in [
            ("relu_fwd", (x,)),
            ("tanh_bwd", (np.tanh(x), g)),
            ("sigmoid_bwd", (1 / (1 + np.exp(-x)), g)),
            ("relu_bwd", (np.maximum(x, 0), g)),
        ]:
            got = getattr(self.a, name)(*args)
            want = getattr(self.b, name)(*args)
            assert np.array_equal(np.asarray(got), np.asarray(want)), name

    def test_transcendental_forward_within_ulps(self):
        # libm and numpy's vectorized exp/tanh may differ in the last ulp.
        rng = _rng()
        x = rng.standard_normal(256) * 8
        for name in ("tanh_fwd", "sigmoid_fwd"):
            got = np.asarray(getattr(self.a, name)(x))
            want = np.asarray(getattr(self.b, name)(x))
            assert np.allclose(got, want, rtol=4e-16, atol=5e-324), name

    def test_softmax_agreement(self):
        rng = _rng()
        for _ in range(20):
            v = rng.standard_normal(int(rng.integers(1, 16))) * 20
            got = np.asarray(self.a.softmax_fwd(v))
            want = np.asarray(self.b.softmax_fwd(v))
            assert np.allclose(got, want, rtol=1e-15, atol=0), "softmax_fwd"
            g = rng.standard_normal(v.size)
            gb = np.asarray(self.a.softmax_bwd(got, g))
            wb = np.asarray(self.b.softmax_bwd(want, g))
            assert np.allclose(gb, wb, rtol=1e-13, atol=1e-15), "softmax_bwd"
