import math
import subprocess
import sys

import numpy as np
import pytest

from leafcount.tensor import NumericError, binary_op, check_finite, flat_index, rng_stream, xavier_init


def test_xavier_unit_fan_bound():
    w = xavier_init((1, 1, 1, 1), rng_stream(0))
    assert abs(w.item()) <= math.sqrt(3)


def test_xavier_conv_bound():
    bound = math.sqrt(6 / (27 + 576))
    assert bound == pytest.approx(0.0997, abs=1e-4)
    w = xavier_init((64, 3, 3, 3), rng_stream(1))
    assert np.abs(w).max() <= bound


def test_xavier_bound_never_exceeded_million_samples():
    w = xavier_init((1000, 1000), rng_stream(3))
    assert np.abs(w).max() <= math.sqrt(6 / 2000)


def test_xavier_deterministic():
    a = xavier_init((16, 8, 3, 3), rng_stream(7, 0))
    b = xavier_init((16, 8, 3, 3), rng_stream(7, 0))
    assert a.tobytes() == b.tobytes()
    c = xavier_init((16, 8, 3, 3), rng_stream(7, 1))
    assert a.tobytes() != c.tobytes()


@pytest.mark.parametrize("shape", [(0, 3), (3,), (4, 0, 3, 3)])
def test_xavier_rejects_bad_shape(shape):
    with pytest.raises(ValueError):
        xavier_init(shape, rng_stream(0))


def test_rng_reproducible_across_processes():
    code = ("from leafcount.tensor import rng_stream;"
            "import hashlib;print(hashlib.sha256(rng_stream(11, 5).random(100000).tobytes()).hexdigest())")
    outs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)}
    assert len(outs) == 1
    import hashlib
    assert outs.pop().strip() == hashlib.sha256(rng_stream(11, 5).random(100000).tobytes()).hexdigest()


def test_binary_ops():
    np.testing.assert_array_equal(binary_op(np.array([1, 2]), np.array([3, 4]), "add"), [4, 6])
    x = rng_stream(0).normal(size=(3, 4))
    assert np.all(binary_op(x, x, "sub") == 0)


def test_binary_ops_vs_loop():
    rng = rng_stream(2)
    for op, f in [("add", lambda a, b: a + b), ("sub", lambda a, b: a - b), ("mul", lambda a, b: a * b)]:
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
        got = binary_op(a, b, op)
        fa, fb = a.reshape(-1), b.reshape(-1)
        want = np.array([f(fa[i], fb[i]) for i in range(fa.size)]).reshape(a.shape)
        np.testing.assert_array_equal(got, want)


def test_binary_ops_no_broadcast():
    with pytest.raises(ValueError, match=r"\(2,\).*\(1,\)"):
        binary_op(np.zeros(2), np.zeros(1), "add")


def test_non_finite_is_an_error():
    with pytest.raises(NumericError):
        binary_op(np.array([np.inf]), np.array([np.inf]), "sub")
    with pytest.raises(NumericError):
        check_finite(np.array([1.0, np.nan]))


def test_row_major_roundtrip():
    C, H, W = 3, 4, 5
    t = np.zeros((C, H, W))
    for c in range(C):
        for h in range(H):
            for w in range(W):
                t.reshape(-1)[c * H * W + h * W + w] = 100 * c + 10 * h + w
                assert flat_index((C, H, W), (c, h, w)) == c * H * W + h * W + w
    assert t[2, 3, 4] == 234
    assert t[1, 0, 2] == 102
