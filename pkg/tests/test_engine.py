import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtrans import engine as E
from mtrans.engine import Tape, TapeError, Tensor, backward, grad_check

from conftest import numeric_grad, tape_grads


# -- independent forward oracles ---------------------------------------------------

def matmul_loops(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv_loops(x, w, b):
    c_out, c_in, k, _ = w.shape
    _, H, W = x.shape
    pad = k // 2
    out = np.zeros((c_out, H, W))
    for o in range(c_out):
        for i in range(H):
            for j in range(W):
                s = b[o]
                for c in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            yi, xj = i + u - pad, j + v - pad
                            if 0 <= yi < H and 0 <= xj < W:
                                s += w[o, c, u, v] * x[c, yi, xj]
                out[o, i, j] = s
    return out


def softmax_fsum(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = math.fsum(e)
    return [v / s for v in e]


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31))
def test_matmul_matches_triple_loop(n, k, m, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(n, k)), r.normal(size=(k, m))
    np.testing.assert_allclose(E.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), atol=1e-12)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_matches_loops(rng, k):
    x = rng.normal(size=(2, 6, 5))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    got = E.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, conv_loops(x, w, b), atol=1e-12)


def test_conv2d_rejects_even_kernel(rng):
    with pytest.raises(E.ShapeError):
        E.conv2d(Tensor(rng.normal(size=(1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_matches_fsum(row):
    got = E.softmax_rows(Tensor(np.array([row]))).data[0]
    np.testing.assert_allclose(got, softmax_fsum(row), rtol=1e-12, atol=1e-300)
    assert abs(got.sum() - 1.0) < 1e-12


def test_softmax_large_logits_stable():
    y = E.softmax_rows(Tensor(np.array([[1000.0, 1000.0, -1000.0]]))).data
    np.testing.assert_allclose(y, [[0.5, 0.5, 0.0]])


def test_layer_norm_formula(rng):
    x = rng.normal(size=(4, 7)) * 3 + 1
    g, b = rng.normal(size=7), rng.normal(size=7)
    got = E.layer_norm(Tensor(x), Tensor(g), Tensor(b), 1e-5).data
    for i in range(4):
        row = x[i]
        mu = math.fsum(row) / 7
        var = math.fsum((v - mu) ** 2 for v in row) / 7
        want = (row - mu) / math.sqrt(var + 1e-5) * g + b
        np.testing.assert_allclose(got[i], want, atol=1e-12)


def test_pixel_shuffle_index_rule(rng):
    r, c, H, W = 2, 3, 4, 5
    x = rng.normal(size=(c * r * r, H, W))
    y = E.pixel_shuffle(Tensor(x), r).data
    for ch in range(c):
        for h in range(H):
            for w in range(W):
                for i in range(r):
                    for j in range(r):
                        assert y[ch, h * r + i, w * r + j] == x[ch * r * r + i * r + j, h, w]
    np.testing.assert_array_equal(E.pixel_unshuffle(Tensor(y), r).data, x)


@given(st.integers(1, 3), st.sampled_from([2, 4]), st.integers(1, 3), st.integers(1, 3))
def test_patchify_tiles_and_round_trip(C, p, th, tw):
    H, W = th * p, tw * p
    f = np.arange(C * H * W, dtype=np.float64).reshape(C, H, W)
    seq = E.patchify(Tensor(f), p).data
    assert seq.shape == (th * tw, C * p * p)
    for t in range(th * tw):
        i, j = divmod(t, tw)
        np.testing.assert_array_equal(seq[t], f[:, i * p:(i + 1) * p, j * p:(j + 1) * p].ravel())
    np.testing.assert_array_equal(E.unpatchify(Tensor(seq), p, C, H, W).data, f)


# -- gradients ---------------------------------------------------------------------

def _check_op(build, arrays, rng, tol=1e-7):
    """Tape gradient of sum(build(...) * R) against central differences."""
    probe = build({k: Tensor(v) for k, v in arrays.items()})
    R = rng.normal(size=probe.shape)

    def scalar(ts):
        return E.total(E.mul(build(ts), Tensor(R)))

    got = tape_grads(scalar, arrays)
    for name, x in arrays.items():
        def f():
            return float(scalar({k: Tensor(v) for k, v in arrays.items()}).item())
        num = numeric_grad(f, x)
        np.testing.assert_allclose(got[name], num, rtol=tol, atol=tol, err_msg=name)


OPS = {
    "matmul": (lambda t: E.matmul(t["a"], t["b"]), {"a": (3, 4), "b": (4, 2)}),
    "linear": (lambda t: E.linear(t["x"], t["w"], t["b"]), {"x": (3, 4), "w": (4, 5), "b": (5,)}),
    "softmax": (lambda t: E.softmax_rows(t["x"]), {"x": (3, 5)}),
    "layer_norm": (lambda t: E.layer_norm(t["x"], t["g"], t["b"]), {"x": (3, 6), "g": (6,), "b": (6,)}),
    "conv2d": (lambda t: E.conv2d(t["x"], t["w"], t["b"]), {"x": (2, 5, 4), "w": (3, 2, 3, 3), "b": (3,)}),
    "pixel_shuffle": (lambda t: E.pixel_shuffle(t["x"], 2), {"x": (8, 2, 3)}),
    "patchify": (lambda t: E.patchify(t["x"], 2), {"x": (2, 4, 6)}),
    "concat_rows": (lambda t: E.concat_rows(t["a"], t["b"]), {"a": (2, 3), "b": (4, 3)}),
    "concat_cols": (lambda t: E.concat_cols([t["a"], t["b"]]), {"a": (2, 3), "b": (2, 1)}),
    "slice_cols": (lambda t: E.slice_cols(t["x"], 1, 3), {"x": (2, 5)}),
    "transpose": (lambda t: E.transpose(t["x"], (2, 0, 1)), {"x": (2, 3, 4)}),
    "mul_sub": (lambda t: E.mul(E.sub(t["a"], t["b"]), t["a"]), {"a": (3, 3), "b": (3, 3)}),
    "mean": (lambda t: E.mean(E.scale(t["x"], 3.0)), {"x": (4, 5)}),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name, rng):
    build, shapes = OPS[name]
    arrays = {k: rng.normal(size=s) for k, s in shapes.items()}
    _check_op(build, arrays, rng)


def test_relu_and_abs_gradients_away_from_kinks(rng):
    x = rng.normal(size=(4, 4))
    x[np.abs(x) < 0.1] = 0.5
    _check_op(lambda t: E.relu(t["x"]), {"x": x}, rng)
    _check_op(lambda t: E.absolute(t["x"]), {"x": x.copy()}, rng)


def test_abs_subgradient_zero_at_zero():
    g = tape_grads(lambda t: E.total(E.absolute(t["x"])), {"x": np.array([-1.0, 0.0, 2.0])})
    np.testing.assert_array_equal(g["x"], [-1.0, 0.0, 1.0])


def test_backward_sum_gives_ones(rng):
    g = tape_grads(lambda t: E.total(t["p"]), {"p": rng.normal(size=(3, 4))})
    np.testing.assert_array_equal(g["p"], np.ones((3, 4)))


def test_backward_half_square_norm(rng):
    p = rng.normal(size=6)
    g = tape_grads(lambda t: E.scale(E.total(E.mul(t["p"], t["p"])), 0.5), {"p": p})
    np.testing.assert_allclose(g["p"], p, rtol=1e-15)


def test_unreachable_parameter_gets_zero(rng):
    g = tape_grads(lambda t: E.total(t["a"]), {"a": rng.normal(size=2), "b": rng.normal(size=(2, 2))})
    np.testing.assert_array_equal(g["b"], np.zeros((2, 2)))


def test_fan_out_accumulates():
    g = tape_grads(lambda t: E.total(E.add(t["x"], E.scale(t["x"], 2.0))), {"x": np.ones(3)})
    np.testing.assert_array_equal(g["x"], [3.0, 3.0, 3.0])


def test_non_scalar_loss_rejected(rng):
    tape = Tape()
    p = tape.param("p", rng.normal(size=3))
    with pytest.raises(TapeError):
        backward(tape, E.scale(p, 2.0))


def test_mixed_tapes_rejected():
    a = Tape().param("a", np.ones(2))
    b = Tape().param("b", np.ones(2))
    with pytest.raises(TapeError):
        E.add(a, b)


def test_duplicate_registration_rejected():
    tape = Tape()
    tape.param("p", np.ones(2))
    with pytest.raises(TapeError):
        tape.param("p", np.ones(2))


def test_shape_errors():
    with pytest.raises(E.ShapeError):
        E.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(E.ShapeError):
        E.add_bias(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))
    with pytest.raises(E.ShapeError):
        E.pixel_shuffle(Tensor(np.ones((3, 2, 2))), 2)


def test_float32_tape_keeps_dtype(rng):
    tape = Tape(dtype=np.float32)
    p = tape.param("p", rng.normal(size=(2, 2)))
    g = backward(tape, E.total(E.matmul(p, p)))
    assert g["p"].dtype == np.float32


# -- grad_check ----------------------------------------------------------------------

def test_grad_check_accepts_exact_gradient(rng):
    params = {"w": rng.normal(size=(3, 3))}

    def f(q):
        return float(np.sum(np.tanh(q["w"])))

    rep = grad_check(f, params, {"w": 1 - np.tanh(params["w"]) ** 2})
    assert rep.passed(1e-6)
    assert rep.checked["w"] == 9


def test_grad_check_flags_wrong_gradient(rng):
    params = {"w": rng.normal(size=(3, 3))}
    rep = grad_check(lambda q: float(np.sum(q["w"] ** 2)), params, {"w": params["w"]})
    assert not rep.passed(1e-4)
    assert rep.worst == pytest.approx(0.5, rel=1e-6)


def test_grad_check_samples_coordinates(rng):
    params = {"w": rng.normal(size=200)}
    rep = grad_check(lambda q: float(np.sum(q["w"])), params, {"w": np.ones(200)}, n_coords=64)
    assert rep.checked["w"] == 64


def test_grad_check_skips_kinks():
    params = {"x": np.array([1e-7, 0.5])}

    def f(q):
        return E.total(E.absolute(Tensor(q["x"]))).item()

    rep = grad_check(f, params, {"x": np.array([1.0, 1.0])}, eps=1e-5)
    assert rep.skipped_kinks["x"] == 1
    assert rep.passed(1e-8)


def test_grad_check_requires_float64():
    with pytest.raises(ValueError):
        grad_check(lambda q: 0.0, {"w": np.ones(2, dtype=np.float32)}, {"w": np.ones(2)})


def test_grad_check_unresolved_floor_only_hides_tiny_gradients(rng):
    params = {"w": np.array([1e-9, 2.0])}
    # tiny slopes sit below roundoff resolution; a wrong O(1) gradient must still be caught
    rep = grad_check(lambda q: float(1.0 + q["w"][0] * 1e-9 + q["w"][1] ** 2), params,
                     {"w": np.array([0.0, 0.0])})
    assert rep.skipped_unresolved["w"] == 1
    assert not rep.passed(1e-4)
