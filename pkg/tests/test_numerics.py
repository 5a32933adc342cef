"""Primitive ops: forward values, shapes, and gradients vs finite differences."""

import numpy as np
import pytest

from sitterid import numerics as nm
from conftest import finite_difference, rel_err


def test_matmul_identity():
    m = np.arange(12.0).reshape(3, 4)
    out = nm.matmul(np.eye(3), m)
    np.testing.assert_array_equal(out.value, m)


def test_matmul_hand_computed():
    out = nm.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0], [6.0]])
    np.testing.assert_array_equal(out.value, [[17.0], [39.0]])


def test_matmul_vs_triple_loop(rng):
    a = rng.standard_normal((7, 5))
    b = rng.standard_normal((5, 3))
    want = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            for k in range(5):
                want[i, j] += a[i, k] * b[k, j]
    assert np.abs(nm.matmul(a, b).value - want).max() < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(nm.ShapeError):
        nm.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associativity(rng):
    for _ in range(5):
        a = rng.standard_normal((4, 6))
        b = rng.standard_normal((6, 5))
        c = rng.standard_normal((5, 3))
        left = nm.matmul(nm.matmul(a, b), c).value
        right = nm.matmul(a, nm.matmul(b, c)).value
        assert rel_err(left, right) < 1e-10


def test_softmax_symmetry():
    out = nm.softmax_rows([[0.0, 0.0]])
    np.testing.assert_allclose(out.value, [[0.5, 0.5]], atol=1e-15)


def test_softmax_no_overflow():
    out = nm.softmax_rows([[1000.0, 0.0]])
    assert abs(out.value[0, 0] - 1.0) < 1e-12
    assert abs(out.value[0, 1]) < 1e-12


def test_softmax_rows_sum_to_one(rng):
    out = nm.softmax_rows(rng.standard_normal((4, 6)))
    np.testing.assert_allclose(out.value.sum(axis=1), np.ones(4), atol=1e-12)


def test_softmax_shift_invariance(rng):
    x = rng.standard_normal((3, 5))
    shifted = x + 7.25
    assert np.abs(nm.softmax_rows(x).value - nm.softmax_rows(shifted).value).max() < 1e-12


def test_layer_norm_constant_vector():
    out = nm.layer_norm([[3.0, 3.0, 3.0, 3.0]], np.ones((1, 4)), np.zeros((1, 4)))
    np.testing.assert_allclose(out.value, np.zeros((1, 4)), atol=1e-12)


def test_layer_norm_two_points():
    out = nm.layer_norm([[1.0, 3.0]], np.ones((1, 2)), np.zeros((1, 2)), eps=0.0)
    np.testing.assert_allclose(out.value, [[-1.0, 1.0]], atol=1e-12)


def test_layer_norm_statistics(rng):
    x = 5.0 * rng.standard_normal((6, 32)) + 2.0
    out = nm.layer_norm(x, np.ones((1, 32)), np.zeros((1, 32))).value
    np.testing.assert_allclose(out.mean(axis=1), np.zeros(6), atol=1e-9)
    np.testing.assert_allclose(out.var(axis=1), np.ones(6), rtol=1e-3)


def test_backward_square():
    tape = nm.Tape()
    x = nm.Tensor([[3.0]], requires_grad=True)
    loss = nm.sum_all(nm.mul(x, x, tape), tape)
    nm.backward(tape, loss)
    assert x.grad[0, 0] == pytest.approx(6.0, abs=1e-12)


def test_backward_requires_scalar():
    tape = nm.Tape()
    x = nm.Tensor(np.ones((2, 2)), requires_grad=True)
    y = nm.add(x, x, tape)
    with pytest.raises(nm.TapeError):
        nm.backward(tape, y)


def test_backward_unused_leaf_gets_zero(rng):
    tape = nm.Tape()
    used = nm.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    unused = nm.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    tape.watch(used, unused)
    loss = nm.sum_all(nm.mul(used, used, tape), tape)
    nm.backward(tape, loss)
    np.testing.assert_array_equal(unused.grad, np.zeros((4, 4)))
    assert np.any(used.grad != 0)


def test_tape_replay_reproduces_outputs(rng):
    tape = nm.Tape()
    x = nm.Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    g = nm.Tensor(np.ones((1, 6)), requires_grad=True)
    b = nm.Tensor(np.zeros((1, 6)), requires_grad=True)
    h = nm.layer_norm(x, g, b, tape=tape)
    h = nm.softmax_rows(nm.matmul_t(h, rng.standard_normal((6, 6)), tape), tape)
    loss = nm.sum_all(nm.gelu(h, tape), tape)
    nm.backward(tape, loss)
    assert tape.replay()


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        nm.Tensor([[np.nan, 1.0]])
    with pytest.raises(ValueError):
        nm.Tensor([[np.inf]])


def _gradcheck(build, shapes, rng, tol=1e-5, h=1e-6):
    """Reverse-mode vs central finite differences for one op composition."""
    params = {name: nm.Tensor(rng.standard_normal(shape), requires_grad=True, name=name)
              for name, shape in shapes.items()}

    def forward():
        tape = nm.Tape()
        tape.watch(*params.values())
        out = build(params, tape)
        # project to a scalar with fixed weights so every output entry matters
        w = nm.Tensor(np.linspace(0.5, 1.5, out.value.size).reshape(out.value.shape))
        return nm.sum_all(nm.mul(out, w, tape), tape), tape

    loss, tape = forward()
    nm.backward(tape, loss)
    got = {k: p.grad.copy() for k, p in params.items()}
    arrays = {k: p.value for k, p in params.items()}
    want = finite_difference(lambda: forward()[0].item(), arrays, h=h)
    for k in shapes:
        assert rel_err(got[k], want[k]) < tol, f"gradient mismatch for {k}"


@pytest.mark.parametrize("name,shapes,build", [
    ("matmul", {"a": (3, 4), "b": (4, 2)},
     lambda p, t: nm.matmul(p["a"], p["b"], t)),
    ("matmul_t", {"a": (3, 4), "b": (2, 4)},
     lambda p, t: nm.matmul_t(p["a"], p["b"], t)),
    ("transpose", {"a": (3, 4)},
     lambda p, t: nm.transpose(p["a"], t)),
    ("add", {"a": (3, 4), "b": (3, 4)},
     lambda p, t: nm.add(p["a"], p["b"], t)),
    ("sub", {"a": (3, 4), "b": (3, 4)},
     lambda p, t: nm.sub(p["a"], p["b"], t)),
    ("mul", {"a": (3, 4), "b": (3, 4)},
     lambda p, t: nm.mul(p["a"], p["b"], t)),
    ("scale", {"a": (3, 4)},
     lambda p, t: nm.scale(p["a"], -1.7, t)),
    ("add_const", {"a": (3, 4)},
     lambda p, t: nm.add_const(p["a"], 0.3, t)),
    ("gelu", {"a": (3, 4)},
     lambda p, t: nm.gelu(p["a"], t)),
    ("softmax_rows", {"a": (3, 5)},
     lambda p, t: nm.softmax_rows(p["a"], t)),
    ("layer_norm", {"x": (3, 6), "g": (1, 6), "b": (1, 6)},
     lambda p, t: nm.layer_norm(p["x"], p["g"], p["b"], tape=t)),
    ("l2_normalize_rows", {"a": (3, 5)},
     lambda p, t: nm.l2_normalize_rows(p["a"], t)),
    ("mean_rows", {"a": (4, 3)},
     lambda p, t: nm.mean_rows(p["a"], t)),
    ("sum_cols", {"a": (4, 3)},
     lambda p, t: nm.sum_cols(p["a"], t)),
    ("slice_cols", {"a": (3, 6)},
     lambda p, t: nm.slice_cols(p["a"], 1, 4, t)),
    ("concat_cols", {"a": (3, 2), "b": (3, 4)},
     lambda p, t: nm.concat_cols([p["a"], p["b"]], t)),
    ("concat_rows", {"a": (2, 3), "b": (4, 3)},
     lambda p, t: nm.concat_rows([p["a"], p["b"]], t)),
    ("gather_rows", {"a": (5, 3)},
     lambda p, t: nm.gather_rows(p["a"], [0, 2, 2, 4], t)),
    ("composition", {"x": (4, 6), "w": (6, 6)},
     lambda p, t: nm.softmax_rows(nm.matmul_t(
         nm.l2_normalize_rows(p["x"], t), p["w"], t), t)),
])
def test_gradient_matches_finite_differences(name, shapes, build, rng):
    _gradcheck(build, shapes, rng)


def test_relu_gradient_off_kink(rng):
    # keep entries away from 0 so central differences are valid
    vals = rng.standard_normal((3, 4))
    vals = np.where(np.abs(vals) < 0.1, 0.5, vals)
    p = nm.Tensor(vals, requires_grad=True)

    def forward():
        tape = nm.Tape()
        tape.watch(p)
        return nm.sum_all(nm.relu(p, tape), tape), tape

    loss, tape = forward()
    nm.backward(tape, loss)
    got = p.grad.copy()
    want = finite_difference(lambda: forward()[0].item(), {"p": p.value})["p"]
    assert rel_err(got, want) < 1e-5
