"""Autodiff core: gradient correctness, optimizer behavior, checkpoints."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnisynth import diffcore as dc
from omnisynth.diffcore import (
    AdamState,
    CheckpointError,
    Linear,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    conv2d_circular,
    load_params,
    lr_schedule,
    save_params,
)

RNG = np.random.default_rng


def numeric_grad(fn, param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued fn w.r.t. one tensor."""
    out = np.zeros_like(param.data)
    it = np.nditer(param.data, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = param.data[i]
        param.data[i] = orig + h
        fp = fn().item()
        param.data[i] = orig - h
        fm = fn().item()
        param.data[i] = orig
        out[i] = (fp - fm) / (2 * h)
        it.iternext()
    return out


def check_grads(fn, params, rel_tol: float = 1e-4, abs_floor: float = 1e-6):
    with Tape() as tape:
        loss = fn()
        grads = tape.backward(loss)
    for p in params:
        num = numeric_grad(fn, p)
        ana = grads.get(p, np.zeros_like(p.data))
        err = np.abs(ana - num)
        rel = err / np.maximum(np.abs(num), abs_floor)
        assert rel.max() <= rel_tol, f"gradient mismatch: rel={rel.max():.2e}"


def scalarize(t: Tensor) -> Tensor:
    return dc.mean(dc.mul(t, RNG(7).normal(size=t.shape)))


class TestPrimitiveGradients:
    """Every primitive against central finite differences."""

    @pytest.mark.parametrize("op,shapes", [
        (dc.add, [(3, 4), (3, 4)]),
        (dc.add, [(3, 4), (4,)]),
        (dc.sub, [(3, 4), (3, 4)]),
        (dc.mul, [(3, 4), (3, 4)]),
        (dc.mul, [(3, 4), (4,)]),
        (dc.div, [(3, 4), (3, 4)]),
        (dc.matmul, [(3, 4), (4, 5)]),
        (dc.matmul, [(2, 3, 4), (2, 4, 5)]),
    ])
    def test_binary(self, op, shapes):
        rng = RNG(0)
        xs = [Tensor(rng.normal(size=s) + (2.5 if op is dc.div else 0.0), requires_grad=True) for s in shapes]
        check_grads(lambda: scalarize(op(*xs)), xs)

    @pytest.mark.parametrize("op", [dc.relu, dc.sigmoid, dc.exp, dc.sin, dc.cos,
                                    dc.absolute, dc.square, dc.neg,
                                    lambda x: dc.leaky_relu(x, 0.2)])
    def test_unary(self, op):
        rng = RNG(1)
        x = Tensor(rng.normal(size=(4, 5)) + 0.05, requires_grad=True)
        check_grads(lambda: scalarize(op(x)), [x])

    def test_log(self):
        x = Tensor(RNG(2).uniform(0.5, 3.0, size=(4, 5)), requires_grad=True)
        check_grads(lambda: scalarize(dc.log(x)), [x])

    @pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True), ((0, 1), False)])
    def test_reductions(self, axis, keepdims):
        rng = RNG(3)
        x = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
        check_grads(lambda: scalarize(dc.tensor_sum(x, axis=axis, keepdims=keepdims)), [x])
        check_grads(lambda: scalarize(dc.mean(x, axis=axis, keepdims=keepdims)), [x])

    def test_cumsum(self):
        x = Tensor(RNG(4).normal(size=(3, 6)), requires_grad=True)
        check_grads(lambda: scalarize(dc.cumsum(x, axis=1)), [x])

    def test_concat_slice_reshape_transpose_roll(self):
        rng = RNG(5)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 4)), requires_grad=True)

        def fn():
            c = dc.concat([a, b], axis=0)
            c = dc.roll(c, 2, axis=0)
            c = dc.transpose(c, (1, 0))
            c = dc.reshape(c, (2, 10))
            return scalarize(c[:, 1:7])

        check_grads(fn, [a, b])

    def test_softmax(self):
        x = Tensor(RNG(6).normal(size=(4, 7)), requires_grad=True)
        check_grads(lambda: scalarize(dc.softmax(x, axis=1)), [x])

    def test_affine(self):
        rng = RNG(8)
        x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        check_grads(lambda: scalarize(dc.affine(x, w, b)), [x, w, b])

    def test_upsample(self):
        x = Tensor(RNG(9).normal(size=(2, 3, 4, 6)), requires_grad=True)
        check_grads(lambda: scalarize(dc.upsample2x(x)), [x])

    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv2d_circular(self, stride):
        rng = RNG(10)
        x = Tensor(rng.normal(size=(2, 3, 6, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(4,)), requires_grad=True)
        check_grads(lambda: scalarize(conv2d_circular(x, w, b, stride=stride)), [x, w, b])

    def test_two_layer_mlp(self):
        """A random 2-layer MLP, all parameters at once, h = 1e-4."""
        rng = RNG(11)
        w1 = Tensor(rng.normal(size=(6, 16)), requires_grad=True)
        b1 = Tensor(rng.normal(size=(16,)), requires_grad=True)
        w2 = Tensor(rng.normal(size=(16, 3)), requires_grad=True)
        b2 = Tensor(rng.normal(size=(3,)), requires_grad=True)
        x = Tensor(rng.normal(size=(10, 6)))
        target = rng.normal(size=(10, 3))

        def fn():
            h = dc.relu(dc.affine(x, w1, b1))
            y = dc.sigmoid(dc.affine(h, w2, b2))
            return dc.mean(dc.square(dc.sub(y, target)))

        params = [w1, b1, w2, b2]
        with Tape() as tape:
            grads = tape.backward(fn())
        for p in params:
            num = numeric_grad(fn, p, h=1e-4)
            rel = np.abs(grads[p] - num) / np.maximum(np.abs(num), 1e-6)
            assert rel.max() <= 1e-4


class TestTapeSemantics:
    def test_forward_values(self):
        assert dc.relu(Tensor(np.array(-1.0))).item() == 0.0
        assert dc.sigmoid(Tensor(np.array(0.0))).item() == 0.5
        a = RNG(0).normal(size=(4, 4))
        assert np.allclose(dc.matmul(Tensor(np.eye(4)), Tensor(a)).data, a)

    def test_forward_deterministic(self):
        x = Tensor(RNG(1).normal(size=(8, 8)))
        w = Tensor(RNG(2).normal(size=(8, 8)))
        y1 = dc.matmul(dc.sigmoid(x), w).data
        y2 = dc.matmul(dc.sigmoid(x), w).data
        assert np.array_equal(y1, y2)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            conv2d_circular(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 5, 3, 3))))

    def test_non_scalar_backward_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = dc.mul(x, 2.0)
            with pytest.raises(ShapeError):
                tape.backward(y)

    def test_non_finite_detection(self):
        with pytest.raises(NonFiniteError):
            dc.tensor_sum(Tensor(np.array([1.0, np.inf])))
        with dc.strict_finite_checks():
            with pytest.raises(NonFiniteError):
                dc.log(Tensor(np.array([-1.0])))

    def test_backward_linearity(self):
        """Gradient of a*f + b*g equals a*grad(f) + b*grad(g) exactly."""
        rng = RNG(3)
        x = Tensor(rng.normal(size=(5,)), requires_grad=True)

        def f():
            return dc.tensor_sum(dc.square(x))

        def g():
            return dc.tensor_sum(dc.sin(x))

        with Tape() as t:
            gf = t.backward(f())[x]
        with Tape() as t:
            gg = t.backward(g())[x]
        a, b = 2.5, -1.25
        with Tape() as t:
            combo = dc.add(dc.mul(f(), a), dc.mul(g(), b))
            gc = t.backward(combo)[x]
        assert np.array_equal(gc, a * gf + b * gg)

    def test_grad_accumulates_on_reuse(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as t:
            y = dc.mul(x, x)  # x^2, d/dx = 6
            g = t.backward(dc.tensor_sum(y))[x]
        assert np.allclose(g, 6.0)

    def test_exp_chain(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        with Tape() as t:
            y = dc.exp(dc.mul(x, 2.0))  # d/dx exp(2x) at 0 = 2
            g = t.backward(dc.tensor_sum(y))[x]
        assert np.allclose(g, 2.0)

    def test_no_recording_outside_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = dc.mul(x, 2.0)
        assert not y.requires_grad


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
        state = AdamState()
        adam_step({"p": p}, {"p": np.zeros(2, dtype=np.float32)}, state, lr=1e-2)
        assert np.array_equal(p.data, np.array([1.0, -2.0], dtype=np.float32))
        assert state.step == 1

    def test_first_step_magnitude(self):
        """With bias correction the first update is ~lr * sign(grad)."""
        g = np.array([0.3, -1.7, 4.0])
        p = Tensor(np.zeros(3), requires_grad=True)
        state = AdamState()
        adam_step({"p": p}, {"p": g}, state, lr=1e-2)
        expected = -1e-2 * g / (np.abs(g) + state.eps)
        assert np.allclose(p.data, expected, rtol=1e-9)
        assert np.allclose(np.abs(p.data), 1e-2, rtol=1e-6)

    def test_quadratic_bowl_converges(self):
        x = Tensor(np.array([5.0]), requires_grad=True)
        state = AdamState()
        for _ in range(2000):
            with Tape() as t:
                loss = dc.tensor_sum(dc.square(x))
                g = t.backward(loss)[x]
            adam_step({"x": x}, {"x": g}, state, lr=1e-2)
            x.grad = None
        assert abs(x.data[0]) < 1e-3

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ShapeError):
            adam_step({"p": p}, {"p": np.zeros(4)}, AdamState(), lr=1e-3)


class TestLrSchedule:
    def test_endpoints_and_midpoint(self):
        assert lr_schedule(0, 200000, 5.0e-4, 5.0e-5) == pytest.approx(5.0e-4, rel=1e-12)
        assert lr_schedule(200000, 200000, 5.0e-4, 5.0e-5) == pytest.approx(5.0e-5, rel=1e-12)
        mid = lr_schedule(100000, 200000, 5.0e-4, 5.0e-5)
        assert mid == pytest.approx(math.sqrt(5.0e-4 * 5.0e-5), rel=1e-12)
        assert mid == pytest.approx(1.5811388e-4, rel=1e-6)

    def test_errors(self):
        with pytest.raises(dc.DiffcoreError):
            lr_schedule(0, 100, 0.0, 1e-5)
        with pytest.raises(dc.DiffcoreError):
            lr_schedule(0, 100, 1e-4, -1e-5)
        with pytest.raises(dc.DiffcoreError):
            lr_schedule(101, 100, 1e-4, 1e-5)

    @given(st.integers(0, 1000))
    def test_monotone_decreasing(self, step):
        lr = lr_schedule(step, 1000, 5e-4, 5e-5)
        assert 5e-5 - 1e-15 <= lr <= 5e-4 + 1e-15


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = RNG(0)
        params = {
            "layer.w": rng.normal(size=(7, 5)).astype(np.float32),
            "layer.b": rng.normal(size=(5,)).astype(np.float32),
            "scalar": np.float32(3.25).reshape(()),
        }
        path = tmp_path / "ckpt.osnf"
        save_params(path, params)
        loaded = load_params(path)
        assert set(loaded) == set(params)
        for k in params:
            assert loaded[k].dtype == np.float32
            assert np.array_equal(loaded[k], np.asarray(params[k], dtype=np.float32))

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "ckpt.osnf"
        save_params(path, {"w": np.ones((4, 4), dtype=np.float32)})
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 9])
        with pytest.raises(CheckpointError, match="truncated"):
            load_params(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "ckpt.osnf"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_params(path)

    def test_version_mismatch_names_versions(self, tmp_path):
        path = tmp_path / "ckpt.osnf"
        save_params(path, {"w": np.ones(2, dtype=np.float32)})
        raw = bytearray(path.read_bytes())
        raw[4] = 9  # bump the version field
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError) as err:
            load_params(path)
        assert "9" in str(err.value) and "1" in str(err.value)


class TestDeterminism:
    def test_training_trajectory_bit_identical(self):
        def run():
            rng = RNG(42)
            layer = Linear(4, 4, rng, dtype=np.float32)
            state = AdamState()
            x = Tensor(RNG(1).normal(size=(16, 4)).astype(np.float32))
            target = RNG(2).normal(size=(16, 4)).astype(np.float32)
            for _ in range(20):
                with Tape() as t:
                    loss = dc.mean(dc.square(dc.sub(layer(x), target)))
                    grads = t.backward(loss)
                named = layer.named_params()
                adam_step(named, {k: grads[v] for k, v in named.items()}, state, 1e-3)
                for v in named.values():
                    v.grad = None
            return {k: v.data.copy() for k, v in layer.named_params().items()}

        a, b = run(), run()
        for k in a:
            assert np.array_equal(a[k], b[k])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=12))
def test_sigma_of_sum_property(values):
    """sum backward spreads the output gradient uniformly, exactly."""
    x = Tensor(np.array(values), requires_grad=True)
    with Tape() as t:
        g = t.backward(dc.tensor_sum(x))[x]
    assert np.array_equal(g, np.ones(len(values)))
