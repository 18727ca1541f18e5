import math

import numpy as np
import pytest

from gatedformer.autodiff import Tensor
from gatedformer.optim import (
    Adam,
    SGDAnneal,
    clip_grad_norm,
    global_grad_norm,
    make_optimizer,
)


def param(value, grad, dtype=np.float64):
    p = Tensor(np.asarray(value, dtype=dtype), requires_grad=True, dtype=dtype)
    p.grad = np.asarray(grad, dtype=dtype)
    return p


class TestClipping:
    def test_norm(self):
        assert global_grad_norm([param([0, 0], [3, 0]), param([0], [4])]) == 5.0

    def test_skips_missing_grads(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        assert global_grad_norm([p]) == 0.0

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_clip_bound_and_direction(self, rng, dtype):
        ps = [param(np.zeros(s), rng.normal(size=s) * 10, dtype) for s in [(7,), (3, 4)]]
        before = np.concatenate([p.grad.ravel().astype(np.float64) for p in ps])
        pre = clip_grad_norm(ps, 0.15)
        after = np.concatenate([p.grad.ravel().astype(np.float64) for p in ps])
        assert abs(pre - np.linalg.norm(before)) < 1e-9 * pre
        assert np.linalg.norm(after) <= 0.15 + 1e-9
        cos = after @ before / (np.linalg.norm(after) * np.linalg.norm(before))
        assert abs(cos - 1) < (1e-12 if dtype == np.float64 else 1e-6)

    def test_no_clip_below_limit(self):
        p = param([0.0], [0.1])
        clip_grad_norm([p], 0.15)
        assert p.grad[0] == 0.1

    def test_invalid(self):
        with pytest.raises(ValueError):
            clip_grad_norm([], 0.0)


class TestSgd:
    def test_step(self):
        p = param([1.0], [0.5])
        SGDAnneal(lr=2.0).step({"p": p})
        assert p.data[0] == 0.0

    def test_patience_two(self):
        opt = SGDAnneal(lr=2.0, patience=2)
        opt.on_validation(1.0)
        opt.on_validation(1.5)
        assert opt.lr == 2.0
        opt.on_validation(1.2)
        assert opt.lr == 0.5

    def test_improving_keeps_lr(self):
        opt = SGDAnneal(lr=2.0)
        for loss in (3.0, 2.0, 1.0):
            opt.on_validation(loss)
        assert opt.lr == 2.0

    def test_patience_one_default(self):
        opt = SGDAnneal()
        opt.on_validation(1.0)
        opt.on_validation(1.0)
        assert opt.lr == 0.5

    def test_state_round_trip(self):
        opt = SGDAnneal(lr=1.0, patience=3)
        opt.on_validation(2.0)
        opt.on_validation(3.0)
        other = SGDAnneal()
        other.load(opt.scalars(), opt.tensors())
        assert other.scalars() == opt.scalars()

    def test_invalid(self):
        with pytest.raises(ValueError):
            SGDAnneal(lr=0)
        with pytest.raises(ValueError):
            SGDAnneal(clip_norm=0)


class TestAdam:
    def test_first_step_magnitude(self):
        p = param(np.zeros(4), np.ones(4))
        Adam(lr=0.001).step({"p": p})
        np.testing.assert_allclose(-p.data, 0.001, rtol=1e-7)

    def test_zero_gradient(self):
        p = param([1.5, -2.0], [0.0, 0.0])
        Adam().step({"p": p})
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_scalar_quadratic_trace(self):
        # f(x) = 1.5 (x - 2)^2, plain-float recursion as the reference
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        x, m, v = 0.0, 0.0, 0.0
        expected = []
        for t in range(1, 6):
            g = 3.0 * (x - 2.0)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            expected.append(x)
        opt = Adam(lr=lr, beta1=b1, beta2=b2, eps=eps)
        p = param([0.0], [0.0])
        got = []
        for _ in range(5):
            p.grad = 3.0 * (p.data - 2.0)
            opt.step({"p": p})
            got.append(float(p.data[0]))
        np.testing.assert_allclose(got, expected, rtol=1e-13)

    def test_state_round_trip(self):
        opt = Adam(lr=0.01)
        p = param([1.0, 2.0], [0.3, -0.1])
        opt.step({"p": p})
        other = Adam()
        other.load(opt.scalars(), opt.tensors())
        q = param(p.data.copy(), [0.2, 0.2])
        p.grad = np.array([0.2, 0.2])
        opt.step({"p": p})
        other.step({"p": q})
        assert p.data.tobytes() == q.data.tobytes()

    def test_defaults(self):
        opt = Adam()
        assert (opt.lr, opt.beta1, opt.beta2, opt.eps) == (0.00025, 0.9, 0.999, 1e-8)


class TestFactory:
    def test_kinds(self):
        assert isinstance(make_optimizer("sgd", lr=1.0, beta1=0.5), SGDAnneal)
        assert make_optimizer("adam", lr=0.1).lr == 0.1

    def test_unknown(self):
        with pytest.raises(ValueError):
            make_optimizer("rmsprop")
