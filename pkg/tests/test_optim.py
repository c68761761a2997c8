import math

import numpy as np
import pytest

from vrsuie.core.tensor import ParameterError, Tensor
from vrsuie.optim import AdamW, CosineSchedule


def param(value, grad=None):
    t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    t.grad = None if grad is None else np.array(grad, dtype=np.float64)
    return t


class TestAdamW:
    def test_zero_grad_zero_decay_fixed_point(self, rng):
        p = param(rng.normal(size=(3, 4)), np.zeros((3, 4)))
        before = p.data.copy()
        opt = AdamW([("w", p)], lr=1e-2, weight_decay=0.0)
        for _ in range(5):
            opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_closed_form_first_step(self):
        p = param(0.5, 1.0)
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        AdamW([("w", p)], lr, (b1, b2), eps, weight_decay=0.0).step()
        m_hat = (1 - b1) * 1.0 / (1 - b1)
        v_hat = (1 - b2) * 1.0 / (1 - b2)
        assert p.data == pytest.approx(0.5 - lr * m_hat / (math.sqrt(v_hat) + eps), abs=1e-15)

    def test_decay_is_decoupled(self):
        p = param(2.0, 0.0)
        AdamW([("w", p)], lr=0.1, weight_decay=0.5).step()
        assert p.data == pytest.approx(2.0 * (1 - 0.05), abs=1e-15)

    def test_non_finite_grad_skips(self):
        p = param([1.0, 2.0], [np.nan, 1.0])
        opt = AdamW([("w", p)], lr=0.1)
        with pytest.warns(RuntimeWarning):
            assert opt.step() is False
        np.testing.assert_array_equal(p.data, [1.0, 2.0])
        assert opt.skipped == 1 and opt.step_count == 0

    def test_state_round_trip(self, rng):
        p = param(rng.normal(size=3), rng.normal(size=3))
        opt = AdamW([("w", p)], lr=0.01)
        opt.step()
        q = param(p.data.copy(), p.grad.copy())
        twin = AdamW([("w", q)], lr=0.01)
        twin.load_state_dict(opt.state_dict(), opt.step_count)
        opt.step()
        twin.step()
        assert p.data.tobytes() == q.data.tobytes()

    def test_state_names(self):
        opt = AdamW([("a.b", param(1.0))])
        assert set(opt.state_dict()) == {"opt.m.a.b", "opt.v.a.b"}

    def test_bad_betas(self):
        with pytest.raises(ParameterError):
            AdamW([("w", param(1.0))], betas=(1.0, 0.9))


class TestCosine:
    def test_endpoints(self):
        s = CosineSchedule(1e-4, 1e-6, 200)
        assert s(0) == pytest.approx(1e-4, abs=1e-18)
        assert abs(s(199) - 1e-6) <= 1e-12

    def test_midpoint(self):
        s = CosineSchedule(1e-4, 1e-6, 201)
        assert s(100) == pytest.approx(0.5 * (1e-4 + 1e-6), rel=1e-12)

    def test_monotone(self):
        s = CosineSchedule(1.0, 0.0, 50)
        lrs = [s(i) for i in range(60)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_single_step_run(self):
        assert CosineSchedule(1e-4, 1e-6, 1)(0) == 1e-6
