"""Adam update rule and the plateau/early-stop schedule."""

import numpy as np
import pytest

from trimf import tensor as T
from trimf.optim import CONTINUE, DECAY_LR, STOP, Adam, ScheduleState, end_of_epoch
from trimf.tensor import Tensor, backward


def reference_adam(start, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Straight-line Adam trace, independently coded."""
    x = float(start)
    m = v = 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        x -= lr * mhat / (np.sqrt(vhat) + eps)
        trace.append(x)
    return trace


class TestAdam:
    def test_zero_gradient_zero_decay_is_identity(self):
        p = Tensor([1.5, -2.0], requires_grad=True)
        before = p.data.copy()
        opt = Adam({"p": p}, lr=0.1)
        for _ in range(3):
            opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_magnitude_is_lr(self):
        p = Tensor([2.0], requires_grad=True)
        p.grad = np.array([0.37])
        opt = Adam({"p": p}, lr=1e-3)
        opt.step()
        # bias-corrected first step: lr * g / (|g| + eps)
        assert abs(2.0 - p.data[0]) == pytest.approx(1e-3, rel=1e-6)

    def test_ten_steps_on_quadratic_match_reference(self):
        p = Tensor([3.0], requires_grad=True)
        opt = Adam({"p": p}, lr=0.05)
        grads = []
        mine = []
        for _ in range(10):
            opt.zero_grad()
            loss = T.tensor_sum(T.mul(p, p))
            backward(loss)
            grads.append(float(p.grad[0]))
            opt.step()
            mine.append(float(p.data[0]))
        # replay the recorded gradient sequence through the reference
        ref = reference_adam(3.0, grads, lr=0.05)
        np.testing.assert_allclose(mine, ref, atol=1e-12)

    def test_classic_weight_decay_enters_gradient(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([0.0])
        opt = Adam({"p": p}, lr=0.1, weight_decay=0.5)
        opt.step()
        # effective gradient 0.5*1.0, first-step update ~ lr
        assert p.data[0] == pytest.approx(1.0 - 0.1, rel=1e-6)

    def test_decoupled_weight_decay(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([0.0])
        opt = Adam({"p": p}, lr=0.1, weight_decay=0.5, decoupled=True)
        opt.step()
        # adam update is zero; decoupled shrinkage is lr*wd*p
        assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.5, rel=1e-12)


class TestSchedule:
    def run(self, losses, **kw):
        state = ScheduleState(**kw)
        return [end_of_epoch(v, state) for v in losses], state

    def test_monotone_improvement_continues(self):
        decisions, _ = self.run([1.0, 0.9, 0.8])
        assert decisions == [CONTINUE, CONTINUE, CONTINUE]

    def test_flat_losses_decay_after_two_stagnant_epochs(self):
        decisions, _ = self.run([1.0, 1.0, 1.0])
        assert decisions == [CONTINUE, CONTINUE, DECAY_LR]

    def test_stop_exactly_six_after_best(self):
        losses = [1.0] + [1.0] * 6
        decisions, state = self.run(losses)
        assert decisions[-1] == STOP
        assert decisions[:-1].count(STOP) == 0
        assert state.best_epoch == 1
        assert state.epoch == state.best_epoch + 6

    def test_decay_counter_resets_but_stop_counter_accrues(self):
        decisions, _ = self.run([1.0] + [1.0] * 6)
        # stagnant epochs 2..7: decay at 3 and 5, stop at 7
        assert decisions == [CONTINUE, CONTINUE, DECAY_LR, CONTINUE, DECAY_LR, CONTINUE, STOP]

    def test_improvement_resets_both_counters(self):
        decisions, state = self.run([1.0, 1.0, 0.5, 0.5, 0.5])
        assert decisions == [CONTINUE, CONTINUE, CONTINUE, CONTINUE, DECAY_LR]
        assert state.best_epoch == 3

    def test_tiny_improvement_below_threshold_is_stagnation(self):
        decisions, _ = self.run([1.0, 1.0 - 1e-9, 1.0 - 2e-9])
        assert decisions == [CONTINUE, CONTINUE, DECAY_LR]

    def test_non_finite_val_loss_rejected(self):
        state = ScheduleState()
        with pytest.raises(Exception, match="finite"):
            end_of_epoch(float("nan"), state)
