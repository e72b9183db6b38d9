"""Adam with L2 weight decay, plateau-triggered LR decay, and early stopping.

Weight decay defaults to the classic formulation (added to the gradient);
``decoupled=True`` subtracts ``lr * wd * param`` after the Adam step instead.
The schedule keeps two counters over the same stagnation stream: the decay
counter resets on improvement or decay, the stop counter only on improvement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError
from .tensor import ContractError, Tensor

CONTINUE = "continue"
DECAY_LR = "decay_lr"
STOP = "stop"


class Adam:
    """Bias-corrected Adam over a named parameter dict.

    State and updates live on one flat buffer (one vectorized update per step
    instead of hundreds of small-array ones); parameters are rebound to views
    of the fresh buffer after each step, so previously handed-out arrays are
    never mutated.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        decoupled: bool = False,
    ):
        if lr <= 0:
            raise ConfigError(f"lr={lr} must be positive")
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decoupled = decoupled
        self.t = 0
        self._slots = []
        offset = 0
        for name, p in self.params.items():
            size = p.data.size
            self._slots.append((name, p, offset, size, p.data.shape))
            offset += size
        dtype = next(iter(self.params.values())).data.dtype if self.params else np.float64
        self._flat = np.empty(offset, dtype=dtype)
        for _, p, off, size, _ in self._slots:
            self._flat[off : off + size] = p.data.ravel()
        self._rebind()
        self.m = np.zeros_like(self._flat)
        self.v = np.zeros_like(self._flat)

    def _rebind(self) -> None:
        for _, p, off, size, shape in self._slots:
            p.data = self._flat[off : off + size].reshape(shape)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        g = np.zeros_like(self._flat)
        for name, p, off, size, shape in self._slots:
            if p.grad is None:
                continue
            if p.grad.shape != shape:
                raise ContractError(f"gradient shape {p.grad.shape} does not match parameter '{name}' {shape}")
            g[off : off + size] = p.grad.ravel()
        if self.weight_decay and not self.decoupled:
            g += self.weight_decay * self._flat
        # in-place moment updates; the step itself lands in a fresh buffer
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        np.square(g, out=g)
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * g
        denom = np.sqrt(self.v / (1.0 - self.beta2 ** self.t))
        denom += self.eps
        step_scale = self.lr / (1.0 - self.beta1 ** self.t)
        np.divide(self.m, denom, out=denom)
        new = self._flat - step_scale * denom
        if self.weight_decay and self.decoupled:
            new -= self.lr * self.weight_decay * self._flat
        self._flat = new
        self._rebind()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, _, off, size, shape in self._slots:
            out[f"adam.m.{name}"] = self.m[off : off + size].reshape(shape)
            out[f"adam.v.{name}"] = self.v[off : off + size].reshape(shape)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, _, off, size, shape in self._slots:
            self.m[off : off + size] = np.asarray(arrays[f"adam.m.{name}"]).ravel()
            self.v[off : off + size] = np.asarray(arrays[f"adam.v.{name}"]).ravel()


@dataclass
class ScheduleState:
    """Plateau bookkeeping across epochs of one training run."""

    decay_factor: float = 0.8
    plateau_patience: int = 2
    stop_patience: int = 6
    min_rel_improvement: float = 1e-6
    best_val_loss: float = field(default=float("inf"))
    best_epoch: int = 0
    epoch: int = 0
    epochs_since_improve: int = 0
    epochs_since_decay_ref: int = 0
    decays: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay_factor < 1.0:
            raise ConfigError(f"decay_factor={self.decay_factor} must be in (0,1)")
        if self.plateau_patience < 1 or self.stop_patience < 1:
            raise ConfigError("patience values must be positive")


def end_of_epoch(val_loss: float, state: ScheduleState) -> str:
    """Advance the schedule one epoch; returns continue / decay_lr / stop.

    Improvement means the validation loss dropped by at least the relative
    threshold against the best seen. Stop wins when both thresholds trip on
    the same epoch.
    """
    if not np.isfinite(val_loss):
        raise ContractError(f"validation loss must be finite, got {val_loss}")
    state.epoch += 1
    improved = val_loss < state.best_val_loss * (1.0 - state.min_rel_improvement) or (
        state.best_val_loss == float("inf")
    )
    if improved:
        state.best_val_loss = val_loss
        state.best_epoch = state.epoch
        state.epochs_since_improve = 0
        state.epochs_since_decay_ref = 0
        return CONTINUE
    state.epochs_since_improve += 1
    state.epochs_since_decay_ref += 1
    if state.epochs_since_improve >= state.stop_patience:
        return STOP
    if state.epochs_since_decay_ref >= state.plateau_patience:
        state.epochs_since_decay_ref = 0
        state.decays += 1
        return DECAY_LR
    return CONTINUE
