"""Adam with per-epoch exponential learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    scales: Optional[Sequence[float]] = None,
) -> None:
    """Apply one bias-corrected Adam update in place.

    ``None`` gradients are treated as zeros. ``scales`` multiplies the
    learning rate per parameter. Moments are lazily created as
    zero arrays on the first call.
    """
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    scales = [1.0] * len(params) if scales is None else scales
    for p, g, m, v, scale in zip(params, grads, state.m, state.v, scales):
        m *= b1
        v *= b2
        if g is not None:
            m += (1.0 - b1) * g
            tmp = np.square(g)
            tmp *= 1.0 - b2
            v += tmp
        else:
            tmp = np.empty_like(v)
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr * scale / c1
        p.data -= tmp


class Adam:
    """Adam over a fixed parameter list; ``lr`` is multiplied by ``decay ** epoch``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, decay: float = 0.97, scales: Optional[Sequence[float]] = None):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        if not 0 < decay <= 1:
            raise ConfigurationError(f"lr decay must lie in (0, 1], got {decay}")
        self.params = list(params)
        self.scales = [1.0] * len(self.params) if scales is None else [float(s) for s in scales]
        if len(self.scales) != len(self.params):
            raise ConfigurationError("need one learning-rate scale per parameter")
        self.base_lr = float(lr)
        self.betas = tuple(betas)
        self.eps = float(eps)
        self.decay = float(decay)
        self.epoch = 0
        self.state = AdamState()

    @property
    def lr(self) -> float:
        return self.base_lr * self.decay ** self.epoch

    def set_epoch(self, epoch: int) -> None:
        self.epoch = int(epoch)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr,
                  self.betas, self.eps, self.scales)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {"step": np.array([self.state.step], dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        self.state.step = int(arrays["step"][0])
        n = len(self.params)
        if "m.0" in arrays:
            self.state.m = [np.array(arrays[f"m.{i}"]) for i in range(n)]
            self.state.v = [np.array(arrays[f"v.{i}"]) for i in range(n)]
        else:
            self.state.m, self.state.v = [], []
