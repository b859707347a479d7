"""SGD and Adam over trainable parameters only."""

import logging
from typing import Dict, List, Sequence

import numpy as np

from .exceptions import ConfigurationError
from .tensor import Parameter

logger = logging.getLogger(__name__)


class Optimizer:
    """Base optimizer.

    Frozen parameters are dropped at construction. After each update the
    trainable values are snapped to the float32 grid so an f32 checkpoint
    restores them exactly.
    """

    def __init__(self, params: Sequence[Parameter], lr: float, f32_grid: bool = True):
        if lr < 0:
            raise ConfigurationError(f"learning rate must be non-negative, got {lr}")
        self.params: List[Parameter] = [p for p in params if p.trainable]
        self.lr = lr
        self.f32_grid = f32_grid
        logger.debug("%s over %d trainable tensors", type(self).__name__, len(self.params))

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()

    def step(self) -> None:
        for index, param in enumerate(self.params):
            if param.grad is None or not param.trainable:
                continue
            update = self._update(index, param.grad)
            if not np.any(update):
                continue
            param.data = param.data - update
            if self.f32_grid:
                param.data = param.data.astype(np.float32).astype(np.float64)

    def _update(self, index: int, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-2, momentum: float = 0.0, f32_grid: bool = True):
        super().__init__(params, lr, f32_grid)
        if not 0.0 <= momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {momentum}")
        self.momentum = momentum
        self.velocity: Dict[int, np.ndarray] = {}

    def _update(self, index: int, grad: np.ndarray) -> np.ndarray:
        if self.momentum:
            velocity = self.velocity.get(index, np.zeros_like(grad))
            velocity = self.momentum * velocity + grad
            self.velocity[index] = velocity
            grad = velocity
        return self.lr * grad


class Adam(Optimizer):
    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-3,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        f32_grid: bool = True,
    ):
        super().__init__(params, lr, f32_grid)
        beta1, beta2 = betas
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigurationError(f"Adam betas must lie in [0, 1), got {betas}")
        if eps <= 0:
            raise ConfigurationError(f"Adam eps must be positive, got {eps}")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: Dict[int, np.ndarray] = {}
        self.v: Dict[int, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        super().step()

    def _update(self, index: int, grad: np.ndarray) -> np.ndarray:
        m = self.beta1 * self.m.get(index, np.zeros_like(grad)) + (1 - self.beta1) * grad
        v = self.beta2 * self.v.get(index, np.zeros_like(grad)) + (1 - self.beta2) * grad * grad
        self.m[index], self.v[index] = m, v
        m_hat = m / (1 - self.beta1 ** self.t)
        v_hat = v / (1 - self.beta2 ** self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def build_optimizer(name: str, params: Sequence[Parameter], lr: float, **kwargs) -> Optimizer:
    if name == "adam":
        return Adam(params, lr=lr, **kwargs)
    if name == "sgd":
        return SGD(params, lr=lr, **kwargs)
    raise ConfigurationError(f"Unknown optimizer {name!r}; expected 'adam' or 'sgd'")
