"""
AdamW with decoupled weight decay.

    m_t = b1 m_{t-1} + (1 - b1) g
    v_t = b2 v_{t-1} + (1 - b2) g^2
    theta <- theta (1 - lr wd) - lr (m_t / (1 - b1^t)) / (sqrt(v_t / (1 - b2^t)) + eps)

Step counts are kept per parameter so that a parameter that receives no
gradient on some step keeps a correct bias correction. ``group_lrs`` maps a
parameter-name prefix to its own learning rate; unmatched names use ``lr``.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from .exceptions import TrainingError
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    steps: Dict[str, int] = field(default_factory=dict)
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)
    group_lrs: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_config(cls, optim) -> "OptimizerState":
        return cls(
            lr=optim.lr,
            beta1=optim.beta1,
            beta2=optim.beta2,
            eps=optim.eps,
            weight_decay=optim.weight_decay,
            group_lrs={
                "router.": optim.router_lr,
                "projectors.": optim.adapter_lr,
                "aux_encoders.": optim.adapter_lr,
            },
        )

    def lr_for(self, name: str) -> float:
        for prefix, lr in self.group_lrs.items():
            if name.startswith(prefix):
                return lr
        return self.lr

    def hyperparameters(self) -> Dict[str, Any]:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "group_lrs": dict(self.group_lrs),
        }


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: OptimizerState,
) -> OptimizerState:
    """Update every parameter in ``params`` in place; all of them need a gradient."""
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise TrainingError(f"adamw_step: missing gradient for {', '.join(sorted(missing)[:5])}")

    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.data.shape:
            raise TrainingError(f"adamw_step: gradient shape {list(g.shape)} != parameter shape {p.shape} for {name}")
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        t = state.steps.get(name, 0) + 1

        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)

        lr = state.lr_for(name)
        theta = p.data * (1.0 - lr * state.weight_decay)
        p.assign(theta - lr * m_hat / (np.sqrt(v_hat) + state.eps))

        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v
        state.steps[name] = t
    state.step += 1
    return state


class AdamW:
    """Optimizer over a fixed set of named parameters.

    Parameters without a gradient this step (unused router branch, a modality
    missing from the batch) are left untouched.
    """

    def __init__(self, named_params: Iterable[Tuple[str, Tensor]], state: OptimizerState):
        self.params = dict(named_params)
        self.state = state

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> int:
        active = {name: p for name, p in self.params.items() if p.grad is not None}
        if not active:
            raise TrainingError("optimizer step with no gradients")
        adamw_step(active, {name: p.grad for name, p in active.items()}, self.state)
        return len(active)

    def grad_norm(self) -> float:
        total = sum(float(np.sum(p.grad * p.grad)) for p in self.params.values() if p.grad is not None)
        return float(np.sqrt(total))
