"""Adam and LAMB parameter updates with a linear warmup/decay schedule.

LAMB takes the bias-corrected Adam direction and rescales each parameter
block's update by the trust ratio ||w|| / ||update||, clamped to [0, 10] and
defined as 1 when either norm is zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, NonFiniteError

TRUST_RATIO_CLAMP = 10.0


@dataclass
class OptimizerState:
    """Per-parameter moments plus shared hyperparameters and step counter."""

    kind: str = "lamb"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0
    warmup_steps: int = 0
    total_steps: int = 0  # 0 means no decay
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "lamb"):
            raise ContractError(f"optimizer kind must be adam or lamb, got {self.kind!r}")
        if self.step < 0:
            raise ContractError("step counter must be non-negative")

    def effective_lr(self, step: int | None = None) -> float:
        """Piecewise-linear rate: ramp from 0 over warmup, then decay to 0."""
        t = self.step if step is None else step
        base = self.learning_rate
        if self.warmup_steps > 0 and t < self.warmup_steps:
            return base * t / self.warmup_steps
        if self.total_steps > self.warmup_steps:
            remaining = max(0, self.total_steps - t)
            return base * remaining / (self.total_steps - self.warmup_steps)
        return base

    def reset_moments(self) -> None:
        """Drop first/second moments (used at stage transitions)."""
        self.m.clear()
        self.v.clear()


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                   state: OptimizerState) -> tuple[dict[str, Tensor], OptimizerState]:
    """Apply one update in place; parameters keep their tensor identity.

    The whole step aborts before touching any parameter if any gradient is
    non-finite.
    """
    for name in params:
        g = grads.get(name)
        if g is None:
            raise ContractError(f"missing gradient for parameter {name!r}")
        if g.shape != params[name].data.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {params[name].data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")

    lr = state.effective_lr()
    t = state.step + 1  # bias correction uses the 1-based step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t

    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
        v = state.v.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state.v[name] = v
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        update = m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        if state.kind == "lamb":
            w_norm = float(np.linalg.norm(p.data))
            u_norm = float(np.linalg.norm(update))
            if w_norm == 0.0 or u_norm == 0.0:
                ratio = 1.0
            else:
                ratio = min(w_norm / u_norm, TRUST_RATIO_CLAMP)
            update = ratio * update
        p.data = p.data - (lr * update).astype(p.data.dtype)

    state.step += 1
    return params, state
