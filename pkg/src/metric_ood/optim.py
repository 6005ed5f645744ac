"""First-order optimizers operating in place on lists of parameter arrays."""

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise UsageError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise UsageError("learning rate must be positive")


def optimizer_step(state, params, grads):
    """Update ``params`` in place and return ``(params, state)``.

    sgd: ``p -= lr * g``. adam: bias-corrected moment estimates; moments are
    allocated lazily on the first call.
    """
    if len(params) != len(grads):
        raise UsageError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise UsageError(f"parameter shape {p.shape} != gradient shape {g.shape}")

    if state.kind == "sgd":
        for p, g in zip(params, grads):
            p -= state.learning_rate * g
        state.step += 1
        return params, state

    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise UsageError("adam moments do not match parameter shapes")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
