"""Adam with named parameter groups, per-group step sizes and freezing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class AdamConfig:
    lr: dict = field(default_factory=lambda: {"k": 1.0, "b": 0.1})
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if any(v <= 0 for v in self.lr.values()):
            raise ValueError("step sizes must be positive")


@dataclass
class AdamState:
    """First and second moments per group plus per-group step counters."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)
    skipped: int = 0

    def to_dict(self) -> dict:
        return {"m": {g: a.tolist() for g, a in self.m.items()},
                "v": {g: a.tolist() for g, a in self.v.items()},
                "t": dict(self.t), "skipped": self.skipped}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls({g: np.asarray(a, dtype=float) for g, a in d["m"].items()},
                   {g: np.asarray(a, dtype=float) for g, a in d["v"].items()},
                   {g: int(n) for g, n in d["t"].items()}, int(d.get("skipped", 0)))


def adam_step(params: dict, grads: dict, state: AdamState, config: AdamConfig,
              frozen=()) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update on every non-frozen group.

    ``params`` and ``grads`` map group names to arrays.  Frozen groups are
    returned as the very same array objects.  If any active gradient is
    non-finite, the whole step is skipped and the event is logged.
    """
    active = [g for g in params if g not in frozen]
    for g in active:
        if not np.all(np.isfinite(grads[g])):
            state.skipped += 1
            log.warning("non-finite gradient in group %r; Adam step skipped", g)
            return dict(params), state
    out = dict(params)
    for g in active:
        p = np.asarray(params[g], dtype=float)
        gr = np.asarray(grads[g], dtype=float)
        if p.shape != gr.shape:
            raise ValueError(f"group {g!r}: gradient shape {gr.shape} != parameter shape {p.shape}")
        m = state.m.get(g, np.zeros_like(p))
        v = state.v.get(g, np.zeros_like(p))
        t = state.t.get(g, 0) + 1
        m = config.beta1 * m + (1.0 - config.beta1) * gr
        v = config.beta2 * v + (1.0 - config.beta2) * gr * gr
        mhat = m / (1.0 - config.beta1**t)
        vhat = v / (1.0 - config.beta2**t)
        out[g] = p - config.lr[g] * mhat / (np.sqrt(vhat) + config.eps)
        state.m[g], state.v[g], state.t[g] = m, v, t
    return out, state
