"""AdaBound: Adam whose per-element step size is squeezed into a band that
narrows onto a fixed SGD rate as training proceeds."""

from __future__ import annotations

import math

import torch


def lower_bound(t, final_lr: float, beta2: float) -> float:
    return final_lr * (1.0 - 1.0 / ((1.0 - beta2) * t + 1.0))


def upper_bound(t, final_lr: float, beta2: float) -> float:
    return final_lr * (1.0 + 1.0 / ((1.0 - beta2) * t))


class AdaBound(torch.optim.Optimizer):
    """Bounded adaptive optimizer.

    m, v are bias-corrected moment estimates; the rate alpha / (sqrt(v) + eps)
    is clipped to [lower(t), upper(t)] element-wise and the update is
    -rate * m.  Both bounds tend to ``final_lr``.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, final_lr=0.1, debug=False):
        if lr <= 0 or final_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not (0.0 <= betas[0] < 1.0 and 0.0 < betas[1] < 1.0):
            raise ValueError(f"invalid betas {betas}")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, final_lr=final_lr))
        self.debug = debug
        self.names = {}

    def name_parameters(self, named):
        """Attach names so gradient errors can point at the culprit."""
        self.names = {id(p): n for n, p in named}
        return self

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            b1, b2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                if not torch.isfinite(g).all():
                    raise FloatingPointError(f"non-finite gradient for parameter {self.names.get(id(p), tuple(p.shape))}")
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["m"] = torch.zeros_like(p)
                    state["v"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["m"], state["v"]
                m.mul_(b1).add_(g, alpha=1 - b1)
                v.mul_(b2).addcmul_(g, g, value=1 - b2)
                m_hat = m / (1 - b1**t)
                v_hat = v / (1 - b2**t)
                lo = lower_bound(t, group["final_lr"], b2)
                hi = upper_bound(t, group["final_lr"], b2)
                rate = (group["lr"] / (v_hat.sqrt() + group["eps"])).clamp_(lo, hi)
                if self.debug:
                    assert lo <= hi and bool(((rate >= lo) & (rate <= hi)).all()), "rate escaped its bounds"
                p.sub_(rate * m_hat)
        return loss


def effective_rate(t, v_hat, lr=1e-3, final_lr=0.1, beta2=0.999, eps=1e-8) -> float:
    """Scalar version of the clipped rate, for checking limits."""
    raw = lr / (math.sqrt(v_hat) + eps)
    return min(max(raw, lower_bound(t, final_lr, beta2)), upper_bound(t, final_lr, beta2))
