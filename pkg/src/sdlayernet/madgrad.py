"""MADGRAD: momentumized, adaptive, dual averaged gradient method."""

import math

import torch
from torch.optim import Optimizer


class MADGRAD(Optimizer):
    """Dual averaging with a cube-root adaptive denominator.

    Per parameter, with ``lamb = lr * sqrt(k + 1)`` at step ``k``::

        nu += lamb * g**2
        s  += lamb * g
        z   = x0 - s / (nu ** (1/3) + eps)
        x   = (1 - c) * x + c * z,   c = 1 - momentum
    """

    def __init__(self, params, lr=1e-2, momentum=0.9, weight_decay=0.0, eps=1e-6):
        if lr <= 0:
            raise ValueError(f"invalid learning rate {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        defaults = dict(lr=lr, momentum=momentum, weight_decay=weight_decay, eps=eps, k=0)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            eps, lr, decay = group["eps"], group["lr"], group["weight_decay"]
            ck = 1.0 - group["momentum"]
            lamb = lr * math.sqrt(group["k"] + 1)
            for p in group["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                state = self.state[p]
                if not state:
                    state["grad_sum_sq"] = torch.zeros_like(p)
                    state["s"] = torch.zeros_like(p)
                    state["x0"] = p.detach().clone()
                if decay:
                    grad = grad.add(p, alpha=decay)
                state["grad_sum_sq"].addcmul_(grad, grad, value=lamb)
                rms = state["grad_sum_sq"].pow(1 / 3).add_(eps)
                state["s"].add_(grad, alpha=lamb)
                z = state["x0"].addcdiv(state["s"], rms, value=-1)
                if ck == 1.0:
                    p.copy_(z)
                else:
                    p.mul_(1 - ck).add_(z, alpha=ck)
            group["k"] += 1
        return loss
