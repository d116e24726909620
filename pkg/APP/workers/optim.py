"""Optimizers: Ranger (RAdam wrapped in Lookahead) and plain Adam."""
from __future__ import annotations

from typing import Iterable

import torch

from APP.helpers.errors import ConfigError


class Lookahead:
    """
    Lookahead wrapper: every k inner steps the slow weights move alpha of the way
    toward the fast weights and the fast weights are reset to them.
    """

    def __init__(self, base: torch.optim.Optimizer, k: int = 6, alpha: float = 0.5):
        if k < 1 or not 0.0 < alpha <= 1.0:
            raise ConfigError(f"Lookahead needs k >= 1 and 0 < alpha <= 1 (got k={k}, alpha={alpha})")
        self.base = base
        self.k = k
        self.alpha = alpha
        self.param_groups = base.param_groups
        self.step_count = 0
        self.slow = [
            [p.detach().clone() for p in group["params"]]
            for group in base.param_groups
        ]

    @torch.no_grad()
    def step(self, closure=None):
        loss = self.base.step(closure)
        self.step_count += 1
        if self.step_count % self.k == 0:
            for group, slow_params in zip(self.param_groups, self.slow):
                for p, slow in zip(group["params"], slow_params):
                    slow.add_(p - slow, alpha=self.alpha)
                    p.copy_(slow)
        return loss

    def zero_grad(self, set_to_none: bool = True):
        self.base.zero_grad(set_to_none=set_to_none)

    def state_dict(self):
        return {"base": self.base.state_dict(), "step_count": self.step_count, "slow": self.slow}

    def load_state_dict(self, state):
        self.base.load_state_dict(state["base"])
        self.step_count = state["step_count"]
        self.slow = state["slow"]


def build_optimizer(params: Iterable[torch.nn.Parameter], name: str, learning_rate: float,
                    k: int = 6, alpha: float = 0.5):
    """
    Create the optimizer named in the config

    Args:
        params: Parameters to optimise
        name (str): 'ranger' or 'adam'
        learning_rate (float): Constant learning rate

    Returns:
        Optimizer-like object with step() and zero_grad()
    """
    params = [p for p in params if p.requires_grad]
    if name == "ranger":
        return Lookahead(torch.optim.RAdam(params, lr=learning_rate), k=k, alpha=alpha)
    if name == "adam":
        return torch.optim.Adam(params, lr=learning_rate)
    raise ConfigError(f"Unknown optimizer {name!r}; expected ranger or adam")
