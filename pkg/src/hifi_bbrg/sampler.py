"""Translation-time inference.

The one-step sampler predicts ``x_0 = x_T - eps(x_T, x_T, T)`` and consumes
no randomness.  The multi-step sampler walks a uniform grid
``T = t_0 > t_1 > ... > t_n = 0``: at each node it predicts ``x_0`` and
re-bridges to the next node through the closed-form marginal anchored at
that prediction, optionally adding ``B(s') * noise``.  With ``n = 1`` the two
samplers coincide bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .bridge import NonFiniteStateError, ScheduleParams, forward_sample
from .nets import epsilon_forward

DEFAULT_RECORD_LIMIT = 16


@dataclass
class SampleRequest:
    x_T: torch.Tensor
    n_steps: int = 1
    stochastic: bool = False
    trials: int = 1
    seed: int = 0
    record_limit: int = DEFAULT_RECORD_LIMIT

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if not bool(torch.isfinite(self.x_T).all()):
            raise ValueError("x_T must be finite")


@dataclass
class TrajectoryRecord:
    """Recorded states of every trial plus their spread at each recorded step.

    ``steps`` lists the recorded grid nodes in sampling order; the last entry
    is 0 and holds the final prediction.  ``std_maps`` and ``mean_std`` are
    only filled when at least two trials ran.
    """

    steps: list[int]
    states: list[list[torch.Tensor]]
    finals: torch.Tensor
    std_maps: list[torch.Tensor] | None = None
    mean_std: float | None = None
    step_mean_std: list[float] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "mean_std"])
            for step, v in zip(self.steps, self.step_mean_std):
                w.writerow([step, f"{v:.10g}"])
        return path


def step_grid(total_steps: int, n_steps: int) -> list[int]:
    """Uniform integer partition of ``[T, 0]`` into ``n_steps`` intervals."""
    if not 1 <= n_steps <= total_steps:
        raise ValueError(f"n_steps must lie in [1, {total_steps}], got {n_steps}")
    return [total_steps * (n_steps - k) // n_steps for k in range(n_steps + 1)]


@torch.no_grad()
def sample_one_step(x_T: torch.Tensor, epsilon_net: torch.nn.Module, sched: ScheduleParams) -> torch.Tensor:
    T = sched.total_steps
    return x_T - epsilon_forward(epsilon_net, x_T, x_T, T, T)


def _record_indices(n_intermediate: int, limit: int) -> set[int]:
    if n_intermediate <= limit:
        return set(range(n_intermediate))
    return {int(round(v)) for v in np.linspace(0, n_intermediate - 1, limit)}


@torch.no_grad()
def sample_multi_step(
    req: SampleRequest, epsilon_net: torch.nn.Module, sched: ScheduleParams
) -> tuple[torch.Tensor, TrajectoryRecord]:
    """Run ``req.trials`` independent re-bridging chains.

    Returns the first trial's prediction and the full record.  Each request
    owns its generator, seeded from ``req.seed``; trials draw from it in turn.
    """
    T = sched.total_steps
    grid = step_grid(T, req.n_steps)
    x_T = req.x_T
    keep = _record_indices(len(grid) - 2, max(req.record_limit, 0))
    gen = torch.Generator().manual_seed(int(req.seed))

    finals, all_states = [], []
    steps_recorded: list[int] = []
    for trial in range(req.trials):
        x = x_T.clone()
        states = []
        for k in range(req.n_steps):
            x0_hat = x - epsilon_forward(epsilon_net, x, x_T, grid[k], T)
            if not bool(torch.isfinite(x0_hat).all()):
                raise NonFiniteStateError(grid[k])
            t_next = grid[k + 1]
            if t_next == 0:
                break
            if req.stochastic:
                noise = torch.randn(x.shape, generator=gen, dtype=torch.float64).to(x.dtype)
            else:
                noise = torch.zeros_like(x)
            x = forward_sample(x0_hat, x_T, t_next, noise, sched)
            if k in keep:
                states.append(x.clone())
                if trial == 0:
                    steps_recorded.append(t_next)
        states.append(x0_hat)
        finals.append(x0_hat)
        all_states.append(states)
    steps_recorded.append(0)

    record = TrajectoryRecord(steps=steps_recorded, states=all_states, finals=torch.stack(finals))
    if req.trials >= 2:
        record.std_maps = []
        for j in range(len(steps_recorded)):
            smap, mean = trajectory_std([st[j] for st in all_states])
            record.std_maps.append(smap)
            record.step_mean_std.append(mean)
        record.mean_std = record.step_mean_std[-1]
    return finals[0], record


def trajectory_std(outputs: Sequence[torch.Tensor] | torch.Tensor) -> tuple[torch.Tensor, float]:
    """Per-pixel sample std (``n - 1`` denominator) across trials and its mean.

    Positions where every trial agrees exactly get a std of exactly 0.
    """
    stack = outputs if isinstance(outputs, torch.Tensor) else torch.stack(list(outputs))
    if stack.shape[0] < 2:
        raise ValueError("at least two trials are needed for a std")
    x = stack.double()
    smap = x.std(dim=0, unbiased=True)
    same = (x == x[0:1]).all(dim=0)
    smap = torch.where(same, torch.zeros_like(smap), smap)
    return smap, float(smap.mean())
