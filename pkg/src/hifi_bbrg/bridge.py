"""Closed-form Brownian-bridge mathematics.

The bridge pins the target image ``x0`` at unit time ``s = 0`` and the source
image ``xT`` at ``s = 1``.  Its forward SDE is

    dX = -(X - xT) / (1 - s) ds + 2 sqrt(1 - s) dW(s)

whose marginal at ``s`` is ``(1 - s) x0 + s xT + B(s) eps`` with the noise
scale ``B(s) = 2 (1 - s) sqrt(ln(1 / (1 - s)))``.  ``B`` is used as a standard
deviation: it is exactly the marginal std implied by the diffusion
coefficient above.

Discrete steps ``t in {0, ..., T}`` map to unit time through ``s = t / T``.
Schedule arithmetic runs in float64 and is cast to the image dtype last.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

#: Location of the maximum of ``B`` on [0, 1]: the root of ``2 ln(1/(1-s)) = 1``.
PEAK_UNIT_TIME = 1.0 - math.exp(-0.5)


class StepRangeError(ValueError):
    """A discrete step or unit time falls outside the bridge interval."""


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite bridge state at step {step}")
        self.step = step


@dataclass(frozen=True)
class ScheduleParams:
    """Discrete time grid of the bridge.

    Attributes:
        total_steps: Number of discrete steps ``T`` (at least 1).
    """

    total_steps: int = 1000

    def __post_init__(self):
        if isinstance(self.total_steps, bool) or int(self.total_steps) != self.total_steps:
            raise TypeError("total_steps must be an integer")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")

    def unit_time(self, t: int | torch.Tensor) -> float | torch.Tensor:
        """Map a step (or tensor of steps) in ``[0, T]`` to ``s = t / T``."""
        if isinstance(t, torch.Tensor):
            if bool(((t < 0) | (t > self.total_steps)).any()):
                raise StepRangeError(f"steps must lie in [0, {self.total_steps}]")
            return t.to(torch.float64) / self.total_steps
        if not 0 <= t <= self.total_steps:
            raise StepRangeError(f"step {t} outside [0, {self.total_steps}]")
        return t / self.total_steps


@dataclass
class BridgeState:
    x: torch.Tensor
    step: int

    def __post_init__(self):
        if self.step < 0:
            raise StepRangeError(f"negative step {self.step}")
        if not bool(torch.isfinite(self.x).all()):
            raise NonFiniteStateError(self.step)


@dataclass
class NoisePath:
    """A simulated SDE trajectory, states ordered by increasing step."""

    states: list[BridgeState]
    seed: int
    n_steps: int
    diffusion_on: bool = True
    _steps: list[int] = field(init=False, repr=False)

    def __post_init__(self):
        self._steps = [st.step for st in self.states]
        if any(b <= a for a, b in zip(self._steps, self._steps[1:])):
            raise ValueError("path states must be strictly increasing in step")

    @property
    def steps(self) -> list[int]:
        return list(self._steps)

    def at(self, step: int) -> torch.Tensor:
        """State recorded at ``step``; raises KeyError if it was not recorded."""
        try:
            return self.states[self._steps.index(step)].x
        except ValueError:
            raise KeyError(step) from None

    def unit_times(self) -> list[float]:
        return [k / self.n_steps for k in self._steps]


def _check_unit_time(s: float) -> float:
    s = float(s)
    if not (0.0 <= s <= 1.0):
        raise StepRangeError(f"unit time {s} outside [0, 1]")
    return s


def noise_scale(s: float) -> float:
    """Noise scale ``B(s)`` of the bridge marginal, with ``B(0) = B(1) = 0``."""
    u = 1.0 - _check_unit_time(s)
    if u <= 0.0 or u >= 1.0:
        return 0.0
    return 2.0 * u * math.sqrt(-math.log(u))


def noise_scale_tensor(s: torch.Tensor) -> torch.Tensor:
    """Vectorised :func:`noise_scale` on a float64 tensor of unit times."""
    s = s.to(torch.float64)
    if bool(((s < 0) | (s > 1)).any()):
        raise StepRangeError("unit times must lie in [0, 1]")
    u = 1.0 - s
    inside = (u > 0) & (u < 1)
    safe = torch.where(inside, u, torch.ones_like(u))
    return torch.where(inside, 2.0 * safe * torch.sqrt(-torch.log(safe)), torch.zeros_like(u))


def _coefficients(t, sched: ScheduleParams, like: torch.Tensor):
    # Returns (s, B(s)) shaped to broadcast against ``like`` along the batch axis.
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        s = sched.unit_time(t)
        b = noise_scale_tensor(s)
        shape = (-1,) + (1,) * (like.ndim - 1)
        return s.reshape(shape), b.reshape(shape)
    if isinstance(t, torch.Tensor):
        t = int(t.item())
    s = sched.unit_time(t)
    return s, noise_scale(s)


def _check_shapes(*tensors: torch.Tensor) -> None:
    shapes = {tuple(x.shape) for x in tensors}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def forward_sample(
    x0: torch.Tensor,
    xT: torch.Tensor,
    t: int | torch.Tensor,
    eps: torch.Tensor,
    sched: ScheduleParams,
) -> torch.Tensor:
    """Draw ``X_t = (t/T) xT + (1 - t/T) x0 + B(t/T) eps``.

    ``t`` is either one step shared by the batch or a ``(batch,)`` tensor of
    per-sample steps.  The endpoints are returned as exact copies of ``x0``
    and ``xT``, so no rounding from the interpolation leaks into them.
    """
    _check_shapes(x0, xT, eps)
    s, b = _coefficients(t, sched, x0)
    if isinstance(s, float):
        if s == 0.0:
            return x0.clone()
        if s == 1.0:
            return xT.clone()
        return (s * xT.double() + (1.0 - s) * x0.double() + b * eps.double()).to(x0.dtype)
    out = s * xT.double() + (1.0 - s) * x0.double() + b * eps.double()
    out = torch.where(s == 0.0, x0.double(), out)
    out = torch.where(s == 1.0, xT.double(), out)
    return out.to(x0.dtype)


def bridge_target(
    x0: torch.Tensor,
    xT: torch.Tensor,
    t: int | torch.Tensor,
    eps: torch.Tensor,
    sched: ScheduleParams,
) -> torch.Tensor:
    """Regression target ``X_t - x0`` for the bridge predictor."""
    return forward_sample(x0, xT, t, eps, sched) - x0


def bridge_mean(x0, xT, s: float):
    """Mean of the bridge marginal, ``(1 - s) x0 + s xT``."""
    return (1.0 - s) * x0 + s * xT


def simulate_sde_path(
    x0: torch.Tensor,
    xT: torch.Tensor,
    n_steps: int,
    seed: int,
    diffusion_on: bool = True,
    record_steps: Sequence[int] | None = None,
) -> NoisePath:
    """Euler-Maruyama integration of the forward bridge SDE from ``x0`` to ``xT``.

    Each entry of ``x0`` is an independent scalar path, so a batch of shape
    ``(N, 1, 1, 1)`` simulates ``N`` paths at once.  The grid is uniform with
    ``ds = 1 / n_steps``.  Integration stops at ``s = 1 - 1/n_steps`` where the
    drift is still finite; the last state is then pinned to ``xT``.

    Args:
        x0: Start of the bridge.
        xT: Pinned end point, same shape as ``x0``.
        n_steps: Number of grid intervals, at least 2.
        seed: Seed of the Brownian increments.
        diffusion_on: If False, integrate the drift-only ODE.
        record_steps: Steps to keep in the returned path. Step 0 and
            ``n_steps`` are always kept. Defaults to every step.

    Returns:
        The recorded trajectory in float64.
    """
    if n_steps < 2:
        raise ValueError(f"n_steps must be >= 2, got {n_steps}")
    _check_shapes(x0, xT)
    keep = set(range(n_steps + 1)) if record_steps is None else set(record_steps) | {0, n_steps}
    if min(keep) < 0 or max(keep) > n_steps:
        raise StepRangeError(f"record_steps must lie in [0, {n_steps}]")

    gen = torch.Generator().manual_seed(int(seed))
    ds = 1.0 / n_steps
    x = x0.to(torch.float64).clone()
    target = xT.to(torch.float64)
    states = [BridgeState(x.clone(), 0)]
    for k in range(n_steps - 1):
        s = k * ds
        x = x - (x - target) / (1.0 - s) * ds
        if diffusion_on:
            dw = torch.randn(x.shape, generator=gen, dtype=torch.float64) * math.sqrt(ds)
            x = x + 2.0 * math.sqrt(1.0 - s) * dw
        if not bool(torch.isfinite(x).all()):
            raise NonFiniteStateError(k + 1)
        if k + 1 in keep:
            states.append(BridgeState(x.clone(), k + 1))
    states.append(BridgeState(target.clone(), n_steps))
    return NoisePath(states=states, seed=int(seed), n_steps=n_steps, diffusion_on=diffusion_on)


def schedule_curve(n_points: int = 1001) -> tuple[np.ndarray, np.ndarray]:
    """``B`` evaluated on a uniform grid of ``n_points`` unit times."""
    s = np.linspace(0.0, 1.0, n_points)
    return s, np.array([noise_scale(v) for v in s])


def write_schedule_csv(path: str | Path, n_points: int = 1001) -> Path:
    path = Path(path)
    s, b = schedule_curve(n_points)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s", "B"])
        for si, bi in zip(s, b):
            writer.writerow([repr(float(si)), repr(float(bi))])
    return path
