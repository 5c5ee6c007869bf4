"""Loss terms for joint bridge / reconstruction training.

The adversarial terms are written with softplus identities:
``-log sigmoid(x) = softplus(-x)`` and ``-log(1 - sigmoid(x)) = softplus(x)``,
which stay finite for any finite logit (torch's softplus switches to the
identity past its threshold, so large logits neither overflow nor lose their
gradient).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float | None = None):
        msg = f"non-finite value in loss term {term!r}"
        if value is not None:
            msg += f" ({value})"
        super().__init__(msg)
        self.term = term


@dataclass
class LossRecord:
    l_diff: float
    l_fidelity: float
    l_adv_d: float
    l_adv_g: float
    l_total_gen: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _check(name: str, *tensors: torch.Tensor) -> None:
    for x in tensors:
        if not bool(torch.isfinite(x).all()):
            raise NonFiniteLossError(name)


def reconstruction_norm(a: torch.Tensor, b: torch.Tensor, kind: str = "l1") -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if kind == "l1":
        return (a - b).abs().mean()
    if kind == "l2":
        return ((a - b) ** 2).mean()
    raise ValueError(f"unknown norm kind {kind!r}")


def diffusion_loss(pred: torch.Tensor, x_t: torch.Tensor, x_0: torch.Tensor, kind: str = "l1") -> torch.Tensor:
    """Mean deviation between the predictor output and the target ``x_t - x_0``."""
    _check("l_diff", pred, x_t, x_0)
    if not (pred.shape == x_t.shape == x_0.shape):
        raise ValueError("pred, x_t and x_0 must share a shape")
    return reconstruction_norm(x_t - x_0, pred, kind)


def fidelity_loss(x_T: torch.Tensor, xT_hat: torch.Tensor, kind: str = "l1") -> torch.Tensor:
    _check("l_fidelity", x_T, xT_hat)
    return reconstruction_norm(x_T, xT_hat, kind)


def discriminator_loss(d_f: torch.Tensor, d_r: torch.Tensor) -> torch.Tensor:
    """Mean over patches of ``-[log(1 - sigmoid(d_f)) + log sigmoid(d_r)]``."""
    _check("l_adv_d", d_f, d_r)
    return F.softplus(d_f).mean() + F.softplus(-d_r).mean()


def generator_adversarial_loss(d_f: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss, the mean of ``-log sigmoid(d_f)``."""
    _check("l_adv_g", d_f)
    return F.softplus(-d_f).mean()


def total_generator_loss(l_diff, l_fidelity, l_adv_g, lam: float):
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    for name, v in (("l_diff", l_diff), ("l_fidelity", l_fidelity), ("l_adv_g", l_adv_g)):
        if not bool(torch.isfinite(torch.as_tensor(v)).all()):
            raise NonFiniteLossError(name)
    return l_diff + lam * l_fidelity + l_adv_g
