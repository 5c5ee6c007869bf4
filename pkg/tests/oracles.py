"""Independent reference computations used by several test modules."""

import math

import torch


def central_difference_check(module, forward, h=1e-6, seed=0):
    """Compare autograd gradients of a random projection of ``forward()``
    against central finite differences, parameter by parameter.

    Returns ``{name: relative_error}`` where the error is
    ``||fd - autograd|| / max(||fd||, ||autograd||)`` over the whole tensor.
    """
    with torch.no_grad():
        out = forward()
    weights = torch.randn(out.shape, generator=torch.Generator().manual_seed(seed), dtype=out.dtype)

    def objective():
        return (forward() * weights).sum()

    module.zero_grad(set_to_none=True)
    objective().backward()
    errors = {}
    for name, p in module.named_parameters():
        analytic = p.grad.detach().clone()
        numeric = torch.zeros_like(p)
        flat_p, flat_n = p.data.view(-1), numeric.view(-1)
        with torch.no_grad():
            for i in range(flat_p.numel()):
                orig = flat_p[i].item()
                flat_p[i] = orig + h
                up = objective().item()
                flat_p[i] = orig - h
                down = objective().item()
                flat_p[i] = orig
                flat_n[i] = (up - down) / (2 * h)
        scale = max(float(numeric.norm()), float(analytic.norm()))
        errors[name] = 0.0 if scale == 0.0 else float((numeric - analytic).norm()) / scale
    return errors


def brute_force_std(trials):
    """Per-pixel sample std by explicit loops (n - 1 denominator)."""
    n = len(trials)
    flat = [t.double().reshape(-1).tolist() for t in trials]
    out = []
    for j in range(len(flat[0])):
        vals = [flat[k][j] for k in range(n)]
        mean = sum(vals) / n
        out.append(math.sqrt(sum((v - mean) ** 2 for v in vals) / (n - 1)))
    return torch.tensor(out, dtype=torch.float64).reshape(trials[0].shape), sum(out) / len(out)


def least_squares_affine(x, y):
    """Closed-form (slope, intercept) of the ordinary least-squares line."""
    x = x.double().reshape(-1)
    y = y.double().reshape(-1)
    xm, ym = x.mean(), y.mean()
    slope = ((x - xm) * (y - ym)).sum() / ((x - xm) ** 2).sum()
    return float(slope), float(ym - slope * xm)
