"""Central-difference gradient checking against analytic backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .optim import GradBag
from .params import ParamSet


@dataclass
class GradCheckReport:
    max_rel_err: float
    num_coords: int
    per_tensor: dict[str, float] = field(default_factory=dict)


def grad_check(loss_and_grad, params: ParamSet, names: list[str] | None = None,
               num_coords: int = 40, h: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with (f(x+h)-f(x-h))/(2h) at sampled coordinates.

    loss_and_grad(params) must return (scalar_loss, GradBag) and be deterministic.
    Use float64 parameters; float32 round-off swamps the h=1e-4 stencil.
    """
    if params.dtype != np.float64:
        raise ValueError("grad_check requires float64 parameters")
    _, grads = loss_and_grad(params)
    if names is None:
        names = grads.names()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_err=0.0, num_coords=0)
    for name in names:
        arr = params[name]
        analytic = grads.materialize(name, arr.shape, arr.dtype)
        flat = arr.reshape(-1)
        n = flat.shape[0]
        coords = rng.choice(n, size=min(num_coords, n), replace=False)
        worst = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            loss_plus, _ = loss_and_grad(params)
            flat[idx] = orig - h
            loss_minus, _ = loss_and_grad(params)
            flat[idx] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            a = float(analytic.reshape(-1)[idx])
            rel = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-8)
            worst = max(worst, rel)
            report.num_coords += 1
        report.per_tensor[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
