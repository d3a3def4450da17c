"""Central finite-difference oracle for the analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import OracleError
from .tensor import Parameter, Tensor, record_kinks

FD_STEP = 1e-4


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int          # coordinates whose stencil crossed a ReLU/clamp boundary
    worst_param: str | None = None


def gradient_report(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = FD_STEP,
    seed: int = 0,
    max_coords: int = 24,
) -> GradCheckReport:
    """Compare backprop against central differences in double precision.

    ``f`` must be a deterministic closure over ``params`` returning a scalar.
    Parameters are promoted to float64 for the duration of the check and
    restored afterwards.  Up to ``max_coords`` coordinates per parameter are
    sampled; the error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.

    A coordinate is skipped when ``f(x + h)`` and ``f(x - h)`` take different
    branches of a piecewise op, since the central difference then straddles
    a kink and estimates no derivative at all.
    """
    saved = [p.data for p in params]
    rng = np.random.default_rng(seed)
    worst, worst_name, checked, skipped = 0.0, None, 0, 0
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = np.zeros_like(p.data)
        out = f()
        if not np.all(np.isfinite(out.data)):
            raise OracleError("objective is not finite at the base point")
        out.backward()
        analytic = [p.grad.copy() for p in params]

        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                with record_kinks() as plus_branches:
                    fp = float(f().data)
                flat[i] = orig - step
                with record_kinks() as minus_branches:
                    fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise OracleError(f"objective not finite while perturbing {p.name}[{i}]")
                if plus_branches != minus_branches:
                    skipped += 1
                    continue
                numeric = (fp - fm) / (2 * step)
                err = abs(ga.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                checked += 1
                if err > worst:
                    worst, worst_name = err, f"{p.name}[{i}]"
    finally:
        for p, d in zip(params, saved):
            p.data = d
            p.grad = np.zeros_like(d)
    if checked == 0:
        raise OracleError("every sampled coordinate straddled a kink")
    return GradCheckReport(worst, checked, skipped, worst_name)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = FD_STEP,
    seed: int = 0,
    max_coords: int = 24,
) -> float:
    """Max relative gradient error; see :func:`gradient_report`."""
    return gradient_report(f, params, step, seed, max_coords).max_rel_error
