"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, clear_tape, no_grad

@dataclass
class GradCheckReport:
    max_rel_err: float
    mean_rel_err: float
    n_checked: int
    n_nonfinite: int
    worst: tuple[int, int] | None = None  # (param index, flat element index)
    per_param_max: list[float] = field(default_factory=list)

    def passed(self, tolerance: float) -> bool:
        return self.n_nonfinite == 0 and self.max_rel_err <= tolerance


def _rel_err(ad: float, fd: float, floor: float) -> float:
    # Coordinates far below the gradient's overall scale are compared
    # against the floor; central differences cannot resolve them relative
    # to themselves (cancellation noise is absolute in f).
    return abs(ad - fd) / max(abs(ad), abs(fd), floor)


def gradient_check(f: Callable[[], Tensor],
                   params: Sequence[Tensor],
                   step: float = 1e-5,
                   elements_per_param: int | None = None,
                   rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare backward() gradients of f against central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    tensor. When ``elements_per_param`` is given, only that many randomly
    chosen coordinates per parameter are perturbed (large composite losses);
    otherwise every coordinate is checked. Non-finite comparisons are
    counted in the report, never raised.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    clear_tape()
    loss = f()
    backward(loss)
    grads = [np.array(p.grad) for p in params]
    scale = max([1.0] + [float(np.max(np.abs(g))) for g in grads])
    floor = 1e-3 * scale

    errs: list[float] = []
    nonfinite = 0
    worst = None
    worst_err = -1.0
    per_param_max = []
    with no_grad():
        for pi, p in enumerate(params):
            flat = p.values.reshape(-1)
            n = flat.size
            if elements_per_param is not None and elements_per_param < n:
                idxs = rng.choice(n, size=elements_per_param, replace=False)
            else:
                idxs = np.arange(n)
            pmax = 0.0
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + step
                f_plus = float(f().values)
                flat[i] = orig - step
                f_minus = float(f().values)
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * step)
                ad = grads[pi].reshape(-1)[i]
                if not (np.isfinite(fd) and np.isfinite(ad)):
                    nonfinite += 1
                    continue
                e = _rel_err(ad, fd, floor)
                errs.append(e)
                pmax = max(pmax, e)
                if e > worst_err:
                    worst_err = e
                    worst = (pi, int(i))
            per_param_max.append(pmax)
    clear_tape()
    return GradCheckReport(
        max_rel_err=max(errs) if errs else 0.0,
        mean_rel_err=float(np.mean(errs)) if errs else 0.0,
        n_checked=len(errs),
        n_nonfinite=nonfinite,
        worst=worst,
        per_param_max=per_param_max,
    )
