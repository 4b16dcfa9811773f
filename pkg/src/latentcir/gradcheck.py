"""Central finite-difference verification of analytic gradients.

The check perturbs parameters in place, re-evaluates the loss closure in
forward-only mode, and compares the centered difference quotient against
the gradient produced by ``backward()``. Agreement is scored per named
parameter group as a norm-relative error,

    err(group) = max_i |analytic_i - fd_i| / max(max_i |fd_i|, max_i |analytic_i|, floor)

over the checked coordinates, which keeps the score well conditioned when a
few individual coordinates carry tiny gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad

__all__ = ["GroupGradReport", "GradCheckReport", "finite_difference_grad", "check_gradients"]


@dataclass
class GroupGradReport:
    name: str
    n_checked: int
    rel_error: float
    max_analytic: float
    max_fd: float


@dataclass
class GradCheckReport:
    groups: list[GroupGradReport] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((g.rel_error for g in self.groups), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def worst(self) -> GroupGradReport:
        return max(self.groups, key=lambda g: g.rel_error)


def finite_difference_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Dense centered-difference gradient of scalar ``fn(x)`` (for small x)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fplus = fn(x)
        flat[i] = orig - h
        fminus = fn(x)
        flat[i] = orig
        gflat[i] = (fplus - fminus) / (2.0 * h)
    return grad


def check_gradients(
    loss_fn,
    params: dict[str, Tensor],
    h: float = 1e-5,
    max_coords_per_group: int | None = None,
    rng: np.random.Generator | None = None,
    tolerance: float = 1e-4,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare ``backward()`` gradients of ``loss_fn()`` against centered
    finite differences for every parameter group in ``params``.

    ``loss_fn`` must re-read the current parameter values on every call.
    Large groups may be subsampled (``max_coords_per_group``) with coordinates
    drawn from ``rng``; small groups are always checked exhaustively.
    """
    if rng is None:
        rng = np.random.default_rng(0)

    for p in params.values():
        p.grad = None
    loss = loss_fn()
    if not isinstance(loss, Tensor):
        raise TypeError("loss_fn must return a Tensor scalar")
    loss.backward()
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else np.array(p.grad))
        for name, p in params.items()
    }

    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_group is not None and n > max_coords_per_group:
            coords = rng.choice(n, size=max_coords_per_group, replace=False)
            coords.sort()
        else:
            coords = np.arange(n)
        a = analytic[name].reshape(-1)[coords]
        fd = np.empty(len(coords), dtype=np.float64)
        with no_grad():
            for k, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + h
                fplus = loss_fn().item()
                flat[i] = orig - h
                fminus = loss_fn().item()
                flat[i] = orig
                fd[k] = (fplus - fminus) / (2.0 * h)
        denom = max(np.abs(fd).max(initial=0.0), np.abs(a).max(initial=0.0), floor)
        rel = float(np.abs(a - fd).max(initial=0.0) / denom)
        report.groups.append(
            GroupGradReport(
                name=name,
                n_checked=len(coords),
                rel_error=rel,
                max_analytic=float(np.abs(a).max(initial=0.0)),
                max_fd=float(np.abs(fd).max(initial=0.0)),
            )
        )
    return report
