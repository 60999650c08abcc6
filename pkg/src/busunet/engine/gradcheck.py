"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..errors import UsageError
from .tensor import Tensor, backward


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    checked: int
    passed: bool
    reprobed: int = 0


@dataclass
class GradcheckReport:
    tolerance: float
    entries: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def format(self) -> str:
        lines = [f"{'parameter':<44} {'checked':>7} {'reprobed':>8} {'max_rel_err':>12}  status"]
        for e in self.entries:
            lines.append(f"{e.name:<44} {e.checked:>7d} {e.reprobed:>8d} {e.max_rel_error:>12.3e}  "
                         f"{'PASS' if e.passed else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_checks: int | None = None,
    seed: int = 0,
    refine: int = 2,
) -> GradcheckReport:
    """Compare backprop gradients against central differences.

    ``loss_fn`` must rebuild the graph from ``params`` on every call and
    return a scalar. All parameters must be float64. When ``max_checks`` is
    set, at most that many randomly chosen elements of each parameter are
    probed; otherwise every element is.

    A probe whose interval straddles a ReLU kink gives a meaningless
    difference quotient. Elements that fail are therefore re-probed up to
    ``refine`` times, each with a step ten times smaller, and keep their best
    error. A wrong gradient fails at every step size.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise UsageError(f"gradcheck requires float64 parameters; {name} is {p.dtype}")
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    backward(loss, params.values())
    analytic = {name: p.grad.copy() for name, p in params.items()}

    rng = np.random.default_rng(seed)
    report = GradcheckReport(tolerance=tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if max_checks is not None and flat.size > max_checks:
            picks = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        else:
            picks = np.arange(flat.size)
        grad = analytic[name].reshape(-1)[picks]

        def central(i, h):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            return (up - down) / (2 * h)

        err = relative_error(grad, np.array([central(i, step) for i in picks]))
        reprobed = 0
        for k in np.flatnonzero(err > tolerance):
            reprobed += 1
            h = step
            for _ in range(refine):
                h /= 10
                err[k] = min(err[k], relative_error(grad[k : k + 1], np.array([central(picks[k], h)]))[0])
                if err[k] <= tolerance:
                    break
        worst = float(err.max()) if err.size else 0.0
        report.entries.append(ParamCheck(name, worst, len(picks), worst <= tolerance, reprobed))
    return report
