"""Finite-difference verification of analytic gradients.

The checker perturbs every entry of every trainable parameter and re-runs
the forward pass only, so its numbers are independent of the backward rules
it is judging. Everything runs in float64; the default step of 1e-5 keeps
central-difference truncation and roundoff both far below the tolerances
used in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad

# entries where analytic and numeric gradients are both below this are
# compared against the floor instead of each other (0 vs FD noise)
REL_ERR_FLOOR = 1e-6


@dataclass
class ParamCheck:
    param_id: str
    max_rel_err: float
    worst_index: int
    analytic: float
    numeric: float
    passed: bool


@dataclass
class GradCheckReport:
    step: float
    tol: float
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def failures(self):
        return [c.param_id for c in self.checks if not c.passed]

    def max_rel_err(self):
        return max((c.max_rel_err for c in self.checks), default=0.0)

    def summary(self):
        lines = [f"grad check: step={self.step:g} tol={self.tol:g}"]
        for c in self.checks:
            status = "ok" if c.passed else "FAIL"
            lines.append(
                f"  {status:4s} {c.param_id:40s} max_rel_err={c.max_rel_err:.3e}"
                f" (analytic={c.analytic:.6e} fd={c.numeric:.6e} at entry {c.worst_index})"
            )
        return "\n".join(lines)


class GradCheckError(AssertionError):
    """Raised by `grad_check(..., raise_on_failure=True)` naming the offenders."""


def _rel_err(a, f):
    denom = max(abs(a), abs(f), REL_ERR_FLOOR)
    return abs(a - f) / denom


def grad_check(model, loss_fn, inputs, step=1e-5, tol=1e-4, raise_on_failure=False):
    """Compare analytic grads of every trainable parameter entry against
    central finite differences of `loss_fn(model, inputs)`.

    `model` needs `.parameters()`; `loss_fn` must return a scalar Tensor.
    """
    params = [p for p in model.parameters() if p.trainable]
    for p in params:
        p.value.zero_grad()
    loss = loss_fn(model, inputs)
    loss.backward()
    analytic = {
        p.id: (np.zeros(p.size) if p.value.grad is None else p.value.grad.reshape(-1).copy())
        for p in params
    }

    report = GradCheckReport(step=step, tol=tol)
    with no_grad():
        for p in params:
            flat = p.value.data.reshape(-1)
            worst = (0.0, 0, 0.0, 0.0)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = loss_fn(model, inputs).item()
                flat[i] = orig - step
                down = loss_fn(model, inputs).item()
                flat[i] = orig
                fd = (up - down) / (2.0 * step)
                err = _rel_err(analytic[p.id][i], fd)
                if err >= worst[0]:
                    worst = (err, i, analytic[p.id][i], fd)
            err, idx, ana, fd = worst
            report.checks.append(
                ParamCheck(p.id, err, idx, ana, fd, passed=err <= tol)
            )

    if raise_on_failure and not report.passed:
        raise GradCheckError(f"gradient check failed for: {', '.join(report.failures)}")
    return report
