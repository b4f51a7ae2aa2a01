"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, StateError
from .tensor import no_grad, recording, replay, topological_order


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    worst_index: dict[str, tuple] = field(default_factory=dict)
    tol: float = 1e-3

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def table(self) -> str:
        width = max((len(n) for n in self.errors), default=4)
        lines = [f"{'parameter':<{width}}  max_rel_err  status"]
        for name, err in self.errors.items():
            status = "ok" if err < self.tol else "FAIL"
            lines.append(f"{name:<{width}}  {err:11.3e}  {status}")
        return "\n".join(lines)


def relative_error(a, n):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def _evaluate(f, store) -> float:
    with no_grad():
        val = f(store).item()
    if not np.isfinite(val):
        raise NumericalError("loss is not finite during finite-difference evaluation")
    return val


def _finite(val: float) -> float:
    if not np.isfinite(val):
        raise NumericalError("loss is not finite during finite-difference evaluation")
    return val


def _smooth_difference(order, param, flat, i, eps, min_eps):
    """Central difference at entry ``i``, shrinking the step while it crosses a ReLU kink."""
    orig = flat[i]
    while True:
        kinks: list = []
        flat[i] = orig + eps
        fp = _finite(replay(order, [param], kinks).item())
        flat[i] = orig - eps
        fm = _finite(replay(order, [param], kinks).item())
        flat[i] = orig
        if not kinks or eps / 10 < min_eps:
            return (fp - fm) / (2 * eps)
        eps /= 10


def grad_check(f, store, eps: float = 1e-5, tol: float = 1e-3, names=None,
               incremental: bool = True, min_eps: float = 1e-8) -> GradCheckReport:
    """Compare backprop gradients of ``f(store)`` with central differences.

    Every scalar entry of every selected parameter is perturbed by ``±eps``.
    Requires a float64 store.

    With ``incremental`` the first forward pass is recorded and each perturbed
    loss recomputes only the ops downstream of the perturbed parameter. This
    gives the same values as calling ``f`` again, provided ``f`` builds its
    result purely from tape ops on the store (no hidden state, no raw numpy
    math on parameter data). It also makes the check kink-aware: when the
    ``±eps`` step flips any ReLU on or off, the loss is not smooth on that
    interval and the entry is retried with a step ten times smaller, down to
    ``min_eps``.
    """
    if store.dtype != np.float64:
        raise StateError("grad_check needs a float64 parameter store")
    names = list(names) if names is not None else store.names()
    store.zero_grad()
    with recording():
        loss = f(store)
    if not np.isfinite(loss.item()):
        raise NumericalError("loss is not finite")
    order = topological_order(loss) if incremental else None
    loss.backward()
    report = GradCheckReport(tol=tol)
    for name in names:
        p = store[name]
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            if incremental:
                numeric[i] = _smooth_difference(order, p, flat, i, eps, min_eps)
                continue
            orig = flat[i]
            flat[i] = orig + eps
            fp = _evaluate(f, store)
            flat[i] = orig - eps
            fm = _evaluate(f, store)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * eps)
        err = relative_error(analytic.reshape(-1), numeric)
        worst = int(np.argmax(err)) if err.size else 0
        report.errors[name] = float(err[worst]) if err.size else 0.0
        report.worst_index[name] = np.unravel_index(worst, p.shape) if p.ndim else ()
    store.zero_grad()
    return report
