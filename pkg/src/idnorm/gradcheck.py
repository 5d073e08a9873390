"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error < self.tolerance

    def worst(self):
        if not self.errors:
            return None
        return max(self.errors.items(), key=lambda kv: kv[1])

    def __str__(self):
        name, err = self.worst() or ("-", 0.0)
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max rel err {err:.3e} ({name}), tol {self.tolerance:.0e}"


# Central differences at h = 1e-5 carry roughly 1e-11 of roundoff per entry,
# so a gradient that is exactly zero can never match to relative precision.
# Below this norm the comparison turns into an absolute one.
SCALE_FLOOR = 1e-6


def relative_error(analytic, numeric, floor=SCALE_FLOOR):
    """Normwise relative error ||a - n|| / max(||a||, ||n||, floor)."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def _evaluate(builder):
    loss = builder()
    value = float(np.asarray(loss.data).reshape(()))
    if not np.isfinite(value):
        raise EvaluationError(f"gradient check loss is not finite: {value}")
    return loss, value


def check_gradients(builder, params, tolerance=1e-4, h=1e-5, max_entries=None, rng=None):
    """Compare backward() gradients with central differences.

    ``builder`` is a zero-argument callable returning a scalar Value computed
    from ``params`` (a dict name -> Value, or a list). For large tensors,
    ``max_entries`` probes a random subset of coordinates per parameter.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.zero_grad()
    loss, _ = _evaluate(builder)
    loss.backward()
    report = GradCheckReport(tolerance=tolerance)
    rng = rng if rng is not None else np.random.default_rng(0)

    for name, p in params.items():
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            _, up = _evaluate(builder)
            flat[i] = orig - h
            _, down = _evaluate(builder)
            flat[i] = orig
            numeric[j] = (up - down) / (2.0 * h)
        report.errors[name] = relative_error(analytic.reshape(-1)[idx], numeric)
    return report
