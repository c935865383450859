"""Central-difference gradient verification.

There is no autodiff tape in this package: every learnable operation
declares its own analytic backward pass, and this checker is the sole
arbiter of whether a declared gradient is correct.  Relative error uses
the denominator max(1, |analytic|, |numeric|) so near-zero gradients do
not blow the ratio up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GradReport:
    max_relative_error: float
    worst_coordinate: int
    passed: bool
    step_size: float
    note: str = ""

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        msg = (
            f"gradcheck {status}: max_rel_err={self.max_relative_error:.3e} "
            f"at coord {self.worst_coordinate} (step={self.step_size:g})"
        )
        return msg + (f" [{self.note}]" if self.note else "")


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return np.abs(a - n) / denom


def check_gradient(fn, point, analytic_gradient, step=1e-6, tolerance=1e-5,
                   coords=None) -> GradReport:
    """Compare an analytic gradient against central differences.

    fn maps a flat float64 vector to a scalar; point is the evaluation
    location (must be away from any non-smooth loci, which is the
    caller's responsibility).  coords optionally restricts the check to a
    subset of coordinates; by default every coordinate is probed with two
    fn evaluations each.  A non-finite fn value yields an explicit
    failure report rather than a silent pass.
    """
    x = np.asarray(point, dtype=np.float64).ravel().copy()
    g = np.asarray(analytic_gradient, dtype=np.float64).ravel()
    if x.shape != g.shape:
        raise ValueError("point and analytic_gradient must have the same size")
    if coords is None:
        coords = range(x.size)

    worst_err = 0.0
    worst_coord = 0
    for c in coords:
        e = np.zeros_like(x)
        e[c] = step
        f_plus = float(fn(x + e))
        f_minus = float(fn(x - e))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            return GradReport(
                max_relative_error=np.inf,
                worst_coordinate=int(c),
                passed=False,
                step_size=float(step),
                note="non-finite fn evaluation",
            )
        numeric = (f_plus - f_minus) / (2.0 * step)
        err = float(relative_error(g[c], numeric))
        if err > worst_err:
            worst_err = err
            worst_coord = int(c)
    return GradReport(
        max_relative_error=worst_err,
        worst_coordinate=worst_coord,
        passed=worst_err <= tolerance,
        step_size=float(step),
    )


def directional_check(fn, point, analytic_gradient, direction, step=1e-6,
                      tolerance=1e-5) -> GradReport:
    """Check <grad, v> against a central difference along direction v.

    One finite-difference pair covers every coordinate at once; useful as
    a cheap whole-tensor screen before (or instead of) per-coordinate
    probing on large parameter blocks.
    """
    x = np.asarray(point, dtype=np.float64).ravel()
    g = np.asarray(analytic_gradient, dtype=np.float64).ravel()
    v = np.asarray(direction, dtype=np.float64).ravel()
    v = v / np.linalg.norm(v)
    f_plus = float(fn(x + step * v))
    f_minus = float(fn(x - step * v))
    if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
        return GradReport(np.inf, -1, False, float(step), "non-finite fn evaluation")
    numeric = (f_plus - f_minus) / (2.0 * step)
    analytic = float(g @ v)
    err = float(relative_error(analytic, numeric))
    return GradReport(err, -1, err <= tolerance, float(step), "directional")
