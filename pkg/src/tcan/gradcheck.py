"""Central finite-difference validation of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, precision


@dataclass
class CoordinateCheck:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float
    step: float = 0.0


@dataclass
class GradCheckReport:
    tol: float
    eps: float
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.rel_error <= self.tol for c in self.checks)

    @property
    def n_failed(self) -> int:
        return sum(c.rel_error > self.tol for c in self.checks)

    def worst(self, k: int = 5) -> list:
        return sorted(self.checks, key=lambda c: -c.rel_error)[:k]

    def worst_by_group(self, depth: int = 2) -> dict:
        """Largest relative error per parameter group (name prefix of ``depth`` parts)."""
        out: dict = {}
        for c in self.checks:
            group = ".".join(c.name.split(".")[:depth])
            if group not in out or c.rel_error > out[group].rel_error:
                out[group] = c
        return out

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{status}: {len(self.checks) - self.n_failed}/{len(self.checks)} coordinates "
                 f"within rel. {self.tol:g} (eps={self.eps:g})"]
        for c in self.worst():
            lines.append(f"  {c.name}{list(c.index)}: analytic={c.analytic:.6g} "
                         f"numeric={c.numeric:.6g} rel={c.rel_error:.3g}")
        return "\n".join(lines)


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-3,
               tol: float = 1e-3, n_samples: int | None = 100, seed: int = 0,
               dtype=np.float64) -> GradCheckReport:
    """Compare backward gradients of the scalar ``f()`` with central differences.

    ``f`` must rebuild its computation from ``params`` on every call. When
    ``n_samples`` is given, that many coordinates are drawn uniformly from all
    parameter entries; otherwise every coordinate is checked. The error measure
    is ``|analytic - numeric| / max(1, |numeric|)``.

    The check runs in ``dtype`` (float64 by default): in float32 the rounding
    error of a difference quotient with ``eps=1e-3`` is itself close to 1e-3.
    Parameters are restored to their original arrays afterwards. A coordinate
    that fails while its two one-sided quotients disagree has a kink (ReLU or
    absolute value switching) inside the step; it is re-checked with the step
    shrunk tenfold, at most twice, and the step finally used is recorded.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-4, 1e-2], got {eps}")
    names = list(params)
    saved = {n: params[n].data for n in names}
    try:
        with precision(dtype):
            for n in names:
                params[n].data = saved[n].astype(dtype)
            return _check(f, params, names, eps, tol, n_samples, seed)
    finally:
        for n in names:
            params[n].data = saved[n]
            params[n].grad = None


def _check(f, params, names, eps, tol, n_samples, seed) -> GradCheckReport:
    for n in names:
        params[n].grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    base = float(loss.data)
    analytic = {n: (params[n].grad.copy() if params[n].grad is not None
                    else np.zeros_like(params[n].data)) for n in names}

    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    if n_samples is None or n_samples >= total:
        flat = np.arange(total)
    else:
        flat = np.sort(np.random.default_rng(seed).choice(total, size=n_samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    report = GradCheckReport(tol=tol, eps=eps)
    for pos in flat:
        which = int(np.searchsorted(offsets, pos, side="right") - 1)
        name = names[which]
        p = params[name]
        idx = np.unravel_index(int(pos - offsets[which]), p.shape) if p.ndim else ()
        a = float(analytic[name][idx])
        step = eps
        for _ in range(3):
            numeric, kink = _difference(f, p, idx, step, base, tol)
            rel = abs(a - numeric) / max(1.0, abs(numeric))
            if rel <= tol or not kink:
                break
            step /= 10
        report.checks.append(CoordinateCheck(name, tuple(int(i) for i in idx), a, numeric, rel,
                                             step))
    return report


def _difference(f, p: Tensor, idx, step: float, base: float, tol: float) -> tuple:
    """Central quotient at ``idx`` and whether the one-sided quotients disagree."""
    original = p.data[idx].copy()
    hi, lo = original + step, original - step
    p.data[idx] = hi
    up = float(f().data)
    p.data[idx] = lo
    down = float(f().data)
    p.data[idx] = original
    h_up, h_down = float(hi - original), float(original - lo)
    numeric = (up - down) / (h_up + h_down)
    forward, backward = (up - base) / h_up, (base - down) / h_down
    kink = abs(forward - backward) > tol * max(1.0, abs(numeric))
    return numeric, kink
