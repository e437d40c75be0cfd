"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_tensor: Dict[str, float] = field(default_factory=dict)
    checked: int = 0
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise.

    The floor keeps coordinates whose true gradient is ~0 from dividing
    round-off by round-off.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numerical_gradient(f: Callable[[], float], x: Tensor, step: float = 1e-5,
                       coords: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``x.data`` (modified in place, then restored)."""
    flat = x.data.reshape(-1)
    out = np.full(flat.shape, np.nan) if coords is not None else np.empty(flat.shape)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + step
        hi = float(f())
        flat[i] = old - step
        lo = float(f())
        flat[i] = old
        out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(x.shape)


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor], Dict[str, Tensor]],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() of the scalar ``f()`` against central differences.

    ``x`` is one tensor, a list, or a name->tensor mapping; ``f`` takes no
    arguments and must rebuild its graph on every call. When ``max_coords`` is
    set, at most that many coordinates per tensor are probed (seeded choice).
    """
    if isinstance(x, Tensor):
        named = {"x": x}
    elif isinstance(x, dict):
        named = dict(x)
    else:
        named = {f"x{i}": t for i, t in enumerate(x)}

    saved_flags = {k: t.requires_grad for k, t in named.items()}
    for t in named.values():
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    loss = f()
    loss.backward()
    analytic = {k: t.grad.copy() for k, t in named.items()}

    def value():
        return f().item()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_err=0.0, tolerance=tolerance)
    for k, t in named.items():
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        numeric = numerical_gradient(value, t, step=step, coords=coords)
        a = analytic[k].reshape(-1)
        n = numeric.reshape(-1)
        sel = np.arange(t.size) if coords is None else coords
        err = float(relative_error(a[sel], n[sel], floor).max()) if len(sel) else 0.0
        report.per_tensor[k] = err
        report.checked += len(sel)
        report.max_rel_err = max(report.max_rel_err, err)
    for k, t in named.items():
        t.requires_grad = saved_flags[k]
        t.grad = None
    return report
