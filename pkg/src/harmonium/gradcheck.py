"""Central finite-difference gradients, evaluated in batches.

For each parameter tensor a stack of perturbed copies is built (one +h and
one -h copy per entry) and passed through the loss in a single call; the loss
function must broadcast a leading batch axis on that parameter and return one
loss value per copy.  Only forward evaluations are used, so the result is an
oracle independent of the reverse-mode path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ELEMENT_BUDGET = 12_000_000


def fd_gradients(loss_fn, params: dict[str, np.ndarray], h: float = 1e-4,
                 names=None, activation_size: int = 0) -> dict[str, np.ndarray]:
    """``loss_fn(params) -> (P,)`` per-copy losses; returns d loss / d param by central differences."""
    out = {}
    for name in names or params:
        p = np.asarray(params[name], dtype=np.float64)
        n = p.size
        chunk = max(1, min(n, ELEMENT_BUDGET // (2 * (n + activation_size))))
        grad = np.empty(n)
        for start in range(0, n, chunk):
            idx = np.arange(start, min(n, start + chunk))
            c = idx.size
            stack = np.repeat(p.reshape(1, n), 2 * c, axis=0)
            stack[np.arange(c), idx] += h
            stack[c + np.arange(c), idx] -= h
            vals = np.asarray(loss_fn({**params, name: stack.reshape((2 * c,) + p.shape)}), dtype=np.float64)
            if vals.shape != (2 * c,):
                raise ValueError(f"loss_fn returned shape {vals.shape}, expected {(2 * c,)}")
            grad[idx] = (vals[:c] - vals[c:]) / (2.0 * h)
        out[name] = grad.reshape(p.shape)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class GradCheckReport:
    per_parameter: dict[str, float]
    n_checked: int
    floor: float
    h: float

    @property
    def max_error(self) -> float:
        return max(self.per_parameter.values()) if self.per_parameter else 0.0

    @property
    def worst(self) -> str:
        return max(self.per_parameter, key=self.per_parameter.get)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error <= tol


def compare(analytic: dict, numeric: dict, floor: float = 1e-8, h: float = 1e-4) -> GradCheckReport:
    per = {k: float(relative_error(analytic[k], numeric[k], floor).max()) for k in numeric}
    return GradCheckReport(per, int(sum(np.size(v) for v in numeric.values())), floor, h)
