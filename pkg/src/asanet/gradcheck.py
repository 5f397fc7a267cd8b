"""Central finite-difference oracle for checking ``Tensor.backward``."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericalInstabilityError
from .tensor import Tensor, no_grad


@dataclass
class GradReport:
    max_abs_error: List[float]
    max_rel_error: List[float]
    tolerance: float
    names: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.names, self.max_rel_error))

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max rel err {self.worst:.3e} (tol {self.tolerance:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    names: Optional[Sequence[str]] = None,
) -> GradReport:
    """Compare ``backward`` of ``f(*inputs)`` against central differences.

    ``inputs`` must be float64 tensors with ``requires_grad``.  When
    ``max_coords`` is given, each input is probed at that many randomly chosen
    coordinates instead of all of them.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("finite_diff_check needs float64 inputs")
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ContractError(f"f must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = rng if rng is not None else np.random.default_rng(0)
    abs_errs, rel_errs = [], []
    with no_grad():
        for ti, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            else:
                coords = np.arange(flat.size)
            numeric = np.empty(coords.size)
            for j, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + eps
                fp = f(*inputs).item()
                flat[c] = orig - eps
                fm = f(*inputs).item()
                flat[c] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericalInstabilityError(
                        f"non-finite f value at input {ti}, coordinate {tuple(int(i) for i in np.unravel_index(c, t.shape))}"
                    )
                numeric[j] = (fp - fm) / (2.0 * eps)
            a = analytic[ti].reshape(-1)[coords]
            abs_errs.append(float(np.max(np.abs(a - numeric), initial=0.0)))
            rel_errs.append(float(np.max(relative_error(a, numeric), initial=0.0)))
    labels = list(names) if names is not None else [str(i) for i in range(len(inputs))]
    return GradReport(abs_errs, rel_errs, tol, labels)
