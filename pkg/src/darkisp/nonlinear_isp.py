"""Tone stretch from a fixed family of concave polynomial bases mixed by
per-pixel coefficient maps predicted with a small conv net."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import IndexOutOfRange, ShapeMismatch
from .tensor import Tensor

DEFAULT_ORDER = 8
MAX_ORDER = 12


def default_basis_table(order: int = DEFAULT_ORDER) -> np.ndarray:
    """Coefficients (ascending powers) of f_0 = 1 and f_k(x) = 1 - (1 - x)^k."""
    if not 1 <= order <= MAX_ORDER:
        raise ValueError(f"order must be in 1..{MAX_ORDER}, got {order}")
    table = np.zeros((order + 1, order + 1))
    table[0, 0] = 1.0
    for k in range(1, order + 1):
        for j in range(1, k + 1):
            table[k, j] = (-1.0) ** (j + 1) * math.comb(k, j)
    return table


def horner(coeffs: np.ndarray, x):
    y = np.zeros_like(np.asarray(x, dtype=np.float64))
    for c in coeffs[::-1]:
        y = y * x + c
    return y


def _derivative(coeffs: np.ndarray) -> np.ndarray:
    if coeffs.size <= 1:
        return np.zeros(1)
    return coeffs[1:] * np.arange(1, coeffs.size)


@dataclass(frozen=True)
class BasisFamily:
    """Basis polynomials f_0..f_n stored as a (n+1) x (n+1) ascending-power table.

    With ``skip_mode`` the evaluated functions are g_k(x) = f_k(x) - x.
    """

    table: np.ndarray
    skip_mode: bool = True

    def __post_init__(self):
        t = np.array(self.table, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] < 2:
            raise ValueError(f"basis table must be (n+1) x m with n >= 1, got shape {t.shape}")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @classmethod
    def default(cls, order: int = DEFAULT_ORDER, skip_mode: bool = True) -> "BasisFamily":
        return cls(default_basis_table(order), skip_mode)

    @classmethod
    def from_json(cls, path, skip_mode: bool = True) -> "BasisFamily":
        rows = json.loads(Path(path).read_text())
        width = max(len(r) for r in rows)
        table = np.zeros((len(rows), width))
        for i, r in enumerate(rows):
            table[i, : len(r)] = r
        return cls(table, skip_mode)

    def to_list(self) -> list[list[float]]:
        return self.table.tolist()

    @property
    def order(self) -> int:
        return self.table.shape[0] - 1

    def degree(self, k: int) -> int:
        nz = np.nonzero(self.table[k])[0]
        return int(nz[-1]) if nz.size else 0

    def _check(self, k: int) -> None:
        if not 0 <= k <= self.order:
            raise IndexOutOfRange(f"basis index {k} outside 0..{self.order}")

    def f(self, k: int, x):
        self._check(k)
        return horner(self.table[k], x)

    def df(self, k: int, x):
        self._check(k)
        return horner(_derivative(self.table[k]), x)

    def d2f(self, k: int, x):
        self._check(k)
        return horner(_derivative(_derivative(self.table[k])), x)

    def values(self, x) -> np.ndarray:
        """All (skip-adjusted) basis values stacked on a new leading axis."""
        x = np.asarray(x, dtype=np.float64)
        out = np.stack([horner(c, x) for c in self.table])
        return out - x if self.skip_mode else out

    def slopes(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.stack([horner(_derivative(c), x) for c in self.table])
        return out - 1.0 if self.skip_mode else out


def basis_eval(family: BasisFamily, k: int, x: float) -> float:
    v = family.f(k, float(x))
    return float(v - x) if family.skip_mode else float(v)


def check_basis(family: BasisFamily, grid: int = 1001) -> list[str]:
    """Return the violated shape constraints of a family (empty when valid)."""
    problems = []
    xs = np.linspace(0.0, 1.0, grid)
    if not np.allclose(family.f(0, xs), 1.0, rtol=0, atol=1e-12):
        problems.append("f_0 is not identically 1")
    for k in range(1, family.order + 1):
        f = family.f(k, xs)
        if abs(family.f(k, 0.0)) > 1e-12 or abs(family.f(k, 1.0) - 1.0) > 1e-12:
            problems.append(f"f_{k} misses (0,0) or (1,1)")
        if np.diff(f).min() < -1e-12:
            problems.append(f"f_{k} decreases on [0,1]")
        if family.degree(k) != k:
            problems.append(f"f_{k} has degree {family.degree(k)}")
        if k >= 2:
            if np.diff(f, 2).max() > 1e-9 or family.d2f(k, xs).max() > 1e-9:
                problems.append(f"f_{k} is not concave on [0,1]")
    return problems


def basis_stack(x: Tensor, family: BasisFamily) -> Tensor:
    """(n+1, *x.shape) tensor of basis values at x, differentiable in x."""
    slopes = family.slopes(x.data)

    def backward(g):
        return ((g * slopes).sum(axis=0),)

    return T.make_op(family.values(x.data), (x,), backward, "basis_stack")


def init_coeff_params(rng: np.random.Generator, order: int = DEFAULT_ORDER, width: int = 16,
                      prefix: str = "nonlinear") -> dict[str, Tensor]:
    def conv(cout, cin, zero=False):
        w = np.zeros((cout, cin, 3, 3)) if zero else rng.standard_normal((cout, cin, 3, 3)) * math.sqrt(2.0 / (cin * 9))
        return Tensor(w, requires_grad=True), Tensor(np.zeros(cout), requires_grad=True)

    p = {}
    for name, shape, zero in (("conv1", (width, 3), False), ("conv2", (width, width), False),
                              ("conv3", (order + 1, width), True)):
        p[f"{prefix}.{name}.weight"], p[f"{prefix}.{name}.bias"] = conv(*shape, zero=zero)
    return p


def predict_coefficients(img: Tensor, params: dict[str, Tensor], prefix: str = "nonlinear") -> Tensor:
    """(n+1) x H x W coefficient maps from the linear-stage output."""
    if img.data.ndim != 3 or img.shape[0] != 3:
        raise ShapeMismatch(f"coefficient net expects 3 x H x W, got {img.shape}")
    x = T.relu(T.conv2d_3x3(img, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"]))
    x = T.relu(T.conv2d_3x3(x, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"]))
    return T.conv2d_3x3(x, params[f"{prefix}.conv3.weight"], params[f"{prefix}.conv3.bias"])


def apply_nonlinear(img: Tensor, coeffs: Tensor, family: BasisFamily) -> Tensor:
    """U = x + sum_k C_k (f_k(x) - x) in skip mode, else U = sum_k C_k f_k(x).

    One coefficient map set is shared by the three channels.
    """
    c, h, w = img.shape
    n1 = family.order + 1
    if coeffs.shape != (n1, h, w):
        raise ShapeMismatch(f"coefficient maps {coeffs.shape} do not match {(n1, h, w)}")
    bases = basis_stack(img, family)
    weights = T.broadcast(T.reshape(coeffs, (n1, 1, h, w)), (n1, c, h, w))
    mixed = T.sum(weights * bases, axis=0)
    return img + mixed if family.skip_mode else mixed


def basis_curves(family: BasisFamily, samples: int = 256) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """x grid plus f_k and g_k = f_k - x sampled on it (rows indexed by k)."""
    xs = np.linspace(0.0, 1.0, samples)
    f = np.stack([family.f(k, xs) for k in range(family.order + 1)])
    return xs, f, f - xs
