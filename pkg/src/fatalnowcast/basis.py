"""P-spline design matrices and difference penalties.

Smooth terms are B-splines on equally spaced knots with a difference penalty
on adjacent coefficients. Identifiability against a free intercept is
obtained by absorbing a sum-to-zero constraint over the fitting data into the
column space, so a constrained block has ``num_basis - 1`` columns (1-D) or
``num_basis**2 - 1`` columns (tensor product).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

import numpy as np
from scipy.interpolate import BSpline


class BasisError(ValueError):
    pass


class BasisKind(str, Enum):
    BSPLINE_1D = "bspline_1d"
    TENSOR_2D = "tensor_2d"


@dataclass(frozen=True)
class BasisSpec:
    kind: BasisKind = BasisKind.BSPLINE_1D
    num_basis: int = 10
    degree: int = 3
    penalty_order: int = 2
    # one (min, max) pair per dimension; None means "take it from the data"
    domain: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", BasisKind(self.kind))
        if self.num_basis < self.degree + 1:
            raise BasisError(
                f"num_basis={self.num_basis} must be >= degree + 1 = {self.degree + 1}"
            )
        if not 0 <= self.penalty_order < self.num_basis:
            raise BasisError(
                f"penalty_order={self.penalty_order} must lie in [0, num_basis)"
            )
        if self.domain is not None:
            dom = tuple((float(lo), float(hi)) for lo, hi in self.domain)
            if len(dom) != self.ndim:
                raise BasisError(f"{self.kind.value} needs {self.ndim} domain pair(s)")
            for lo, hi in dom:
                if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
                    raise BasisError(f"degenerate domain [{lo}, {hi}]")
            object.__setattr__(self, "domain", dom)

    @property
    def ndim(self) -> int:
        return 1 if self.kind is BasisKind.BSPLINE_1D else 2

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "num_basis": self.num_basis,
            "degree": self.degree,
            "penalty_order": self.penalty_order,
            "domain": None if self.domain is None else [list(p) for p in self.domain],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BasisSpec":
        dom = d.get("domain")
        return cls(
            kind=BasisKind(d["kind"]),
            num_basis=int(d["num_basis"]),
            degree=int(d["degree"]),
            penalty_order=int(d["penalty_order"]),
            domain=None if dom is None else tuple(tuple(p) for p in dom),
        )


def equispaced_knots(lo: float, hi: float, num_basis: int, degree: int) -> np.ndarray:
    """Full knot vector (with ``degree`` exterior knots on each side)."""
    n_intervals = num_basis - degree
    h = (hi - lo) / n_intervals
    return lo + h * np.arange(-degree, n_intervals + degree + 1)


def raw_bspline(x, lo: float, hi: float, num_basis: int, degree: int = 3) -> np.ndarray:
    """Unconstrained B-spline design; each row sums to one on [lo, hi]."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise BasisError("x must be one-dimensional")
    if x.size == 0:
        return np.zeros((0, num_basis))
    if not np.all(np.isfinite(x)):
        raise BasisError("non-finite covariate value")
    if x.min() < lo or x.max() > hi:
        raise BasisError(
            f"covariate range [{x.min()}, {x.max()}] outside basis domain [{lo}, {hi}]"
        )
    t = equispaced_knots(lo, hi, num_basis, degree)
    # design_matrix wants x inside [t[degree], t[-degree-1]], which is [lo, hi] up to rounding
    xc = np.clip(x, t[degree], t[-degree - 1])
    return BSpline.design_matrix(xc, t, degree).toarray()


def difference_penalty(num_basis: int, order: int) -> np.ndarray:
    D = np.diff(np.eye(num_basis), n=order, axis=0)
    return D.T @ D


def sum_to_zero_transform(column_sums: np.ndarray) -> np.ndarray:
    """Orthonormal basis Z of the null space of ``column_sums'``.

    For any beta, ``1' X Z beta = column_sums' Z beta = 0``.
    """
    c = np.asarray(column_sums, dtype=float).reshape(-1, 1)
    q, _ = np.linalg.qr(c, mode="complete")
    return q[:, 1:]


def row_kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product; column index is ``i * B.shape[1] + j``."""
    return (A[:, :, None] * B[:, None, :]).reshape(A.shape[0], -1)


@dataclass(frozen=True, eq=False)
class DesignBlock:
    """A constrained smooth: design ``X``, penalty ``S`` and the transform ``constraint``.

    ``constraint`` maps constrained coefficients to raw B-spline coefficients
    (``beta_raw = constraint @ beta``). The block keeps the resolved spec and
    the column sums that define the constraint, so new points are evaluated
    on the same knots and in the same coordinates as at fit time.
    """

    X: np.ndarray
    S: np.ndarray
    constraint: np.ndarray
    spec: BasisSpec
    column_sums: np.ndarray
    raw_penalty: np.ndarray = field(repr=False, default=None)

    @property
    def ncols(self) -> int:
        return self.constraint.shape[1]

    def raw(self, x) -> np.ndarray:
        spec = self.spec
        if spec.kind is BasisKind.BSPLINE_1D:
            (lo, hi), = spec.domain
            return raw_bspline(x, lo, hi, spec.num_basis, spec.degree)
        s = np.asarray(x, dtype=float).reshape(-1, 2)
        (lo0, hi0), (lo1, hi1) = spec.domain
        B0 = raw_bspline(s[:, 0], lo0, hi0, spec.num_basis, spec.degree)
        B1 = raw_bspline(s[:, 1], lo1, hi1, spec.num_basis, spec.degree)
        return row_kron(B0, B1)

    def evaluate(self, x) -> np.ndarray:
        return self.raw(x) @ self.constraint

    def to_dict(self) -> dict[str, Any]:
        return {"spec": self.spec.to_dict(), "column_sums": self.column_sums.tolist()}

    @classmethod
    def from_dict(cls, d: dict[str, Any], x=None) -> "DesignBlock":
        """Rebuild a block from its serialized form; ``X`` is re-evaluated at ``x`` if given."""
        spec = BasisSpec.from_dict(d["spec"])
        c = np.asarray(d["column_sums"], dtype=float)
        Z = sum_to_zero_transform(c)
        S_raw = _raw_penalty(spec)
        block = cls(
            X=np.zeros((0, Z.shape[1])),
            S=Z.T @ S_raw @ Z,
            constraint=Z,
            spec=spec,
            column_sums=c,
            raw_penalty=S_raw,
        )
        if x is not None:
            block = replace(block, X=block.evaluate(x))
        return block


def _raw_penalty(spec: BasisSpec) -> np.ndarray:
    S1 = difference_penalty(spec.num_basis, spec.penalty_order)
    if spec.kind is BasisKind.BSPLINE_1D:
        return S1
    eye = np.eye(spec.num_basis)
    return np.kron(S1, eye) + np.kron(eye, S1)


def _constrain(B: np.ndarray, spec: BasisSpec) -> DesignBlock:
    c = B.sum(axis=0)
    Z = sum_to_zero_transform(c)
    S_raw = _raw_penalty(spec)
    S = Z.T @ S_raw @ Z
    S = 0.5 * (S + S.T)
    return DesignBlock(X=B @ Z, S=S, constraint=Z, spec=spec, column_sums=c, raw_penalty=S_raw)


def bspline_design(x, spec: BasisSpec) -> DesignBlock:
    """Constrained 1-D P-spline block evaluated at ``x``."""
    if spec.kind is not BasisKind.BSPLINE_1D:
        raise BasisError("bspline_design needs a BSPLINE_1D spec")
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise BasisError("cannot build a constrained basis from zero observations")
    if spec.domain is None:
        lo, hi = float(np.min(x)), float(np.max(x))
        if not hi > lo:
            raise BasisError("covariate is constant; give an explicit domain")
        spec = replace(spec, domain=((lo, hi),))
    (lo, hi), = spec.domain
    B = raw_bspline(x, lo, hi, spec.num_basis, spec.degree)
    return _constrain(B, spec)


def tensor_design(s, spec: BasisSpec) -> DesignBlock:
    """Constrained tensor-product P-spline over 2-D locations ``s`` (n x 2)."""
    if spec.kind is not BasisKind.TENSOR_2D:
        raise BasisError("tensor_design needs a TENSOR_2D spec")
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[1] != 2:
        raise BasisError("locations must be an (n, 2) array")
    if not np.all(np.isfinite(s)):
        raise BasisError("non-finite coordinates")
    distinct = np.unique(s, axis=0)
    if len(distinct) < spec.num_basis:
        raise BasisError(
            f"{len(distinct)} distinct locations; need at least {spec.num_basis}"
        )
    centered = distinct - distinct.mean(axis=0)
    if np.linalg.matrix_rank(centered) < 2:
        raise BasisError("locations are collinear")
    if spec.domain is None:
        lo, hi = s.min(axis=0), s.max(axis=0)
        spec = replace(spec, domain=((lo[0], hi[0]), (lo[1], hi[1])))
    (lo0, hi0), (lo1, hi1) = spec.domain
    B0 = raw_bspline(s[:, 0], lo0, hi0, spec.num_basis, spec.degree)
    B1 = raw_bspline(s[:, 1], lo1, hi1, spec.num_basis, spec.degree)
    return _constrain(row_kron(B0, B1), spec)
