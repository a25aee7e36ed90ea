"""Penalized IRLS for quasi-Poisson (log link) and quasi-binomial (logit link) models.

The design is held as a dense part (fixed effects and smooths) and an
optional sparse part (random-effect dummies), so that cross products for
models with hundreds of district effects stay cheap. Random effects are
ridge-penalized columns: a block with smoothing parameter ``lam`` carries
prior variance ``phi / lam``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.special import expit, xlogy

from .basis import DesignBlock

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
RIDGE_FLOOR = 1e-8
DEFAULT_GRID = tuple(np.logspace(-2, 4, 7))
SCORE_RTOL = 1e-6
DEVIANCE_RTOL = 1e-9


class FitError(RuntimeError):
    pass


class ConvergenceError(FitError):
    def __init__(self, msg, beta=None, deviance=None, iterations=None):
        super().__init__(msg)
        self.beta = beta
        self.deviance = deviance
        self.iterations = iterations


class SingularSystemError(FitError):
    pass


class Family(str, Enum):
    QUASI_POISSON = "quasi_poisson"
    QUASI_BINOMIAL = "quasi_binomial"

    @property
    def link(self) -> str:
        return "log" if self is Family.QUASI_POISSON else "logit"

    def inverse_link(self, eta):
        return np.exp(eta) if self is Family.QUASI_POISSON else expit(eta)

    def mean(self, eta, trials=None):
        """Mean of the count response: ``exp(eta)`` or ``trials * expit(eta)``."""
        if self is Family.QUASI_POISSON:
            return np.exp(eta)
        return trials * expit(eta)

    def variance(self, mu, trials=None):
        if self is Family.QUASI_POISSON:
            return mu
        p = mu / np.where(trials > 0, trials, 1.0)
        return trials * p * (1.0 - p)

    def deviance(self, y, mu, trials=None, weights=None):
        if self is Family.QUASI_POISSON:
            unit = 2.0 * (xlogy(y, y) - xlogy(y, mu) - (y - mu))
        else:
            ny = trials - y
            nmu = trials - mu
            unit = 2.0 * (xlogy(y, y) - xlogy(y, mu) + xlogy(ny, ny) - xlogy(ny, nmu))
        if weights is not None:
            unit = weights * unit
        return float(np.sum(unit))

    def initial_eta(self, y, trials=None):
        if self is Family.QUASI_POISSON:
            return np.log(y + 0.5)
        p = (y + 0.5) / (trials + 1.0)
        return np.log(p) - np.log1p(-p)


@dataclass(eq=False)
class SmoothTerm:
    name: str
    block: DesignBlock


@dataclass(eq=False)
class RandomBlock:
    """i.i.d. Gaussian effects, one per level, entering row ``i`` as ``values[i] * u[codes[i]]``.

    ``codes[i] = -1`` means the row carries no effect from this block.
    """

    name: str
    codes: np.ndarray
    levels: list[str]
    values: np.ndarray | None = None

    def matrix(self) -> sp.csr_matrix:
        codes = np.asarray(self.codes)
        n = codes.shape[0]
        vals = np.ones(n) if self.values is None else np.asarray(self.values, dtype=float)
        keep = (codes >= 0) & (vals != 0)
        rows = np.flatnonzero(keep)
        return sp.csr_matrix(
            (vals[keep], (rows, codes[keep])), shape=(n, len(self.levels))
        )


@dataclass(eq=False)
class ModelSpec:
    family: Family
    fixed: np.ndarray
    fixed_names: list[str]
    smooths: list[SmoothTerm] = field(default_factory=list)
    random: list[RandomBlock] = field(default_factory=list)
    offset: np.ndarray | None = None

    def __post_init__(self):
        self.family = Family(self.family)
        self.fixed = np.atleast_2d(np.asarray(self.fixed, dtype=float))
        n = self.fixed.shape[0]
        if len(self.fixed_names) != self.fixed.shape[1]:
            raise ValueError("fixed_names does not match the fixed-effect columns")
        for s in self.smooths:
            if s.block.X.shape[0] != n:
                raise ValueError(f"smooth {s.name!r} has {s.block.X.shape[0]} rows, expected {n}")
        for r in self.random:
            if len(r.codes) != n:
                raise ValueError(f"random block {r.name!r} has {len(r.codes)} rows, expected {n}")
        if self.offset is None:
            self.offset = np.zeros(n)
        else:
            self.offset = np.asarray(self.offset, dtype=float)
            if self.offset.shape != (n,):
                raise ValueError("offset length does not match the design")
            if not np.all(np.isfinite(self.offset)):
                raise ValueError("offsets must be finite")

    @property
    def n(self) -> int:
        return self.fixed.shape[0]

    @property
    def block_names(self) -> list[str]:
        return [s.name for s in self.smooths] + [r.name for r in self.random]

    def coef_names(self) -> list[str]:
        names = list(self.fixed_names)
        for s in self.smooths:
            names += [f"{s.name}[{j}]" for j in range(s.block.ncols)]
        for r in self.random:
            names += [f"{r.name}[{lev}]" for lev in r.levels]
        return names

    def dense_design(self) -> np.ndarray:
        return np.hstack([self.fixed] + [s.block.X for s in self.smooths])

    def sparse_design(self) -> sp.csr_matrix | None:
        if not self.random:
            return None
        return sp.hstack([r.matrix() for r in self.random], format="csr")

    def penalty_blocks(self) -> list[tuple[str, slice, np.ndarray]]:
        out = []
        j = self.fixed.shape[1]
        for s in self.smooths:
            k = s.block.ncols
            out.append((s.name, slice(j, j + k), s.block.S))
            j += k
        for r in self.random:
            k = len(r.levels)
            out.append((r.name, slice(j, j + k), np.eye(k)))
            j += k
        return out


class _Design:
    """Column-partitioned design ``[D | Z]`` with D dense and Z sparse."""

    def __init__(self, D: np.ndarray, Z: sp.csr_matrix | None):
        self.D = D
        self.Z = Z
        self.pd = D.shape[1]
        self.p = self.pd + (0 if Z is None else Z.shape[1])
        self.n = D.shape[0]

    def matvec(self, beta):
        out = self.D @ beta[: self.pd]
        if self.Z is not None:
            out = out + self.Z @ beta[self.pd:]
        return out

    def rmatvec(self, v):
        out = self.D.T @ v
        if self.Z is None:
            return out
        return np.concatenate([out, self.Z.T @ v])

    def crossprod(self, w) -> np.ndarray:
        WD = self.D * w[:, None]
        top = self.D.T @ WD
        if self.Z is None:
            return top
        ZtWD = np.asarray(self.Z.T @ WD)
        ZtWZ = (self.Z.T @ self.Z.multiply(w[:, None]).tocsr()).toarray()
        A = np.empty((self.p, self.p))
        A[: self.pd, : self.pd] = top
        A[self.pd:, : self.pd] = ZtWD
        A[: self.pd, self.pd:] = ZtWD.T
        A[self.pd:, self.pd:] = ZtWZ
        return A


@dataclass(frozen=True, eq=False)
class FitResult:
    family: Family
    beta: np.ndarray
    V: np.ndarray
    phi: float
    lambdas: np.ndarray
    block_names: list[str]
    block_slices: list[tuple[int, int]]
    edf: dict[str, float]
    edf_total: float
    deviance: float
    penalized_deviance: float
    pearson_chi2: float
    converged: bool
    iterations: int
    coef_names: list[str]
    y: np.ndarray
    mu: np.ndarray
    eta: np.ndarray
    offset: np.ndarray
    trials: np.ndarray | None
    weights: np.ndarray
    deviance_trace: tuple[float, ...] = ()

    @property
    def n(self) -> int:
        return len(self.y)

    def coef(self, name: str) -> float:
        return float(self.beta[self.coef_names.index(name)])

    def block(self, name: str) -> np.ndarray:
        a, b = self.block_slices[self.block_names.index(name)]
        return self.beta[a:b]

    def block_lambda(self, name: str) -> float:
        return float(self.lambdas[self.block_names.index(name)])

    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.V), 0.0, None))


def _penalty_matrix(p: int, blocks, lambdas) -> np.ndarray:
    S = np.zeros((p, p))
    for (_, sl, Sb), lam in zip(blocks, lambdas):
        S[sl, sl] += lam * Sb
    S[np.diag_indices(p)] += RIDGE_FLOOR
    return S


def _check_response(family: Family, y, trials, n):
    y = np.asarray(y, dtype=float)
    if y.shape != (n,):
        raise ValueError(f"response has shape {y.shape}, expected ({n},)")
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise ValueError("response must be finite and nonnegative")
    if family is Family.QUASI_BINOMIAL:
        if trials is None:
            raise ValueError("binomial fits need trials")
        trials = np.asarray(trials, dtype=float)
        if trials.shape != (n,):
            raise ValueError("trials length does not match the response")
        if np.any(y > trials):
            raise ValueError("binomial response exceeds trials")
    else:
        trials = None
    return y, trials


def _factor(A):
    try:
        return sla.cho_factor(A, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystemError(
            "penalized system is not positive definite; "
            f"consider a larger ridge floor than {RIDGE_FLOOR:g}"
        ) from exc


class _Problem:
    def __init__(self, spec: ModelSpec, y, trials, weights):
        self.spec = spec
        self.family = spec.family
        self.design = _Design(spec.dense_design(), spec.sparse_design())
        self.blocks = spec.penalty_blocks()
        self.y, self.trials = _check_response(spec.family, y, trials, spec.n)
        self.weights = np.ones(spec.n) if weights is None else np.asarray(weights, dtype=float)
        self.offset = spec.offset

    def _working(self, eta_total):
        fam = self.family
        mu = fam.mean(eta_total, self.trials)
        var = fam.variance(mu, self.trials)
        var = np.maximum(var, 1e-300)
        return mu, var

    def _pen_dev(self, beta, mu, S):
        dev = self.family.deviance(self.y, mu, self.trials, self.weights)
        return dev, dev + float(beta @ S @ beta)

    def solve(self, lambdas, beta0=None, max_iter=100, phi=None) -> FitResult:
        d = self.design
        S = _penalty_matrix(d.p, self.blocks, lambdas)
        if beta0 is None:
            eta_total = self.family.initial_eta(self.y, self.trials)
            beta = None
            pen_old = np.inf
        else:
            beta = np.asarray(beta0, dtype=float)
            eta_total = d.matvec(beta) + self.offset
            mu = self.family.mean(eta_total, self.trials)
            _, pen_old = self._pen_dev(beta, mu, S)
        trace = []
        converged = False
        for it in range(1, max_iter + 1):
            mu, var = self._working(eta_total)
            w = self.weights * var
            z = eta_total - self.offset + (self.y - mu) / var
            XtWz = d.rmatvec(w * z)
            A = d.crossprod(w) + S
            beta_new = sla.cho_solve(_factor(A), XtWz)
            eta_new = d.matvec(beta_new) + self.offset
            mu_new = self.family.mean(eta_new, self.trials)
            dev_new, pen_new = self._pen_dev(beta_new, mu_new, S)
            if beta is not None:
                halvings = 0
                while not pen_new <= pen_old * (1 + 1e-12) and halvings < 10:
                    beta_new = 0.5 * (beta + beta_new)
                    eta_new = d.matvec(beta_new) + self.offset
                    mu_new = self.family.mean(eta_new, self.trials)
                    dev_new, pen_new = self._pen_dev(beta_new, mu_new, S)
                    halvings += 1
                if not np.isfinite(pen_new):
                    raise ConvergenceError(
                        "penalized deviance is not finite", beta, pen_old, it
                    )
            score = d.rmatvec(self.weights * (self.y - mu_new)) - S @ beta_new
            score_ok = np.max(np.abs(score), initial=0.0) <= SCORE_RTOL * (
                1.0 + np.max(np.abs(XtWz), initial=0.0)
            )
            dev_ok = abs(pen_new - pen_old) <= DEVIANCE_RTOL * (abs(pen_new) + 0.1)
            beta, eta_total, pen_old = beta_new, eta_new, pen_new
            trace.append(pen_new)
            if score_ok and dev_ok:
                converged = True
                break
        if not converged:
            raise ConvergenceError(
                f"IRLS did not converge in {max_iter} iterations", beta, pen_old, max_iter
            )
        return self._finish(beta, eta_total, S, lambdas, it, trace, phi)

    def _finish(self, beta, eta_total, S, lambdas, iterations, trace, phi_override):
        d = self.design
        mu, var = self._working(eta_total)
        w = self.weights * var
        XtWX = d.crossprod(w)
        A = XtWX + S
        cf = _factor(A)
        Ainv = sla.cho_solve(cf, np.eye(d.p))
        Ainv = 0.5 * (Ainv + Ainv.T)
        F_diag = np.einsum("ij,ji->i", Ainv, XtWX)
        edf = {"fixed": float(F_diag[: self.spec.fixed.shape[1]].sum())}
        for name, sl, _ in self.blocks:
            edf[name] = float(F_diag[sl].sum())
        edf_total = float(F_diag.sum())
        pearson = float(np.sum(self.weights * (self.y - mu) ** 2 / var))
        resid_df = self.spec.n - edf_total
        if phi_override is not None:
            phi = float(phi_override)
        elif resid_df > 0 and pearson > 0:
            phi = pearson / resid_df
        else:
            # saturated or perfect fit; fall back to the nominal dispersion
            phi = 1.0
        dev = self.family.deviance(self.y, mu, self.trials, self.weights)
        return FitResult(
            family=self.family,
            beta=beta,
            V=phi * Ainv,
            phi=phi,
            lambdas=np.asarray(lambdas, dtype=float),
            block_names=[b[0] for b in self.blocks],
            block_slices=[(b[1].start, b[1].stop) for b in self.blocks],
            edf=edf,
            edf_total=edf_total,
            deviance=dev,
            penalized_deviance=dev + float(beta @ S @ beta),
            pearson_chi2=pearson,
            converged=True,
            iterations=iterations,
            coef_names=self.spec.coef_names(),
            y=self.y,
            mu=mu,
            eta=eta_total - self.offset,
            offset=self.offset,
            trials=self.trials,
            weights=self.weights,
            deviance_trace=tuple(trace),
        )


def gcv_score(fit: FitResult) -> float:
    """``n * Pearson / (n - edf)**2``; infinite when the residual df is exhausted."""
    n = fit.n
    rdf = n - fit.edf_total
    if rdf <= 0:
        return np.inf
    return n * fit.pearson_chi2 / rdf**2


def _grids(spec: ModelSpec, grid) -> list[np.ndarray]:
    nb = len(spec.penalty_blocks())
    if grid is None:
        grids = [np.asarray(DEFAULT_GRID)] * nb
    elif isinstance(grid, dict):
        grids = [np.asarray(grid.get(name, DEFAULT_GRID), dtype=float) for name in spec.block_names]
    else:
        arr = [np.atleast_1d(np.asarray(g, dtype=float)) for g in grid]
        if len(arr) == 1 and nb != 1:
            arr = arr * nb
        grids = arr
    if len(grids) != nb:
        raise ValueError(f"got {len(grids)} grids for {nb} penalty blocks")
    out = []
    for g in grids:
        if g.size == 0:
            raise ValueError("empty smoothing-parameter grid")
        out.append(np.sort(g))
    return out


def _select(problem: _Problem, spec: ModelSpec, grids, sweeps=2, max_iter=100):
    nb = len(grids)
    idx = [len(g) // 2 for g in grids]
    cache: dict[tuple[int, ...], tuple[float, FitResult | None]] = {}
    warm = None

    def evaluate(key):
        nonlocal warm
        if key in cache:
            return cache[key]
        lam = np.array([grids[j][key[j]] for j in range(nb)])
        try:
            res = problem.solve(lam, beta0=warm, max_iter=max_iter)
            score = gcv_score(res)
            warm = res.beta
        except FitError as exc:
            log.debug("grid point %s failed: %s", lam, exc)
            res, score = None, np.inf
        cache[key] = (score, res)
        return cache[key]

    for _ in range(sweeps):
        for j in range(nb):
            scores = []
            for m in range(len(grids[j])):
                key = tuple(idx[:j] + [m] + idx[j + 1:])
                scores.append(evaluate(key)[0])
            scores = np.asarray(scores)
            if np.all(~np.isfinite(scores)):
                continue
            # argmin returns the first minimum, i.e. the smallest lambda on ties
            idx[j] = int(np.argmin(scores))
    key = tuple(idx)
    score, res = evaluate(key)
    if res is None:
        raise FitError("every smoothing-parameter candidate failed to fit")
    return np.array([grids[j][idx[j]] for j in range(nb)]), res


def select_lambda(spec: ModelSpec, y, trials=None, grid=None, weights=None, sweeps: int = 2) -> np.ndarray:
    """GCV grid search, coordinate-wise over penalty blocks.

    ``grid`` is one sequence per block, a single sequence shared by all
    blocks, or a dict keyed by block name; the default is 7 log-spaced values
    from 1e-2 to 1e4.
    """
    if not spec.penalty_blocks():
        return np.zeros(0)
    problem = _Problem(spec, y, trials, weights)
    lam, _ = _select(problem, spec, _grids(spec, grid), sweeps)
    return lam


def fit(
    spec: ModelSpec,
    y,
    trials=None,
    weights=None,
    *,
    lambdas=None,
    grid=None,
    max_iter: int = 100,
    phi: float | None = None,
    sweeps: int = 2,
) -> FitResult:
    """Fit the penalized quasi-likelihood model.

    With ``lambdas`` given, smoothing parameters are held fixed; otherwise they
    are chosen by :func:`select_lambda` over ``grid``. ``phi`` overrides the
    Pearson dispersion estimate (it only rescales ``V``).
    """
    problem = _Problem(spec, y, trials, weights)
    nb = len(problem.blocks)
    if lambdas is not None:
        lam = np.atleast_1d(np.asarray(lambdas, dtype=float))
        if lam.shape != (nb,):
            raise ValueError(f"expected {nb} smoothing parameters, got {lam.shape[0]}")
        return problem.solve(lam, max_iter=max_iter, phi=phi)
    if nb == 0:
        return problem.solve(np.zeros(0), max_iter=max_iter, phi=phi)
    lam, _ = _select(problem, spec, _grids(spec, grid), sweeps, max_iter)
    # final fit from the cold start so the result does not depend on search order
    return problem.solve(lam, max_iter=max_iter, phi=phi)


def predict(fit: FitResult, X, offset=None) -> tuple[np.ndarray, np.ndarray]:
    """Linear predictor ``X beta`` and mean ``inverse_link(X beta + offset)``.

    For the binomial family the mean is the success probability.
    """
    p = len(fit.beta)
    if X.ndim != 2 or X.shape[1] != p:
        raise ValueError(f"design has {X.shape[-1]} columns, fit has {p}")
    eta = np.asarray(X @ fit.beta).ravel()
    off = np.zeros(eta.shape[0]) if offset is None else np.asarray(offset, dtype=float)
    if off.shape != eta.shape:
        raise ValueError("offset length does not match the design rows")
    return eta, fit.family.inverse_link(eta + off)


def coef_covariance(fit: FitResult) -> np.ndarray:
    """Bayesian posterior covariance ``phi * (X'WX + S)^-1`` at the converged weights."""
    return fit.V


def pearson_residuals(fit: FitResult) -> np.ndarray:
    var = fit.family.variance(fit.mu, fit.trials)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(fit.weights) * (fit.y - fit.mu) / np.sqrt(var)
    return np.where(var > 0, r, 0.0)


def fit_to_dict(fit: FitResult) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "family": fit.family.value,
        "link": fit.family.link,
        "coef_names": list(fit.coef_names),
        "beta": fit.beta.tolist(),
        "covariance": fit.V.ravel().tolist(),
        "phi": fit.phi,
        "lambdas": fit.lambdas.tolist(),
        "block_names": list(fit.block_names),
        "block_slices": [list(s) for s in fit.block_slices],
        "edf": dict(fit.edf),
        "edf_total": fit.edf_total,
        "deviance": fit.deviance,
        "penalized_deviance": fit.penalized_deviance,
        "pearson_chi2": fit.pearson_chi2,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "y": fit.y.tolist(),
        "mu": fit.mu.tolist(),
        "eta": fit.eta.tolist(),
        "offset": fit.offset.tolist(),
        "trials": None if fit.trials is None else fit.trials.tolist(),
        "weights": fit.weights.tolist(),
    }


def fit_from_dict(d: dict[str, Any]) -> FitResult:
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported fit format version {d.get('format_version')!r}")
    p = len(d["beta"])
    return FitResult(
        family=Family(d["family"]),
        beta=np.asarray(d["beta"], dtype=float),
        V=np.asarray(d["covariance"], dtype=float).reshape(p, p),
        phi=float(d["phi"]),
        lambdas=np.asarray(d["lambdas"], dtype=float),
        block_names=list(d["block_names"]),
        block_slices=[tuple(s) for s in d["block_slices"]],
        edf={k: float(v) for k, v in d["edf"].items()},
        edf_total=float(d["edf_total"]),
        deviance=float(d["deviance"]),
        penalized_deviance=float(d["penalized_deviance"]),
        pearson_chi2=float(d["pearson_chi2"]),
        converged=bool(d["converged"]),
        iterations=int(d["iterations"]),
        coef_names=list(d["coef_names"]),
        y=np.asarray(d["y"], dtype=float),
        mu=np.asarray(d["mu"], dtype=float),
        eta=np.asarray(d["eta"], dtype=float),
        offset=np.asarray(d["offset"], dtype=float),
        trials=None if d["trials"] is None else np.asarray(d["trials"], dtype=float),
        weights=np.asarray(d["weights"], dtype=float),
    )

