"""Design matrices and quadratic penalties for smooth terms.

One-dimensional smooths are open B-spline bases (Cox-de Boor recursion) on
quantile-placed interior knots with replicated boundary knots.  Two penalty
flavors:

* ``ps``: discrete difference penalty P = D'D on the coefficients,
* ``tp``: integrated squared second derivative, computed exactly by
  Gauss-Legendre quadrature on the piecewise-polynomial basis products
  (null space of constants and linear functions, the usual low-rank
  thin-plate semantics on an interval).

A sum-to-zero constraint is absorbed by reparameterization: Z is an
orthonormal basis of the null space of the column-sum vector, the model
uses X@Z with penalty Z'PZ.  Tensor-product smooths take row-wise Kronecker
products of marginal bases with the summed Kronecker penalty and one
sum-to-zero constraint on the product basis.

Smoothing parameters come from a degrees-of-freedom calibration in the
Demmler-Reinsch basis: with R the Cholesky factor of X'X (jittered) and
s the eigenvalues of R^{-T} P R^{-1},

    df(lam) = sum 1/(1+lam*s_i)                  ("hat1": trace of H)
    df(lam) = sum (1+2*lam*s_i)/(1+lam*s_i)^2    (default: trace of 2H-HH)

and lam solves df(lam) = target by bisection on log10(lam) in [-10, 12].
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from .errors import ConfigError, DataError, NumericError

# 3-point Gauss-Legendre on [-1, 1]; exact for degree <= 5, enough for the
# products of piecewise-linear second derivatives of cubic splines.
_GL_NODES = np.array([-np.sqrt(3.0 / 5.0), 0.0, np.sqrt(3.0 / 5.0)])
_GL_WEIGHTS = np.array([5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])


@dataclass(frozen=True)
class KnotVector:
    """Full knot sequence (boundary knots replicated degree+1 times)."""

    knots: np.ndarray
    degree: int

    @property
    def n_basis(self) -> int:
        return len(self.knots) - self.degree - 1

    @property
    def lo(self) -> float:
        return float(self.knots[self.degree])

    @property
    def hi(self) -> float:
        return float(self.knots[-self.degree - 1])


@dataclass(frozen=True)
class SmoothConfig:
    basis: str = "tp"
    k: int = 10
    degree: int = 3
    penalty_order: int = 2
    df: float | None = None
    sum_to_zero: bool = True


@dataclass(frozen=True)
class MarginSpec:
    """What is needed to re-evaluate one marginal basis on new data."""

    var: str
    knots: KnotVector


@dataclass(frozen=True)
class DesignBlock:
    """Bound design of one structured term, immutable after build."""

    X: np.ndarray
    penalty: np.ndarray
    Z: np.ndarray
    lam: float
    df_target: float | None
    term_id: str
    coef_names: tuple[str, ...]
    var_names: tuple[str, ...]
    ranges: tuple[tuple[float, float], ...]
    margins: tuple[MarginSpec, ...] = ()

    @property
    def n_coef(self) -> int:
        return self.X.shape[1]


# ---------------------------------------------------------------------------
# B-spline evaluation


def quantile_knots(x: np.ndarray, k: int, degree: int = 3) -> KnotVector:
    """Knot sequence giving k basis functions, interior knots at quantiles."""
    x = np.asarray(x, float)
    if k < degree + 1:
        raise ConfigError(f"basis dimension k={k} must be at least degree+1={degree + 1}")
    lo, hi = float(np.min(x)), float(np.max(x))
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise DataError("non-finite values in smooth input")
    if hi <= lo:
        raise DataError("smooth input column is constant")
    n_interior = k - degree - 1
    if n_interior > 0:
        probs = np.arange(1, n_interior + 1) / (n_interior + 1)
        interior = np.quantile(x, probs)
    else:
        interior = np.empty(0)
    knots = np.concatenate([np.full(degree + 1, lo), interior, np.full(degree + 1, hi)])
    return KnotVector(knots, degree)


def _cox_de_boor(x: np.ndarray, t: np.ndarray, degree: int) -> np.ndarray:
    n = x.shape[0]
    nk = len(t)
    N = np.zeros((n, nk - 1))
    for j in range(nk - 1):
        if t[j] < t[j + 1]:
            N[:, j] = (x >= t[j]) & (x < t[j + 1])
    # close the right end of the last non-degenerate interval
    nondeg = np.nonzero(np.diff(t) > 0)[0]
    if nondeg.size:
        N[x == t[-1], nondeg[-1]] = 1.0
    for d in range(1, degree + 1):
        cols = nk - 1 - d
        Nn = np.zeros((n, cols))
        for j in range(cols):
            den1 = t[j + d] - t[j]
            if den1 > 0:
                Nn[:, j] += (x - t[j]) / den1 * N[:, j]
            den2 = t[j + d + 1] - t[j + 1]
            if den2 > 0:
                Nn[:, j] += (t[j + d + 1] - x) / den2 * N[:, j + 1]
        N = Nn
    return N


def _basis_raw(x: np.ndarray, t: np.ndarray, degree: int, deriv: int) -> np.ndarray:
    if deriv == 0:
        return _cox_de_boor(x, t, degree)
    if degree == 0:
        return np.zeros((x.shape[0], len(t) - 1))
    lower = _basis_raw(x, t, degree - 1, deriv - 1)
    m = len(t) - degree - 1
    out = np.zeros((x.shape[0], m))
    for j in range(m):
        den1 = t[j + degree] - t[j]
        if den1 > 0:
            out[:, j] += degree * lower[:, j] / den1
        den2 = t[j + degree + 1] - t[j + 1]
        if den2 > 0:
            out[:, j] -= degree * lower[:, j + 1] / den2
    return out


def bspline_basis(x, kv: KnotVector, deriv: int = 0) -> np.ndarray:
    """Evaluate the basis (or a derivative) with linear extrapolation.

    Inside the boundary knots this is the Cox-de Boor recursion; outside,
    rows are extended linearly from the boundary value and slope, which
    keeps the row sums at 1 for deriv=0.
    """
    x = np.atleast_1d(np.asarray(x, float))
    t = np.asarray(kv.knots, float)
    if len(np.unique(t)) < kv.degree + 2:
        raise ConfigError(f"need at least degree+2={kv.degree + 2} distinct knots")
    inside = np.clip(x, kv.lo, kv.hi)
    B = _basis_raw(inside, t, kv.degree, deriv)
    out = (x < kv.lo) | (x > kv.hi)
    if np.any(out):
        slope = _basis_raw(inside[out], t, kv.degree, deriv + 1)
        B[out] += (x[out] - inside[out])[:, None] * slope
    return B


# ---------------------------------------------------------------------------
# penalties


def difference_penalty(order: int, m: int) -> np.ndarray:
    """P = D'D for the difference matrix D of the given order."""
    if order < 1 or order >= m:
        raise ConfigError(f"difference order {order} invalid for {m} coefficients")
    D = np.diff(np.eye(m), order, axis=0)
    return D.T @ D


def second_derivative_penalty(kv: KnotVector) -> np.ndarray:
    """P[i,j] = integral of B_i''(x) B_j''(x) over the boundary interval."""
    t = np.asarray(kv.knots, float)
    breaks = np.unique(t[(t >= kv.lo) & (t <= kv.hi)])
    nodes = []
    weights = []
    for a, b in zip(breaks[:-1], breaks[1:]):
        half = (b - a) / 2.0
        nodes.append(half * _GL_NODES + (a + b) / 2.0)
        weights.append(half * _GL_WEIGHTS)
    z = np.concatenate(nodes)
    w = np.concatenate(weights)
    B2 = _basis_raw(z, t, kv.degree, 2)
    P = B2.T @ (w[:, None] * B2)
    return (P + P.T) / 2.0


def sum_to_zero_transform(X: np.ndarray) -> np.ndarray:
    """Orthonormal basis Z of the null space of the column-sum vector."""
    c = X.sum(axis=0)
    q, _ = linalg.qr(c.reshape(-1, 1), mode="full")
    i = int(np.argmax(np.abs(c)))
    if c[i] * q[i, 0] < 0:
        q = -q  # fix the QR sign so the transform is reproducible
    return q[:, 1:]


# ---------------------------------------------------------------------------
# smooth construction


def build_smooth(
    x: np.ndarray,
    cfg: SmoothConfig,
    term_id: str,
    var_name: str,
) -> DesignBlock:
    """Design block for a one-dimensional smooth (lam not yet calibrated)."""
    x = np.asarray(x, float)
    if cfg.basis not in ("ps", "tp"):
        raise ConfigError(f"unknown smooth basis {cfg.basis!r}")
    if x.shape[0] < cfg.k:
        raise DataError(
            f"{term_id}: {x.shape[0]} observations cannot support k={cfg.k} basis functions"
        )
    kv = quantile_knots(x, cfg.k, cfg.degree)
    Xraw = bspline_basis(x, kv)
    if cfg.basis == "ps":
        P = difference_penalty(cfg.penalty_order, kv.n_basis)
    else:
        P = second_derivative_penalty(kv)
    if cfg.sum_to_zero:
        Z = sum_to_zero_transform(Xraw)
        X = Xraw @ Z
        P = Z.T @ P @ Z
    else:
        Z = np.eye(kv.n_basis)
        X = Xraw
    P = (P + P.T) / 2.0
    p = X.shape[1]
    return DesignBlock(
        X=X,
        penalty=P,
        Z=Z,
        lam=0.0,
        df_target=cfg.df,
        term_id=term_id,
        coef_names=tuple(f"{term_id}.{i + 1}" for i in range(p)),
        var_names=(var_name,),
        ranges=((float(np.min(x)), float(np.max(x))),),
        margins=(MarginSpec(var_name, kv),),
    )


def _kron_rows(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    return np.einsum("ij,ik->ijk", A, B).reshape(n, A.shape[1] * B.shape[1])


def _kron_penalty(penalties: list[np.ndarray]) -> np.ndarray:
    dims = [P.shape[0] for P in penalties]
    total = int(np.prod(dims))
    out = np.zeros((total, total))
    for j, Pj in enumerate(penalties):
        mat = np.eye(1)
        for i, d in enumerate(dims):
            mat = np.kron(mat, Pj if i == j else np.eye(d))
        out += mat
    return out


def tensor_product(margins: list[DesignBlock], term_id: str, df: float | None) -> DesignBlock:
    """Row-wise Kronecker product of unconstrained marginal blocks.

    The penalty is sum_j I x ... x P_j x ... x I with one shared lam; a
    single sum-to-zero constraint is absorbed on the product basis.
    """
    if len(margins) < 2:
        raise ConfigError("tensor product needs at least two margins")
    Xraw = margins[0].X
    for blk in margins[1:]:
        Xraw = _kron_rows(Xraw, blk.X)
    P = _kron_penalty([blk.penalty for blk in margins])
    Z = sum_to_zero_transform(Xraw)
    X = Xraw @ Z
    P = Z.T @ P @ Z
    P = (P + P.T) / 2.0
    var_names = tuple(v for blk in margins for v in blk.var_names)
    ranges = tuple(r for blk in margins for r in blk.ranges)
    return DesignBlock(
        X=X,
        penalty=P,
        Z=Z,
        lam=0.0,
        df_target=df,
        term_id=term_id,
        coef_names=tuple(f"{term_id}.{i + 1}" for i in range(X.shape[1])),
        var_names=var_names,
        ranges=ranges,
        margins=tuple(m for blk in margins for m in blk.margins),
    )


# ---------------------------------------------------------------------------
# degrees-of-freedom calibration


def demmler_reinsch(X: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Eigenvalues s of R^{-T} P R^{-1}, R the jittered Cholesky of X'X."""
    p = X.shape[1]
    xtx = X.T @ X
    jitter = 1e-8 * np.trace(xtx) / p
    try:
        R = linalg.cholesky(xtx + jitter * np.eye(p), lower=False)
    except linalg.LinAlgError as exc:
        raise NumericError(f"design cross-product is not positive definite: {exc}") from exc
    Rinv = linalg.solve_triangular(R, np.eye(p))
    s = linalg.eigvalsh(Rinv.T @ P @ Rinv)
    return np.clip(s, 0.0, None)


def effective_df(s: np.ndarray, lam: float, hat1: bool = False) -> float:
    """df at a given lam from Demmler-Reinsch values.

    hat1 counts trace(H); the default counts trace(2H - HH), the usual
    residual-based definition.
    """
    shrink = 1.0 / (1.0 + lam * s)
    if hat1:
        return float(shrink.sum())
    return float((shrink * (2.0 - shrink)).sum())


def penalty_nullity(s: np.ndarray) -> int:
    scale = max(float(s.max(initial=0.0)), 1.0)
    return int(np.sum(s <= 1e-12 * scale))


def df_to_lambda(
    X: np.ndarray, P: np.ndarray, df_target: float, hat1: bool = False
) -> float:
    """Smoothing parameter whose effective df matches the target.

    The target must lie in [nullity(P), p] measured in the transformed
    space; bisection runs on log10(lam) in [-10, 12] until the df gap is
    below 1e-9 or the bracket is exhausted.
    """
    s = demmler_reinsch(X, P)
    p = len(s)
    nullity = penalty_nullity(s)
    if df_target > p + 1e-8:
        raise ConfigError(f"df target {df_target} exceeds {p} coefficients")
    if df_target < nullity - 1e-8:
        raise ConfigError(
            f"df target {df_target} is below the penalty null space dimension {nullity}"
        )
    lo_exp, hi_exp = -10.0, 12.0
    if df_target >= effective_df(s, 10.0**lo_exp, hat1):
        return 0.0
    if df_target <= effective_df(s, 10.0**hi_exp, hat1):
        raise ConfigError(
            f"df target {df_target} is not attainable within the smoothing bracket"
        )
    for _ in range(200):
        mid = (lo_exp + hi_exp) / 2.0
        df_mid = effective_df(s, 10.0**mid, hat1)
        if abs(df_mid - df_target) <= 1e-9:
            return 10.0**mid
        if df_mid > df_target:
            lo_exp = mid
        else:
            hi_exp = mid
    return 10.0 ** ((lo_exp + hi_exp) / 2.0)


def calibrate_block(block: DesignBlock, df_default: float, hat1: bool) -> DesignBlock:
    """Fill in lam from the block's df target (or the clamped default)."""
    p = block.n_coef
    if block.df_target is None:
        target = min(df_default, float(p))
    else:
        target = float(block.df_target)
        if target > p + 1e-8:
            raise ConfigError(
                f"{block.term_id}: df target {target} exceeds {p} coefficients"
            )
    if target >= p - 1e-12:
        lam = 0.0
    else:
        lam = df_to_lambda(block.X, block.penalty, target, hat1)
    return replace(block, lam=lam, df_target=target)


# ---------------------------------------------------------------------------
# evaluation on new data


def design_for_values(block: DesignBlock, values: dict[str, np.ndarray]) -> np.ndarray:
    """Re-evaluate the block design at new values (linear extrapolation)."""
    mats = [bspline_basis(values[m.var], m.knots) for m in block.margins]
    Xraw = mats[0]
    for mat in mats[1:]:
        Xraw = _kron_rows(Xraw, mat)
    return Xraw @ block.Z


@dataclass(frozen=True)
class PartialEffect:
    term_id: str
    var_names: tuple[str, ...]
    grid: dict[str, np.ndarray]
    values: np.ndarray
    clamped: bool


def evaluate_partial_effect(
    block: DesignBlock, coefs: np.ndarray, grid: dict[str, np.ndarray] | None = None,
    grid_size: int | None = None,
) -> PartialEffect:
    """Effect curve/surface on a grid, clamped to the training range.

    Without an explicit grid: 200 points for one margin, a 40x40 mesh for
    two.  A supplied grid is clamped to the training range and the result
    is flagged.
    """
    n_margins = len(block.margins)
    clamped = False
    if grid is None:
        if n_margins == 1:
            size = grid_size or 200
            (lo, hi), = block.ranges
            grid = {block.margins[0].var: np.linspace(lo, hi, size)}
        elif n_margins == 2:
            size = grid_size or 40
            axes = [np.linspace(lo, hi, size) for lo, hi in block.ranges]
            g1, g2 = np.meshgrid(axes[0], axes[1], indexing="ij")
            grid = {block.margins[0].var: g1.ravel(), block.margins[1].var: g2.ravel()}
        else:
            raise ConfigError(f"no default grid for {n_margins} margins")
    else:
        fixed: dict[str, np.ndarray] = {}
        for (lo, hi), margin in zip(block.ranges, block.margins):
            vals = np.asarray(grid[margin.var], float)
            cl = np.clip(vals, lo, hi)
            if np.any(cl != vals):
                clamped = True
            fixed[margin.var] = cl
        grid = fixed
    Xg = design_for_values(block, grid)
    return PartialEffect(
        term_id=block.term_id,
        var_names=block.var_names,
        grid=grid,
        values=Xg @ np.asarray(coefs, float),
        clamped=clamped,
    )
