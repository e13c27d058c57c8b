"""Batchwise orthogonalization of network outputs against structured terms.

A network whose inputs overlap a structured term's variables can absorb
that term's effect, destroying the interpretability of the structured
coefficients.  The fix is a projection cell: the latent features feeding
the network's output layer are replaced by their projection onto the
orthogonal complement of the span of the competing structured design
columns, computed per batch from the batch's own rows.

``build_oz_plans`` collects, per network term, the union of

* automatic overlaps (shared input variables, when orthogonalization is on),
* manual ``%OZ%`` targets,
* the intercept (with ``identify_intercept``, when the formula has one),

as abstract term specs; binding them to design columns happens at model
build time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import DataError
from .formula import (
    Intercept,
    NetworkTerm,
    Orthogonalized,
    ParameterFormula,
    TermSpec,
    detect_overlap,
)

RANK_REL_TOL = 1e-10


def orthonormal_range(cols: np.ndarray, rel_tol: float = RANK_REL_TOL) -> np.ndarray:
    """Orthonormal basis of col(cols) via rank-revealing pivoted QR.

    Columns whose pivoted diagonal |r_ii| falls at or below
    rel_tol * |r_00| are treated as dependent and dropped.
    """
    cols = np.asarray(cols, np.float64)
    if cols.shape[0] == 0:
        raise DataError("cannot orthogonalize a zero-row batch")
    if cols.shape[1] == 0:
        return np.zeros((cols.shape[0], 0))
    q, r, _ = linalg.qr(cols, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return np.zeros((cols.shape[0], 0))
    rank = int(np.sum(diag > rel_tol * diag[0]))
    return q[:, :rank]


def project_orthogonal(U: np.ndarray, Xoz: np.ndarray) -> np.ndarray:
    """(I - P) U where P projects onto col(Xoz)."""
    U = np.asarray(U, np.float64)
    q = orthonormal_range(Xoz)
    return U - q @ (q.T @ U)


@dataclass(frozen=True)
class OzPlan:
    """Constraint set for one network term inside one formula.

    ``term_index`` points at the network-bearing term in the formula;
    ``sources`` are structured term specs (``Intercept()`` included when
    the intercept is constrained); ``origins`` records "manual",
    "automatic", or "intercept" per source, aligned with ``sources``.
    """

    term_index: int
    net: NetworkTerm
    sources: tuple[TermSpec, ...]
    origins: tuple[str, ...]


def build_oz_plans(
    formula: ParameterFormula,
    orthogonalize: bool = True,
    identify_intercept: bool = False,
) -> list[OzPlan]:
    """Union of manual %OZ% targets and automatic overlaps per network."""
    auto = {}
    if orthogonalize:
        for term, overlaps in detect_overlap(formula, identify_intercept=False):
            auto[id(term)] = overlaps
    plans: list[OzPlan] = []
    for idx, term in enumerate(formula.terms):
        if isinstance(term, Orthogonalized):
            net = term.net
            manual = list(term.against)
        elif isinstance(term, NetworkTerm):
            net = term
            manual = []
        else:
            continue
        sources: list[TermSpec] = []
        origins: list[str] = []
        if identify_intercept and formula.has_intercept:
            sources.append(Intercept())
            origins.append("intercept")
        for src in manual:
            if src not in sources:
                sources.append(src)
                origins.append("manual")
        for src in auto.get(id(term), []):
            if src not in sources:
                sources.append(src)
                origins.append("automatic")
        if sources:
            plans.append(OzPlan(idx, net, tuple(sources), tuple(origins)))
    return plans
