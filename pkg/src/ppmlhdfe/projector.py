"""Weighted within-transformation for absorbed effects.

The projector residualizes columns on the span of the absorbed effects by
cyclic weighted group demeaning (symmetric term order) with a vector-Aitken
extrapolation every few sweeps. Because every update subtracts an element
of the absorbed span, warm starts are valid: projecting ``z - d`` for any
``d`` in the span converges to the same residual as projecting ``z``.

A conjugate-gradient backend over the sparse dummy design is available
behind ``method="cg"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .absorb import EncodedTerm
from .dataset import EstimationSample
from .errors import DataError, EstimationError, ProjectionNotConverged


class HDFEProjector:
    """Partial out absorbed effects under strictly positive row weights.

    One instance owns mutable scratch state (weights, denominators) and must
    not be shared across concurrent fits.
    """

    def __init__(
        self,
        terms: Sequence[EncodedTerm],
        *,
        max_sweeps: int = 100_000,
        extrapolate_every: int = 4,
        method: str = "map",
    ):
        if method not in ("map", "cg"):
            raise ValueError(f"unknown projector method {method!r}")
        self.terms = list(terms)
        self.max_sweeps = max_sweeps
        self.extrapolate_every = extrapolate_every
        self.method = method
        self.w: Optional[np.ndarray] = None
        self._denoms: list[np.ndarray] = []
        self._dummies = None  # sparse design, built lazily for "cg"

    # ------------------------------------------------------------------ state

    def set_weights(self, w: np.ndarray) -> None:
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 1:
            raise ValueError("weights must be a vector")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("projection weights must be positive and finite")
        self.w = w
        self._denoms = []
        for t in self.terms:
            if t.slope is None:
                den = np.bincount(t.codes, weights=w, minlength=t.n_groups)
                # positive weights make empty intercept groups impossible
                assert den.min() > 0.0
            else:
                den = np.bincount(
                    t.codes, weights=w * t.slope * t.slope, minlength=t.n_groups
                )
            self._denoms.append(den)

    # ------------------------------------------------------------- projection

    def _apply_term(self, idx: int, col: np.ndarray) -> float:
        """Project out one term in place; return the weighted mean |update|."""
        t = self.terms[idx]
        den = self._denoms[idx]
        w = self.w
        if t.slope is None:
            num = np.bincount(t.codes, weights=w * col, minlength=t.n_groups)
            fitted = (num / den)[t.codes]
        else:
            num = np.bincount(t.codes, weights=w * t.slope * col, minlength=t.n_groups)
            coef = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
            fitted = coef[t.codes] * t.slope
        col -= fitted
        return float(np.abs(fitted) @ w)

    def project(
        self, columns: np.ndarray, inner_tol: float, warm: bool = False
    ) -> tuple[np.ndarray, int]:
        """Residualize ``columns`` (n, or n x m) on the absorbed span.

        Convergence is declared when the largest weighted-mean absolute
        update across terms drops below ``inner_tol`` relative to each
        column's scale. Returns the residual and the number of sweeps.
        When ``warm`` is true, ``columns`` is a previous residualization
        refined in place under the current weights.
        """
        if inner_tol <= 0:
            raise ValueError("inner_tol must be positive")
        squeeze = columns.ndim == 1
        C = np.array(columns, dtype=np.float64, copy=True)
        if squeeze:
            C = C[:, None]
        if not self.terms or C.shape[1] == 0:
            return (C[:, 0] if squeeze else C), 0
        if self.w is None:
            raise EstimationError("projector weights not set")
        if self.method == "cg":
            out, sweeps = self._project_cg(C, inner_tol)
            return (out[:, 0] if squeeze else out), sweeps

        w_total = float(self.w.sum())
        # column scales: fixed at entry so the criterion cannot drift
        scale = 1.0 + np.abs(C).T @ self.w / w_total

        order = list(range(len(self.terms)))
        if len(order) > 1:  # symmetric sweep: forward then backward
            order = order + order[-2::-1]

        prev1: Optional[np.ndarray] = None
        prev2: Optional[np.ndarray] = None
        sweeps = 0
        while sweeps < self.max_sweeps:
            sweeps += 1
            worst = 0.0
            for j in range(C.shape[1]):
                col = C[:, j]
                upd = 0.0
                for idx in order:
                    upd = max(upd, self._apply_term(idx, col) / w_total)
                worst = max(worst, upd / scale[j])
            if worst < inner_tol:
                return (C[:, 0] if squeeze else C), sweeps
            if (
                self.extrapolate_every
                and sweeps % self.extrapolate_every == 0
                and prev2 is not None
            ):
                self._aitken(C, prev1, prev2)
                prev1 = prev2 = None
            else:
                prev2 = prev1
                prev1 = C.copy()
        best = C[:, 0] if squeeze else C
        raise ProjectionNotConverged(
            f"within-transformation did not converge in {self.max_sweeps} sweeps",
            best=best,
            sweeps=sweeps,
        )

    @staticmethod
    def _aitken(C: np.ndarray, prev1: np.ndarray, prev2: np.ndarray) -> None:
        """Aitken-style extrapolation along the last sweep direction.

        Iterates differ by elements of the absorbed span, so overshooting is
        corrected by later sweeps rather than breaking the limit.
        """
        for j in range(C.shape[1]):
            d2 = C[:, j] - prev1[:, j]
            d1 = prev1[:, j] - prev2[:, j]
            dd = float(d1 @ d1)
            if dd <= 0.0:
                continue
            rho = float(d2 @ d1) / dd
            if not (0.0 < rho < 1.0 - 1e-4):
                continue
            C[:, j] += (rho / (1.0 - rho)) * d2

    # ----------------------------------------------------------- cg backend

    def _dummy_design(self):
        from scipy import sparse

        if self._dummies is None:
            n = self.terms[0].codes.shape[0]
            blocks = []
            for t in self.terms:
                data = np.ones(n) if t.slope is None else t.slope
                blocks.append(
                    sparse.csr_matrix(
                        (data, (np.arange(n), t.codes)), shape=(n, t.n_groups)
                    )
                )
            self._dummies = sparse.hstack(blocks, format="csr")
        return self._dummies

    def _project_cg(self, C: np.ndarray, inner_tol: float) -> tuple[np.ndarray, int]:
        from scipy.sparse.linalg import LinearOperator, cg

        D = self._dummy_design()
        w = self.w
        p = D.shape[1]
        A = LinearOperator(
            (p, p), matvec=lambda a: D.T @ (w * (D @ a)), dtype=np.float64
        )
        out = np.empty_like(C)
        iters = 0

        def count(_):
            nonlocal iters
            iters += 1

        for j in range(C.shape[1]):
            b = D.T @ (w * C[:, j])
            alpha, _ = cg(A, b, rtol=min(inner_tol, 1e-10), atol=0.0, callback=count)
            out[:, j] = C[:, j] - D @ alpha
        return out, max(iters, 1)


# ------------------------------------------------------------------ singletons


def drop_singletons(
    sample: EstimationSample, *, keep_singletons: bool = False
) -> tuple[EstimationSample, int]:
    """Iteratively drop rows alone in any intercept term's group."""
    intercept_terms = [t for t in sample.absorb if not t.is_slope]
    if keep_singletons or not intercept_terms:
        return sample, 0
    dropped = 0
    while True:
        mask = np.zeros(sample.n_rows, dtype=bool)
        for t in sample.absorb:
            if t.is_slope:
                continue
            sizes = np.bincount(t.codes, minlength=t.n_groups)
            mask |= sizes[t.codes] == 1
        if not mask.any():
            return sample, dropped
        dropped += int(mask.sum())
        if mask.all():
            # take() would raise anyway; keep the message specific
            sample.ledger[sample.row_ids] = "singleton"
            raise DataError("no observations remain")
        sample = sample.take(~mask, "singleton")


# ------------------------------------------------------- degrees of freedom


@dataclass
class DofTableRow:
    label: str
    categories: int
    redundant: int
    is_slope: bool
    nested: bool = False
    exact: bool = True

    @property
    def df(self) -> int:
        return self.categories - self.redundant


@dataclass
class DofTable:
    """Per-term category and redundancy counts plus the absorbed-df totals."""

    rows: list[DofTableRow] = field(default_factory=list)
    method: str = "pairwise"

    @property
    def df_a_initial(self) -> int:
        return sum(r.categories for r in self.rows)

    @property
    def df_a_redundant(self) -> int:
        return sum(r.redundant for r in self.rows)

    @property
    def df_a(self) -> int:
        return self.df_a_initial - self.df_a_redundant


class _UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n)

    def find(self, i: int) -> int:
        parent = self.parent
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[ri] = rj


def n_connected_components(codes_a: np.ndarray, codes_b: np.ndarray, ga: int, gb: int) -> int:
    """Connected components of the bipartite group graph of two terms."""
    uf = _UnionFind(ga + gb)
    edges = np.unique(codes_a.astype(np.int64) * gb + codes_b)
    for e in edges:
        uf.union(int(e // gb), ga + int(e % gb))
    roots = {uf.find(i) for i in range(ga + gb)}
    return len(roots)


def is_nested(codes: np.ndarray, cluster_codes: np.ndarray, n_groups: int) -> bool:
    """True when every group maps into a single cluster."""
    pairs = np.unique(codes * (int(cluster_codes.max()) + 1) + cluster_codes)
    return pairs.size == n_groups


def count_dof(
    terms: Sequence[EncodedTerm],
    cluster_codes: Optional[dict[str, np.ndarray]] = None,
) -> DofTable:
    """Count degrees of freedom absorbed by the fixed effects.

    The first intercept term is fully counted; the second nets out the
    connected components of its bipartite graph with the first; later
    intercept terms use the conservative value 1 and are flagged inexact.
    Terms nested within a cluster variable contribute nothing.
    """
    table = DofTable()
    cluster_codes = cluster_codes or {}
    first: Optional[EncodedTerm] = None
    intercept_seen = 0
    for t in terms:
        if not t.is_slope:
            intercept_seen += 1
            if first is None:
                first = t
        nested = any(
            is_nested(t.codes, cc, t.n_groups) for cc in cluster_codes.values()
        )
        if nested:
            row = DofTableRow(t.label, t.n_groups, t.n_groups, t.is_slope, nested=True)
        elif t.is_slope:
            row = DofTableRow(t.label, t.n_groups, 0, True)
        elif intercept_seen == 1:
            row = DofTableRow(t.label, t.n_groups, 0, False)
        elif intercept_seen == 2:
            comps = n_connected_components(
                first.codes, t.codes, first.n_groups, t.n_groups
            )
            row = DofTableRow(t.label, t.n_groups, comps, False)
        else:
            row = DofTableRow(t.label, t.n_groups, 1, False, exact=False)
        table.rows.append(row)
    return table


# ------------------------------------------------------------ FE recovery


def recover_fe_sum(
    eta: np.ndarray, X: np.ndarray, delta: np.ndarray, offset: np.ndarray
) -> np.ndarray:
    """Absorbed-effects sum implied by a converged fit: eta - X@delta - offset."""
    fitted = X @ delta if delta.size else np.zeros_like(eta)
    return eta - fitted - offset


def decompose_fe_sum(
    d: np.ndarray,
    projector: HDFEProjector,
    *,
    tol: float = 1e-9,
    max_sweeps: int = 10_000,
) -> list[np.ndarray]:
    """Split an absorbed-effects sum into per-term components.

    Cyclic refitting of the residual on one term at a time; converges
    whenever ``d`` lies in the absorbed span (up to the fit's own tolerance).
    """
    if projector.w is None:
        raise EstimationError("projector weights not set")
    resid = d.astype(np.float64).copy()
    comps = [np.zeros_like(resid) for _ in projector.terms]
    scale = 1.0 + float(np.abs(d).max(initial=0.0))
    for _ in range(max_sweeps):
        for idx, t in enumerate(projector.terms):
            before = resid.copy()
            projector._apply_term(idx, resid)
            comps[idx] += before - resid
        if np.abs(resid).max(initial=0.0) <= tol * scale:
            break
    return comps
