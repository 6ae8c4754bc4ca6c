"""Accelerated IRLS loop for Poisson pseudo-maximum likelihood.

Each iteration rebuilds the working response and weights from the current
linear predictor, within-transforms them, solves weighted least squares on
the transformed pieces, and recovers the full linear predictor from the
residual identity ``fitted = z - e``. Convergence is declared on the
relative change of the deviance.

With ``accelerate`` on, the transforms are refined progressively instead of
recomputed: the working response restarts from
``z_resid + z - z_last`` and the covariates from their previous residuals,
while the projector tolerance tightens as the deviance settles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .dataset import EstimationSample
from .errors import DivergenceError, EstimationError
from .projector import DofTable, HDFEProjector, recover_fe_sum

ETA_OVERFLOW = 700.0  # exp() overflows just above this; treat as divergence
LOOSE_INNER_TOL = 1e-3

TraceFn = Callable[[int, str], None]


def _no_trace(level: int, msg: str) -> None:
    return None


@dataclass
class FitResult:
    """Converged (or abandoned) IRLS state plus bookkeeping.

    ``delta`` covers the kept covariate columns; ``dropped`` names the
    collinear ones. ``ic`` counts IRLS iterations, ``ic2`` projector sweeps.
    Inference fields (``V``, ``ll_0``, ``dof``) are attached by the caller
    that orchestrates the full pipeline.
    """

    delta: np.ndarray
    kept: list[int]
    dropped: list[int]
    x_names: list[str]
    eta: np.ndarray
    mu: np.ndarray
    d: np.ndarray
    deviance: float
    ll: float
    ic: int
    ic2: int
    converged: bool
    last_rel_change: float
    X_tilde: np.ndarray
    e: np.ndarray
    w: np.ndarray
    V: Optional[np.ndarray] = None
    ll_0: float = math.nan
    dof: Optional[DofTable] = None
    sample: Optional[EstimationSample] = None
    num_singletons: int = 0
    separation: Optional[object] = None

    @property
    def kept_names(self) -> list[str]:
        return [self.x_names[j] for j in self.kept]

    @property
    def dropped_names(self) -> list[str]:
        return [self.x_names[j] for j in self.dropped]


def initial_guess(
    y: np.ndarray,
    offset: np.ndarray,
    weights: np.ndarray,
    method: str = "simple",
    *,
    X: Optional[np.ndarray] = None,
    projector: Optional[HDFEProjector] = None,
) -> np.ndarray:
    """Starting linear predictor.

    ``simple`` uses mu0 = (y + mean(y)) / 2, which is bounded away from zero
    whenever the response is not identically zero. ``ols`` runs a loose
    weighted regression of log(1 + y) on the covariates with the absorbed
    effects partialled out.
    """
    ybar = float(weights @ y / weights.sum())
    if ybar <= 0.0:
        raise EstimationError("response identically zero")
    if method == "simple":
        return np.log((y + ybar) / 2.0)
    if method != "ols":
        raise ValueError(f"unknown guess method {method!r}")
    if X is None or projector is None:
        raise ValueError("ols guess needs covariates and a projector")
    q = np.log1p(y) - offset
    projector.set_weights(weights)
    qt, _ = projector.project(q, LOOSE_INNER_TOL)
    Xt, _ = projector.project(X, LOOSE_INNER_TOL)
    _, _, _, e = wls_solve(Xt, qt, weights)
    return (q - e) + offset


def update_working(
    y: np.ndarray,
    eta: np.ndarray,
    offset: np.ndarray,
    obs_weights: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Working response and IRLS weights at the current linear predictor."""
    if np.abs(eta).max(initial=0.0) > ETA_OVERFLOW:
        raise DivergenceError(
            "diverging linear predictor; the likelihood may have no maximum "
            "(try separation checks)"
        )
    mu = np.exp(eta)
    z = (y - mu) / mu + (eta - offset)
    w = obs_weights * mu
    return z, w


def wls_solve(
    Xt: np.ndarray,
    zt: np.ndarray,
    w: np.ndarray,
    *,
    pivot_tol: float = 1e-10,
    allow_empty: bool = True,
) -> tuple[np.ndarray, list[int], list[int], np.ndarray]:
    """Weighted least squares with in-order pivoting.

    Columns are eliminated in their given order; a column whose remaining
    pivot falls below ``pivot_tol`` times the largest pivot is dropped, so
    later duplicates lose to earlier columns. Returns
    ``(delta, kept, dropped, residuals)``.
    """
    n, k = Xt.shape
    if k == 0:
        return np.empty(0), [], [], zt.copy()
    G = Xt.T @ (Xt * w[:, None])
    c = Xt.T @ (w * zt)
    A = G.copy()
    ref = float(A.diagonal().max(initial=0.0))
    kept: list[int] = []
    dropped: list[int] = []
    for j in range(k):
        pivot = A[j, j]
        if pivot <= pivot_tol * ref:
            dropped.append(j)
            continue
        kept.append(j)
        # eliminate column j from the trailing block
        for i in range(j + 1, k):
            f = A[i, j] / pivot
            if f != 0.0:
                A[i, j:] -= f * A[j, j:]
    if not kept:
        if not allow_empty:
            raise EstimationError("nothing to estimate")
        return np.empty(0), [], dropped, zt.copy()
    delta = np.linalg.solve(G[np.ix_(kept, kept)], c[kept])
    e = zt - Xt[:, kept] @ delta
    return delta, kept, dropped, e


def deviance(y: np.ndarray, mu: np.ndarray, obs_weights: np.ndarray) -> float:
    """Poisson deviance with the y*log(y/mu) := 0 convention at y = 0."""
    ratio = np.divide(y, mu, out=np.ones_like(mu), where=y > 0)
    dev_terms = np.where(y > 0, y * np.log(ratio), 0.0) - (y - mu)
    return float(2.0 * obs_weights @ dev_terms)


def loglik(y: np.ndarray, mu: np.ndarray, obs_weights: np.ndarray) -> float:
    """Poisson (pseudo) log-likelihood; non-integer responses use the same form."""
    terms = y * np.log(mu) - mu - gammaln(y + 1.0)
    return float(obs_weights @ terms)


@dataclass
class IRLSOptions:
    tolerance: float = 1e-8
    max_iter: int = 10_000
    guess: str = "simple"
    accelerate: bool = True
    pivot_tol: float = 1e-10
    trace: TraceFn = _no_trace


def irls_fit(
    sample: EstimationSample,
    projector: HDFEProjector,
    options: Optional[IRLSOptions] = None,
) -> FitResult:
    """Fit the Poisson model by (accelerated) HDFE-IRLS."""
    opts = options or IRLSOptions()
    y, X, offset, obs_w = sample.y, sample.X, sample.offset, sample.weights
    has_absorb = len(sample.absorb) > 0
    trace = opts.trace
    tol = opts.tolerance

    eta = initial_guess(
        y, offset, obs_w, opts.guess, X=X, projector=projector
    )
    inner_tol = LOOSE_INNER_TOL if opts.accelerate else tol

    dev_prev = math.nan
    rel = math.inf
    z_prev = zt_prev = Xt_prev = None
    delta: np.ndarray = np.empty(0)
    kept: list[int] = []
    dropped: list[int] = list(range(X.shape[1]))
    e = np.zeros_like(y)
    Xt = X
    w = obs_w
    dev = math.nan
    ic = ic2 = 0
    converged = False

    for r in range(1, opts.max_iter + 1):
        z, w = update_working(y, eta, offset, obs_w)
        projector.set_weights(w)
        if opts.accelerate and r > 1:
            zt, s1 = projector.project(zt_prev + (z - z_prev), inner_tol, warm=True)
            Xt, s2 = projector.project(Xt_prev, inner_tol, warm=True)
        else:
            zt, s1 = projector.project(z, inner_tol)
            Xt, s2 = projector.project(X, inner_tol)
        ic2 += s1 + s2
        delta, kept, dropped, e = wls_solve(
            Xt, zt, w, pivot_tol=opts.pivot_tol, allow_empty=has_absorb
        )
        eta = (z - e) + offset
        if np.abs(eta).max(initial=0.0) > ETA_OVERFLOW:
            raise DivergenceError(
                "diverging linear predictor; the likelihood may have no maximum "
                "(try separation checks)"
            )
        mu = np.exp(eta)
        dev = deviance(y, mu, obs_w)
        ic += 1
        trace(1, f"Iteration {ic}: deviance = {dev:.10g}")
        trace(2, f"  inner tol {inner_tol:.2e}, sweeps z={s1} X={s2}")
        z_prev, zt_prev, Xt_prev = z, zt, Xt
        rel = abs(dev - dev_prev) / (1.0 + dev)
        if r > 1 and rel < tol:
            converged = True
            break
        dev_prev = dev
        if opts.accelerate:
            if math.isfinite(rel):
                inner_tol = max(tol, min(LOOSE_INNER_TOL, 0.1 * rel))
            else:
                inner_tol = LOOSE_INNER_TOL

    if converged and opts.accelerate:
        # final pass at full inner tolerance so the transform reaches
        # completion exactly where the answer is reported
        z, w = update_working(y, eta, offset, obs_w)
        projector.set_weights(w)
        zt, s1 = projector.project(zt_prev + (z - z_prev), tol, warm=True)
        Xt, s2 = projector.project(Xt_prev, tol, warm=True)
        ic2 += s1 + s2
        delta, kept, dropped, e = wls_solve(
            Xt, zt, w, pivot_tol=opts.pivot_tol, allow_empty=has_absorb
        )
        eta = (z - e) + offset
        mu = np.exp(eta)
        dev = deviance(y, mu, obs_w)
        ic += 1
        trace(1, f"Iteration {ic}: deviance = {dev:.10g} (final)")

    mu = np.exp(eta)
    d = recover_fe_sum(eta, X[:, kept], delta, offset)
    return FitResult(
        delta=delta,
        kept=kept,
        dropped=dropped,
        x_names=list(sample.x_names),
        eta=eta,
        mu=mu,
        d=d,
        deviance=dev,
        ll=loglik(y, mu, obs_w),
        ic=ic,
        ic2=ic2,
        converged=converged,
        last_rel_change=rel,
        X_tilde=Xt[:, kept] if kept else np.empty((y.shape[0], 0)),
        e=e,
        w=w,
        sample=sample,
    )


def fit_fe_only(
    sample: EstimationSample,
    projector: HDFEProjector,
    options: Optional[IRLSOptions] = None,
) -> float:
    """Log-likelihood of the absorbed-effects-only regression.

    With no absorbed terms this is the intercept-only model.
    """
    if sample.absorb:
        X0 = np.empty((sample.n_rows, 0))
        names: list[str] = []
    else:
        X0 = np.ones((sample.n_rows, 1))
        names = ["_cons"]
    reduced = sample.with_covariates(X0, names)
    opts = options or IRLSOptions()
    fe_opts = IRLSOptions(
        tolerance=opts.tolerance,
        max_iter=opts.max_iter,
        guess="simple",
        accelerate=opts.accelerate,
        pivot_tol=opts.pivot_tol,
    )
    fit = irls_fit(reduced, projector, fe_opts)
    return fit.ll
