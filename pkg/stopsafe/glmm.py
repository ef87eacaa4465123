"""
Mixed-effects logistic regression with crossed random intercepts.

The marginal likelihood is Laplace-approximated in the spherical
parametrization b = Lambda u, u ~ N(0, I), Lambda = diag(sqrt(tau_k)):

    log L(beta, tau) ~= l(y | X beta + Z Lambda u*) - u*'u* / 2
                        - log |Lambda Z'WZ Lambda + I| / 2

where u* is the conditional mode found by penalized Newton iterations on the
sparse Hessian. Variance components are searched on the log scale with a
derivative-free optimizer; adaptive Gauss-Hermite quadrature is available for
single-factor models as an accuracy reference.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd
from numpy.polynomial.hermite import hermgauss
from scipy import sparse
from scipy.optimize import minimize
from scipy.sparse.linalg import splu
from scipy.special import expit, logsumexp
from scipy.stats import chi2, norm

import settings

from .cgm import Episode
from .encounters import BehaviorRow
from .exceptions import (
    CompleteSeparationError,
    DegenerateGroupsError,
    EmptyPartitionError,
    InvalidParameterError,
    NotNestedError,
    RefitFailureError,
    StopSafeError,
)
from .ingest import ParticipantType

logger = logging.getLogger(__name__)

SIGMA2_LOGIT = np.pi**2 / 3
Z_95 = norm.ppf(0.975)
INTERCEPT = "(Intercept)"

START_TAUS = (0.1, 1.0, 4.0)
LOG_TAU_BOUNDS = (-12.0, 6.0)
TAU_SNAP = 1e-3
SEPARATION_BETA = 25.0

INNER_TOL = 1e-10
INNER_MAX_ITER = 100
GRADIENT_STEP = 1e-5


class FixedFactor(StrEnum):
    PARTICIPANT_TYPE = "participant_type"
    EPISODE = "episode"


class RandomFactor(StrEnum):
    PARTICIPANT = "participant"
    INTERSECTION = "intersection"


@dataclass(frozen=True)
class ModelSpec:
    fixed_factor: FixedFactor | None
    reference_level: str | None
    random_factors: tuple[RandomFactor, ...] = (RandomFactor.PARTICIPANT,)
    partition: str = ""

    def __post_init__(self):
        if not self.random_factors:
            raise InvalidParameterError("A model needs at least one random factor")
        if RandomFactor.PARTICIPANT not in self.random_factors:
            raise InvalidParameterError("Random factors must include participant")
        if len(set(self.random_factors)) != len(self.random_factors):
            raise InvalidParameterError(f"Repeated random factor in {self.random_factors}")
        if (self.fixed_factor is None) != (self.reference_level is None):
            raise InvalidParameterError(
                "fixed_factor and reference_level must be given together"
            )

    @property
    def label(self) -> str:
        return "+".join(f.value for f in self.random_factors)


@dataclass
class MelrFit:
    beta: np.ndarray
    se: np.ndarray
    tau: dict[str, float]
    loglik: float
    converged: bool
    n_obs: int
    n_groups: dict[str, int]
    fixed_names: tuple[str, ...] = (INTERCEPT,)
    vcov: np.ndarray | None = field(default=None, repr=False)
    random_modes: dict[str, dict[str, float]] = field(default_factory=dict, repr=False)
    fixed_variance: float = 0.0
    spec: ModelSpec | None = None
    sigma2_residual: float = field(default=SIGMA2_LOGIT, init=False)

    @property
    def random_factors(self) -> tuple[str, ...]:
        return tuple(self.tau)


@dataclass(frozen=True)
class OddsRatio:
    name: str
    beta: float
    se: float
    odds_ratio: float
    ci_low: float
    ci_high: float
    p: float


@dataclass(frozen=True)
class FitSummary:
    or_table: list[OddsRatio]
    icc: float
    r2_marginal: float
    r2_conditional: float
    tau: dict[str, float]
    n_groups: dict[str, int]
    n_obs: int
    loglik: float
    converged: bool
    sigma2: float = SIGMA2_LOGIT


class LrtResult(NamedTuple):
    chi2: float
    df: int
    p: float


@dataclass
class InfluenceReport:
    grouping: str
    cooks_d: dict[str, float | None]
    flagged: list[str]
    threshold: float = settings.COOKS_THRESHOLD
    failures: dict[str, str] = field(default_factory=dict)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "group": group,
                    "cooks_d": value,
                    "flagged": group in self.flagged,
                    "refit_error": self.failures.get(group, ""),
                }
                for group, value in self.cooks_d.items()
            ],
            columns=["group", "cooks_d", "flagged", "refit_error"],
        )


# ---------------- Design ----------------
@dataclass(frozen=True)
class Design:
    y: np.ndarray
    X: np.ndarray
    Z: sparse.csr_matrix
    fixed_names: tuple[str, ...]
    levels: np.ndarray
    reference_level: str
    factors: tuple[RandomFactor, ...]
    groups: dict[RandomFactor, np.ndarray]
    membership: dict[RandomFactor, np.ndarray]

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    def scales(self, tau: np.ndarray) -> np.ndarray:
        """Diagonal of Lambda: sqrt(tau_k) repeated over the groups of factor k."""
        sizes = [len(self.groups[f]) for f in self.factors]
        return np.repeat(np.sqrt(np.asarray(tau, dtype=float)), sizes)


def _fixed_value(row: BehaviorRow, factor: FixedFactor) -> str:
    if factor == FixedFactor.PARTICIPANT_TYPE:
        return row.participant_type.value
    return row.episode.value


def _group_id(row: BehaviorRow, factor: RandomFactor) -> str:
    if factor == RandomFactor.PARTICIPANT:
        return row.participant_id
    return row.intersection_id


def build_design(rows: Sequence[BehaviorRow], spec: ModelSpec) -> Design:
    """
    Response vector, treatment-coded fixed effects (intercept = reference
    level) and the sparse random-intercept incidence matrix.

    :raises EmptyPartitionError: If there are no rows.
    :raises InvalidParameterError: If the reference level is absent or the
        fixed factor has a single level.
    :raises DegenerateGroupsError: If a random factor has a single group.
    """
    rows = list(rows)
    if not rows:
        raise EmptyPartitionError(f"No rows to model for [{spec.partition or 'model'}]")
    n = len(rows)
    y = np.array([r.unsafe for r in rows], dtype=float)

    if spec.fixed_factor is None:
        levels = np.full(n, INTERCEPT, dtype=object)
        X = np.ones((n, 1))
        names = (INTERCEPT,)
        reference = INTERCEPT
    else:
        levels = np.array([_fixed_value(r, spec.fixed_factor) for r in rows], dtype=object)
        present = sorted(set(levels))
        reference = spec.reference_level
        if reference not in present:
            raise InvalidParameterError(
                f"Reference level [{reference}] of {spec.fixed_factor} is not present "
                f"(levels: {present})"
            )
        if len(present) < 2:
            raise InvalidParameterError(
                f"Fixed factor {spec.fixed_factor} has a single level [{reference}]"
            )
        others = [level for level in present if level != reference]
        X = np.column_stack([np.ones(n)] + [(levels == lv).astype(float) for lv in others])
        names = (INTERCEPT,) + tuple(f"{spec.fixed_factor}[{lv}]" for lv in others)

    blocks, groups, membership = [], {}, {}
    for factor in spec.random_factors:
        ids = np.array([_group_id(r, factor) for r in rows], dtype=object)
        labels, index = np.unique(ids, return_inverse=True)
        if len(labels) < 2:
            raise DegenerateGroupsError(
                f"Random factor [{factor}] has a single group [{labels[0]}]"
            )
        groups[factor] = labels
        membership[factor] = index
        blocks.append(
            sparse.csr_matrix(
                (np.ones(n), (np.arange(n), index)), shape=(n, len(labels))
            )
        )

    return Design(
        y=y,
        X=X,
        Z=sparse.hstack(blocks, format="csr"),
        fixed_names=names,
        levels=levels,
        reference_level=reference,
        factors=tuple(spec.random_factors),
        groups=groups,
        membership=membership,
    )


def _tau_vector(design: Design, tau: Mapping[str, float] | Sequence[float]) -> np.ndarray:
    if isinstance(tau, Mapping):
        return np.array([float(tau[f.value]) for f in design.factors])
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (len(design.factors),):
        raise InvalidParameterError(
            f"Expected {len(design.factors)} variance components, got {tau.shape}"
        )
    return tau


def _check_separation(design: Design):
    for level in sorted(set(design.levels)):
        outcomes = design.y[design.levels == level]
        if outcomes.min() == outcomes.max():
            raise CompleteSeparationError(
                f"All {len(outcomes)} responses at level [{level}] are "
                f"{int(outcomes[0])}; the odds ratio is unbounded",
                level=level,
            )


# ---------------- Likelihood pieces ----------------
def _bernoulli(y: np.ndarray, eta: np.ndarray) -> float:
    return float(y @ eta - np.logaddexp(0.0, eta).sum())


def penalized_loglik(design: Design, beta, u, tau) -> float:
    """Joint log-density l(y | X beta + Z Lambda u) - u'u / 2."""
    u = np.asarray(u, dtype=float)
    eta = design.X @ beta + design.Z @ (design.scales(_tau_vector(design, tau)) * u)
    return _bernoulli(design.y, eta) - 0.5 * float(u @ u)


def penalized_gradient(design: Design, beta, u, tau) -> np.ndarray:
    """Gradient of :func:`penalized_loglik` with respect to (beta, u)."""
    u = np.asarray(u, dtype=float)
    lam = design.scales(_tau_vector(design, tau))
    eta = design.X @ beta + design.Z @ (lam * u)
    resid = design.y - expit(eta)
    return np.concatenate([design.X.T @ resid, lam * (design.Z.T @ resid) - u])


def _damped_newton(
    objective: Callable[[np.ndarray], float],
    derivatives: Callable[[np.ndarray], tuple[np.ndarray, sparse.spmatrix]],
    theta: np.ndarray,
) -> tuple[np.ndarray, float]:
    """Maximizes a concave objective; ``derivatives`` returns (gradient, -Hessian)."""
    value = objective(theta)
    for _ in range(INNER_MAX_ITER):
        grad, neg_hess = derivatives(theta)
        step = splu(sparse.csc_matrix(neg_hess)).solve(grad)
        t = 1.0
        while True:
            candidate = theta + t * step
            candidate_value = objective(candidate)
            if candidate_value >= value - 1e-12 * max(1.0, abs(value)) or t < 1e-10:
                break
            t *= 0.5
        theta, value = candidate, candidate_value
        if np.max(np.abs(t * step), initial=0.0) < INNER_TOL:
            break
    return theta, value


@dataclass
class _Mode:
    u: np.ndarray
    loglik: float
    weights: np.ndarray
    ZL: sparse.csr_matrix
    lu: object


class _Laplace:
    """Laplace evaluator with modes warm-started from the previous call."""

    def __init__(self, design: Design):
        self.design = design
        self.u = np.zeros(design.q)
        self.beta = np.zeros(design.p)

    def mode(self, beta: np.ndarray, tau: np.ndarray) -> _Mode:
        design = self.design
        ZL = (design.Z @ sparse.diags(design.scales(tau))).tocsr()
        offset = design.X @ beta
        identity = sparse.identity(design.q, format="csr")

        def objective(u):
            return _bernoulli(design.y, offset + ZL @ u) - 0.5 * float(u @ u)

        def derivatives(u):
            mu = expit(offset + ZL @ u)
            grad = ZL.T @ (design.y - mu) - u
            return grad, ZL.T @ sparse.diags(mu * (1 - mu)) @ ZL + identity

        u, value = _damped_newton(objective, derivatives, self.u.copy())
        self.u = u

        mu = expit(offset + ZL @ u)
        weights = mu * (1 - mu)
        lu = splu(sparse.csc_matrix(ZL.T @ sparse.diags(weights) @ ZL + identity))
        # L is unit lower triangular, so |H| is the product of |diag(U)|
        logdet = float(np.log(np.abs(lu.U.diagonal())).sum())
        return _Mode(u, value - 0.5 * logdet, weights, ZL, lu)

    def loglik(self, beta: np.ndarray, tau: np.ndarray) -> float:
        return self.mode(beta, tau).loglik

    def joint(self, tau: np.ndarray) -> np.ndarray:
        """Joint (beta, u) mode of the penalized log-density at fixed tau."""
        design = self.design
        ZL = (design.Z @ sparse.diags(design.scales(tau))).tocsr()
        A = sparse.hstack([sparse.csr_matrix(design.X), ZL], format="csr")
        penalty = sparse.diags(np.r_[np.zeros(design.p), np.ones(design.q)])
        p = design.p

        def objective(theta):
            return penalized_loglik(design, theta[:p], theta[p:], tau)

        def derivatives(theta):
            mu = expit(A @ theta)
            grad = penalized_gradient(design, theta[:p], theta[p:], tau)
            return grad, A.T @ sparse.diags(mu * (1 - mu)) @ A + penalty

        theta, _ = _damped_newton(objective, derivatives, np.r_[self.beta, self.u])
        self.beta, self.u = theta[:p], theta[p:]
        return self.beta


def laplace_loglik(design: Design, beta, tau) -> float:
    """Laplace-approximated marginal log-likelihood at the given parameters."""
    return _Laplace(design).loglik(np.asarray(beta, dtype=float), _tau_vector(design, tau))


def agq_loglik(design: Design, beta, tau, n_nodes: int = 15) -> float:
    """
    Marginal log-likelihood of a single random factor model by adaptive
    Gauss-Hermite quadrature, centring and scaling the nodes of every group at
    its conditional mode and curvature. One node reproduces the Laplace value.

    :raises InvalidParameterError: For more than one random factor.
    """
    if len(design.factors) != 1:
        raise InvalidParameterError("Quadrature supports a single random factor")
    tau = float(_tau_vector(design, tau)[0])
    offset = design.X @ np.asarray(beta, dtype=float)
    y = design.y
    if tau == 0:
        return _bernoulli(y, offset)

    g = design.membership[design.factors[0]]
    n_groups = len(design.groups[design.factors[0]])

    b = np.zeros(n_groups)
    for _ in range(INNER_MAX_ITER):
        mu = expit(offset + b[g])
        grad = np.bincount(g, y - mu, minlength=n_groups) - b / tau
        curvature = np.bincount(g, mu * (1 - mu), minlength=n_groups) + 1 / tau
        step = np.clip(grad / curvature, -5.0, 5.0)
        b += step
        if np.abs(step).max() < INNER_TOL:
            break
    mu = expit(offset + b[g])
    curvature = np.bincount(g, mu * (1 - mu), minlength=n_groups) + 1 / tau
    scale = np.sqrt(2.0 / curvature)

    z, w = hermgauss(n_nodes)
    nodes = b[:, None] + scale[:, None] * z[None, :]
    eta = offset[:, None] + nodes[g]
    h = np.zeros_like(nodes)
    np.add.at(h, g, y[:, None] * eta - np.logaddexp(0.0, eta))
    h -= nodes**2 / (2 * tau)

    per_group = (
        np.log(scale)
        - 0.5 * np.log(2 * np.pi * tau)
        + logsumexp(h + z**2 + np.log(w), axis=1)
    )
    return float(per_group.sum())


# ---------------- Fitting ----------------
def _gradient(fn: Callable[[np.ndarray], float], x: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = GRADIENT_STEP
        grad[i] = (fn(x + e) - fn(x - e)) / (2 * GRADIENT_STEP)
    return grad


def fit_melr(
    rows: Sequence[BehaviorRow],
    spec: ModelSpec,
    tol: float = settings.GLMM_TOL,
    max_iter: int = settings.GLMM_MAX_ITER,
    start: MelrFit | None = None,
) -> MelrFit:
    """
    Fits a mixed-effects logistic regression by maximizing the Laplace
    approximated marginal likelihood.

    - profile stage: for each log-tau candidate, (beta, u) are set to their
      joint penalized mode; log tau is searched by Nelder-Mead from tau in
      {0.1, 1, 4} (or from ``start``)
    - refinement: (beta, log tau) are searched jointly on the Laplace objective
    - a variance component that ends below 1e-3 is set to 0 when that does not
      lower the likelihood
    - se from the fixed-effects block of the inverse information at the mode
    - ``converged`` iff the central-difference gradient norm is below ``tol``

    :raises CompleteSeparationError: If a fixed-factor level has only one
        outcome or an estimate diverges, naming the level.
    :raises DegenerateGroupsError: If a random factor has a single group.
    """
    design = build_design(rows, spec)
    _check_separation(design)

    p, k = design.p, len(design.factors)
    laplace = _Laplace(design)

    def profiled(log_tau):
        tau = np.exp(log_tau)
        return -laplace.loglik(laplace.joint(tau), tau)

    if start is not None and start.fixed_names == design.fixed_names:
        starts = [np.log(np.maximum(_tau_vector(design, start.tau), 1e-2))]
        laplace.beta = np.array(start.beta, dtype=float)
    else:
        starts = [np.full(k, np.log(t)) for t in START_TAUS]

    best = None
    for x0 in starts:
        result = minimize(
            profiled,
            x0,
            method="Nelder-Mead",
            bounds=[LOG_TAU_BOUNDS] * k,
            options={"xatol": 1e-4, "fatol": 1e-6, "maxiter": max_iter},
        )
        if best is None or result.fun < best.fun:
            best = result

    beta0 = laplace.joint(np.exp(best.x)).copy()

    def objective(theta):
        return -laplace.loglik(theta[:p], np.exp(theta[p:]))

    profile_optimum = np.r_[beta0, best.x]
    refined = minimize(
        objective,
        profile_optimum,
        method="Nelder-Mead",
        bounds=[(None, None)] * p + [LOG_TAU_BOUNDS] * k,
        options={"xatol": 1e-7, "fatol": 1e-10, "maxiter": max_iter, "adaptive": True},
    )
    if refined.fun > objective(profile_optimum):
        refined.x = profile_optimum
    beta, tau = refined.x[:p].copy(), np.exp(refined.x[p:])

    mode = laplace.mode(beta, tau)
    for i in range(k):
        if tau[i] >= TAU_SNAP:
            continue
        trial = tau.copy()
        trial[i] = 0.0
        snapped = laplace.mode(beta, trial)
        if snapped.loglik >= mode.loglik - 1e-6:
            tau, mode = trial, snapped

    if np.abs(beta).max() > SEPARATION_BETA:
        j = int(np.argmax(np.abs(beta)))
        level = design.reference_level if j == 0 else design.fixed_names[j]
        raise CompleteSeparationError(
            f"Estimate for [{design.fixed_names[j]}] diverged to {beta[j]:.1f}",
            level=level,
        )

    free = np.flatnonzero(tau > 0)

    def free_loglik(x):
        t = tau.copy()
        t[free] = np.exp(x[p:])
        return laplace.loglik(x[:p], t)

    grad = _gradient(free_loglik, np.r_[beta, np.log(tau[free])])
    converged = bool(np.linalg.norm(grad) < tol)
    mode = laplace.mode(beta, tau)

    XW = design.X * mode.weights[:, None]
    ZtWX = np.asarray(mode.ZL.T @ XW)
    info = design.X.T @ XW - ZtWX.T @ mode.lu.solve(ZtWX)
    vcov = np.linalg.inv(info)

    b = design.scales(tau) * mode.u
    offsets = np.cumsum([0] + [len(design.groups[f]) for f in design.factors])
    random_modes = {
        f.value: dict(zip(design.groups[f].tolist(), b[lo:hi].tolist()))
        for f, lo, hi in zip(design.factors, offsets[:-1], offsets[1:])
    }

    fit = MelrFit(
        beta=beta,
        se=np.sqrt(np.diag(vcov)),
        tau={f.value: float(t) for f, t in zip(design.factors, tau)},
        loglik=mode.loglik,
        converged=converged,
        n_obs=design.n_obs,
        n_groups={f.value: len(design.groups[f]) for f in design.factors},
        fixed_names=design.fixed_names,
        vcov=vcov,
        random_modes=random_modes,
        fixed_variance=float(np.var(design.X @ beta, ddof=1)) if design.n_obs > 1 else 0.0,
        spec=spec,
    )
    if not converged:
        logger.warning(
            f"Model [{spec.partition or 'model'} / {spec.label}] did not converge: "
            f"gradient norm {np.linalg.norm(grad):.2e} >= {tol}"
        )
    return fit


# ---------------- Inference ----------------
def lrt_compare(reduced: MelrFit, full: MelrFit) -> LrtResult:
    """
    Likelihood-ratio test of nested random-effect structures. No boundary
    correction: chi2 is referred to a plain chi-square with df equal to the
    difference in variance-component count.

    :raises NotNestedError: If the reduced factors are not a subset of the full
        ones, or the fits differ in rows or fixed effects.
    """
    if not set(reduced.random_factors) <= set(full.random_factors):
        raise NotNestedError(
            f"Random factors {reduced.random_factors} are not nested in "
            f"{full.random_factors}"
        )
    if reduced.n_obs != full.n_obs:
        raise NotNestedError(
            f"Fits use different rows ({reduced.n_obs} vs {full.n_obs} observations)"
        )
    if tuple(reduced.fixed_names) != tuple(full.fixed_names):
        raise NotNestedError(
            f"Fits use different fixed effects {reduced.fixed_names} vs {full.fixed_names}"
        )

    df = len(full.tau) - len(reduced.tau)
    raw = 2.0 * (full.loglik - reduced.loglik)
    if raw < -1e-6:
        logger.warning(
            f"Full model log-likelihood is {-raw / 2:.2e} below the reduced one; "
            f"the fits may not have converged"
        )
    statistic = max(0.0, raw)
    p = 1.0 if df == 0 else float(chi2.sf(statistic, df))
    return LrtResult(statistic, df, p)


def summarize_fit(fit: MelrFit) -> FitSummary:
    """Odds ratios with 95% Wald intervals, ICC and marginal/conditional R²."""
    if not fit.converged:
        logger.warning("Summarizing a fit that did not converge")

    rows = []
    for name, beta, se in zip(fit.fixed_names, fit.beta, fit.se):
        z = beta / se if se > 0 else np.inf * np.sign(beta)
        rows.append(
            OddsRatio(
                name=name,
                beta=float(beta),
                se=float(se),
                odds_ratio=float(np.exp(beta)),
                ci_low=float(np.exp(beta - Z_95 * se)),
                ci_high=float(np.exp(beta + Z_95 * se)),
                p=float(2 * norm.sf(abs(z))) if np.isfinite(z) else 0.0,
            )
        )

    tau_total = float(sum(fit.tau.values()))
    sigma2 = fit.sigma2_residual
    latent = fit.fixed_variance + tau_total + sigma2
    return FitSummary(
        or_table=rows,
        icc=tau_total / (tau_total + sigma2),
        r2_marginal=fit.fixed_variance / latent,
        r2_conditional=(fit.fixed_variance + tau_total) / latent,
        tau=dict(fit.tau),
        n_groups=dict(fit.n_groups),
        n_obs=fit.n_obs,
        loglik=fit.loglik,
        converged=fit.converged,
        sigma2=sigma2,
    )


def flag_influential(
    cooks_d: Mapping[str, float | None], threshold: float = settings.COOKS_THRESHOLD
) -> list[str]:
    """Groups whose distance strictly exceeds ``threshold``, in key order."""
    return [g for g, d in cooks_d.items() if d is not None and d > threshold]


def cooks_groups(
    rows: Sequence[BehaviorRow],
    spec: ModelSpec,
    fit: MelrFit,
    grouping: RandomFactor | str,
    groups: Iterable[str] | None = None,
    threshold: float = settings.COOKS_THRESHOLD,
    tol: float = settings.GLMM_TOL,
    max_iter: int = settings.GLMM_MAX_ITER,
    max_workers: int = settings.MAX_WORKERS,
) -> InfluenceReport:
    """
    Group-deletion Cook's distance,
    D_g = (beta - beta_(-g))' V^-1 (beta - beta_(-g)) / p, with V the
    fixed-effects covariance of the full fit.

    Refits run concurrently and are reduced in group order. A failed refit
    is logged and recorded with D = None; deleting a group with no rows
    gives D = 0.

    :raises InvalidParameterError: If ``grouping`` is not a random factor of
        the model.
    """
    grouping = RandomFactor(grouping)
    if grouping not in spec.random_factors:
        raise InvalidParameterError(
            f"Grouping [{grouping}] is not a random factor of {spec.label}"
        )
    if fit.vcov is None:
        raise InvalidParameterError("Influence needs the covariance of the full fit")

    rows = list(rows)
    ids = [_group_id(r, grouping) for r in rows]
    groups = sorted(set(ids)) if groups is None else list(groups)
    p = len(fit.beta)

    def influence(group: str) -> float:
        kept = [r for r, g in zip(rows, ids) if g != group]
        if len(kept) == len(rows):
            return 0.0
        try:
            refit = fit_melr(kept, spec, tol=tol, max_iter=max_iter, start=fit)
        except (StopSafeError, np.linalg.LinAlgError, RuntimeError) as exc:
            raise RefitFailureError(
                f"Refit without {grouping} [{group}] failed: {exc}", group
            ) from exc
        if refit.fixed_names != fit.fixed_names:
            raise RefitFailureError(
                f"Refit without {grouping} [{group}] changed the fixed effects to "
                f"{refit.fixed_names}",
                group,
            )
        delta = fit.beta - refit.beta
        return float(delta @ np.linalg.solve(fit.vcov, delta) / p)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [pool.submit(influence, group) for group in groups]

    cooks_d: dict[str, float | None] = {}
    failures: dict[str, str] = {}
    for group, future in zip(groups, futures):
        try:
            cooks_d[group] = future.result()
        except RefitFailureError as exc:
            logger.warning(str(exc))
            cooks_d[group] = None
            failures[group] = str(exc)

    return InfluenceReport(
        grouping=grouping.value,
        cooks_d=cooks_d,
        flagged=flag_influential(cooks_d, threshold),
        threshold=threshold,
        failures=failures,
    )


def _row_group(row: BehaviorRow, grouping: str) -> str:
    return _group_id(row, RandomFactor(grouping))


def without_group(rows: Iterable[BehaviorRow], grouping: str, group: str) -> list[BehaviorRow]:
    return [r for r in rows if _row_group(r, grouping) != group]


# ---------------- Partitions ----------------
@dataclass(frozen=True)
class PartitionSpec:
    name: str
    fixed_factor: FixedFactor
    reference_level: str
    description: str
    includes: Callable[[BehaviorRow], bool] = field(repr=False, compare=False)

    def model(self, random_factors: Sequence[RandomFactor]) -> ModelSpec:
        return ModelSpec(
            fixed_factor=self.fixed_factor,
            reference_level=self.reference_level,
            random_factors=tuple(random_factors),
            partition=self.name,
        )


ACUTE_EPISODES = {Episode.CONTROL, Episode.HYPO, Episode.NORMAL, Episode.SEVERE_HYPER}

PARTITIONS: dict[str, PartitionSpec] = {
    spec.name: spec
    for spec in (
        PartitionSpec(
            "dm_all",
            FixedFactor.PARTICIPANT_TYPE,
            ParticipantType.CONTROL.value,
            "All T1DM and control data",
            lambda r: True,
        ),
        PartitionSpec(
            "dm_norm",
            FixedFactor.PARTICIPANT_TYPE,
            ParticipantType.CONTROL.value,
            "T1DM data in acutely normal states and all control data",
            lambda r: r.participant_type == ParticipantType.CONTROL
            or r.episode == Episode.NORMAL,
        ),
        PartitionSpec(
            "all",
            FixedFactor.EPISODE,
            Episode.CONTROL.value,
            "Control and T1DM data by acute glycemic episode",
            lambda r: r.episode in ACUTE_EPISODES,
        ),
        PartitionSpec(
            "dm",
            FixedFactor.EPISODE,
            Episode.NORMAL.value,
            "T1DM data by acute glycemic episode",
            lambda r: r.participant_type == ParticipantType.T1DM,
        ),
    )
}


def partition_rows(rows: Iterable[BehaviorRow], name: str) -> list[BehaviorRow]:
    """
    Rows of one modelling partition; rows flagged ``excluded_from_models`` never
    enter a partition.

    :raises EmptyPartitionError: If the partition has no rows.
    """
    spec = PARTITIONS[name]
    selected = [r for r in rows if not r.excluded_from_models and spec.includes(r)]
    if not selected:
        raise EmptyPartitionError(f"Partition [{name}] has no rows")
    return selected


def build_partitions(rows: Iterable[BehaviorRow]) -> dict[str, list[BehaviorRow]]:
    rows = list(rows)
    return {name: partition_rows(rows, name) for name in PARTITIONS}


def partition_table(rows: Sequence[BehaviorRow], spec: PartitionSpec) -> list[dict]:
    """Total / safe / unsafe counts per fixed-factor level, with percentages."""
    frame = pd.DataFrame(
        {
            "level": [_fixed_value(r, spec.fixed_factor) for r in rows],
            "unsafe": [r.unsafe for r in rows],
        }
    )
    table = []
    for level, group in frame.groupby("level", sort=True):
        total = len(group)
        unsafe = int(group["unsafe"].sum())
        table.append(
            {
                "level": level,
                "total": total,
                "safe": total - unsafe,
                "unsafe": unsafe,
                "safe_pct": 100.0 * (total - unsafe) / total,
                "unsafe_pct": 100.0 * unsafe / total,
            }
        )
    return table
