"""Logistic regression and logistic-normal random-intercept models.

Two fitters live here:

* fit_logistic: iteratively reweighted least squares with step halving,
  so the log-likelihood is nondecreasing across iterations by construction.
* fit_mixed_logistic: maximum likelihood for a Bernoulli GLMM with one
  shared random intercept per group. The marginal likelihood integrates
  the intercept out with adaptive Gauss-Hermite quadrature (mode centered,
  curvature scaled), and the outer optimization over (beta, log sd) is
  quasi-Newton with a damped-Newton polish down to a gradient-norm
  tolerance.

The grouped-quadrature core (GroupLayout + grouped_* functions) is shared
with the neighborhood-exposure density integrals, which have the same
"product of Bernoullis with a fresh shared intercept" shape.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logsumexp

from .errors import ConvergenceError, InputError
from .netgraph import Partition

LOGISTIC_TOL = 1e-10          # relative log-likelihood change
IRLS_MAX_ITER = 100
SEPARATION_COEF = 15.0
GLMM_GRADIENT_TOL = 1e-8      # norm of the marginal log-likelihood gradient
MIXED_MAX_ITER = 200
DEFAULT_QUAD_NODES = 21
FD_SCORE_STEP = 1e-6          # central-difference step scale for group scores
_LOG_SD_FLOOR = np.log(1e-4)  # below this the random intercept is treated as 0


@dataclass(frozen=True)
class DesignMatrix:
    """Dense design matrix with column names for reporting."""

    values: np.ndarray
    column_names: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_names", tuple(self.column_names))
        if values.ndim != 2:
            raise InputError("design matrix must be 2-d")
        if len(self.column_names) != values.shape[1]:
            raise InputError("column_names length does not match design width")
        if not np.all(np.isfinite(values)):
            raise InputError("design matrix contains non-finite values")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


def _as_design(X) -> DesignMatrix:
    if isinstance(X, DesignMatrix):
        return X
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise InputError("design matrix must be 2-d")
    return DesignMatrix(X, tuple(f"x{j}" for j in range(X.shape[1])))


def _as_partition(groups, n: int) -> Partition:
    if isinstance(groups, Partition):
        part = groups
    else:
        part = Partition.from_labels(list(groups))
    if part.n != n:
        raise InputError("group labels length does not match data length")
    return part


def _check_response(y, n):
    y = np.asarray(y)
    if y.shape != (n,):
        raise InputError("response length does not match design")
    vals = np.unique(y)
    if not np.all(np.isin(vals, (0, 1))):
        raise InputError("response must be binary 0/1")
    return y.astype(float)


def _check_rank(X: DesignMatrix):
    if X.n < X.p or np.linalg.matrix_rank(X.values) < X.p:
        raise InputError("design matrix is rank deficient")


@dataclass
class LogisticFit:
    coefficients: np.ndarray
    column_names: tuple
    log_likelihood: float
    iterations: int
    converged: bool
    separation_warning: bool
    loglik_path: tuple

    @property
    def re_sd(self) -> float:
        return 0.0


@dataclass
class MixedLogisticFit:
    fixed_coefficients: np.ndarray
    re_sd: float
    group_modes: np.ndarray
    column_names: tuple
    log_likelihood: float
    iterations: int
    converged: bool
    gradient_norm: float
    groups: Partition
    quad_nodes: int

    @property
    def coefficients(self) -> np.ndarray:
        return self.fixed_coefficients


def _bernoulli_loglik(lp, y):
    # sum_i y*lp - log(1 + e^lp), stable at large |lp|
    return float(np.sum(y * lp - np.logaddexp(0.0, lp)))


def fit_logistic(X, y, max_iter: int = IRLS_MAX_ITER, tol: float = LOGISTIC_TOL) -> LogisticFit:
    """IRLS maximum likelihood for plain logistic regression.

    Convergence is a relative log-likelihood change below `tol`. Steps that
    would decrease the log-likelihood are halved, so `loglik_path` is
    nondecreasing. Coefficients beyond 15 in absolute value trigger a
    separation warning (fitted probabilities at the 0/1 limit).
    """
    X = _as_design(X)
    _check_rank(X)
    y = _check_response(y, X.n)
    V = X.values
    beta = np.zeros(X.p)
    ll = _bernoulli_loglik(V @ beta, y)
    path = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        lp = V @ beta
        p = expit(lp)
        w = np.clip(p * (1.0 - p), 1e-10, None)
        score = V.T @ (y - p)
        info = (V * w[:, None]).T @ V
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise InputError("singular information matrix in IRLS") from exc
        new_ll = _bernoulli_loglik(V @ (beta + step), y)
        halvings = 0
        while new_ll < ll - 1e-12 and halvings < 30:
            step *= 0.5
            new_ll = _bernoulli_loglik(V @ (beta + step), y)
            halvings += 1
        beta = beta + step
        path.append(new_ll)
        if abs(new_ll - ll) <= tol * (1.0 + abs(ll)):
            ll = new_ll
            converged = True
            break
        ll = new_ll
    separation = bool(np.any(np.abs(beta) > SEPARATION_COEF))
    if separation:
        warnings.warn("possible separation: coefficient beyond 15 in absolute value")
    return LogisticFit(
        coefficients=beta,
        column_names=X.column_names,
        log_likelihood=ll,
        iterations=it,
        converged=converged,
        separation_warning=separation,
        loglik_path=tuple(path),
    )


# ---------------------------------------------------------------------------
# grouped Bernoulli quadrature core

@lru_cache(maxsize=8)
def _gh_nodes(k: int):
    x, w = np.polynomial.hermite.hermgauss(k)
    return x, np.log(w)


class GroupLayout:
    """Sorted segment layout for per-group reductions over entry arrays."""

    def __init__(self, group_idx, n_groups: int):
        group_idx = np.asarray(group_idx, dtype=np.int64)
        if group_idx.size == 0:
            raise InputError("grouped evaluation needs at least one entry")
        if group_idx.min() < 0 or group_idx.max() >= n_groups:
            raise InputError("group index out of range")
        self.order = np.argsort(group_idx, kind="stable")
        self.g = group_idx[self.order]
        self.G = n_groups
        self.sizes = np.bincount(group_idx, minlength=n_groups)
        if np.any(self.sizes == 0):
            raise InputError("every group must contain at least one entry")
        self.starts = np.searchsorted(self.g, np.arange(n_groups))

    def sort(self, a):
        return np.asarray(a)[self.order]

    def group_sum(self, a):
        return np.add.reduceat(a, self.starts, axis=0)


def _group_modes(layout: GroupLayout, lp0, y, sigma: float, start=None):
    """Posterior mode and curvature scale of the shared intercept per group.

    Newton on the 1-d log posterior; strictly concave, steps clipped for
    global robustness. Arrays are in layout (sorted) order.
    """
    inv_s2 = 1.0 / (sigma * sigma)
    b = np.zeros(layout.G) if start is None else np.array(start, dtype=float)
    for _ in range(80):
        lp = lp0 + b[layout.g]
        p = expit(lp)
        grad = layout.group_sum(y - p) - b * inv_s2
        hess = layout.group_sum(p * (1.0 - p)) + inv_s2
        step = np.clip(grad / hess, -3.0, 3.0)
        b += step
        if np.max(np.abs(step)) < 1e-11:
            break
    lp = lp0 + b[layout.g]
    p = expit(lp)
    tau = 1.0 / np.sqrt(layout.group_sum(p * (1.0 - p)) + inv_s2)
    return b, tau


def _group_log_joint(layout: GroupLayout, lp0, y, Bmat, sigma: float):
    """log p(y_group, b) at each quadrature abscissa; Bmat is (G, K)."""
    lp = lp0[:, None] + Bmat[layout.g, :]
    ll = y[:, None] * lp - np.logaddexp(0.0, lp)
    out = layout.group_sum(ll)
    out += -0.5 * Bmat * Bmat / (sigma * sigma) - np.log(sigma) - 0.5 * np.log(2.0 * np.pi)
    return out


def grouped_marginal_logliks(layout, lp0, y, sigma, quad_nodes=DEFAULT_QUAD_NODES,
                             mode_start=None):
    """Per-group marginal log-likelihoods by adaptive Gauss-Hermite.

    Inputs are entry arrays in layout order. Returns (ell, modes, tau).
    """
    if sigma <= 0.0:
        raise InputError("grouped quadrature requires a positive sd")
    if quad_nodes < 11 or quad_nodes % 2 == 0:
        raise InputError("quad_nodes must be odd and at least 11")
    gx, glogw = _gh_nodes(quad_nodes)
    modes, tau = _group_modes(layout, lp0, y, sigma, mode_start)
    Bmat = modes[:, None] + np.sqrt(2.0) * tau[:, None] * gx[None, :]
    L = _group_log_joint(layout, lp0, y, Bmat, sigma) + (glogw + gx * gx)[None, :]
    ell = logsumexp(L, axis=1) + 0.5 * np.log(2.0) + np.log(tau)
    return ell, modes, tau


def grouped_posterior_bundle(layout, lp0, y, sigma, quad_nodes=DEFAULT_QUAD_NODES,
                             mode_start=None):
    """Marginal log-likelihoods plus the pieces needed for analytic scores.

    Returns (ell, modes, tau, post, resid_bar, b2_bar) where `post` is the
    (G, K) posterior weight of each abscissa, `resid_bar` the per-entry
    posterior-expected residual y - p in layout order, and `b2_bar` the
    posterior-expected squared intercept per group.
    """
    if sigma <= 0.0:
        raise InputError("grouped quadrature requires a positive sd")
    gx, glogw = _gh_nodes(quad_nodes)
    modes, tau = _group_modes(layout, lp0, y, sigma, mode_start)
    Bmat = modes[:, None] + np.sqrt(2.0) * tau[:, None] * gx[None, :]
    L = _group_log_joint(layout, lp0, y, Bmat, sigma) + (glogw + gx * gx)[None, :]
    ell = logsumexp(L, axis=1) + 0.5 * np.log(2.0) + np.log(tau)
    post = np.exp(L - (ell - 0.5 * np.log(2.0) - np.log(tau))[:, None])
    post /= post.sum(axis=1, keepdims=True)
    resid = y[:, None] - expit(lp0[:, None] + Bmat[layout.g, :])
    resid_bar = np.einsum("nk,nk->n", post[layout.g, :], resid)
    b2_bar = np.einsum("gk,gk->g", post, Bmat * Bmat)
    return ell, modes, tau, post, resid_bar, b2_bar


# ---------------------------------------------------------------------------
# mixed-model fitting

def mixed_group_logliks(X, y, groups, coefficients, re_sd,
                        quad_nodes=DEFAULT_QUAD_NODES, mode_start=None):
    """Per-group marginal log-likelihood at arbitrary parameter values."""
    X = _as_design(X)
    y = _check_response(y, X.n)
    part = _as_partition(groups, X.n)
    layout = GroupLayout(part.labels, part.group_count)
    if re_sd == 0.0:
        lp = X.values @ np.asarray(coefficients, dtype=float)
        terms = y * lp - np.logaddexp(0.0, lp)
        return layout.group_sum(layout.sort(terms))
    lp0 = layout.sort(X.values @ np.asarray(coefficients, dtype=float))
    ys = layout.sort(y)
    ell, _, _ = grouped_marginal_logliks(layout, lp0, ys, re_sd, quad_nodes, mode_start)
    return ell


def logistic_group_logliks(X, y, groups, coefficients):
    return mixed_group_logliks(X, y, groups, coefficients, 0.0)


def _mixed_objective(layout, Xs, ys, quad_nodes):
    """Closure computing (-loglik, -grad) over theta = (beta..., log sd).

    The gradient uses the Fisher identity on the quadrature posterior:
    d/dbeta = sum_n x_n * E[y_n - p_n(b) | y], d/dlog sd = sum_g E[b^2]/sd^2 - 1.
    Mode warm starts persist across calls.
    """
    cache = {"modes": None}

    def fun(theta):
        beta, sigma = theta[:-1], float(np.exp(theta[-1]))
        sigma = max(sigma, 1e-8)
        lp0 = Xs @ beta
        ell, modes, _, _, resid_bar, b2_bar = grouped_posterior_bundle(
            layout, lp0, ys, sigma, quad_nodes, cache["modes"]
        )
        cache["modes"] = modes
        g_beta = Xs.T @ resid_bar
        g_logsd = float(np.sum(b2_bar / (sigma * sigma) - 1.0))
        return -float(np.sum(ell)), -np.concatenate([g_beta, [g_logsd]])

    return fun


def _fd_hessian(grad_fun, theta, scale=1e-6):
    p = theta.size
    H = np.empty((p, p))
    for j in range(p):
        h = scale * (1.0 + abs(theta[j]))
        up = theta.copy(); up[j] += h
        dn = theta.copy(); dn[j] -= h
        H[:, j] = (grad_fun(up)[1] - grad_fun(dn)[1]) / (2.0 * h)
    return 0.5 * (H + H.T)


def _logistic_as_mixed(base: LogisticFit, part: Partition, quad_nodes: int) -> MixedLogisticFit:
    return MixedLogisticFit(
        fixed_coefficients=base.coefficients.copy(),
        re_sd=0.0,
        group_modes=np.zeros(part.group_count),
        column_names=base.column_names,
        log_likelihood=base.log_likelihood,
        iterations=base.iterations,
        converged=base.converged,
        gradient_norm=0.0,
        groups=part,
        quad_nodes=quad_nodes,
    )


def fit_mixed_logistic(X, y, groups, quad_nodes: int = DEFAULT_QUAD_NODES,
                       max_iter: int = MIXED_MAX_ITER,
                       gtol: float = GLMM_GRADIENT_TOL) -> MixedLogisticFit:
    """ML fit of a logistic model with a shared N(0, sd^2) group intercept.

    Starts from the fixed-effects fit with a small grid of sd starting
    values, runs L-BFGS-B on (beta, log sd), then polishes with damped
    Newton until the gradient norm is below `gtol`. If the sd collapses
    to the boundary (or never improves on sd=0), the fixed-effects fit is
    returned with re_sd=0.
    """
    X = _as_design(X)
    _check_rank(X)
    y = _check_response(y, X.n)
    part = _as_partition(groups, X.n)
    layout = GroupLayout(part.labels, part.group_count)
    Xs = layout.sort(X.values)
    ys = layout.sort(y)

    base = fit_logistic(X, y)
    fun = _mixed_objective(layout, Xs, ys, quad_nodes)

    best = None
    used_iters = 0
    for sd0 in (0.5, 0.25, 1.0):
        theta0 = np.concatenate([base.coefficients, [np.log(sd0)]])
        res = minimize(
            fun, theta0, jac=True, method="L-BFGS-B",
            bounds=[(None, None)] * X.p + [(_LOG_SD_FLOOR - 2.0, np.log(50.0))],
            options={"maxiter": max_iter, "ftol": 1e-13, "gtol": 1e-10},
        )
        used_iters += res.nit
        theta = res.x
        # damped Newton polish on the analytic gradient
        for _ in range(40):
            nll, ng = fun(theta)
            gnorm = float(np.linalg.norm(ng))
            if gnorm <= gtol or theta[-1] <= _LOG_SD_FLOOR:
                break
            H = _fd_hessian(fun, theta)
            lam = 0.0
            for _ in range(8):
                try:
                    step = np.linalg.solve(H + lam * np.eye(theta.size), -ng)
                except np.linalg.LinAlgError:
                    lam = max(1e-6, lam * 10.0)
                    continue
                cand = theta + step
                if fun(cand)[0] <= nll + 1e-12:
                    theta = cand
                    break
                lam = max(1e-6, lam * 10.0)
            else:
                break
            used_iters += 1
        nll, ng = fun(theta)
        cand = (float(-nll), theta, float(np.linalg.norm(ng)))
        if best is None or cand[0] > best[0]:
            best = cand
        if best[2] <= gtol and best[0] >= base.log_likelihood - 1e-10:
            break
        if theta[-1] <= _LOG_SD_FLOOR + 0.5:
            break  # sd collapsed; more starts would only rediscover the boundary

    ll, theta, gnorm = best
    sigma = float(np.exp(theta[-1]))
    if sigma <= 1.5e-4 or ll <= base.log_likelihood + 1e-10:
        return _logistic_as_mixed(base, part, quad_nodes)
    if gnorm > gtol:
        last = MixedLogisticFit(
            fixed_coefficients=theta[:-1], re_sd=sigma,
            group_modes=np.zeros(part.group_count), column_names=X.column_names,
            log_likelihood=ll, iterations=used_iters, converged=False,
            gradient_norm=gnorm, groups=part, quad_nodes=quad_nodes,
        )
        raise ConvergenceError(
            f"mixed-model gradient norm {gnorm:.3g} above tolerance {gtol:g}", last=last
        )
    lp0 = Xs @ theta[:-1]
    modes_sorted, _ = _group_modes(layout, lp0, ys, sigma)
    return MixedLogisticFit(
        fixed_coefficients=theta[:-1],
        re_sd=sigma,
        group_modes=modes_sorted,
        column_names=X.column_names,
        log_likelihood=ll,
        iterations=used_iters,
        converged=True,
        gradient_norm=gnorm,
        groups=part,
        quad_nodes=quad_nodes,
    )


# ---------------------------------------------------------------------------
# scores and prediction

def per_group_score(fit, X, y, groups=None, step_scale: float = FD_SCORE_STEP) -> np.ndarray:
    """Per-group score rows of the fitted model's log-likelihood.

    Fixed-effects fits use the analytic X'(y - p) contribution summed per
    group (any partition). Mixed fits use central finite differences of the
    per-group marginal log-likelihoods over (beta, log sd) with step
    step_scale*(1+|param|); the partition must be the fit's own grouping
    because the marginal likelihood only factorizes over fit groups.
    """
    X = _as_design(X)
    y = _check_response(y, X.n)
    if isinstance(fit, LogisticFit) or fit.re_sd == 0.0:
        part = _as_partition(groups if groups is not None else np.zeros(X.n), X.n)
        p = expit(X.values @ fit.coefficients)
        contrib = X.values * (y - p)[:, None]
        out = np.zeros((part.group_count, X.p))
        np.add.at(out, part.labels, contrib)
        return out
    part = fit.groups if groups is None else _as_partition(groups, X.n)
    if not np.array_equal(part.labels, fit.groups.labels):
        raise InputError("mixed-model group scores require the fit's own grouping")
    layout = GroupLayout(part.labels, part.group_count)
    Xs = layout.sort(X.values)
    ys = layout.sort(y)
    theta = np.concatenate([fit.fixed_coefficients, [np.log(fit.re_sd)]])
    out = np.empty((part.group_count, theta.size))
    for j in range(theta.size):
        h = step_scale * (1.0 + abs(theta[j]))
        up = theta.copy(); up[j] += h
        dn = theta.copy(); dn[j] -= h
        ell_up, _, _ = grouped_marginal_logliks(
            layout, Xs @ up[:-1], ys, float(np.exp(up[-1])), fit.quad_nodes)
        ell_dn, _, _ = grouped_marginal_logliks(
            layout, Xs @ dn[:-1], ys, float(np.exp(dn[-1])), fit.quad_nodes)
        out[:, j] = (ell_up - ell_dn) / (2.0 * h)
    return out


def per_node_score_contributions(fit, X, y) -> np.ndarray:
    """Observation-level score contributions that sum to group scores.

    For mixed fits these come from the Fisher identity: each observation
    contributes x_n * E[y_n - p_n(b) | y_group], and the log-sd component
    E[b^2]/sd^2 - 1 (a whole-group quantity) is split equally across the
    group's observations. Summing rows within any union of fit groups gives
    that union's exact score, which is what regrouped variance stacks need.
    """
    X = _as_design(X)
    y = _check_response(y, X.n)
    if isinstance(fit, LogisticFit) or fit.re_sd == 0.0:
        p = expit(X.values @ fit.coefficients)
        return X.values * (y - p)[:, None]
    part = fit.groups
    layout = GroupLayout(part.labels, part.group_count)
    Xs = layout.sort(X.values)
    ys = layout.sort(y)
    lp0 = Xs @ fit.fixed_coefficients
    _, _, _, _, resid_bar, b2_bar = grouped_posterior_bundle(
        layout, lp0, ys, fit.re_sd, fit.quad_nodes)
    beta_part = Xs * resid_bar[:, None]
    sd_group = b2_bar / (fit.re_sd ** 2) - 1.0
    sd_part = (sd_group / layout.sizes)[layout.g]
    sorted_rows = np.column_stack([beta_part, sd_part])
    out = np.empty_like(sorted_rows)
    out[layout.order] = sorted_rows
    return out


def mixed_total_score(X, y, groups, coefficients, re_sd,
                      quad_nodes=DEFAULT_QUAD_NODES) -> np.ndarray:
    """Total marginal-log-likelihood gradient over (beta..., log sd).

    Fisher-identity form evaluated on the quadrature posterior; smooth in
    the parameters, so outer finite differences of this function give the
    observed-information blocks without squared round-off loss.
    """
    X = _as_design(X)
    y = _check_response(y, X.n)
    part = _as_partition(groups, X.n)
    layout = GroupLayout(part.labels, part.group_count)
    Xs = layout.sort(X.values)
    ys = layout.sort(y)
    sigma = float(re_sd)
    lp0 = Xs @ np.asarray(coefficients, dtype=float)
    _, _, _, _, resid_bar, b2_bar = grouped_posterior_bundle(
        layout, lp0, ys, sigma, quad_nodes)
    g_beta = Xs.T @ resid_bar
    g_logsd = float(np.sum(b2_bar / (sigma * sigma) - 1.0))
    return np.concatenate([g_beta, [g_logsd]])


def mixed_group_modes(X, y, groups, coefficients, re_sd,
                      quad_nodes=DEFAULT_QUAD_NODES) -> np.ndarray:
    """Posterior modes of the shared intercept at arbitrary parameters.

    Indexed by group label. Used when a derivative must pass through the
    mode-dependent pieces (censoring survival under a mixed fit).
    """
    X = _as_design(X)
    y = _check_response(y, X.n)
    part = _as_partition(groups, X.n)
    layout = GroupLayout(part.labels, part.group_count)
    lp0 = layout.sort(X.values) @ np.asarray(coefficients, dtype=float)
    modes, _ = _group_modes(layout, lp0, layout.sort(y), float(re_sd))
    return modes


def logistic_information(X, coefficients) -> np.ndarray:
    """Fisher information X' W X of a fixed-effects logistic model."""
    X = _as_design(X)
    p = expit(X.values @ np.asarray(coefficients, dtype=float))
    w = p * (1.0 - p)
    return (X.values * w[:, None]).T @ X.values


def predict_prob(fit, X, group_effect=None) -> np.ndarray:
    """Fitted probabilities, optionally shifted by per-row intercepts."""
    X = _as_design(X)
    lp = X.values @ np.asarray(fit.coefficients, dtype=float)
    if group_effect is not None:
        lp = lp + np.asarray(group_effect, dtype=float)
    return expit(lp)
