"""Laplace-approximated maximum likelihood.

For fixed hyperparameters the latent fields are integrated out with a
Laplace approximation around their conditional mode (inner Newton solve).
The resulting negative log marginal likelihood is minimized over the
hyperparameters with L-BFGS-B (outer problem).
"""

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from .data import Dataset
from .exceptions import InnerDivergenceError, InvalidArgumentError, NumericalError
from .grid import GridSpec, reparam_interpretable_to_internal
from .likelihood import LOG_2PI, HyperParams, LatentFields, LikelihoodModel, gamma_terms
from .sparse import SparseCholesky

logger = logging.getLogger(__name__)

DELTA_START = 1e-8
# accept a stalled inner solve only this close to the tolerance
STALL_FACTOR = 1e3
STALL_ITERS = 5
# fresh L-BFGS-B starts allowed after an abnormal termination
OUTER_RESTARTS = 3
# low-branch escape: log-scale gap that flags an observation, data weight
# of the smoothed correction, and the number of escape rounds
ESCAPE_GAP = 1.0
ESCAPE_WEIGHT = 10.0
ESCAPE_ROUNDS = 10


@dataclass
class FitConfig:
    """Optimizer settings.

    ``gradient`` chooses how the outer gradient is obtained: ``"exact"``
    differentiates the Laplace objective analytically (implicit function
    theorem plus a selected inverse), ``"fd"`` uses central differences of
    the objective with relative step ``fd_step``.
    """

    inner_tol: float = 1e-8
    inner_max_iter: int = 100
    outer_tol: float = 1e-6
    outer_gtol: float = 1e-4
    outer_max_iter: int = 500
    fd_step: float = 1e-4
    gradient: str = "exact"
    curvature: str = "expected"
    init: str = "empirical"
    std_errors: bool = True

    def __post_init__(self):
        for name in ("inner_tol", "outer_tol", "outer_gtol", "fd_step"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.inner_max_iter < 1 or self.outer_max_iter < 1:
            raise InvalidArgumentError("iteration caps must be at least 1")
        if self.gradient not in ("exact", "fd"):
            raise InvalidArgumentError("gradient must be 'exact' or 'fd'")
        if self.curvature not in ("observed", "expected"):
            raise InvalidArgumentError("curvature must be 'observed' or 'expected'")
        if self.init not in ("empirical", "truth"):
            raise InvalidArgumentError("init must be 'empirical' or 'truth'")


@dataclass
class InnerResult:
    """Conditional mode and the exact Hessian factor there."""

    modes: LatentFields
    factor: SparseCholesky
    iterations: int
    grad_norm: float
    value: float
    warnings: list = field(default_factory=list)


def _factor_inflated(h, notes):
    try:
        return SparseCholesky(h), 0.0
    except NumericalError:
        pass
    delta = DELTA_START
    eye = sp.identity(h.shape[0], format="csc")
    while delta < 1e12:
        try:
            chol = SparseCholesky(h + delta * eye)
            notes.append(f"inner Hessian indefinite; inflated diagonal by {delta:.3g}")
            return chol, delta
        except NumericalError:
            delta *= 2.0
    raise NumericalError("inner Hessian could not be regularized")


def _newton(lm, theta, x0, cfg):
    """Damped Newton iterations for the conditional mode.

    Steps use the exact Hessian when it is positive definite and fall back
    to Fisher scoring (expected Gamma information) when it is not.  The
    factor returned at the mode is of the exact Hessian, with diagonal
    inflation only if that matrix is indefinite there.
    """
    x = np.array(x0, dtype=float)
    notes = []
    try:
        lm.value(theta, x)
    except NumericalError:
        x = np.zeros_like(x)
    best, stalled = np.inf, 0
    gnorm = np.inf
    for it in range(cfg.inner_max_iter + 1):
        f, g, h = lm.value_grad_hess(theta, x)
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        stalled = stalled + 1 if gnorm >= 0.5 * best else 0
        best = min(best, gnorm)
        done = gnorm <= cfg.inner_tol
        if not done and stalled >= STALL_ITERS and gnorm <= STALL_FACTOR * cfg.inner_tol:
            notes.append(f"inner Newton stalled at grad max-norm {gnorm:.3g}")
            done = True
        try:
            chol = SparseCholesky(h)
        except NumericalError:
            chol = None
        if done:
            if chol is None:
                chol, _ = _factor_inflated(h, notes)
            return InnerResult(LatentFields.from_stacked(x), chol, it, gnorm, f, notes)
        if it == cfg.inner_max_iter:
            break
        if chol is None:
            chol = SparseCholesky(lm.value_grad_hess(theta, x, expected=True)[2])
        step = -chol.solve(g)
        descent = float(g @ step)
        t = 1.0
        # near the mode the predicted decrease is below the resolution of f
        if -descent > 1e-10 * max(1.0, abs(f)):
            while True:
                try:
                    fn = lm.value(theta, x + t * step)
                except NumericalError:
                    fn = np.inf
                if fn <= f + 1e-4 * t * descent:
                    break
                t *= 0.5
                if t < 1e-12:
                    raise InnerDivergenceError(
                        f"line search failed at inner iteration {it} (grad max-norm {gnorm:.3g})", gnorm
                    )
        x = x + t * step
    raise InnerDivergenceError(
        f"inner Newton did not converge in {cfg.inner_max_iter} iterations (grad max-norm {gnorm:.3g})",
        gnorm,
    )


def _low_branch(lm, theta, x):
    """Positive-biomass rows whose fitted log mean sits on the low branch.

    With a fixed sd the Gamma term is not convex in the log mean: a large
    observation is also explained by a tiny mean with a huge coefficient of
    variation, and Newton started from the prior mode often settles there.
    A row is flagged when its log mean is more than ``ESCAPE_GAP`` below
    ``log y`` and moving it to ``log y`` would lower its own term.
    """
    n = lm.n_nodes
    m = theta.alpha + lm.a_g @ x[n:] + lm._log_k(theta)
    here = gamma_terms(m, theta.log_upsilon, lm.logy)[0]
    there = gamma_terms(lm.logy, theta.log_upsilon, lm.logy)[0]
    flag = (m < lm.logy - ESCAPE_GAP) & (there < here)
    return flag, lm.logy - m


def _escape_low_branch(lm, theta, res, cfg, rejected=frozenset()):
    """Try to move flagged rows to the high branch; keep any improvement.

    The biomass field is shifted by a smoothed correction toward ``log y``
    at the flagged rows, Newton is restarted there, and the new mode is
    kept only when its objective is lower.  Returns the best result and the
    set of flagged rows whose escape failed (empty when nothing failed).
    """
    if lm.logy.size == 0:
        return res, frozenset()
    n = lm.n_nodes
    for _ in range(ESCAPE_ROUNDS):
        x = res.modes.stacked()
        flag, gap = _low_branch(lm, theta, x)
        flagged = frozenset(np.flatnonzero(flag).tolist())
        if not flagged or flagged <= rejected:
            return res, frozenset()
        w = ESCAPE_WEIGHT * flag
        qu = lm.precisions(theta)[1].matrix
        lhs = sp.csc_matrix(qu + lm.a_gt @ sp.diags(w) @ lm.a_g)
        x_new = x.copy()
        x_new[n:] += SparseCholesky(lhs).solve(lm.a_gt @ (w * gap))
        try:
            cand = _newton(lm, theta, x_new, cfg)
        except NumericalError:
            return res, flagged
        if cand.value >= res.value:
            return res, flagged
        cand.iterations += res.iterations
        res = cand
    return res, frozenset()


class LaplaceProblem:
    """Laplace objective for one dataset and model variant, with warm starts."""

    def __init__(self, data, grid, model="joint", cfg=None):
        self.cfg = cfg or FitConfig()
        self.lm = LikelihoodModel(_canonical_order(data), grid, model, self.cfg.curvature)
        self.grid = grid
        self.model = model
        self.names = self.lm.names
        self.warm = None
        self.rejected = frozenset()
        self.n_evals = 0
        self.inner_iterations = 0
        self.notes = []

    def inner(self, theta, warm=None):
        """Conditional mode; an explicit ``warm`` start is followed without escape.

        Explicit starts serve finite differences, which must stay on the
        branch of the reference mode.
        """
        if warm is not None:
            res = _newton(self.lm, theta, warm, self.cfg)
        else:
            x0 = np.zeros(2 * self.lm.n_nodes) if self.warm is None else self.warm
            res = _newton(self.lm, theta, x0, self.cfg)
            res, failed = _escape_low_branch(self.lm, theta, res, self.cfg, self.rejected)
            if failed:
                self.rejected = failed
        self.n_evals += 1
        self.inner_iterations += res.iterations
        self.notes.extend(res.warnings)
        return res

    def curvature_factor(self, theta, res):
        if self.lm.curvature == "observed":
            return res.factor
        return SparseCholesky(self.lm.laplace_hessian(theta, res.modes.stacked()))

    def objective(self, theta, warm=None, update_warm=True):
        """Returns ``(value, inner_result, curvature_factor)``."""
        res = self.inner(theta, warm)
        x = res.modes.stacked()
        if update_warm:
            self.warm = x
        curv = self.curvature_factor(theta, res)
        value = res.value + 0.5 * curv.logdet - self.grid.n_nodes * LOG_2PI
        return value, res, curv

    def value_and_grad(self, theta):
        value, res, curv = self.objective(theta)
        if self.cfg.gradient == "exact":
            sigma = curv.selected_inverse()
            grad = self.lm.theta_gradient(theta, res.modes.stacked(), sigma, res.factor.solve)
        else:
            grad = self.fd_gradient(theta, res.modes.stacked())
        return value, grad, res, curv

    def fd_gradient(self, theta, x_mode):
        vec = theta.to_vector(self.names)
        grad = np.empty(vec.size)
        for j in range(vec.size):
            h = self.cfg.fd_step * max(1.0, abs(vec[j]))
            up = vec.copy()
            dn = vec.copy()
            up[j] += h
            dn[j] -= h
            fu = self.objective(theta.with_vector(self.names, up), warm=x_mode, update_warm=False)[0]
            fd = self.objective(theta.with_vector(self.names, dn), warm=x_mode, update_warm=False)[0]
            grad[j] = (fu - fd) / (2.0 * h)
        return grad


def _canonical_order(data):
    # Sorting rows makes every result independent of the input row order.
    y = np.where(np.isnan(data.y), -1.0, data.y)
    order = np.lexsort((data.vessel_id, y, data.z, data.locations[:, 1], data.locations[:, 0], data.is_fdd))
    return data.subset(order)


def inner_mode(theta, data, grid, init=None, model="joint", cfg=None):
    """Conditional mode of the latent fields and the Hessian factor there."""
    cfg = cfg or FitConfig()
    lm = LikelihoodModel(_canonical_order(data), grid, model, cfg.curvature)
    x0 = np.zeros(2 * grid.n_nodes) if init is None else init.stacked()
    res = _escape_low_branch(lm, theta, _newton(lm, theta, x0, cfg), cfg)[0]
    return res.modes, res.factor


def laplace_objective(theta, data, grid, warm=None, model="joint", cfg=None):
    """Negative log of the Laplace-approximated marginal likelihood.

    Returns ``(value, modes)``.
    """
    problem = LaplaceProblem(data, grid, model, cfg)
    value, res, _ = problem.objective(theta, None if warm is None else warm.stacked())
    return value, res.modes


def laplace_gradient(theta, data, grid, warm=None, model="joint", cfg=None):
    """Outer gradient of :func:`laplace_objective`, ordered as ``parameter_names(model)``."""
    problem = LaplaceProblem(data, grid, model, cfg)
    if warm is not None:
        problem.warm = warm.stacked()
    grad = problem.value_and_grad(theta)[1]
    return grad


# -- outer problem ------------------------------------------------------

def initial_theta(data, grid, model="joint"):
    """Neutral starting values computed from the data alone."""
    z = data.z
    pbar = float(np.clip(z.mean() if z.size else 0.5, 0.02, 0.98))
    ypos = data.y[z == 1]
    alpha = float(np.log(ypos.mean())) if ypos.size else 0.0
    var_u = float(np.var(np.log(ypos), ddof=1)) if ypos.size > 2 else 1.0
    sigma_u = float(np.sqrt(np.clip(var_u, 0.1, 5.0)))
    ups = float(np.std(ypos, ddof=1)) if ypos.size > 2 else 1.0
    ups = float(np.clip(ups, 1e-3, 1e3))
    phi0 = 0.5 * (grid.x_max - grid.x_min)
    mv = reparam_interpretable_to_internal(phi0, 1.0)
    mu = reparam_interpretable_to_internal(phi0, sigma_u)
    n_c = int(data.is_fdd.sum()) if model != "fid" else 0
    alpha_dprime = float(np.log(max(n_c, 1) / grid.area)) if model != "fid" else 0.0
    n_vessels = int(max(1, data.vessel_id.max(initial=1)))
    return HyperParams(
        alpha_prime=float(np.log(pbar / (1 - pbar))),
        alpha=alpha,
        alpha_dprime=alpha_dprime,
        log_kappa_v=np.log(mv.kappa), log_tau_v=np.log(mv.tau),
        log_kappa_u=np.log(mu.kappa), log_tau_u=np.log(mu.tau),
        log_upsilon=np.log(ups),
        log_catchability=(0.0,) * (n_vessels - 1),
    )


def parameter_bounds(names, grid):
    h = min(grid.hx if grid.nx > 1 else np.inf, grid.hy if grid.ny > 1 else np.inf)
    if not np.isfinite(h):
        h = min(grid.x_max - grid.x_min, grid.y_max - grid.y_min)
    extent = max(grid.x_max - grid.x_min, grid.y_max - grid.y_min)
    kappa_lo = np.log(np.sqrt(8.0) / (4.0 * extent))
    kappa_hi = np.log(np.sqrt(8.0) / h)
    table = {
        "alpha_prime": (-15.0, 15.0),
        "alpha": (-15.0, 15.0),
        "alpha_dprime": (-30.0, 30.0),
        "beta_prime": (-10.0, 10.0),
        "beta": (-10.0, 10.0),
        "log_kappa_v": (kappa_lo, kappa_hi),
        "log_kappa_u": (kappa_lo, kappa_hi),
        "log_tau_v": (-10.0, 10.0),
        "log_tau_u": (-10.0, 10.0),
        "log_upsilon": (-7.0, 5.0),
    }
    return [table.get(n, (-20.0, 20.0)) for n in names]


def std_errors(outer_hessian):
    """Standard errors from the Hessian of the negative log-likelihood.

    Returns ``None`` (with a warning) when the Hessian is not positive definite.
    """
    hess = np.atleast_2d(np.asarray(outer_hessian, dtype=float))
    hess = 0.5 * (hess + hess.T)
    if not np.all(np.isfinite(hess)):
        warnings.warn("outer Hessian has non-finite entries; standard errors unavailable")
        return None
    try:
        chol = np.linalg.cholesky(hess)
    except np.linalg.LinAlgError:
        warnings.warn("outer Hessian is not positive definite; standard errors unavailable")
        return None
    inv_l = np.linalg.inv(chol)
    cov = inv_l.T @ inv_l
    return np.sqrt(np.diag(cov))


def interpretable_errors(theta, names, cov):
    """Delta-method errors for range and marginal sd of both fields."""
    idx = {n: i for i, n in enumerate(names)}
    out = {}
    interp = theta.interpretable()
    for tag in ("v", "u"):
        ik, it = idx[f"log_kappa_{tag}"], idx[f"log_tau_{tag}"]
        var_k, var_t, cov_kt = cov[ik, ik], cov[it, it], cov[ik, it]
        # log phi = const - log kappa; log sigma = const - log kappa - log tau
        out[f"phi_{tag}"] = interp[f"phi_{tag}"] * np.sqrt(var_k)
        out[f"sigma_{tag}"] = interp[f"sigma_{tag}"] * np.sqrt(max(var_k + var_t + 2 * cov_kt, 0.0))
    return out


@dataclass
class FitResult:
    """Outcome of :func:`fit`."""

    model: str
    grid: GridSpec
    names: list
    theta_hat: HyperParams
    std_errors: dict
    interpretable: dict
    interpretable_se: dict
    latent_modes: LatentFields
    latent_sd: LatentFields
    nll_marginal: float
    converged: bool
    inner_grad_norm: float
    iterations: dict
    warnings: list
    elapsed: float = 0.0

    def estimates(self):
        return {n: self.theta_hat.get(n) for n in self.names}

    def to_dict(self):
        return {
            "model": self.model,
            "grid": asdict(self.grid),
            "names": list(self.names),
            "theta_hat": self.theta_hat.as_dict(),
            "std_errors": self.std_errors,
            "interpretable": self.interpretable,
            "interpretable_se": self.interpretable_se,
            "latent_modes": {"v": self.latent_modes.v.tolist(), "u": self.latent_modes.u.tolist()},
            "latent_sd": None if self.latent_sd is None else {
                "v": self.latent_sd.v.tolist(), "u": self.latent_sd.u.tolist()
            },
            "nll_marginal": self.nll_marginal,
            "converged": self.converged,
            "inner_grad_norm": self.inner_grad_norm,
            "iterations": self.iterations,
            "warnings": list(self.warnings),
            "elapsed": self.elapsed,
        }

    @classmethod
    def from_dict(cls, d):
        th = dict(d["theta_hat"])
        th["log_catchability"] = tuple(th.get("log_catchability", ()))
        sd = d.get("latent_sd")
        return cls(
            model=d["model"],
            grid=GridSpec(**d["grid"]),
            names=list(d["names"]),
            theta_hat=HyperParams(**th),
            std_errors=d["std_errors"],
            interpretable=d["interpretable"],
            interpretable_se=d.get("interpretable_se"),
            latent_modes=LatentFields(np.array(d["latent_modes"]["v"]), np.array(d["latent_modes"]["u"])),
            latent_sd=None if sd is None else LatentFields(np.array(sd["v"]), np.array(sd["u"])),
            nll_marginal=d["nll_marginal"],
            converged=d["converged"],
            inner_grad_norm=d.get("inner_grad_norm", float("nan")),
            iterations=d["iterations"],
            warnings=list(d["warnings"]),
            elapsed=d.get("elapsed", 0.0),
        )

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def outer_hessian(problem, theta, grad=None):
    """Forward differences of the exact outer gradient, symmetrized."""
    names = problem.names
    vec = theta.to_vector(names)
    mode = problem.warm.copy()
    if grad is None:
        grad = problem.value_and_grad(theta)[1]
    hess = np.empty((vec.size, vec.size))
    for j in range(vec.size):
        h = problem.cfg.fd_step * max(1.0, abs(vec[j]))
        pert = vec.copy()
        pert[j] += h
        problem.warm = mode.copy()
        hess[:, j] = (problem.value_and_grad(theta.with_vector(names, pert))[1] - grad) / h
    problem.warm = mode
    return 0.5 * (hess + hess.T)


def fit(data, grid, cfg=None, model="joint", theta0=None):
    """Maximize the Laplace marginal likelihood for one model variant.

    Parameters
    ----------
    data : Dataset
    grid : GridSpec
    cfg : FitConfig, optional
    model : {"joint", "fid", "fdd"}
        ``"fid"`` drops FDD rows and the sampling layer, ``"fdd"`` drops
        survey rows, ``"joint"`` uses everything.
    theta0 : HyperParams, optional
        Starting point; defaults to :func:`initial_theta`.

    Returns
    -------
    FitResult
        Never raises on outer non-convergence; ``converged`` is False instead.
    """
    cfg = cfg or FitConfig()
    start = time.perf_counter()
    problem = LaplaceProblem(data, grid, model, cfg)
    names = problem.names
    base = theta0 if theta0 is not None else initial_theta(problem.lm.data, grid, model)
    if len(base.log_catchability) < problem.lm.n_vessels - 1:
        pad = (0.0,) * (problem.lm.n_vessels - 1 - len(base.log_catchability))
        base = HyperParams(**{**base.as_dict(), "log_catchability": tuple(base.log_catchability) + pad})
    bounds = parameter_bounds(names, grid)
    x0 = np.clip(base.to_vector(names), [b[0] for b in bounds], [b[1] for b in bounds])
    notes = []
    last = {"value": None, "grad": np.zeros(len(names))}

    def fun(vec):
        theta = base.with_vector(names, vec)
        try:
            value, grad = problem.value_and_grad(theta)[:2]
        except NumericalError as exc:
            notes.append(f"objective failed at {np.round(vec, 4).tolist()}: {exc}")
            penalty = 1e10 if last["value"] is None else last["value"] + 1e6
            return penalty, last["grad"]
        if not np.all(np.isfinite(grad)):
            notes.append("non-finite outer gradient")
            return (1e10 if last["value"] is None else last["value"] + 1e6), last["grad"]
        last["value"], last["grad"] = value, grad
        return value, grad

    # A failed line search usually means the quasi-Newton memory was spoiled
    # by a wild early step; restarting from the best point clears it.
    budget = cfg.outer_max_iter
    n_iter = 0
    for attempt in range(OUTER_RESTARTS + 1):
        res = minimize(
            fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": budget, "ftol": cfg.outer_tol, "gtol": cfg.outer_gtol, "maxcor": 20},
        )
        n_iter += int(res.nit)
        budget -= int(res.nit)
        if res.success or res.status == 1 or budget <= 0 or np.array_equal(res.x, x0):
            break
        notes.append(f"outer optimizer restarted after: {res.message}")
        x0 = res.x
    res.nit = n_iter
    theta_hat = base.with_vector(names, res.x)
    value, grad, inner, curv = problem.value_and_grad(theta_hat)
    sigma = curv.selected_inverse()
    diag = np.sqrt(np.clip(sigma.diagonal(), 0.0, None))
    latent_sd = LatentFields.from_stacked(diag)

    at_bound = [
        n for n, x, (lo, hi) in zip(names, res.x, bounds) if np.isclose(x, lo) or np.isclose(x, hi)
    ]
    if at_bound:
        notes.append(f"parameters at optimizer bounds: {', '.join(at_bound)}")
    projected = np.array([
        0.0 if (np.isclose(x, lo) and g > 0) or (np.isclose(x, hi) and g < 0) else g
        for x, g, (lo, hi) in zip(res.x, grad, bounds)
    ])
    converged = bool(res.success) and inner.grad_norm <= cfg.inner_tol
    if not res.success:
        notes.append(f"outer optimizer: {res.message}")

    se = {n: None for n in names}
    interp_se = None
    if cfg.std_errors:
        hess = outer_hessian(problem, theta_hat, grad)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            errs = std_errors(hess)
        notes.extend(str(w.message) for w in caught)
        if errs is not None:
            se = {n: float(e) for n, e in zip(names, errs)}
            cov = np.linalg.inv(hess)
            interp_se = {k: float(v) for k, v in interpretable_errors(theta_hat, names, cov).items()}

    notes = list(dict.fromkeys(problem.notes + notes))
    result = FitResult(
        model=model,
        grid=grid,
        names=names,
        theta_hat=theta_hat,
        std_errors=se,
        interpretable=theta_hat.interpretable(),
        interpretable_se=interp_se,
        latent_modes=inner.modes,
        latent_sd=latent_sd,
        nll_marginal=float(value),
        converged=converged,
        inner_grad_norm=float(inner.grad_norm),
        iterations={
            "outer": int(res.nit),
            "evaluations": int(problem.n_evals),
            "inner_total": int(problem.inner_iterations),
            "projected_grad_max": float(np.max(np.abs(projected))) if projected.size else 0.0,
        },
        warnings=notes,
        elapsed=time.perf_counter() - start,
    )
    logger.info(
        "fit %s: nll=%.6f converged=%s outer=%d evals=%d (%.1fs)",
        model, value, converged, res.nit, problem.n_evals, result.elapsed,
    )
    return result


def _dataset_type_check(data):
    if not isinstance(data, Dataset):
        raise InvalidArgumentError("data must be a Dataset")
