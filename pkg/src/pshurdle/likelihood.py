"""Joint negative log-likelihood of the hurdle model with preferential sampling.

Five components are summed: Gamma biomass under presence, Bernoulli presence,
the inhomogeneous Poisson process of fishery-dependent locations, and the two
GMRF priors for the latent fields ``v`` (presence) and ``u`` (biomass).

Latent vectors are stacked as ``x = [v, u]`` (length ``2N``).
"""

from dataclasses import dataclass, field, fields, replace

import re

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, gammaln, log_expit, polygamma, psi

from .exceptions import InvalidArgumentError, NumericalError
from .grid import (
    MaternConfig,
    SparsePrecision,
    build_precision,
    projection_matrix,
    reparam_interpretable_to_internal,
    reparam_internal_to_interpretable,
)
from .sparse import SparseCholesky

LOG_2PI = np.log(2.0 * np.pi)
ETA_LIMIT = 50.0

MODELS = ("joint", "fid", "fdd")
CURVATURES = ("observed", "expected")
BASE_PARAMS = (
    "alpha_prime", "alpha", "log_kappa_v", "log_tau_v",
    "log_kappa_u", "log_tau_u", "log_upsilon",
)
PS_PARAMS = ("alpha_dprime", "beta_prime", "beta")


@dataclass(frozen=True)
class HyperParams:
    """Fixed effects and covariance parameters (positive ones on log scale).

    ``log_catchability[j]`` belongs to vessel ``j + 2``; vessel 1 is the
    reference with catchability fixed at one.
    """

    alpha_prime: float = 0.0
    alpha: float = 0.0
    alpha_dprime: float = 0.0
    beta_prime: float = 0.0
    beta: float = 0.0
    log_kappa_v: float = np.log(np.sqrt(8.0) / 0.15)
    log_tau_v: float = 0.0
    log_kappa_u: float = np.log(np.sqrt(8.0) / 0.20)
    log_tau_u: float = 0.0
    log_upsilon: float = 0.0
    log_catchability: tuple = ()

    def __post_init__(self):
        vals = [getattr(self, f.name) for f in fields(self) if f.name != "log_catchability"]
        if not np.all(np.isfinite(vals)) or not np.all(np.isfinite(self.log_catchability)):
            raise InvalidArgumentError("hyperparameters must be finite")
        object.__setattr__(self, "log_catchability", tuple(float(c) for c in self.log_catchability))

    @classmethod
    def from_interpretable(cls, phi_v, sigma_v, phi_u, sigma_u, upsilon=1.0, **kwargs):
        mv = reparam_interpretable_to_internal(phi_v, sigma_v)
        mu = reparam_interpretable_to_internal(phi_u, sigma_u)
        return cls(
            log_kappa_v=np.log(mv.kappa), log_tau_v=np.log(mv.tau),
            log_kappa_u=np.log(mu.kappa), log_tau_u=np.log(mu.tau),
            log_upsilon=np.log(upsilon), **kwargs,
        )

    @property
    def matern_v(self):
        return MaternConfig(np.exp(self.log_kappa_v), np.exp(self.log_tau_v))

    @property
    def matern_u(self):
        return MaternConfig(np.exp(self.log_kappa_u), np.exp(self.log_tau_u))

    @property
    def upsilon(self):
        return float(np.exp(self.log_upsilon))

    def interpretable(self):
        phi_v, sigma_v = reparam_internal_to_interpretable(self.matern_v)
        phi_u, sigma_u = reparam_internal_to_interpretable(self.matern_u)
        return {"phi_v": phi_v, "sigma_v": sigma_v, "phi_u": phi_u, "sigma_u": sigma_u}

    def get(self, name):
        slot = _catch_slot(name)
        if slot is not None:
            return self.log_catchability[slot]
        return getattr(self, name)

    def to_vector(self, names):
        return np.array([self.get(n) for n in names], dtype=float)

    def with_vector(self, names, values):
        updates, catch = {}, list(self.log_catchability)
        for n, val in zip(names, values):
            slot = _catch_slot(n)
            if slot is not None:
                catch[slot] = float(val)
            else:
                updates[n] = float(val)
        return replace(self, log_catchability=tuple(catch), **updates)

    def as_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "log_catchability"}
        out["log_catchability"] = list(self.log_catchability)
        return out


def _catch_slot(name):
    match = re.fullmatch(r"log_k(\d+)", name)
    return None if match is None else int(match.group(1)) - 2


def parameter_names(model, n_vessels=1):
    """Names of the parameters estimated by ``model``, in optimizer order."""
    if model not in MODELS:
        raise InvalidArgumentError(f"model must be one of {MODELS}, got {model!r}")
    names = list(BASE_PARAMS[:2])
    if model != "fid":
        names += list(PS_PARAMS)
    names += list(BASE_PARAMS[2:])
    names += [f"log_k{j}" for j in range(2, n_vessels + 1)]
    return names


@dataclass(frozen=True, eq=False)
class LatentFields:
    v: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        if self.v.shape != self.u.shape or self.v.ndim != 1:
            raise InvalidArgumentError("latent fields must be 1-d arrays of equal length")

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))

    @classmethod
    def from_stacked(cls, x):
        n = x.shape[0] // 2
        return cls(np.array(x[:n]), np.array(x[n:]))

    def stacked(self):
        return np.concatenate([self.v, self.u])


@dataclass(frozen=True)
class NllBreakdown:
    nll_gamma: float
    nll_bernoulli: float
    nll_ipp: float
    nll_gmrf_u: float
    nll_gmrf_v: float
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "total",
            self.nll_gamma + self.nll_bernoulli + self.nll_ipp + self.nll_gmrf_u + self.nll_gmrf_v,
        )


# Per-observation kernels.  ``m`` is log(mean), ``s`` is log(upsilon).

def gamma_terms(m, s, logy):
    """Gamma negative log-density and its derivatives in (log mean, log sd).

    Returns ``(nll, d_m, d_mm, d_mmm, d_s, d_ms, d_mms)``.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _gamma_terms(m, s, logy)


def _gamma_terms(m, s, logy):
    a = np.exp(2.0 * m - 2.0 * s)
    lby = m - 2.0 * s + logy
    by = np.exp(lby)
    dg = psi(a) - lby
    tg = polygamma(1, a)
    qg = polygamma(2, a)
    nll = -(a - 1.0) * logy + by - a * (m - 2.0 * s) + gammaln(a)
    d1 = 2.0 * a * dg - a + by
    d2 = 4.0 * a * dg + 4.0 * a * a * tg - 4.0 * a + by
    d3 = 8.0 * a * dg + 24.0 * a * a * tg + 8.0 * a**3 * qg - 12.0 * a + by
    ds = -2.0 * a * dg + 2.0 * a - 2.0 * by
    dms = -4.0 * a * dg - 4.0 * a * a * tg + 6.0 * a - 2.0 * by
    dmms = -8.0 * a * dg - 24.0 * a * a * tg - 8.0 * a**3 * qg + 16.0 * a - 2.0 * by
    return nll, d1, d2, d3, ds, dms, dmms


def gamma_fisher(m, s):
    """Expected Gamma information in the log mean and its derivative in ``m``.

    The information is ``4 a^2 psi'(a) - 3 a`` with ``a = exp(2m - 2s)``;
    it is strictly positive.  Its derivative in ``s`` is minus the one in ``m``.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        a = np.exp(2.0 * m - 2.0 * s)
        tg = polygamma(1, a)
        info = 4.0 * a * a * tg - 3.0 * a
        d_info = 2.0 * a * (8.0 * a * tg + 4.0 * a * a * polygamma(2, a) - 3.0)
    return info, d_info


def bernoulli_terms(eta, z):
    """Bernoulli negative log-likelihood in the logit ``eta`` and derivatives."""
    p = expit(eta)
    nll = -(z * log_expit(eta) + (1 - z) * log_expit(-eta))
    d1 = p - z
    d2 = p * (1.0 - p)
    d3 = d2 * (1.0 - 2.0 * p)
    return nll, d1, d2, d3


def nll_gamma(y, mu, upsilon):
    """Negative Gamma log-likelihood with per-observation means ``mu`` and sd ``upsilon``."""
    y = np.asarray(y, dtype=float)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), y.shape)
    if y.size == 0:
        return 0.0
    if np.any(~(y > 0)):
        raise InvalidArgumentError("gamma observations must be positive")
    if np.any(~(mu > 0)) or not upsilon > 0:
        raise InvalidArgumentError("means and upsilon must be positive")
    return float(np.sum(gamma_terms(np.log(mu), np.log(upsilon), np.log(y))[0]))


def nll_bernoulli(z, pi=None, eta=None):
    """Negative Bernoulli log-likelihood, from probabilities or logits."""
    z = np.asarray(z, dtype=float)
    if eta is None:
        pi = np.broadcast_to(np.asarray(pi, dtype=float), z.shape)
        if np.any((pi <= 0) | (pi >= 1)):
            raise InvalidArgumentError("probabilities must lie strictly inside (0, 1)")
        eta = np.log(pi) - np.log1p(-pi)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), z.shape)
    return float(np.sum(bernoulli_terms(eta, z)[0]))


def _ipp_node_eta(theta, v, u):
    eta = theta.alpha_dprime + theta.beta_prime * v + theta.beta * u
    if np.any(np.abs(eta) > ETA_LIMIT):
        raise NumericalError(
            f"intensity linear predictor reached {np.max(np.abs(eta)):.3g} (limit {ETA_LIMIT})"
        )
    return eta


def nll_ipp(fdd_locations, v, u, theta, grid, projection=None):
    """Negative IPP log-likelihood ``-(sum log lambda(x_i) - integral lambda)``.

    The integral is the node quadrature on ``grid``.
    """
    a = projection if projection is not None else projection_matrix(grid, fdd_locations)
    eta_nodes = _ipp_node_eta(theta, v, u)
    omega = float(np.dot(grid.node_weights, np.exp(eta_nodes)))
    eta_obs = theta.alpha_dprime + theta.beta_prime * (a @ v) + theta.beta * (a @ u)
    return float(omega - np.sum(eta_obs))


def nll_gmrf(w, q):
    """Negative Gaussian log-density with sparse precision ``q``.

    ``q`` may be a :class:`SparsePrecision` or any symmetric sparse matrix.
    """
    w = np.asarray(w, dtype=float)
    if isinstance(q, SparsePrecision):
        mat, logdet = q.matrix, q.logdet
    else:
        mat = sp.csc_matrix(q)
        logdet = SparseCholesky(mat).logdet
    if mat.shape[0] != w.shape[0]:
        raise InvalidArgumentError("dimension mismatch between field and precision")
    return float(0.5 * w.shape[0] * LOG_2PI - 0.5 * logdet + 0.5 * w @ (mat @ w))


def apply_catchability(mu, vessel_ids, k):
    """Scale means by vessel catchability ``k[vessel - 1]``; vessel 0 means unrecorded (reference)."""
    mu = np.asarray(mu, dtype=float)
    vessel_ids = np.asarray(vessel_ids, dtype=np.int64)
    k = np.concatenate([[1.0], np.asarray(k, dtype=float)[1:]]) if len(k) else np.ones(1)
    if np.any(vessel_ids < 0) or np.any(vessel_ids > len(k)):
        bad = vessel_ids[(vessel_ids < 0) | (vessel_ids > len(k))][0]
        raise InvalidArgumentError(f"unknown vessel id {bad}")
    factor = np.where(vessel_ids == 0, 1.0, k[np.maximum(vessel_ids, 1) - 1])
    return mu * factor


class LikelihoodModel:
    """Joint likelihood for one dataset, grid and model variant.

    ``model`` selects rows and layers: ``"joint"`` uses every row and the IPP
    layer on FDD rows, ``"fdd"`` keeps FDD rows only, ``"fid"`` keeps survey
    rows only and drops the sampling layer.
    """

    def __init__(self, data, grid, model="joint", curvature="observed"):
        if model not in MODELS:
            raise InvalidArgumentError(f"model must be one of {MODELS}, got {model!r}")
        if curvature not in CURVATURES:
            raise InvalidArgumentError(f"curvature must be one of {CURVATURES}, got {curvature!r}")
        self.curvature = curvature
        if model == "fid":
            data = data.subset(~data.is_fdd)
        elif model == "fdd":
            data = data.subset(data.is_fdd)
        self.model = model
        self.data = data
        self.grid = grid
        self.n_nodes = grid.n_nodes
        self.use_ipp = model != "fid"
        a = projection_matrix(grid, data.locations)
        present = data.z == 1
        self.z = data.z.astype(float)
        self.a_b = a
        self.a_bt = sp.csr_matrix(a.T)
        self.a_g = a[present]
        self.a_gt = sp.csr_matrix(self.a_g.T)
        self.logy = np.log(data.y[present])
        self.n_vessels = int(max(1, data.vessel_id.max(initial=1)))
        # catchability slot per gamma row, -1 for the reference vessel
        vid = data.vessel_id[present]
        self.k_slot = np.where(vid >= 2, vid - 2, -1)
        if self.use_ipp:
            a_c = a[data.is_fdd]
            self.n_c = a_c.shape[0]
            self.ac_sum = np.asarray(a_c.sum(axis=0)).ravel()
        else:
            self.n_c = 0
            self.ac_sum = np.zeros(self.n_nodes)
        self.w = grid.node_weights
        self.names = parameter_names(model, self.n_vessels)
        self._prec_cache = {}

    # -- parameters -----------------------------------------------------
    def precisions(self, theta):
        key = (theta.log_kappa_v, theta.log_tau_v, theta.log_kappa_u, theta.log_tau_u)
        if key not in self._prec_cache:
            if len(self._prec_cache) > 8:
                self._prec_cache.clear()
            self._prec_cache[key] = (
                build_precision(self.grid, theta.matern_v),
                build_precision(self.grid, theta.matern_u),
            )
        return self._prec_cache[key]

    def _log_k(self, theta):
        lk = np.zeros(max(self.n_vessels - 1, 0))
        lk[: len(theta.log_catchability)] = theta.log_catchability[: lk.size]
        return np.where(self.k_slot >= 0, lk[np.maximum(self.k_slot, 0)] if lk.size else 0.0, 0.0)

    # -- evaluation -----------------------------------------------------
    def _terms(self, theta, x):
        n = self.n_nodes
        v, u = x[:n], x[n:]
        eta_b = theta.alpha_prime + self.a_b @ v
        m_g = theta.alpha + self.a_g @ u + self._log_k(theta)
        bern = bernoulli_terms(eta_b, self.z)
        gam = gamma_terms(m_g, theta.log_upsilon, self.logy)
        if self.use_ipp:
            lam_w = self.w * np.exp(_ipp_node_eta(theta, v, u))
        else:
            lam_w = np.zeros(n)
        return v, u, bern, gam, lam_w

    def breakdown(self, theta, x):
        v, u, bern, gam, lam_w = self._terms(theta, x)
        qv, qu = self.precisions(theta)
        ipp = 0.0
        if self.use_ipp:
            ipp = float(
                lam_w.sum()
                - self.n_c * theta.alpha_dprime
                - theta.beta_prime * self.ac_sum @ v
                - theta.beta * self.ac_sum @ u
            )
        return NllBreakdown(
            nll_gamma=float(np.sum(gam[0])),
            nll_bernoulli=float(np.sum(bern[0])),
            nll_ipp=ipp,
            nll_gmrf_u=nll_gmrf(u, qu),
            nll_gmrf_v=nll_gmrf(v, qv),
        )

    def value(self, theta, x):
        return self.breakdown(theta, x).total

    def gradient(self, theta, x):
        v, u, bern, gam, lam_w = self._terms(theta, x)
        qv, qu = self.precisions(theta)
        gv = qv.matrix @ v + self.a_bt @ bern[1]
        gu = qu.matrix @ u + self.a_gt @ gam[1]
        if self.use_ipp:
            gv += theta.beta_prime * (lam_w - self.ac_sum)
            gu += theta.beta * (lam_w - self.ac_sum)
        return np.concatenate([gv, gu])

    def hessian(self, theta, x):
        """Sparse Hessian of the joint negative log-likelihood in ``x``."""
        v, u, bern, gam, lam_w = self._terms(theta, x)
        return self._hessian_from(theta, bern[2], gam[2], lam_w)

    def _hessian_from(self, theta, d2_b, d2_g, lam_w):
        qv, qu = self.precisions(theta)
        hvv = qv.matrix + self.a_bt @ sp.diags(d2_b) @ self.a_b
        huu = qu.matrix + self.a_gt @ sp.diags(d2_g) @ self.a_g
        h = sp.block_diag([hvv, huu], format="csc")
        if self.use_ipp:
            bp, b = theta.beta_prime, theta.beta
            n = self.n_nodes
            idx = np.arange(n)
            rows = np.concatenate([idx, idx + n, idx, idx + n])
            cols = np.concatenate([idx, idx + n, idx + n, idx])
            vals = np.concatenate([bp * bp * lam_w, b * b * lam_w, bp * b * lam_w, bp * b * lam_w])
            h = h + sp.csc_matrix((vals, (rows, cols)), shape=h.shape)
        h = sp.csc_matrix(h)
        h.sort_indices()
        return h

    def laplace_hessian(self, theta, x):
        """Matrix whose log-determinant enters the Laplace objective.

        Equal to :meth:`hessian` for ``curvature="observed"``; otherwise the
        Gamma block uses its expected information, which is always positive.
        """
        v, u, bern, gam, lam_w = self._terms(theta, x)
        return self._hessian_from(theta, bern[2], self._gamma_curvature(theta, u, gam)[0], lam_w)

    def _gamma_curvature(self, theta, u, gam):
        # (curvature, d curvature / d m, d curvature / d log upsilon) per gamma row
        if self.curvature == "observed":
            return gam[2], gam[3], gam[6]
        m = theta.alpha + self.a_g @ u + self._log_k(theta)
        info, d_info = gamma_fisher(m, theta.log_upsilon)
        return info, d_info, -d_info

    def hessp(self, theta, x, p):
        return self.hessian(theta, x) @ p

    def value_grad_hess(self, theta, x, expected=False):
        """Value, gradient and Hessian in one pass.

        With ``expected=True`` the Gamma block of the Hessian uses expected
        information (Fisher scoring), which is positive definite everywhere.
        """
        v, u, bern, gam, lam_w = self._terms(theta, x)
        qv, qu = self.precisions(theta)
        ipp = 0.0
        gv = qv.matrix @ v + self.a_bt @ bern[1]
        gu = qu.matrix @ u + self.a_gt @ gam[1]
        if self.use_ipp:
            ipp = float(
                lam_w.sum() - self.n_c * theta.alpha_dprime
                - theta.beta_prime * self.ac_sum @ v - theta.beta * self.ac_sum @ u
            )
            gv += theta.beta_prime * (lam_w - self.ac_sum)
            gu += theta.beta * (lam_w - self.ac_sum)
        f = NllBreakdown(
            float(np.sum(gam[0])), float(np.sum(bern[0])), ipp, nll_gmrf(u, qu), nll_gmrf(v, qv)
        ).total
        d2_g = gamma_fisher(theta.alpha + self.a_g @ u + self._log_k(theta), theta.log_upsilon)[0] if expected else gam[2]
        return f, np.concatenate([gv, gu]), self._hessian_from(theta, bern[2], d2_g, lam_w)

    # -- outer derivatives ---------------------------------------------
    def theta_gradient(self, theta, x, sigma, solve):
        """Total derivative of the Laplace objective with respect to ``self.names``.

        ``x`` is the inner mode, ``sigma`` the selected inverse of
        :meth:`laplace_hessian` there and ``solve`` applies the inverse of the
        exact Hessian (which governs how the mode moves with ``theta``).
        """
        n = self.n_nodes
        v, u, bern, gam, lam_w = self._terms(theta, x)
        _, d1_b, d2_b, d3_b = bern
        _, d1_g, d2_g, _, ds_g, dms_g, _ = gam
        _, d3_g, dmms_g = self._gamma_curvature(theta, u, gam)
        qv, qu = self.precisions(theta)
        s_vv = sp.csr_matrix(sigma[:n, :n])
        s_uu = sp.csr_matrix(sigma[n:, n:])
        dvv = s_vv.diagonal()
        duu = s_uu.diagonal()
        dvu = np.asarray(sigma[np.arange(n), np.arange(n) + n]).ravel()
        q_b = np.asarray((self.a_b @ s_vv).multiply(self.a_b).sum(axis=1)).ravel()
        q_g = np.asarray((self.a_g @ s_uu).multiply(self.a_g).sum(axis=1)).ravel()
        bp, b = theta.beta_prime, theta.beta

        # t_k = 0.5 tr(Sigma dH/dx_k); its contraction gives the mode-shift term
        t_v = 0.5 * (self.a_bt @ (d3_b * q_b))
        t_u = 0.5 * (self.a_gt @ (d3_g * q_g))
        s_node = np.zeros(n)
        if self.use_ipp:
            s_node = bp * bp * dvv + 2.0 * bp * b * dvu + b * b * duu
            t_v += 0.5 * bp * lam_w * s_node
            t_u += 0.5 * b * lam_w * s_node
        r = solve(np.concatenate([t_v, t_u]))
        r_v, r_u = r[:n], r[n:]

        grad = {}

        def total(name, direct, trace, c_v=None, c_u=None):
            shift = 0.0
            if c_v is not None:
                shift += r_v @ c_v
            if c_u is not None:
                shift += r_u @ c_u
            grad[name] = direct + 0.5 * trace - shift

        total("alpha_prime", d1_b.sum(), d3_b @ q_b, c_v=self.a_bt @ d2_b)
        total("alpha", d1_g.sum(), d3_g @ q_g, c_u=self.a_gt @ d2_g)
        total("log_upsilon", ds_g.sum(), dmms_g @ q_g, c_u=self.a_gt @ dms_g)
        for j in range(2, self.n_vessels + 1):
            mask = self.k_slot == j - 2
            total(
                f"log_k{j}", d1_g[mask].sum(), d3_g[mask] @ q_g[mask],
                c_u=self.a_gt[:, mask] @ d2_g[mask] if mask.any() else np.zeros(n),
            )
        if self.use_ipp:
            total(
                "alpha_dprime", lam_w.sum() - self.n_c, lam_w @ s_node,
                c_v=bp * lam_w, c_u=b * lam_w,
            )
            trace_bp = lam_w @ (v * s_node + 2.0 * bp * dvv + 2.0 * b * dvu)
            total(
                "beta_prime", lam_w @ v - self.ac_sum @ v, trace_bp,
                c_v=lam_w - self.ac_sum + bp * lam_w * v, c_u=b * lam_w * v,
            )
            trace_b = lam_w @ (u * s_node + 2.0 * b * duu + 2.0 * bp * dvu)
            total(
                "beta", lam_w @ u - self.ac_sum @ u, trace_b,
                c_v=bp * lam_w * u, c_u=lam_w - self.ac_sum + b * lam_w * u,
            )
        for tag, w, q, s_blk, is_v in (("v", v, qv, s_vv, True), ("u", u, qu, s_uu, False)):
            qw = q.matrix @ w
            c = 2.0 * qw
            tr_q = s_blk.multiply(q.matrix).sum()
            total(
                f"log_tau_{tag}", w @ qw - self.n_nodes, 2.0 * tr_q,
                c_v=c if is_v else None, c_u=None if is_v else c,
            )
            dq = q.d_log_kappa
            dqw = dq @ w
            tr_dq = s_blk.multiply(dq).sum()
            total(
                f"log_kappa_{tag}", 0.5 * w @ dqw - 0.5 * q.dlogdet_dlog_kappa, tr_dq,
                c_v=dqw if is_v else None, c_u=None if is_v else dqw,
            )
        return np.array([grad[name] for name in self.names])


def joint_nll(theta, latents, data, grid, model="joint"):
    """Component breakdown of the joint negative log-likelihood."""
    lm = LikelihoodModel(data, grid, model)
    if latents.v.shape[0] != grid.n_nodes:
        raise InvalidArgumentError("latent fields do not match the grid")
    return lm.breakdown(theta, latents.stacked())


def joint_nll_gradient(theta, latents, data, grid, model="joint"):
    """Analytic gradient of :func:`joint_nll` in the stacked latents ``[v, u]``."""
    return LikelihoodModel(data, grid, model).gradient(theta, latents.stacked())
