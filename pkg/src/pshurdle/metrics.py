"""Prediction surfaces and performance metrics."""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .exceptions import InvalidArgumentError

SUMMARY_COLUMNS = ("param", "scenario", "combination", "median", "q1", "q3")


@dataclass(frozen=True, eq=False)
class PredictionFields:
    """Plug-in predictions at every grid node.

    ``se_z`` and ``se_y`` are delta-method standard errors of the presence
    probability and of the mean biomass under presence; they are None when
    the fit carries no latent uncertainty.
    """

    pi_hat: np.ndarray
    mu_hat: np.ndarray
    s_hat: np.ndarray
    se_z: np.ndarray = None
    se_y: np.ndarray = None


@dataclass
class MetricReport:
    rmse: float
    mae: float
    hellinger: float

    def as_dict(self):
        return {"rmse": self.rmse, "mae": self.mae, "hellinger": self.hellinger}


def predict_fields(fit, grid=None):
    """Predicted presence, biomass and expected biomass from a FitResult."""
    theta = fit.theta_hat
    modes = fit.latent_modes
    if grid is not None and modes.v.shape[0] != grid.n_nodes:
        raise InvalidArgumentError("fit and grid disagree on the number of nodes")
    pi_hat = expit(theta.alpha_prime + modes.v)
    mu_hat = np.exp(theta.alpha + modes.u)
    se_z = se_y = None
    if fit.latent_sd is None:
        warnings.warn("fit has no latent standard errors; predictions carry none")
    else:
        se_z = pi_hat * (1.0 - pi_hat) * fit.latent_sd.v
        se_y = mu_hat * fit.latent_sd.u
    return PredictionFields(pi_hat, mu_hat, pi_hat * mu_hat, se_z, se_y)


def _pair(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise InvalidArgumentError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise InvalidArgumentError("fields are empty")
    return a, b


def rmse_mae(a, b):
    a, b = _pair(a, b)
    diff = a - b
    return float(np.sqrt(np.mean(diff * diff))), float(np.mean(np.abs(diff)))


def hellinger(sample_p, sample_q, n_bins=30):
    """Hellinger distance between two samples over shared equal-width bins.

    The bins span the pooled range of both samples, so the result is
    symmetric in its arguments and lies in [0, 1].
    """
    p = np.asarray(sample_p, dtype=float).ravel()
    q = np.asarray(sample_q, dtype=float).ravel()
    if p.size == 0 or q.size == 0:
        raise InvalidArgumentError("hellinger needs two nonempty samples")
    if n_bins < 2:
        raise InvalidArgumentError("n_bins must be at least 2")
    lo = min(p.min(), q.min())
    hi = max(p.max(), q.max())
    if hi == lo:
        return 0.0
    edges = np.linspace(lo, hi, n_bins + 1)
    fp = np.histogram(p, edges)[0] / p.size
    fq = np.histogram(q, edges)[0] / q.size
    # equal to sqrt(1 - sum sqrt(fp fq)) for normalized histograms, but exact
    # at zero for identical samples
    h2 = 0.5 * float(np.sum((np.sqrt(fp) - np.sqrt(fq)) ** 2))
    return float(np.sqrt(min(1.0, h2)))


def metric_report(truth_s, pred_s, n_bins=30):
    rmse, mae = rmse_mae(pred_s, truth_s)
    return MetricReport(rmse, mae, hellinger(truth_s, pred_s, n_bins))


def summarize_replicas(estimates):
    """Median, quartiles (midpoint rule) and mean per parameter.

    Parameters
    ----------
    estimates : dict of name -> sequence, or list of dicts (one per replica)

    Returns
    -------
    dict
        ``{name: {"median", "q1", "q3", "mean", "n"}}``; non-finite
        replicas are ignored.
    """
    if isinstance(estimates, (list, tuple)):
        if not estimates:
            raise InvalidArgumentError("need at least one replica")
        names = list(estimates[0])
        table = {n: [row[n] for row in estimates] for n in names}
    else:
        table = dict(estimates)
    out = {}
    for name, values in table.items():
        vals = np.asarray(values, dtype=float)
        vals = np.sort(vals[np.isfinite(vals)])
        if vals.size == 0:
            out[name] = {"median": np.nan, "q1": np.nan, "q3": np.nan, "mean": np.nan, "n": 0}
            continue
        q1, med, q3 = np.percentile(vals, [25, 50, 75], method="midpoint")
        out[name] = {"median": float(med), "q1": float(q1), "q3": float(q3),
                     "mean": float(vals.mean()), "n": int(vals.size)}
    return out
