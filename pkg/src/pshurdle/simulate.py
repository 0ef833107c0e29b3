"""Synthetic truth and observation generation.

Pipeline: two GMRF draws (V for presence, U for biomass) are linked to a
presence probability and a mean biomass per node, a hurdle surface is drawn
from them, survey (FID) sites come from a homogeneous Poisson process and
commercial (FDD) sites from a preferential inhomogeneous one.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .data import Dataset
from .exceptions import InvalidArgumentError, NumericalError
from .grid import build_precision, projection_matrix, reparam_interpretable_to_internal
from .likelihood import HyperParams

# (beta_prime, beta) per preset scenario
SCENARIOS = {
    1: (0.0, 2.0),
    2: (1.0, 0.5),
    3: (1.0, 1.0),
    4: (1.0, 2.0),
    5: (2.0, 0.0),
}

SUBSTREAMS = ("V", "U", "Z", "Y", "HPP", "IPP", "OBS")


def substreams(seed):
    """Independent named generators derived from one master seed."""
    root = np.random.SeedSequence(int(seed))
    return {
        name: np.random.default_rng(np.random.SeedSequence(root.entropy, spawn_key=(i,)))
        for i, name in enumerate(SUBSTREAMS)
    }


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to generate one synthetic replica."""

    beta_prime: float = 0.0
    beta: float = 0.0
    n_s: int = 100
    n_c: int = 100
    seed: int = 0
    scenario_id: object = "custom"
    phi_v: float = 0.15
    sigma_v: float = float(np.sqrt(0.8))
    phi_u: float = 0.2
    sigma_u: float = 1.0
    alpha_prime: float = 0.0
    alpha: float = 0.0
    alpha_dprime: float = 0.0
    upsilon: float = 1.0
    ipp_replace: bool = False

    def __post_init__(self):
        if self.n_s < 0 or self.n_c < 0:
            raise InvalidArgumentError("sample sizes must be nonnegative")
        if min(self.phi_v, self.sigma_v, self.phi_u, self.sigma_u) <= 0:
            raise InvalidArgumentError("covariance parameters must be positive")
        if self.upsilon <= 0:
            raise InvalidArgumentError("upsilon must be positive")

    @classmethod
    def preset(cls, scenario_id, n_s=100, n_c=100, seed=0, **overrides):
        if scenario_id not in SCENARIOS:
            raise InvalidArgumentError(f"unknown scenario {scenario_id!r}; presets are {sorted(SCENARIOS)}")
        bp, b = SCENARIOS[scenario_id]
        return cls(beta_prime=bp, beta=b, n_s=n_s, n_c=n_c, seed=seed, scenario_id=scenario_id, **overrides)

    def theta(self):
        return HyperParams.from_interpretable(
            self.phi_v, self.sigma_v, self.phi_u, self.sigma_u, self.upsilon,
            alpha_prime=self.alpha_prime, alpha=self.alpha, alpha_dprime=self.alpha_dprime,
            beta_prime=self.beta_prime, beta=self.beta,
        )

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


@dataclass(frozen=True, eq=False)
class SyntheticTruth:
    """Node-level truth of one replica.

    ``y_field`` holds the biomass draw at every node; ``s_field`` zeroes it
    where the species is absent.
    """

    v_field: np.ndarray
    u_field: np.ndarray
    pi_field: np.ndarray
    mu_field: np.ndarray
    z_field: np.ndarray
    y_field: np.ndarray
    s_field: np.ndarray
    theta_true: HyperParams
    extras: dict = field(default_factory=dict)


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_gmrf(q, seed):
    """Exact zero-mean draw with precision ``q`` (a SparsePrecision)."""
    rng = _rng(seed)
    white = rng.standard_normal(q.matrix.shape[0])
    return q.factor().sample(white)


def link_fields(alpha_prime, alpha, v_field, u_field):
    v_field = np.asarray(v_field, dtype=float)
    u_field = np.asarray(u_field, dtype=float)
    if v_field.shape != u_field.shape:
        raise InvalidArgumentError("fields must share a grid")
    return expit(alpha_prime + v_field), np.exp(alpha + u_field)


def _gamma_draw(rng, mu, upsilon):
    shape = mu**2 / upsilon**2
    draw = rng.gamma(shape, upsilon**2 / mu)
    # very small shapes underflow to exactly zero; keep draws strictly positive
    return np.maximum(draw, np.finfo(float).tiny)


def sample_hurdle(pi_field, mu_field, upsilon, seed):
    """Presence/biomass surfaces.

    ``seed`` may be an int, a Generator, or a pair of Generators used for the
    presence and biomass layers respectively.
    """
    if not upsilon > 0:
        raise InvalidArgumentError("upsilon must be positive")
    pi_field = np.asarray(pi_field, dtype=float)
    mu_field = np.asarray(mu_field, dtype=float)
    if isinstance(seed, tuple):
        rng_z, rng_y = seed
    else:
        rng_z = rng_y = _rng(seed)
    z = (rng_z.uniform(size=pi_field.shape) < pi_field).astype(np.int8)
    y = _gamma_draw(rng_y, mu_field, upsilon)
    return z, y, z * y


def _jitter(rng, grid, cells):
    b = grid.cell_bounds[cells]
    u = rng.uniform(size=(cells.size, 2))
    return np.column_stack([
        b[:, 0] + u[:, 0] * (b[:, 1] - b[:, 0]),
        b[:, 2] + u[:, 1] * (b[:, 3] - b[:, 2]),
    ])


def sample_hpp(n_s, grid, seed):
    """``n_s`` uniform locations over the grid's domain."""
    if n_s < 0:
        raise InvalidArgumentError("n_s must be nonnegative")
    rng = _rng(seed)
    xy = rng.uniform(size=(int(n_s), 2))
    return np.column_stack([
        grid.x_min + xy[:, 0] * (grid.x_max - grid.x_min),
        grid.y_min + xy[:, 1] * (grid.y_max - grid.y_min),
    ])


def sample_ipp(n_c, v_field, u_field, theta, grid, seed, replace=False):
    """Preferential locations with intensity ``exp(a'' + b' v + b u)``.

    Cells are drawn with probability proportional to intensity times cell
    area and each point is placed uniformly within its cell.  By default
    cells are distinct (weighted sampling without replacement) so that a
    larger ``n_c`` reaches into lower-intensity areas; ``replace=True`` gives
    independent draws from the normalized intensity.
    """
    if n_c < 0:
        raise InvalidArgumentError("n_c must be nonnegative")
    n_c = int(n_c)
    rng = _rng(seed)
    eta = theta.alpha_dprime + theta.beta_prime * np.asarray(v_field) + theta.beta * np.asarray(u_field)
    eta = eta - eta.max()
    weights = np.exp(eta) * grid.node_weights
    total = weights.sum()
    if not (np.isfinite(total) and total > 0):
        raise NumericalError("intensity field integrates to zero")
    if not replace and n_c > grid.n_nodes:
        raise InvalidArgumentError(f"cannot place {n_c} points in {grid.n_nodes} distinct cells")
    p = weights / total
    if not replace:
        positive = int(np.count_nonzero(p))
        if positive < n_c:
            raise NumericalError("too few cells with positive intensity")
    cells = rng.choice(grid.n_nodes, size=n_c, replace=replace, p=p)
    return _jitter(rng, grid, np.asarray(cells, dtype=np.int64))


def make_truth(cfg, grid, streams=None):
    streams = streams or substreams(cfg.seed)
    theta = cfg.theta()
    qv = build_precision(grid, reparam_interpretable_to_internal(cfg.phi_v, cfg.sigma_v))
    qu = build_precision(grid, reparam_interpretable_to_internal(cfg.phi_u, cfg.sigma_u))
    v = sample_gmrf(qv, streams["V"])
    u = sample_gmrf(qu, streams["U"])
    pi, mu = link_fields(cfg.alpha_prime, cfg.alpha, v, u)
    z, y, s = sample_hurdle(pi, mu, cfg.upsilon, (streams["Z"], streams["Y"]))
    return SyntheticTruth(v, u, pi, mu, z, y, s, theta)


def observe(truth, locations, grid, upsilon, alpha, rng):
    """Observations at ``locations``: nearest-node presence, fresh biomass draws."""
    if len(locations) == 0:
        return np.zeros(0, dtype=np.int8), np.zeros(0)
    z = truth.z_field[grid.nearest_node(locations)]
    u_site = projection_matrix(grid, locations) @ truth.u_field
    y = _gamma_draw(rng, np.exp(alpha + u_site), upsilon)
    return z, np.where(z == 1, y, np.nan)


def make_scenario(cfg, grid):
    """Generate truth and the combined FID + FDD dataset for one replica.

    Returns
    -------
    truth : SyntheticTruth
    dataset : Dataset
        FID rows first, then FDD rows.
    """
    streams = substreams(cfg.seed)
    truth = make_truth(cfg, grid, streams)
    loc_s = sample_hpp(cfg.n_s, grid, streams["HPP"])
    loc_c = sample_ipp(cfg.n_c, truth.v_field, truth.u_field, truth.theta_true, grid, streams["IPP"],
                       replace=cfg.ipp_replace)
    locs = np.vstack([loc_s, loc_c])
    z, y = observe(truth, locs, grid, cfg.upsilon, cfg.alpha, streams["OBS"])
    is_fdd = np.r_[np.zeros(cfg.n_s, dtype=bool), np.ones(cfg.n_c, dtype=bool)]
    return truth, Dataset.from_arrays(locs, z, y, is_fdd)
