"""Sampled predictive distributions from a fitted model.

Site ensembles, gridded field ensembles via circulant embedding, areal
averages, and the reference forecasts: empirical climatology and a
no-spatial-correlation baseline with identical marginals.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import fields as rf
from . import transforms as tr
from .errors import DomainError, NonpositiveMean, NoTrainingData

DEFAULT_AREAL_MEMBERS = 10_000
DEFAULT_MULTISITE_MEMBERS = 19
DEFAULT_GRID_MEMBERS = 50


@dataclass
class ForecastEnsemble:
    """n members of nonnegative accumulations at J sites or on a grid."""

    members: np.ndarray  # (n, J) for sites, (n, ny, nx) for grids
    sites: list = None
    grid: rf.GridSpec = None
    seed: object = None
    fallback_sites: list = field(default_factory=list)

    @property
    def n_members(self):
        return self.members.shape[0]


def _site_marginals(model, fcst_cr, zero_flag):
    """Per-site Gamma marginals with the nonpositive-mean fallback.

    Sites whose implied mean is nonpositive get the smallest valid mean
    seen in training (forecasts must still be emitted); they are flagged.
    """
    coeffs = model.amount
    fallback_mean = model.diagnostics.get("min_training_mean", 0.1)
    marginals = []
    flagged = []
    for j in range(fcst_cr.size):
        try:
            marg = tr.gamma_marginal(coeffs, float(fcst_cr[j]), bool(zero_flag[j]))
        except NonpositiveMean:
            var = coeffs.nu0 + coeffs.nu1 * float(fcst_cr[j]) ** 3
            marg = tr.GammaMarginal(fallback_mean ** 2 / var, var / fallback_mean)
            flagged.append(j)
        marginals.append(marg)
    return marginals, flagged


def _generate_site_members(mu, chol_w, chol_z, marginals, n_members, seed):
    """Common member loop for the spatial and independence ensembles.

    One Generator per member, derived from the master seed, so results do
    not depend on how members are scheduled.
    """
    n_sites = mu.size
    members = np.zeros((n_members, n_sites))
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    alphas = np.array([m.alpha for m in marginals])
    betas = np.array([m.beta for m in marginals])
    from scipy import special

    for i, child in enumerate(seq.spawn(n_members)):
        rng = np.random.default_rng(child)
        w = mu + chol_w @ rng.standard_normal(n_sites)
        z = chol_z @ rng.standard_normal(n_sites)
        wet = w > 0
        if wet.any():
            zc = np.clip(z[wet], -tr.Z_CLAMP, tr.Z_CLAMP)
            y = special.gammaincinv(alphas[wet], special.ndtr(zc)) * betas[wet]
            members[i, wet] = y ** 3
    return members


def generate_site_ensemble(model, sites, fcst_accum, n_members, seed):
    """Ensemble of accumulations at scattered sites.

    Per member: draw the latent occurrence field, draw the amount field,
    zero out dry sites and push wet sites through the anamorphosis, then
    cube back to the accumulation scale.
    """
    if len(sites) < 1:
        raise DomainError("need at least one site")
    fcst_accum = np.asarray(fcst_accum, dtype=float)
    fcst_cr = tr.cube_root(np.atleast_1d(fcst_accum))
    zero_flag = np.atleast_1d(fcst_accum) == 0.0
    mu = tr.occurrence_trend(model.occurrence, fcst_cr, zero_flag)
    mu = np.atleast_1d(mu)

    chol_w = rf.cholesky_pd(rf.correlation_matrix(sites, model.rho))
    chol_z = rf.cholesky_pd(rf.correlation_matrix(sites, model.r))
    marginals, flagged = _site_marginals(model, fcst_cr, zero_flag)
    members = _generate_site_members(mu, chol_w, chol_z, marginals, n_members, seed)
    return ForecastEnsemble(members=members, sites=list(sites), seed=seed,
                            fallback_sites=flagged)


def independence_baseline_ensemble(model, sites, fcst_accum, n_members, seed):
    """Spatially independent counterpart: identical marginals, identity
    correlations for both latent processes."""
    if len(sites) < 1:
        raise DomainError("need at least one site")
    fcst_accum = np.asarray(fcst_accum, dtype=float)
    fcst_cr = tr.cube_root(np.atleast_1d(fcst_accum))
    zero_flag = np.atleast_1d(fcst_accum) == 0.0
    mu = np.atleast_1d(tr.occurrence_trend(model.occurrence, fcst_cr, zero_flag))
    ident = np.eye(len(sites))
    marginals, flagged = _site_marginals(model, fcst_cr, zero_flag)
    members = _generate_site_members(mu, ident, ident, marginals, n_members, seed)
    return ForecastEnsemble(members=members, sites=list(sites), seed=seed,
                            fallback_sites=flagged)


def generate_grid_ensemble(model, grid, fcst_field, n_members, seed):
    """Ensemble of gridded accumulation fields via circulant embedding.

    Gamma parameters are computed cell-wise from the gridded forecast.
    """
    fcst_field = np.asarray(fcst_field, dtype=float)
    if fcst_field.shape != (grid.ny, grid.nx):
        raise DomainError("forecast field shape does not match grid")
    fcst_cr = tr.cube_root(fcst_field)
    zero_flag = fcst_field == 0.0
    mu = model.occurrence.gamma0 + model.occurrence.gamma1 * fcst_cr \
        + model.occurrence.gamma2 * zero_flag

    emb_w = rf.CirculantEmbedding(grid, model.rho)
    emb_z = rf.CirculantEmbedding(grid, model.r)

    coeffs = model.amount
    fallback_mean = model.diagnostics.get("min_training_mean", 0.1)
    mean_field = coeffs.eta0 + coeffs.eta1 * fcst_cr + coeffs.eta2 * zero_flag
    n_fallback = int((mean_field <= 0).sum())
    mean_field = np.where(mean_field > 0, mean_field, fallback_mean)
    var_field = coeffs.nu0 + coeffs.nu1 * fcst_field
    alpha = mean_field ** 2 / var_field
    beta = var_field / mean_field

    from scipy import special

    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    members = np.zeros((n_members, grid.ny, grid.nx))
    for i, child in enumerate(seq.spawn(n_members)):
        rng = np.random.default_rng(child)
        w = mu + emb_w.sample(rng)
        z = emb_z.sample(rng)
        wet = w > 0
        if wet.any():
            zc = np.clip(z[wet], -tr.Z_CLAMP, tr.Z_CLAMP)
            y = special.gammaincinv(alpha[wet], special.ndtr(zc)) * beta[wet]
            members[i][wet] = y ** 3
    return ForecastEnsemble(members=members, grid=grid, seed=seed,
                            fallback_sites=[None] * n_fallback)


def areal_average(values):
    """Mean accumulation over sites, on the accumulation scale."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise DomainError("areal average of zero sites")
    return float(values.mean())


def areal_ensemble(model, sites, fcst_accum, n_members=DEFAULT_AREAL_MEMBERS, seed=0):
    """Scalar ensemble of areally averaged accumulation over a site subset."""
    ens = generate_site_ensemble(model, sites, fcst_accum, n_members, seed)
    return ens.members.mean(axis=1)


def climatology_forecast(history):
    """Pooled historical values as an exchangeable ensemble.

    ``history`` is a 1-D array of accumulations (scalar case) or a 2-D
    array of per-day joint tuples (multi-site case).
    """
    history = np.asarray(history, dtype=float)
    if history.size == 0:
        raise NoTrainingData("empty climatology history")
    return history


def write_site_ensemble_csv(ens, path):
    """CSV rows ``member,site_id,value_hundredths_inch``, member-major."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["member", "site_id", "value_hundredths_inch"])
        for i in range(ens.n_members):
            for j, site in enumerate(ens.sites):
                writer.writerow([i, site.id, repr(float(ens.members[i, j]))])


def write_grid_ensemble_csvs(ens, outdir, prefix="member"):
    """One CSV per member with rows ``row,col,value_hundredths_inch``."""
    import os

    paths = []
    for i in range(ens.n_members):
        path = os.path.join(outdir, f"{prefix}_{i:04d}.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["row", "col", "value_hundredths_inch"])
            for iy in range(ens.grid.ny):
                for ix in range(ens.grid.nx):
                    writer.writerow([iy, ix, repr(float(ens.members[i, iy, ix]))])
        paths.append(path)
    return paths


def write_scalar_ensemble_csv(values, path):
    """CSV rows ``member,value_hundredths_inch`` for scalar ensembles."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["member", "value_hundredths_inch"])
        for i, v in enumerate(np.asarray(values, dtype=float)):
            writer.writerow([i, repr(float(v))])
