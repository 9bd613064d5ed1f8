"""Initialization: k-means++ grouping, per-group SVD bases, residual clustering.

The pipeline clusters patches into ``max_groups`` groups, initializes each
group's offset with the cluster mean and its basis with the scaled singular
vectors of the centered cluster, then clusters the reconstruction residuals
into ``max_noise`` components per group to seed the noise model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .inference import Sufficients, update_noise_sticks, update_top_sticks
from .mathcore import spd_inverse
from .model import (
    Hyperparameters,
    VariationalState,
    blank_state,
)
from .nonparametrics import rng_from_seed


@dataclass
class KMeansResult:
    centroids: np.ndarray   # (k, d)
    labels: np.ndarray      # (N,) in [0, k)
    distortion: float


def _seed_centroids(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Squared-distance-weighted seeding; degenerate ties go to the lowest index."""
    n = data.shape[0]
    centroids = np.empty((k, data.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = data[first]
    dist = ((data - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = dist.sum()
        if total > 0:
            idx = int(rng.choice(n, p=dist / total))
        else:
            idx = int(np.argmax(dist))  # all zero: lowest index via argmax of zeros
        centroids[j] = data[idx]
        dist = np.minimum(dist, ((data - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeanspp(data: np.ndarray, k: int, max_iters: int = 100, seed: int = 0) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations until labels stabilize.

    Empty clusters are reseeded to the point farthest from its assigned
    centroid.
    """
    data = np.asarray(data, dtype=float)
    n = data.shape[0]
    if k > n:
        raise DimensionError(f"k={k} exceeds the number of points {n}")
    rng = rng_from_seed(seed)
    centroids = _seed_centroids(data, k, rng)
    labels = None
    for _ in range(max_iters):
        d2 = ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(n), new_labels]
        for j in range(k):
            if not np.any(new_labels == j):
                far = int(np.argmax(point_d2))
                centroids[j] = data[far]
                new_labels[far] = j
                point_d2[far] = 0.0
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = data[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    d2 = ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    distortion = float(d2[np.arange(n), labels].sum())
    return KMeansResult(centroids=centroids, labels=labels, distortion=distortion)


# Spectral gate for the initial basis rank: directions whose variance falls
# below this multiple of the median eigenvalue are treated as noise.  The
# factor sits near the bulk edge of a flat (pure-noise) spectrum, so noise
# directions start in the noise model instead of the basis.
_RANK_GATE = 4.0


def _svd_basis(members: np.ndarray, mean: np.ndarray, d: int) -> np.ndarray:
    """Basis columns: leading left singular vectors of the centered cluster,
    scaled so basis @ basis.T matches the cluster covariance on the retained
    directions.  Directions within the estimated noise floor are dropped."""
    centered = members - mean
    u, s, _ = np.linalg.svd(centered.T, full_matrices=True)
    variances = np.zeros(d)
    variances[:len(s)] = s ** 2 / len(members)
    floor = np.median(variances[:min(len(members), d)])
    keep = variances > max(_RANK_GATE * floor, 1e-12 * variances[0])
    return u * np.where(keep, np.sqrt(variances), 0.0)[None, :]


def _lstsq_codes(centered: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Least-squares latent codes for each centered patch (rows)."""
    sol, *_ = np.linalg.lstsq(basis, centered.T, rcond=1e-10)
    return sol.T


def init_state(patches: np.ndarray, hyper: Hyperparameters, seed: int = 0) -> VariationalState:
    """Build the starting variational state from the clustering pipeline.

    Responsibilities are one-hot from the cluster labels (uniform over noise
    components for groups a patch does not belong to); covariance factors are
    set to their conjugate values given those hard assignments.
    """
    patches = np.asarray(patches, dtype=float)
    n, d = patches.shape
    hyper.validate()
    if d != hyper.d:
        raise DimensionError("patch dimension disagrees with the hyperparameters")
    if n < hyper.max_groups:
        raise DimensionError("need at least one patch per group for initialization")
    t_max, k_max = hyper.max_groups, hyper.max_noise

    state = blank_state(hyper)
    grouping = kmeanspp(patches, t_max, seed=seed)
    state.resp_group = np.zeros((n, t_max))
    state.resp_group[np.arange(n), grouping.labels] = 1.0
    state.resp_noise = np.full((n, t_max, k_max), 1.0 / k_max)

    global_residuals = []
    group_data = {}
    for t in range(t_max):
        rows = np.nonzero(grouping.labels == t)[0]
        members = patches[rows]
        if len(members) < 2:
            # too small for a basis; offset at the data, residual = deviation
            mean = members.mean(axis=0) if len(members) else hyper.group_mean0.copy()
            basis = np.zeros((d, d))
            residuals = members - mean
            codes = np.zeros((len(members), d))
        else:
            mean = members.mean(axis=0)
            basis = _svd_basis(members, mean, d)
            codes = _lstsq_codes(members - mean, basis)
            residuals = members - mean - codes @ basis.T
        state.groups[t].mean = mean
        state.groups[t].basis = basis
        group_data[t] = (rows, codes, residuals)
        global_residuals.append(residuals)
    global_residuals = np.concatenate(global_residuals) if global_residuals else np.zeros((0, d))

    # noise components per group from residual clustering
    for t in range(t_max):
        rows, codes, residuals = group_data[t]
        pool = residuals if len(residuals) >= k_max else global_residuals
        own_pool = len(residuals) >= k_max
        if len(pool) < k_max:
            clusters = None
        else:
            clusters = kmeanspp(pool, k_max, seed=seed + 1 + t)
        counts = np.zeros(k_max)
        for k in range(k_max):
            comp = state.noise[t][k]
            if clusters is None:
                continue
            members = pool[clusters.labels == k]
            if len(members) == 0:
                continue
            comp.mean = clusters.centroids[k]
            emp_cov = np.cov(members.T, bias=True).reshape(d, d) if len(members) > 1 \
                else np.zeros((d, d))
            dof = hyper.noise_cov_dof0 + len(members)
            comp.cov_dof = float(dof)
            comp.cov_scale = dof * emp_cov + hyper.noise_cov_scale0
            counts[k] = len(members)
        if clusters is not None and own_pool:
            state.resp_noise[rows, t, :] = 0.0
            state.resp_noise[rows, t, clusters.labels] = 1.0

    # conjugate covariance factors given the hard assignments
    suff = Sufficients(delta=state.resp_group.sum(axis=0),
                       lam=np.einsum("it,itk->tk", state.resp_group, state.resp_noise))
    update_top_sticks(state, suff)
    update_noise_sticks(state, suff)
    prior_prec_mu = spd_inverse(hyper.group_mean_cov0)
    prior_prec_u = spd_inverse(hyper.noise_mean_cov0)
    for t in range(t_max):
        rows, codes, residuals = group_data[t]
        precs = [state.noise[t][k].cov_expectations()[0] for k in range(k_max)]
        lam_g = sum(suff.lam[t, k] * precs[k] for k in range(k_max))
        state.groups[t].mean_cov = spd_inverse(prior_prec_mu + lam_g)
        if len(rows) >= 2:
            energy = (codes ** 2).sum(axis=0)  # per-column code mass
            lam_share = suff.lam[t] / max(suff.delta[t], 1.0)
            mixed_prec = sum(lam_share[k] * precs[k] for k in range(k_max))
            col_cov = np.linalg.inv(
                np.eye(d)[None] / hyper.basis_col_var[:, None, None]
                + energy[:, None, None] * mixed_prec[None])
            state.groups[t].basis_col_cov = 0.5 * (col_cov + np.transpose(col_cov, (0, 2, 1)))
        for k in range(k_max):
            comp = state.noise[t][k]
            comp.mean_cov = spd_inverse(prior_prec_u + suff.lam[t, k] * precs[k])
    state.validate()
    return state
