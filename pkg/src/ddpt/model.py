"""Model data types, prior constants, the forward sampler and state serialization.

The observation model for a patch x (a d-vector) in group t with noise
component k is

    x = B_t y + m_t + u_{t,k} + e,   y ~ N(0, I),   e ~ N(0, S_{t,k}),

where B_t is the group's basis (dictionary) matrix, m_t its offset, and
(u, S) the noise component's mean and covariance.  Group and component
weights come from truncated stick-breaking priors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import invwishart

from .errors import FormatError
from .mathcore import InverseWishartParams, iw_expectations
from .nonparametrics import rng_from_seed, stick_weights_from_fractions

STATE_MAGIC = b"DDPT"
STATE_VERSION = 1


@dataclass
class Hyperparameters:
    """Fixed prior constants of the two-layer mixture.

    ``alpha`` and ``beta`` are the group- and noise-layer stick
    concentrations; ``basis_col_var`` holds the per-column prior variances
    of the dictionary entries (the low-rank shrinkage prior is Gaussian on
    each column).  ``max_groups`` / ``max_noise`` are the truncation levels.
    """

    alpha: float
    beta: float
    group_mean0: np.ndarray       # (d,)
    group_mean_cov0: np.ndarray   # (d, d) SPD
    basis_col_var: np.ndarray     # (d,) positive, diagonal of the column prior
    noise_mean0: np.ndarray       # (d,)
    noise_mean_cov0: np.ndarray   # (d, d) SPD
    noise_cov_dof0: float
    noise_cov_scale0: np.ndarray  # (d, d) SPD
    max_groups: int
    max_noise: int

    @property
    def d(self) -> int:
        return self.group_mean0.shape[0]

    def validate(self) -> None:
        d = self.d
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("concentrations must be positive")
        if not self.noise_cov_dof0 > d - 1:
            raise ValueError("noise covariance dof must exceed d-1")
        if np.any(self.basis_col_var <= 0):
            raise ValueError("basis column variances must be positive")
        if self.max_groups < 1 or self.max_noise < 1:
            raise ValueError("truncations must be >= 1")
        for name in ("group_mean_cov0", "noise_mean_cov0", "noise_cov_scale0"):
            m = getattr(self, name)
            if m.shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}")


def default_hyperparameters(d: int) -> Hyperparameters:
    """Published defaults: alpha=3, beta=1e-3, zero prior means, identity
    prior covariances and scale, dof = d, truncations 30 and 10."""
    if d < 1:
        raise ValueError("d must be >= 1")
    eye = np.eye(d)
    return Hyperparameters(
        alpha=3.0,
        beta=1e-3,
        group_mean0=np.zeros(d),
        group_mean_cov0=eye.copy(),
        basis_col_var=np.ones(d),
        noise_mean0=np.zeros(d),
        noise_mean_cov0=eye.copy(),
        noise_cov_dof0=float(d),
        noise_cov_scale0=eye.copy(),
        max_groups=30,
        max_noise=10,
    )


@dataclass
class GroupPosterior:
    """Variational posterior of one group's offset and basis.

    The basis columns are independent Gaussians; ``basis_col_cov[v]`` is the
    covariance of column v.  The expected Gram matrix E[B^T B] therefore has
    element (i, j) equal to <b_i>.<b_j> off the diagonal and
    <b_v>.<b_v> + tr(cov_v) on it.
    """

    mean: np.ndarray           # (d,)  offset posterior mean
    mean_cov: np.ndarray       # (d, d)
    basis: np.ndarray          # (d, d) posterior mean, columns are basis vectors
    basis_col_cov: np.ndarray  # (d, d, d), [v] is the covariance of column v

    def mean_second_moment(self) -> np.ndarray:
        return self.mean_cov + np.outer(self.mean, self.mean)

    def expected_gram(self) -> np.ndarray:
        """E[B^T B] under the column-factorized posterior."""
        g = self.basis.T @ self.basis
        g[np.diag_indices_from(g)] += np.trace(self.basis_col_cov, axis1=1, axis2=2)
        return g

    def expected_weighted_gram(self, weight: np.ndarray) -> np.ndarray:
        """E[B^T W B] for a fixed symmetric weight matrix W."""
        g = self.basis.T @ weight @ self.basis
        g[np.diag_indices_from(g)] += np.einsum("vde,ed->v", self.basis_col_cov, weight)
        return 0.5 * (g + g.T)


@dataclass
class NoiseComponentPosterior:
    """Variational posterior of one noise component's mean and covariance."""

    mean: np.ndarray       # (d,)
    mean_cov: np.ndarray   # (d, d)
    cov_dof: float
    cov_scale: np.ndarray  # (d, d) SPD

    def mean_second_moment(self) -> np.ndarray:
        return self.mean_cov + np.outer(self.mean, self.mean)

    def cov_expectations(self):
        """(E[S^-1], E[ln |S|]) of the covariance posterior."""
        return iw_expectations(InverseWishartParams(self.cov_dof, self.cov_scale))


@dataclass
class VariationalState:
    """Every factor of the mean-field posterior.

    ``group_sticks`` / ``noise_sticks`` hold Beta parameters (a, b) per
    stick; the last stick of each layer is clamped to one when weights are
    formed, so its stored parameters are inert.  Responsibility rows are
    kept normalized by the update functions.
    """

    hyper: Hyperparameters
    group_sticks: np.ndarray   # (T, 2)
    noise_sticks: np.ndarray   # (T, K, 2)
    groups: list               # T GroupPosterior
    noise: list                # T lists of K NoiseComponentPosterior
    resp_group: np.ndarray | None = None   # (N, T) row-stochastic
    resp_noise: np.ndarray | None = None   # (N, T, K) row-stochastic in k
    paper_literal_sticks: bool = False

    @property
    def n_groups(self) -> int:
        return self.hyper.max_groups

    @property
    def n_noise(self) -> int:
        return self.hyper.max_noise

    @property
    def n_data(self) -> int:
        return 0 if self.resp_group is None else self.resp_group.shape[0]

    def validate(self, atol: float = 1e-12) -> None:
        self.hyper.validate()
        if np.any(self.group_sticks <= 0) or np.any(self.noise_sticks <= 0):
            raise ValueError("stick parameters must be positive")
        if self.resp_group is not None:
            if np.any(self.resp_group < 0) or np.any(self.resp_noise < 0):
                raise ValueError("responsibilities must be nonnegative")
            if not np.allclose(self.resp_group.sum(axis=1), 1.0, rtol=0, atol=atol):
                raise ValueError("group responsibility rows must sum to one")
            if not np.allclose(self.resp_noise.sum(axis=2), 1.0, rtol=0, atol=atol):
                raise ValueError("noise responsibility rows must sum to one")


def prior_group_posterior(hyper: Hyperparameters) -> GroupPosterior:
    """Group posterior equal to its prior: zero basis, prior offset moments."""
    d = hyper.d
    col_cov = np.stack([v * np.eye(d) for v in hyper.basis_col_var])
    return GroupPosterior(
        mean=hyper.group_mean0.copy(),
        mean_cov=hyper.group_mean_cov0.copy(),
        basis=np.zeros((d, d)),
        basis_col_cov=col_cov,
    )


def prior_noise_posterior(hyper: Hyperparameters) -> NoiseComponentPosterior:
    return NoiseComponentPosterior(
        mean=hyper.noise_mean0.copy(),
        mean_cov=hyper.noise_mean_cov0.copy(),
        cov_dof=float(hyper.noise_cov_dof0),
        cov_scale=hyper.noise_cov_scale0.copy(),
    )


def blank_state(hyper: Hyperparameters, n: int | None = None) -> VariationalState:
    """State with every factor at its prior and uniform responsibilities."""
    t, k = hyper.max_groups, hyper.max_noise
    group_sticks = np.tile([1.0, hyper.alpha], (t, 1))
    noise_sticks = np.tile([1.0, hyper.beta], (t, k, 1))
    groups = [prior_group_posterior(hyper) for _ in range(t)]
    noise = [[prior_noise_posterior(hyper) for _ in range(k)] for _ in range(t)]
    state = VariationalState(hyper=hyper, group_sticks=group_sticks,
                             noise_sticks=noise_sticks, groups=groups, noise=noise)
    if n is not None:
        attach_uniform_responsibilities(state, n)
    return state


def attach_uniform_responsibilities(state: VariationalState, n: int) -> None:
    t, k = state.n_groups, state.n_noise
    state.resp_group = np.full((n, t), 1.0 / t)
    state.resp_noise = np.full((n, t, k), 1.0 / k)


def truncated_weights(fractions: np.ndarray) -> np.ndarray:
    """Stick weights with the last fraction clamped to one (weights sum to 1)."""
    v = np.asarray(fractions, dtype=float).copy()
    v[-1] = 1.0
    return stick_weights_from_fractions(v)


def sample_noisy_patches(hyper: Hyperparameters, n_groups: int, noise_counts,
                         ranks, n: int, seed: int):
    """Draw ``n`` patches from the generative model.

    Group weights come from a truncated stick-breaking draw (last stick
    clamped); each group's basis is drawn from the column prior and then
    hard-truncated to the requested rank by zeroing trailing singular
    directions.  Returns (data (n, d), group labels, noise labels), labels
    0-based.
    """
    hyper.validate()
    if n_groups > hyper.max_groups:
        raise ValueError("n_groups exceeds the truncation level")
    noise_counts = [int(k) for k in noise_counts]
    ranks = [int(r) for r in ranks]
    if len(noise_counts) != n_groups or len(ranks) != n_groups:
        raise ValueError("need one noise count and one rank per group")
    d = hyper.d
    if any(r < 0 or r > d for r in ranks):
        raise ValueError("ranks must lie in [0, d]")

    rng = rng_from_seed(seed)
    v = rng.beta(1.0, hyper.alpha, size=n_groups)
    pi = truncated_weights(v)

    means, bases, noise_params, kappas = [], [], [], []
    for t in range(n_groups):
        mu = rng.multivariate_normal(hyper.group_mean0, hyper.group_mean_cov0)
        basis = rng.standard_normal((d, d)) * np.sqrt(hyper.basis_col_var)[None, :]
        if ranks[t] < d:
            u_svd, s_svd, vt_svd = np.linalg.svd(basis)
            s_svd[ranks[t]:] = 0.0
            basis = (u_svd * s_svd) @ vt_svd
        means.append(mu)
        bases.append(basis)
        comps = []
        for _ in range(noise_counts[t]):
            u = rng.multivariate_normal(hyper.noise_mean0, hyper.noise_mean_cov0)
            cov = invwishart.rvs(df=hyper.noise_cov_dof0, scale=hyper.noise_cov_scale0,
                                 random_state=rng)
            cov = np.atleast_2d(cov)
            comps.append((u, cov))
        noise_params.append(comps)
        w = rng.beta(1.0, hyper.beta, size=noise_counts[t])
        kappas.append(truncated_weights(w))

    z = rng.choice(n_groups, size=n, p=pi)
    data = np.empty((n, d))
    z_noise = np.empty(n, dtype=np.int64)
    for i in range(n):
        t = int(z[i])
        k = int(rng.choice(noise_counts[t], p=kappas[t]))
        z_noise[i] = k
        y = rng.standard_normal(d)
        u, cov = noise_params[t][k]
        e = rng.multivariate_normal(u, cov)
        data[i] = bases[t] @ y + means[t] + e
    return data, z.astype(np.int64), z_noise


# --- state file -----------------------------------------------------------
#
# Layout: magic "DDPT", little-endian u32 version, then little-endian f64
# values in this order (T = max_groups, K = max_noise):
#   d, alpha, beta, T, K,
#   group_mean0 (d), group_mean_cov0 (d*d), basis_col_var (d),
#   noise_mean0 (d), noise_mean_cov0 (d*d), noise_cov_dof0, noise_cov_scale0 (d*d),
#   group_sticks (T*2), noise_sticks (T*K*2),
#   per group t: mean (d), mean_cov (d*d), basis (d*d), basis_col_cov (d*d*d),
#   per group t, component k: mean (d), mean_cov (d*d), cov_dof, cov_scale (d*d).
# Responsibilities are excluded (recomputable from data).

def save_state(state: VariationalState, path) -> None:
    hyper = state.hyper
    d, t, k = hyper.d, hyper.max_groups, hyper.max_noise
    chunks = [float(d), hyper.alpha, hyper.beta, float(t), float(k)]
    vals = [np.asarray(chunks)]

    def push(arr):
        vals.append(np.asarray(arr, dtype="<f8").reshape(-1))

    push(hyper.group_mean0)
    push(hyper.group_mean_cov0)
    push(hyper.basis_col_var)
    push(hyper.noise_mean0)
    push(hyper.noise_mean_cov0)
    push([hyper.noise_cov_dof0])
    push(hyper.noise_cov_scale0)
    push(state.group_sticks)
    push(state.noise_sticks)
    for g in state.groups:
        push(g.mean)
        push(g.mean_cov)
        push(g.basis)
        push(g.basis_col_cov)
    for comps in state.noise:
        for c in comps:
            push(c.mean)
            push(c.mean_cov)
            push([c.cov_dof])
            push(c.cov_scale)
    payload = np.concatenate(vals).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(STATE_MAGIC)
        fh.write(struct.pack("<I", STATE_VERSION))
        fh.write(payload.tobytes())


def load_state(path) -> VariationalState:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != STATE_MAGIC:
        raise FormatError("not a model-state file")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != STATE_VERSION:
        raise FormatError(f"unsupported state version {version}")
    vals = np.frombuffer(raw[8:], dtype="<f8")
    pos = 0

    def take(count):
        nonlocal pos
        out = vals[pos:pos + count]
        if out.shape[0] != count:
            raise FormatError("truncated state file")
        pos += count
        return np.array(out, dtype=float)

    d = int(take(1)[0])
    alpha, beta = take(1)[0], take(1)[0]
    t = int(take(1)[0])
    k = int(take(1)[0])
    hyper = Hyperparameters(
        alpha=float(alpha), beta=float(beta),
        group_mean0=take(d), group_mean_cov0=take(d * d).reshape(d, d),
        basis_col_var=take(d),
        noise_mean0=take(d), noise_mean_cov0=take(d * d).reshape(d, d),
        noise_cov_dof0=float(take(1)[0]),
        noise_cov_scale0=take(d * d).reshape(d, d),
        max_groups=t, max_noise=k,
    )
    group_sticks = take(t * 2).reshape(t, 2)
    noise_sticks = take(t * k * 2).reshape(t, k, 2)
    groups = []
    for _ in range(t):
        groups.append(GroupPosterior(
            mean=take(d), mean_cov=take(d * d).reshape(d, d),
            basis=take(d * d).reshape(d, d),
            basis_col_cov=take(d * d * d).reshape(d, d, d)))
    noise = []
    for _ in range(t):
        comps = []
        for _ in range(k):
            comps.append(NoiseComponentPosterior(
                mean=take(d), mean_cov=take(d * d).reshape(d, d),
                cov_dof=float(take(1)[0]), cov_scale=take(d * d).reshape(d, d)))
        noise.append(comps)
    if pos != vals.shape[0]:
        raise FormatError("trailing bytes in state file")
    return VariationalState(hyper=hyper, group_sticks=group_sticks,
                            noise_sticks=noise_sticks, groups=groups, noise=noise)
