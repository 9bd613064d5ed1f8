"""Truncated mean-field coordinate ascent for the two-layer mixture.

The variational family factorizes over group assignments z, per-group noise
assignments (conditional on z), one latent code y per (patch, group) pair,
the stick fractions of both layers, and every group/noise parameter.  Each
update below is the exact coordinate maximizer of the objective computed by
:func:`elbo`, so the per-sweep ELBO trace is non-decreasing up to float
rounding.

Latent-code posteriors are only materialized for pairs whose group
responsibility exceeds a small threshold; the remaining pairs sit at their
prior, which is where the exact update would leave them anyway (to second
order in the responsibility).
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, multigammaln, xlogy

from .errors import NumericalError
from .mathcore import digamma, spd_cholesky, spd_inverse
from .model import (
    Hyperparameters,
    VariationalState,
    attach_uniform_responsibilities,
    truncated_weights,
)

# Latent codes are materialized for pairs with group responsibility above this.
PROJECTION_THRESHOLD = 1e-8

_RESP_FLOOR = 1e-300


@dataclass
class Sufficients:
    """Responsibility masses: per-group delta and per-component lambda."""

    delta: np.ndarray   # (T,)
    lam: np.ndarray     # (T, K)


def compute_sufficients(state: VariationalState) -> Sufficients:
    delta = state.resp_group.sum(axis=0)
    lam = np.einsum("it,itk->tk", state.resp_group, state.resp_noise)
    return Sufficients(delta=delta, lam=lam)


def vartheta(x, group_mean, noise_mean):
    """Residual of a patch against a group offset plus noise mean."""
    return x - group_mean - noise_mean


def iota(x, noise_mean, basis, y_mean):
    """Residual with the reconstructed code removed but the offset kept."""
    return x - noise_mean - basis @ y_mean


def iota_prime(x, group_mean, basis, y_mean):
    """Residual with the reconstructed code removed but the noise mean kept."""
    return x - group_mean - basis @ y_mean


@dataclass
class ProjectionPosterior:
    """Per-(patch, group) latent-code moments, stored sparsely.

    Pairs not listed in ``group_idx`` are at the prior N(0, I).
    ``group_cov[t][j]`` is the posterior covariance for patch
    ``group_idx[t][j]``; the second moment adds the outer product of the
    mean.
    """

    n: int
    d: int
    group_idx: list = field(default_factory=list)
    group_mean: list = field(default_factory=list)
    group_cov: list = field(default_factory=list)
    group_logdet_cov: list = field(default_factory=list)

    def mean(self, i: int, t: int) -> np.ndarray:
        pos = np.searchsorted(self.group_idx[t], i)
        if pos < len(self.group_idx[t]) and self.group_idx[t][pos] == i:
            return self.group_mean[t][pos]
        return np.zeros(self.d)

    def second_moment(self, i: int, t: int) -> np.ndarray:
        pos = np.searchsorted(self.group_idx[t], i)
        if pos < len(self.group_idx[t]) and self.group_idx[t][pos] == i:
            m = self.group_mean[t][pos]
            return self.group_cov[t][pos] + np.outer(m, m)
        return np.eye(self.d)


class _Context:
    """Per-(group, component) expectations reused across one update phase."""

    def __init__(self, state: VariationalState):
        hyper = state.hyper
        d, t_max, k_max = hyper.d, hyper.max_groups, hyper.max_noise
        self.d = d
        self.prec = np.empty((t_max, k_max, d, d))      # E[S^-1]
        self.logdet = np.empty((t_max, k_max))          # E[ln |S|]
        self.noise_mean = np.empty((t_max, k_max, d))
        self.group_mean = np.empty((t_max, d))
        self.basis = np.empty((t_max, d, d))
        self.gram = np.empty((t_max, k_max, d, d))      # E[B^T E[S^-1] B]
        self.quad_const = np.empty((t_max, k_max))      # x-free part of the quadratic
        self.prec_noise_mean = np.empty((t_max, k_max, d))  # E[S^-1](mu + u)
        for t in range(t_max):
            g = state.groups[t]
            self.group_mean[t] = g.mean
            self.basis[t] = g.basis
            mm = g.mean_second_moment()
            for k in range(k_max):
                c = state.noise[t][k]
                prec, logdet = c.cov_expectations()
                self.prec[t, k] = prec
                self.logdet[t, k] = logdet
                self.noise_mean[t, k] = c.mean
                self.gram[t, k] = g.expected_weighted_gram(prec)
                uu = c.mean_second_moment()
                self.quad_const[t, k] = (
                    np.einsum("de,ed->", prec, mm)
                    + 2.0 * c.mean @ prec @ g.mean
                    + np.einsum("de,ed->", prec, uu)
                )
                self.prec_noise_mean[t, k] = prec @ (g.mean + c.mean)


def _thread_map(fn, items, threads):
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def expected_log_stick_weights(sticks: np.ndarray) -> np.ndarray:
    """E[ln pi_m] from stick Beta parameters, last stick clamped to one."""
    a, b = sticks[:, 0], sticks[:, 1]
    norm = digamma(a + b)
    log_v = digamma(a) - norm
    log_1mv = digamma(b) - norm
    log_v[-1] = 0.0
    cum = np.concatenate(([0.0], np.cumsum(log_1mv[:-1])))
    return log_v + cum


def literal_log_stick_terms(sticks: np.ndarray) -> np.ndarray:
    """Per-stick psi(a) - psi(b), the uncorrected printed form."""
    return digamma(sticks[:, 0]) - digamma(sticks[:, 1])


def _log_stick_terms(sticks: np.ndarray, literal: bool) -> np.ndarray:
    return literal_log_stick_terms(sticks) if literal else expected_log_stick_weights(sticks)


def _loglik(patches: np.ndarray, state: VariationalState,
            projections: ProjectionPosterior, ctx: _Context | None = None,
            threads: int = 1) -> np.ndarray:
    """Expected Gaussian log-density per (patch, group, component).

    Expectations run over the current posteriors of the group offset, basis,
    noise mean/covariance, and the pair's latent code (prior moments for
    pairs without a materialized posterior).
    """
    if ctx is None:
        ctx = _Context(state)
    x = patches
    n, d = x.shape
    t_max, k_max = state.n_groups, state.n_noise
    out = np.empty((n, t_max, k_max))
    const = d * np.log(2.0 * np.pi)

    def build(t):
        idx = projections.group_idx[t]
        y = projections.group_mean[t]
        cov = projections.group_cov[t]
        recon = y @ ctx.basis[t].T if len(idx) else None  # B <y> per active patch
        cov_flat = cov.reshape(len(idx), d * d) if len(idx) else None
        gram_flat = ctx.gram[t].reshape(k_max, d * d)
        tr_gram = np.trace(ctx.gram[t], axis1=1, axis2=2)
        cross_cov = cov_flat @ gram_flat.T if len(idx) else None  # Tr(C F_k)
        for k in range(k_max):
            xg = x @ ctx.prec[t, k]
            quad = np.einsum("nd,nd->n", xg, x)
            quad -= 2.0 * (x @ ctx.prec_noise_mean[t, k])
            quad += ctx.quad_const[t, k]
            quad += tr_gram[k]  # prior code second moment: Tr(I F_k)
            if len(idx):
                # replace the prior-code terms with the materialized moments
                fix = cross_cov[:, k] - tr_gram[k]
                yf = recon @ ctx.prec[t, k]
                fix += np.einsum("nd,nd->n", y @ ctx.gram[t, k], y)
                fix -= 2.0 * (np.einsum("nd,nd->n", yf, x[idx])
                              - yf @ (ctx.group_mean[t] + ctx.noise_mean[t, k]))
                quad[idx] += fix
            out[:, t, k] = -0.5 * (const + ctx.logdet[t, k] + quad)
        return None

    _thread_map(build, list(range(t_max)), threads)
    return out


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis with max-subtraction and flooring."""
    peak = logits.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(peak)):
        raise NumericalError("all responsibility logits are non-finite for some row")
    p = np.exp(logits - peak)
    p = np.maximum(p, _RESP_FLOOR)
    return p / p.sum(axis=-1, keepdims=True)


def update_projections(patches: np.ndarray, state: VariationalState,
                       threads: int = 1) -> ProjectionPosterior:
    """Exact latent-code posteriors for all pairs above the threshold.

    For pair (i, t) with per-component weights w_k = q_i(t) q_i(k|t), the
    posterior is Gaussian with precision I + sum_k w_k E[B^T S^-1 B] and mean
    cov @ sum_k w_k E[B]^T E[S^-1] (x - <m> - <u_k>).
    """
    ctx = _Context(state)
    n, d = patches.shape
    proj = ProjectionPosterior(n=n, d=d)
    eye = np.eye(d)

    def build(t):
        idx = np.nonzero(state.resp_group[:, t] > PROJECTION_THRESHOLD)[0]
        if len(idx) == 0:
            return (idx, np.zeros((0, d)), np.zeros((0, d, d)), np.zeros(0))
        w = state.resp_group[idx, t, None] * state.resp_noise[idx, t, :]  # (n_t, K)
        prec = np.einsum("ik,kde->ide", w, ctx.gram[t]) + eye
        gw = np.einsum("ik,kde->ide", w, ctx.prec[t])          # sum_k w_k E[S^-1]
        gu = w @ np.einsum("kde,ke->kd", ctx.prec[t], ctx.noise_mean[t])
        rhs = np.einsum("ide,ie->id", gw, patches[idx] - ctx.group_mean[t]) - gu
        rhs = rhs @ ctx.basis[t]                                # B^T applied
        cov = np.linalg.inv(prec)
        cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
        sign, logdet_prec = np.linalg.slogdet(prec)
        if np.any(sign <= 0):
            raise NumericalError("projection precision lost positive definiteness")
        mean = np.einsum("ide,ie->id", cov, rhs)
        return (idx, mean, cov, -logdet_prec)

    results = _thread_map(build, list(range(state.n_groups)), threads)
    for idx, mean, cov, logdet in results:
        proj.group_idx.append(idx)
        proj.group_mean.append(mean)
        proj.group_cov.append(cov)
        proj.group_logdet_cov.append(logdet)
    return proj


def update_group_responsibilities(patches, state, projections, *,
                                  _loglik_cache=None, threads: int = 1):
    """Softmax update of q_i(t) from stick, component and likelihood terms."""
    ll = _loglik_cache if _loglik_cache is not None else _loglik(
        patches, state, projections, threads=threads)
    log_pi = _log_stick_terms(state.group_sticks, state.paper_literal_sticks)
    log_kappa = np.stack([
        _log_stick_terms(state.noise_sticks[t], state.paper_literal_sticks)
        for t in range(state.n_groups)
    ])
    cond_entropy = -xlogy(state.resp_noise, state.resp_noise).sum(axis=2)
    logits = (log_pi[None, :]
              + np.einsum("itk,tk->it", state.resp_noise, log_kappa)
              + np.einsum("itk,itk->it", state.resp_noise, ll)
              + cond_entropy)
    state.resp_group = _softmax_rows(logits)
    return state


def update_noise_responsibilities(patches, state, projections, *,
                                  _loglik_cache=None, threads: int = 1):
    """Softmax update of q_i(k|t) per (patch, group)."""
    ll = _loglik_cache if _loglik_cache is not None else _loglik(
        patches, state, projections, threads=threads)
    log_kappa = np.stack([
        _log_stick_terms(state.noise_sticks[t], state.paper_literal_sticks)
        for t in range(state.n_groups)
    ])
    state.resp_noise = _softmax_rows(log_kappa[None, :, :] + ll)
    return state


def update_top_sticks(state: VariationalState, sufficients: Sufficients):
    """Beta(delta_t + 1, alpha + sum_{j>t} delta_j) per group stick."""
    delta = sufficients.delta
    tail = np.concatenate((np.cumsum(delta[::-1])[::-1][1:], [0.0]))
    state.group_sticks = np.column_stack((delta + 1.0, state.hyper.alpha + tail))
    return state


def update_noise_sticks(state: VariationalState, sufficients: Sufficients):
    """Beta(lambda_{t,k} + 1, beta + sum_{j>k} lambda_{t,j}) per noise stick."""
    lam = sufficients.lam
    tail = np.concatenate((np.cumsum(lam[:, ::-1], axis=1)[:, ::-1][:, 1:],
                           np.zeros((lam.shape[0], 1))), axis=1)
    state.noise_sticks = np.stack((lam + 1.0, state.hyper.beta + tail), axis=2)
    return state


def _per_component_weights(state, t):
    """(N, K) weights q_i(t) q_i(k|t) for group t."""
    return state.resp_group[:, t, None] * state.resp_noise[:, t, :]


def update_group_means(patches, state, projections):
    """Conjugate Gaussian update of every group offset posterior."""
    hyper = state.hyper
    ctx = _Context(state)
    suff = compute_sufficients(state)
    prior_prec = spd_inverse(hyper.group_mean_cov0)
    prior_lin = prior_prec @ hyper.group_mean0
    for t in range(state.n_groups):
        if suff.delta[t] <= 0.0:
            state.groups[t].mean = hyper.group_mean0.copy()
            state.groups[t].mean_cov = hyper.group_mean_cov0.copy()
            continue
        w = _per_component_weights(state, t)                    # (N, K)
        sx = patches.T @ w                                      # (d, K)
        idx = projections.group_idx[t]
        recon_sum = np.zeros((hyper.d, state.n_noise))
        if len(idx):
            recon = projections.group_mean[t] @ state.groups[t].basis.T
            recon_sum = recon.T @ w[idx]                        # (d, K)
        resid = sx - ctx.noise_mean[t].T * suff.lam[t][None, :] - recon_sum
        prec = prior_prec + np.einsum("k,kde->de", suff.lam[t], ctx.prec[t])
        lin = prior_lin + np.einsum("kde,ek->d", ctx.prec[t], resid)
        cov = spd_inverse(prec)
        state.groups[t].mean_cov = cov
        state.groups[t].mean = cov @ lin
    return state


def update_dictionaries(patches, state, projections):
    """Column-cycled conjugate update of every group basis posterior.

    Columns are updated in order; each update is exact given the current
    values of the other columns (their means and the latent-code second
    moments, including cross moments).
    """
    hyper = state.hyper
    ctx = _Context(state)
    suff = compute_sufficients(state)
    d = hyper.d
    for t in range(state.n_groups):
        group = state.groups[t]
        if suff.delta[t] <= 0.0:
            group.basis = np.zeros((d, d))
            group.basis_col_cov = np.stack([v * np.eye(d) for v in hyper.basis_col_var])
            continue
        idx = projections.group_idx[t]
        w = _per_component_weights(state, t)
        w_act = w[idx] if len(idx) else np.zeros((0, state.n_noise))
        act_mass = w_act.sum(axis=0)
        prior_mass = suff.lam[t] - act_mass                     # pairs at the prior code
        y = projections.group_mean[t]
        cov = projections.group_cov[t]
        # per-component moments of the latent codes
        second = np.zeros((state.n_noise, d, d))
        ymom = np.zeros((state.n_noise, d))
        cross = np.zeros((state.n_noise, d, d))                 # sum_i w <y> x^T
        if len(idx):
            cov_flat = cov.reshape(len(idx), d * d)
            for k in range(state.n_noise):
                wk = w_act[:, k]
                second[k] = (cov_flat * wk[:, None]).sum(axis=0).reshape(d, d)
                second[k] += y.T @ (y * wk[:, None])
                ymom[k] = y.T @ wk
                cross[k] = y.T @ (patches[idx] * wk[:, None])
        second += prior_mass[:, None, None] * np.eye(d)[None]
        # column precisions share the component-weighted code energies
        energies = np.einsum("kvv->vk", second)                 # (d, K) of sum_i w <y_v^2>
        prec = np.einsum("vk,kde->vde", energies, ctx.prec[t])
        prec += np.eye(d)[None] / hyper.basis_col_var[:, None, None]
        col_cov = np.linalg.inv(prec)
        col_cov = 0.5 * (col_cov + np.transpose(col_cov, (0, 2, 1)))
        group.basis_col_cov = col_cov
        basis = group.basis
        targets = ctx.group_mean[t][None, :] + ctx.noise_mean[t]  # (K, d)
        for v in range(d):
            lin = np.zeros(d)
            for k in range(state.n_noise):
                vec = (cross[k][v]
                       - ymom[k][v] * targets[k]
                       - basis @ second[k][v]
                       + second[k][v, v] * basis[:, v])
                lin += ctx.prec[t, k] @ vec
            basis[:, v] = col_cov[v] @ lin
        group.basis = basis
    return state


def update_noise_means(patches, state, projections, recenter: bool = False):
    """Conjugate Gaussian update of every noise-component mean posterior.

    With ``recenter`` the stick-weighted mean of each group's noise means is
    shifted into the group offset afterwards, pinning the marginal noise
    mean of the group at zero without changing the likelihood mean.
    """
    hyper = state.hyper
    ctx = _Context(state)
    suff = compute_sufficients(state)
    prior_prec = spd_inverse(hyper.noise_mean_cov0)
    prior_lin = prior_prec @ hyper.noise_mean0
    for t in range(state.n_groups):
        w = _per_component_weights(state, t)
        sx = patches.T @ w
        idx = projections.group_idx[t]
        recon_sum = np.zeros((hyper.d, state.n_noise))
        if len(idx):
            recon = projections.group_mean[t] @ state.groups[t].basis.T
            recon_sum = recon.T @ w[idx]
        for k in range(state.n_noise):
            lam = suff.lam[t, k]
            comp = state.noise[t][k]
            if lam <= 0.0:
                comp.mean = hyper.noise_mean0.copy()
                comp.mean_cov = hyper.noise_mean_cov0.copy()
                continue
            resid = sx[:, k] - lam * ctx.group_mean[t] - recon_sum[:, k]
            prec = prior_prec + lam * ctx.prec[t, k]
            cov = spd_inverse(prec)
            comp.mean_cov = cov
            comp.mean = cov @ (prior_lin + ctx.prec[t, k] @ resid)
        if recenter:
            kappa = truncated_weights(state.noise_sticks[t, :, 0]
                                      / state.noise_sticks[t].sum(axis=1))
            shift = sum(kappa[k] * state.noise[t][k].mean for k in range(state.n_noise))
            for k in range(state.n_noise):
                state.noise[t][k].mean = state.noise[t][k].mean - shift
            state.groups[t].mean = state.groups[t].mean + shift
    return state


def update_noise_covariances(patches, state, projections):
    """Inverse-Wishart update of every noise-component covariance posterior.

    The scale accumulates the responsibility-weighted expected residual
    outer products; the result is symmetrized and validated SPD.
    """
    hyper = state.hyper
    ctx = _Context(state)
    suff = compute_sufficients(state)
    d = hyper.d
    for t in range(state.n_groups):
        group = state.groups[t]
        idx = projections.group_idx[t]
        w = _per_component_weights(state, t)
        w_act = w[idx] if len(idx) else np.zeros((0, state.n_noise))
        act_mass = w_act.sum(axis=0)
        y = projections.group_mean[t]
        cov = projections.group_cov[t]
        cov_flat = cov.reshape(len(idx), d * d) if len(idx) else None
        mm = group.mean_second_moment()
        col_var_sum = group.basis_col_cov  # (d, d, d)
        for k in range(state.n_noise):
            lam = suff.lam[t, k]
            comp = state.noise[t][k]
            if lam <= 0.0:
                comp.cov_dof = float(hyper.noise_cov_dof0)
                comp.cov_scale = hyper.noise_cov_scale0.copy()
                continue
            wk = w[:, k]
            sxx = patches.T @ (patches * wk[:, None])
            sx = patches.T @ wk
            target = ctx.group_mean[t] + ctx.noise_mean[t, k]
            uu = comp.mean_second_moment()
            scale = sxx - np.outer(sx, target) - np.outer(target, sx)
            scale += lam * (mm + uu + np.outer(ctx.group_mean[t], ctx.noise_mean[t, k])
                            + np.outer(ctx.noise_mean[t, k], ctx.group_mean[t]))
            second = (lam - act_mass[k]) * np.eye(d)
            if len(idx):
                wk_act = w_act[:, k]
                r = y.T @ (patches[idx] * wk_act[:, None])      # sum w <y> x^T
                sy = y.T @ wk_act
                second += (cov_flat * wk_act[:, None]).sum(axis=0).reshape(d, d)
                second += y.T @ (y * wk_act[:, None])
                br = group.basis @ r
                bsy = group.basis @ sy
                scale -= br + br.T
                scale += np.outer(bsy, target) + np.outer(target, bsy)
            scale += group.basis @ second @ group.basis.T
            scale += np.einsum("v,vde->de", np.diag(second), col_var_sum)
            scale += hyper.noise_cov_scale0
            scale = 0.5 * (scale + scale.T)
            spd_cholesky(scale)  # raises NumericalError if not SPD
            comp.cov_dof = float(hyper.noise_cov_dof0 + lam)
            comp.cov_scale = scale
    return state


def recover_patch(i: int, state: VariationalState, projections: ProjectionPosterior):
    """Clean-patch estimate: basis @ <y> + offset of the most responsible group."""
    t = int(np.argmax(state.resp_group[i]))
    group = state.groups[t]
    return group.basis @ projections.mean(i, t) + group.mean, t


def recover_all(state: VariationalState, projections: ProjectionPosterior) -> np.ndarray:
    """Vectorized :func:`recover_patch` over every patch."""
    n, d = projections.n, projections.d
    out = np.empty((n, d))
    assign = np.argmax(state.resp_group, axis=1)
    for t in np.unique(assign):
        rows = np.nonzero(assign == t)[0]
        group = state.groups[t]
        codes = np.zeros((len(rows), d))
        idx = projections.group_idx[t]
        if len(idx):
            pos = np.searchsorted(idx, rows)
            pos = np.clip(pos, 0, len(idx) - 1)
            hit = idx[pos] == rows
            codes[hit] = projections.group_mean[t][pos[hit]]
        out[rows] = codes @ group.basis.T + group.mean
    return out


def _gaussian_kl(mean, cov, mean0, cov0_logdet, cov0_inv):
    d = mean.shape[0]
    diff = mean - mean0
    _, logdet = spd_cholesky(cov)
    return 0.5 * (np.einsum("de,ed->", cov0_inv, cov)
                  + diff @ cov0_inv @ diff - d + cov0_logdet - logdet)


def _iw_term(dof, scale, dof0, scale0, prec_mean, logdet_mean, d):
    """E[ln p] - E[ln q] for one inverse-Wishart factor."""
    _, logdet_scale = spd_cholesky(scale)
    _, logdet_scale0 = spd_cholesky(scale0)

    def log_norm(nu, logdet_b):
        return 0.5 * nu * d * np.log(2.0) + multigammaln(0.5 * nu, d) - 0.5 * nu * logdet_b

    return (0.5 * (dof - dof0) * logdet_mean
            - 0.5 * np.einsum("de,ed->", scale0, prec_mean)
            + 0.5 * dof * d
            - log_norm(dof0, logdet_scale0) + log_norm(dof, logdet_scale))


def _beta_term(a, b, concentration):
    """E[ln p] - E[ln q] for one stick factor with prior Beta(1, c)."""
    norm = digamma(a + b)
    log_v = digamma(a) - norm
    log_1mv = digamma(b) - norm
    log_beta_fn = gammaln(a) + gammaln(b) - gammaln(a + b)
    return (np.log(concentration) + (concentration - 1.0) * log_1mv
            + log_beta_fn - (a - 1.0) * log_v - (b - 1.0) * log_1mv)


def elbo(patches: np.ndarray, state: VariationalState,
         projections: ProjectionPosterior, threads: int = 1) -> float:
    """Evidence lower bound under the current factors.

    Raises :class:`NumericalError` naming the offending term if any piece
    is non-finite.
    """
    hyper = state.hyper
    d = hyper.d
    ctx = _Context(state)
    terms = {}

    ll = _loglik(patches, state, projections, ctx=ctx, threads=threads)
    log_pi = expected_log_stick_weights(state.group_sticks)
    log_kappa = np.stack([expected_log_stick_weights(state.noise_sticks[t])
                          for t in range(state.n_groups)])
    rg, rn = state.resp_group, state.resp_noise
    joint = rg[:, :, None] * rn
    terms["mixing"] = float(rg.sum(axis=0) @ log_pi
                            - xlogy(rg, rg).sum()
                            + np.einsum("itk,tk->", joint, log_kappa)
                            - (rg * xlogy(rn, rn).sum(axis=2)).sum())
    terms["likelihood"] = float(np.einsum("itk,itk->", joint, ll))

    code_term = 0.0
    for t in range(state.n_groups):
        idx = projections.group_idx[t]
        if len(idx) == 0:
            continue
        cov = projections.group_cov[t]
        mean = projections.group_mean[t]
        trace = np.trace(cov, axis1=1, axis2=2) + np.einsum("nd,nd->n", mean, mean)
        code_term += 0.5 * float(np.sum(projections.group_logdet_cov[t] - trace + d))
    terms["codes"] = code_term

    cov0_inv = spd_inverse(hyper.group_mean_cov0)
    _, cov0_logdet = spd_cholesky(hyper.group_mean_cov0)
    ncov0_inv = spd_inverse(hyper.noise_mean_cov0)
    _, ncov0_logdet = spd_cholesky(hyper.noise_mean_cov0)
    group_term = 0.0
    basis_term = 0.0
    noise_mean_term = 0.0
    noise_cov_term = 0.0
    for t in range(state.n_groups):
        g = state.groups[t]
        group_term -= _gaussian_kl(g.mean, g.mean_cov, hyper.group_mean0,
                                   cov0_logdet, cov0_inv)
        for v in range(d):
            var = hyper.basis_col_var[v]
            _, logdet_cv = spd_cholesky(g.basis_col_cov[v])
            basis_term -= 0.5 * (np.trace(g.basis_col_cov[v]) / var
                                 + g.basis[:, v] @ g.basis[:, v] / var
                                 - d + d * np.log(var) - logdet_cv)
        for k in range(state.n_noise):
            c = state.noise[t][k]
            noise_mean_term -= _gaussian_kl(c.mean, c.mean_cov, hyper.noise_mean0,
                                            ncov0_logdet, ncov0_inv)
            noise_cov_term += _iw_term(c.cov_dof, c.cov_scale, hyper.noise_cov_dof0,
                                       hyper.noise_cov_scale0, ctx.prec[t, k],
                                       ctx.logdet[t, k], d)
    terms["group_means"] = float(group_term)
    terms["bases"] = float(basis_term)
    terms["noise_means"] = float(noise_mean_term)
    terms["noise_covariances"] = float(noise_cov_term)

    stick_term = 0.0
    for t in range(state.n_groups - 1):
        stick_term += _beta_term(*state.group_sticks[t], hyper.alpha)
    for t in range(state.n_groups):
        for k in range(state.n_noise - 1):
            stick_term += _beta_term(*state.noise_sticks[t, k], hyper.beta)
    terms["sticks"] = float(stick_term)

    for name, value in terms.items():
        if not np.isfinite(value):
            raise NumericalError(f"non-finite ELBO term: {name}")
    return float(sum(terms.values()))


def run_vb(patches: np.ndarray, hyper: Hyperparameters, init_state: VariationalState,
           max_sweeps: int = 100, tol: float = 1e-6, seed: int = 0, *,
           recenter: bool = False, threads: int = 1, trace_stream=None):
    """Coordinate-ascent sweeps until the relative ELBO change drops below tol.

    Patches are reordered internally by content (restored on return), so the
    returned posteriors are invariant to the input order bit for bit.  The
    per-sweep trace is returned and, when ``trace_stream`` is given, emitted
    as ``sweep<TAB>elbo<TAB>wall_ms`` lines.

    ``seed`` is accepted for interface stability; the sweeps themselves are
    deterministic.
    """
    del seed
    patches = np.asarray(patches, dtype=float)
    state = init_state
    if state.resp_group is None:
        attach_uniform_responsibilities(state, patches.shape[0])

    order = np.lexsort(patches.T[::-1])
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    patches_c = patches[order]
    state.resp_group = state.resp_group[order]
    state.resp_noise = state.resp_noise[order]

    start = time.monotonic()

    def emit(sweep, value):
        if trace_stream is not None:
            ms = (time.monotonic() - start) * 1000.0
            trace_stream.write(f"{sweep}\t{value:.12g}\t{ms:.1f}\n")

    def step(name, fn, sweep):
        try:
            return fn()
        except NumericalError as exc:
            raise NumericalError(f"sweep {sweep}, {name}: {exc}") from exc

    projections = step("projections", lambda: update_projections(
        patches_c, state, threads=threads), 0)
    trace = [step("elbo", lambda: elbo(patches_c, state, projections, threads=threads), 0)]
    emit(0, trace[0])

    for sweep in range(1, max_sweeps + 1):
        if sweep > 1:
            projections = step("projections", lambda: update_projections(
                patches_c, state, threads=threads), sweep)
        ll = step("loglik", lambda: _loglik(patches_c, state, projections,
                                            threads=threads), sweep)
        step("group_responsibilities", lambda: update_group_responsibilities(
            patches_c, state, projections, _loglik_cache=ll), sweep)
        step("noise_responsibilities", lambda: update_noise_responsibilities(
            patches_c, state, projections, _loglik_cache=ll), sweep)
        suff = compute_sufficients(state)
        step("top_sticks", lambda: update_top_sticks(state, suff), sweep)
        step("noise_sticks", lambda: update_noise_sticks(state, suff), sweep)
        step("group_means", lambda: update_group_means(patches_c, state, projections), sweep)
        step("dictionaries", lambda: update_dictionaries(patches_c, state, projections), sweep)
        step("noise_means", lambda: update_noise_means(patches_c, state, projections,
                                                       recenter=recenter), sweep)
        step("noise_covariances", lambda: update_noise_covariances(
            patches_c, state, projections), sweep)
        value = step("elbo", lambda: elbo(patches_c, state, projections,
                                          threads=threads), sweep)
        trace.append(value)
        emit(sweep, value)
        prev = trace[-2]
        if abs(value - prev) <= tol * abs(prev):
            break
    else:
        sweep = max_sweeps

    # refresh projections so recovery sees the final posteriors
    if max_sweeps > 0:
        projections = step("projections", lambda: update_projections(
            patches_c, state, threads=threads), sweep)

    state.resp_group = state.resp_group[inverse]
    state.resp_noise = state.resp_noise[inverse]
    for t in range(state.n_groups):
        idx_orig = order[projections.group_idx[t]]
        sort = np.argsort(idx_orig)
        projections.group_idx[t] = idx_orig[sort]
        projections.group_mean[t] = projections.group_mean[t][sort]
        projections.group_cov[t] = projections.group_cov[t][sort]
        projections.group_logdet_cov[t] = projections.group_logdet_cov[t][sort]
    return state, projections, trace
