"""Monte Carlo E-step: a per-cluster Gibbs sampler over labels and proportions.

Each sweep draws every label ``z_ij`` from its categorical full conditional
given ``pi_i`` and then ``pi_i`` from ``Dir(alpha_i + counts)``. The label
probabilities are averaged over retained sweeps (Rao-Blackwellization), which
gives ``z_star`` with lower variance than counting indicators.

All randomness for a cluster is drawn up front from that cluster's own
stream, which makes results independent of cluster order. The Dirichlet
draw uses ``Gamma(a + c) = Gamma(a) + sum of c unit exponentials``: each
observation carries one exponential per sweep that is credited to the
component its label lands in, so per-sweep randomness does not depend on the
sampled labels.
"""

import numpy as np
from numba import njit

from . import _rng, dirichlet
from .core import PosteriorSummaries, UnderflowError
from .expert import log_density_matrix

CLAMP = dirichlet.CLAMP


@njit(cache=True, nogil=True)
def _gibbs_kernel(dens, obs_start, alpha, gam, unif, expo, rnd_start, burn_in, n_keep):
    # dens[j, k] = h_k(y_j) / max_k h_k(y_j); the row scaling cancels in the label probabilities
    N, K = dens.shape
    m = alpha.shape[0]
    S = burn_in + n_keep
    z_sum = np.zeros((N, K))
    logpi_sum = np.zeros((m, K))
    pi_sum = np.zeros((m, K))
    pi = np.empty(K)
    p = np.empty(K)
    acc = np.empty(K)
    for i in range(m):
        j0 = obs_start[i]
        n = obs_start[i + 1] - j0
        if n == 0:
            continue
        base = rnd_start[i]
        a0 = 0.0
        for k in range(K):
            a0 += alpha[i, k]
        for k in range(K):
            pi[k] = alpha[i, k] / a0
        for s in range(S):
            keep = s >= burn_in
            for k in range(K):
                acc[k] = gam[i, s, k]
            for j in range(n):
                row = j0 + j
                tot = 0.0
                for k in range(K):
                    p[k] = pi[k] * dens[row, k]
                    tot += p[k]
                u = unif[base + s * n + j] * tot
                z = K - 1
                c = 0.0
                for k in range(K):
                    c += p[k]
                    if u < c:
                        z = k
                        break
                acc[z] += expo[base + s * n + j]
                if keep:
                    for k in range(K):
                        z_sum[row, k] += p[k] / tot
            tot = 0.0
            for k in range(K):
                tot += acc[k]
            tot2 = 0.0
            for k in range(K):
                v = acc[k] / tot
                if not v > CLAMP:
                    v = CLAMP
                pi[k] = v
                tot2 += v
            for k in range(K):
                pi[k] /= tot2
                if keep:
                    logpi_sum[i, k] += np.log(pi[k])
                    pi_sum[i, k] += pi[k]
    return z_sum, logpi_sum, pi_sum


def _run(logh_list, alphas, L, burn_in, rngs, ids):
    """Run independent chains for a batch of clusters; returns summaries per cluster."""
    m = len(logh_list)
    K = alphas.shape[1]
    sizes = np.array([len(lh) for lh in logh_list], dtype=np.int64)
    S = L + burn_in
    obs_start = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    rnd_start = np.concatenate([[0], np.cumsum(sizes * S)]).astype(np.int64)
    gam = np.zeros((m, S, K))
    unif = np.empty(rnd_start[-1])
    expo = np.empty(rnd_start[-1])
    for i in range(m):
        if sizes[i] == 0:
            continue
        rng = rngs[i]
        gam[i] = rng.standard_gamma(np.broadcast_to(alphas[i], (S, K)))
        unif[rnd_start[i]:rnd_start[i + 1]] = rng.random(S * sizes[i])
        expo[rnd_start[i]:rnd_start[i + 1]] = rng.standard_exponential(S * sizes[i])
    logh = np.vstack(logh_list) if sizes.sum() else np.zeros((0, K))
    top = logh.max(axis=1, keepdims=True) if len(logh) else np.zeros((0, 1))
    bad = np.flatnonzero(~np.isfinite(top[:, 0]))
    if bad.size:
        i = int(np.searchsorted(obs_start, bad[0], side="right") - 1)
        raise UnderflowError(f"all component densities underflow at cluster {ids[i]!r}, "
                             f"observation {int(bad[0] - obs_start[i])}")
    dens = np.exp(logh - top)
    z_sum, logpi_sum, pi_sum = _gibbs_kernel(
        dens, obs_start, np.ascontiguousarray(alphas, dtype=np.float64), gam, unif, expo,
        rnd_start, int(burn_in), int(L))

    z_star, logpi_star, pi_hat = [], np.empty((m, K)), np.empty((m, K))
    for i in range(m):
        if sizes[i] == 0:
            z_star.append(np.zeros((0, K)))
            logpi_star[i] = dirichlet.expected_log(alphas[i])
            pi_hat[i] = dirichlet.mean(alphas[i])
            continue
        z = z_sum[obs_start[i]:obs_start[i + 1]] / L
        z_star.append(z / z.sum(axis=1, keepdims=True))
        logpi_star[i] = logpi_sum[i] / L
        pi_hat[i] = pi_sum[i] / pi_sum[i].sum()
    return z_star, logpi_star, pi_hat


def gibbs_estep(cluster, experts, alpha_i, L, burn_in, rng):
    """Posterior summaries for one cluster.

    Returns
    -------
    z_star : array, shape (n_i, K)
    logpi_star : array, shape (K,)
    pi_hat : array, shape (K,)
    """
    if L < 1 or burn_in < 0:
        raise ValueError("L must be >= 1 and burn_in >= 0")
    alpha_i = np.asarray(alpha_i, dtype=float)
    logh = log_density_matrix(experts, cluster.y, cluster.X)
    z, lp, ph = _run([logh], alpha_i[None, :], L, burn_in, [rng], [cluster.id])
    return z[0], lp[0], ph[0]


def cluster_alphas(dataset, mixing) -> np.ndarray:
    """``m x K`` matrix of Dirichlet parameters, one row per cluster."""
    return np.vstack([mixing.alpha_for(c.w) for c in dataset.clusters])


def posterior_summaries(dataset, experts, mixing, config, seed) -> PosteriorSummaries:
    """Run the Gibbs E-step on every cluster.

    Each cluster's chain uses the stream ``(seed, "cluster:<id>")`` so the
    output for a cluster does not depend on the order or number of the others.
    ``seed`` may be an int or a :class:`numpy.random.SeedSequence`.
    """
    alphas = cluster_alphas(dataset, mixing)
    logh = [log_density_matrix(experts, c.y, c.X) for c in dataset.clusters]
    rngs = [_rng.stream(seed, _rng.cluster_key(c.id)) for c in dataset.clusters]
    z, lp, ph = _run(logh, alphas, config.L, config.burn_in, rngs, dataset.ids)
    return PosteriorSummaries(z, lp, ph)
