"""Compiled Gibbs updates shared by the regression and factor samplers.

Random numbers come from numba's per-thread generator, reseeded from a
counter-based hash of (chain seed, iteration, stream) at the start of every
independent block of work. A chain is therefore fully determined by its
seed and iteration counter, per-gene work can run in parallel without
changing the output, and checkpoints only need the counter.
"""

import math

import os

import numba as nb
import numpy as np

# workqueue is always available; TBB and OpenMP builds vary across installs
if "NUMBA_THREADING_LAYER" not in os.environ:
    nb.config.THREADING_LAYER = "workqueue"

STREAM_COLUMNS = 1 << 40
STREAM_SCORES = 1 << 41
STREAM_MIXTURE = 1 << 42
STREAM_DATA = 1 << 43

_LOG_TINY = -745.0
_RHO_FLOOR = 1e-300

SPARSE = 1
GAUSSIAN = 0

VARIANT_OK = 0
VARIANT_BAD_TAU = 1
VARIANT_BAD_INCLUSION = 2


@nb.njit(cache=True)
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True)
def stream_seed(seed, iteration, stream):
    z = np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15)
    z = _mix64(z + np.uint64(iteration) * np.uint64(0xD1B54A32D192ED03))
    z = _mix64(z + np.uint64(stream) * np.uint64(0x8CB92BA72F3D8DD7) + np.uint64(0x632BE59BD9B4E019))
    return np.uint32(z & np.uint64(0xFFFFFFFF))


@nb.njit(cache=True)
def reseed(seed, iteration, stream):
    np.random.seed(stream_seed(seed, iteration, stream))


# --------------------------------------------------------------------------
# closed-form conditionals


@nb.njit(cache=True)
def log_bayes_factor(hr, S, tau, psi, variant=0):
    """Log Bayes factor of a N(0, tau) effect on a column with squared norm S.

    ``hr`` is the inner product of the column with the partial residual.
    """
    v = psi + tau * S
    lbf = tau * hr * hr / (2.0 * psi * v)
    if variant != VARIANT_BAD_INCLUSION:
        lbf += 0.5 * math.log(psi / v)
    return lbf


@nb.njit(cache=True)
def inclusion_probability(prior_prob, log_bf):
    if prior_prob <= 0.0:
        return 0.0
    if prior_prob >= 1.0:
        return 1.0
    lo = math.log(prior_prob) - math.log1p(-prior_prob) + log_bf
    if lo >= 0:
        return 1.0 / (1.0 + math.exp(-lo))
    e = math.exp(lo)
    return e / (1.0 + e)


@nb.njit(cache=True)
def effect_conditional(hr, S, prior_mean, prior_var, psi):
    """Mean and variance of a normal effect given its partial residual."""
    prec = 1.0 / prior_var + S / psi
    var = 1.0 / prec
    return var * (prior_mean / prior_var + hr / psi), var


@nb.njit(cache=True)
def _positive(x):
    return x if x > 0.0 else 5e-324


@nb.njit(cache=True)
def _draw_inverse_gamma(shape, rate):
    return 1.0 / _positive(np.random.gamma(shape, 1.0 / rate))


@nb.njit(cache=True)
def update_gene(g, X, G, colS, B, Z, Pi, rho, tau, psi, col_kind, prior_mean, prior_var,
                m, force_z, pi_fixed, psi_fixed, psi_shape, psi_rate, collapse, variant, resid):
    """One gene's scan: every column effect in order, then its residual variance."""
    n, K = G.shape
    for i in range(n):
        acc = X[g, i]
        for j in range(K):
            acc -= G[i, j] * B[g, j]
        resid[i] = acc
    psi_g = psi[g]
    for j in range(K):
        old = B[g, j]
        S = colS[j]
        hr = old * S
        for i in range(n):
            hr += G[i, j] * resid[i]
        if col_kind[j] == GAUSSIAN:
            mean, var = effect_conditional(hr, S, prior_mean[j], prior_var[j], psi_g)
            new = mean + math.sqrt(var) * np.random.normal()
            Z[g, j] = 1
        else:
            fz = force_z[g, j]
            if fz == 0:
                z = 0
            elif fz == 1:
                z = 1
            else:
                if pi_fixed[g, j] or not collapse:
                    prior = Pi[g, j]
                else:
                    prior = rho[j] * m[j]
                prob = inclusion_probability(prior, log_bayes_factor(hr, S, tau[j], psi_g, variant))
                z = 1 if np.random.random() < prob else 0
            if z == 1:
                mean, var = effect_conditional(hr, S, 0.0, tau[j], psi_g)
                new = mean + math.sqrt(var) * np.random.normal()
                if new == 0.0:
                    new = 5e-324
            else:
                new = 0.0
            Z[g, j] = z
        d = new - old
        if d != 0.0:
            for i in range(n):
                resid[i] -= d * G[i, j]
        B[g, j] = new
    if not psi_fixed[g]:
        rss = 0.0
        for i in range(n):
            rss += resid[i] * resid[i]
        psi[g] = _draw_inverse_gamma(psi_shape + 0.5 * n, psi_rate + 0.5 * rss)


@nb.njit(cache=True)
def update_columns(B, Z, Pi, rho, tau, col_kind, m, a, r, s, tau_shape, tau_rate,
                   pi_fixed, rho_fixed, tau_fixed, variant):
    """Column-level scan: inclusion probabilities, base rates, effect variances."""
    p, K = B.shape
    for j in range(K):
        if col_kind[j] != SPARSE:
            continue
        mj = m[j]
        aj = a[j]
        rj = rho[j]
        w0 = (1.0 - rj) / ((1.0 - rj) + rj * (1.0 - mj))
        nplus = 0
        n1 = 0
        ss = 0.0
        for g in range(p):
            if not pi_fixed[g, j]:
                if Z[g, j] == 1:
                    Pi[g, j] = _positive(np.random.beta(aj * mj + 1.0, aj * (1.0 - mj)))
                elif np.random.random() < w0:
                    Pi[g, j] = 0.0
                else:
                    Pi[g, j] = _positive(np.random.beta(aj * mj, aj * (1.0 - mj) + 1.0))
            if Pi[g, j] > 0.0:
                nplus += 1
            if Z[g, j] == 1:
                n1 += 1
                ss += B[g, j] * B[g, j]
        if not rho_fixed[j]:
            x = np.random.beta(s * r + nplus, s * (1.0 - r) + p - nplus)
            rho[j] = min(max(x, _RHO_FLOOR), 1.0 - 1e-16)
        if not tau_fixed[j]:
            rate = tau_rate + 0.5 * ss
            if variant == VARIANT_BAD_TAU:
                rate = 2.0 * tau_rate + ss
            tau[j] = _draw_inverse_gamma(tau_shape + 0.5 * n1, rate)


def _gene_loop_impl(X, G, colS, B, Z, Pi, rho, tau, psi, col_kind, prior_mean, prior_var,
                    m, force_z, pi_fixed, psi_fixed, psi_shape, psi_rate, collapse, variant,
                    seed, iteration):
    p = X.shape[0]
    n = G.shape[0]
    for g in nb.prange(p):
        reseed(seed, iteration, g)
        resid = np.empty(n)
        update_gene(g, X, G, colS, B, Z, Pi, rho, tau, psi, col_kind, prior_mean, prior_var,
                    m, force_z, pi_fixed, psi_fixed, psi_shape, psi_rate, collapse, variant, resid)


gene_loop_serial = nb.njit(cache=True)(_gene_loop_impl)
gene_loop_parallel = nb.njit(cache=True, parallel=True)(_gene_loop_impl)


@nb.njit(cache=True)
def column_norms(G):
    n, K = G.shape
    out = np.zeros(K)
    for j in range(K):
        acc = 0.0
        for i in range(n):
            acc += G[i, j] * G[i, j]
        out[j] = acc
    return out


@nb.njit(cache=True)
def sweep(X, G, colS, B, Z, Pi, rho, tau, psi, col_kind, prior_mean, prior_var, m, a,
          r, s, tau_shape, tau_rate, psi_shape, psi_rate, force_z, pi_fixed, rho_fixed,
          tau_fixed, psi_fixed, collapse, variant, seed, iteration, parallel):
    if parallel:
        gene_loop_parallel(X, G, colS, B, Z, Pi, rho, tau, psi, col_kind, prior_mean, prior_var,
                           m, force_z, pi_fixed, psi_fixed, psi_shape, psi_rate, collapse,
                           variant, seed, iteration)
    else:
        gene_loop_serial(X, G, colS, B, Z, Pi, rho, tau, psi, col_kind, prior_mean, prior_var,
                         m, force_z, pi_fixed, psi_fixed, psi_shape, psi_rate, collapse,
                         variant, seed, iteration)
    reseed(seed, iteration, STREAM_COLUMNS)
    update_columns(B, Z, Pi, rho, tau, col_kind, m, a, r, s, tau_shape, tau_rate,
                   pi_fixed, rho_fixed, tau_fixed, variant)


@nb.njit(cache=True)
def accumulate(B, Z, rho, tau, psi, sumZ, sumB, sumB2, sum_rho, sum_tau, sum_psi):
    p, K = B.shape
    for g in range(p):
        for j in range(K):
            if Z[g, j]:
                b = B[g, j]
                sumZ[g, j] += 1.0
                sumB[g, j] += b
                sumB2[g, j] += b * b
        sum_psi[g] += psi[g]
    for j in range(K):
        sum_rho[j] += rho[j]
        sum_tau[j] += tau[j]


@nb.njit(cache=True)
def run_sweeps(n_sweeps, start, burn_in, thin, X, G, colS, B, Z, Pi, rho, tau, psi, col_kind,
               prior_mean, prior_var, m, a, r, s, tau_shape, tau_rate, psi_shape, psi_rate,
               force_z, pi_fixed, rho_fixed, tau_fixed, psi_fixed, collapse, variant, seed,
               parallel, sumZ, sumB, sumB2, sum_rho, sum_tau, sum_psi):
    """Run sweeps ``start .. start + n_sweeps - 1``; returns the number saved."""
    saved = 0
    for t in range(n_sweeps):
        it = start + t
        sweep(X, G, colS, B, Z, Pi, rho, tau, psi, col_kind, prior_mean, prior_var, m, a,
              r, s, tau_shape, tau_rate, psi_shape, psi_rate, force_z, pi_fixed, rho_fixed,
              tau_fixed, psi_fixed, collapse, variant, seed, it, parallel)
        if it >= burn_in and (it - burn_in + 1) % thin == 0:
            accumulate(B, Z, rho, tau, psi, sumZ, sumB, sumB2, sum_rho, sum_tau, sum_psi)
            saved += 1
    return saved


# --------------------------------------------------------------------------
# joint-distribution (Geweke) simulation


@nb.njit(cache=True)
def redraw_data(X, G, B, psi, seed, iteration):
    p, n = X.shape
    K = G.shape[1]
    for g in range(p):
        reseed(seed, iteration, STREAM_DATA + g)
        sd = math.sqrt(psi[g])
        for i in range(n):
            mu = 0.0
            for j in range(K):
                mu += G[i, j] * B[g, j]
            X[g, i] = mu + sd * np.random.normal()


@nb.njit(cache=True)
def monitored(B, Z, rho, tau, psi, col_kind, out):
    """Mean beta^2, mean z, mean rho, mean 1/tau over sparse columns; mean 1/psi."""
    p, K = B.shape
    nb2 = 0.0
    nz = 0.0
    cnt = 0
    rs = 0.0
    ti = 0.0
    kc = 0
    for j in range(K):
        if col_kind[j] != SPARSE:
            continue
        kc += 1
        rs += rho[j]
        ti += 1.0 / tau[j]
        for g in range(p):
            nb2 += B[g, j] * B[g, j]
            nz += Z[g, j]
            cnt += 1
    out[0] = nb2 / cnt
    out[1] = nz / cnt
    out[2] = rs / kc
    out[3] = ti / kc
    pi_ = 0.0
    for g in range(p):
        pi_ += 1.0 / psi[g]
    out[4] = pi_ / p


@nb.njit(cache=True)
def successive_conditional(n_steps, X, G, colS, B, Z, Pi, rho, tau, psi, col_kind, prior_mean,
                           prior_var, m, a, r, s, tau_shape, tau_rate, psi_shape, psi_rate,
                           force_z, pi_fixed, rho_fixed, tau_fixed, psi_fixed, collapse,
                           variant, seed, stats):
    for t in range(n_steps):
        sweep(X, G, colS, B, Z, Pi, rho, tau, psi, col_kind, prior_mean, prior_var, m, a,
              r, s, tau_shape, tau_rate, psi_shape, psi_rate, force_z, pi_fixed, rho_fixed,
              tau_fixed, psi_fixed, collapse, variant, seed, t, False)
        redraw_data(X, G, B, psi, seed, t)
        monitored(B, Z, rho, tau, psi, col_kind, stats[t])


# --------------------------------------------------------------------------
# latent factor model


@nb.njit(cache=True)
def _cholesky_solve(L, b):
    k = L.shape[0]
    y = np.empty(k)
    for i in range(k):
        acc = b[i]
        for l in range(i):
            acc -= L[i, l] * y[l]
        y[i] = acc / L[i, i]
    x = np.empty(k)
    for i in range(k - 1, -1, -1):
        acc = y[i]
        for l in range(i + 1, k):
            acc -= L[l, i] * x[l]
        x[i] = acc / L[i, i]
    return x


@nb.njit(cache=True)
def _back_solve_transpose(L, z):
    """Solve L' x = z, giving a draw with covariance (L L')^{-1} when z ~ N(0, I)."""
    k = L.shape[0]
    x = np.empty(k)
    for i in range(k - 1, -1, -1):
        acc = z[i]
        for l in range(i + 1, k):
            acc -= L[l, i] * x[l]
        x[i] = acc / L[i, i]
    return x


def _score_loop_impl(X, H, B, psi, Lam, mu, comp, seed, iteration, c):
    p, n = X.shape
    k = Lam.shape[0]
    P = np.eye(k)
    for a_ in range(k):
        for b_ in range(k):
            acc = 0.0
            for g in range(p):
                acc += B[g, c + a_] * B[g, c + b_] / psi[g]
            P[a_, b_] += acc
    L = np.linalg.cholesky(P)
    for i in nb.prange(n):
        reseed(seed, iteration, STREAM_SCORES + i)
        rhs = np.empty(k)
        for a_ in range(k):
            rhs[a_] = mu[comp[i], a_]
        for g in range(p):
            e = X[g, i]
            for j in range(c):
                e -= B[g, j] * H[i, j]
            w = e / psi[g]
            for a_ in range(k):
                rhs[a_] += B[g, c + a_] * w
        mean = _cholesky_solve(L, rhs)
        z = np.empty(k)
        for a_ in range(k):
            z[a_] = np.random.normal()
        dev = _back_solve_transpose(L, z)
        for a_ in range(k):
            Lam[a_, i] = mean[a_] + dev[a_]


score_loop_serial = nb.njit(cache=True)(_score_loop_impl)
score_loop_parallel = nb.njit(cache=True, parallel=True)(_score_loop_impl)


@nb.njit(cache=True)
def update_mixture(Lam, mu, comp, V, w, alpha, alpha_shape, alpha_rate):
    """Truncated stick-breaking mixture of N(mu_c, I) kernels with N(0, I) base."""
    k, n = Lam.shape
    T = mu.shape[0]
    logw = np.empty(T)
    for t in range(T):
        logw[t] = math.log(w[t]) if w[t] > 0.0 else -np.inf
    probs = np.empty(T)
    for i in range(n):
        mx = -np.inf
        for t in range(T):
            d2 = 0.0
            for a_ in range(k):
                d = Lam[a_, i] - mu[t, a_]
                d2 += d * d
            probs[t] = logw[t] - 0.5 * d2
            if probs[t] > mx:
                mx = probs[t]
        tot = 0.0
        for t in range(T):
            probs[t] = math.exp(probs[t] - mx)
            tot += probs[t]
        u = np.random.random() * tot
        acc = 0.0
        choice = T - 1
        for t in range(T):
            acc += probs[t]
            if u < acc:
                choice = t
                break
        comp[i] = choice
    counts = np.zeros(T)
    sums = np.zeros((T, k))
    for i in range(n):
        counts[comp[i]] += 1.0
        for a_ in range(k):
            sums[comp[i], a_] += Lam[a_, i]
    tail = 0.0
    for t in range(T):
        tail += counts[t]
    remaining = 1.0
    log_rest = 0.0
    for t in range(T):
        tail -= counts[t]
        if t < T - 1:
            v = np.random.beta(1.0 + counts[t], alpha[0] + tail)
            v = min(max(v, 1e-300), 1.0 - 1e-12)
            log_rest += math.log1p(-v)
        else:
            v = 1.0
        V[t] = v
        w[t] = remaining * v
        remaining *= 1.0 - v
    for t in range(T):
        prec = 1.0 + counts[t]
        sd = 1.0 / math.sqrt(prec)
        for a_ in range(k):
            mu[t, a_] = sums[t, a_] / prec + sd * np.random.normal()
    if T > 1:
        alpha[0] = np.random.gamma(alpha_shape + T - 1.0, 1.0 / (alpha_rate - log_rest))


@nb.njit(cache=True)
def factor_sweep(X, H, Lam, G, B, Z, Pi, rho, tau, psi, col_kind, prior_mean, prior_var, m, a,
                 r, s, tau_shape, tau_rate, psi_shape, psi_rate, force_z, pi_fixed, rho_fixed,
                 tau_fixed, psi_fixed, collapse, anchors, mu, comp, V, w, alpha, mixture,
                 alpha_shape, alpha_rate, seed, iteration, parallel):
    n, c = H.shape
    k = Lam.shape[0]
    for i in range(n):
        for j in range(c):
            G[i, j] = H[i, j]
        for a_ in range(k):
            G[i, c + a_] = Lam[a_, i]
    colS = column_norms(G)
    sweep(X, G, colS, B, Z, Pi, rho, tau, psi, col_kind, prior_mean, prior_var, m, a,
          r, s, tau_shape, tau_rate, psi_shape, psi_rate, force_z, pi_fixed, rho_fixed,
          tau_fixed, psi_fixed, collapse, 0, seed, iteration, parallel)
    # fold each factor's sign so its anchor gene loads positively
    p = B.shape[0]
    for a_ in range(k):
        g = anchors[a_]
        if g >= 0 and B[g, c + a_] < 0.0:
            for gg in range(p):
                B[gg, c + a_] = -B[gg, c + a_]
            for i in range(n):
                Lam[a_, i] = -Lam[a_, i]
            for t in range(mu.shape[0]):
                mu[t, a_] = -mu[t, a_]
    if parallel:
        score_loop_parallel(X, H, B, psi, Lam, mu, comp, seed, iteration, c)
    else:
        score_loop_serial(X, H, B, psi, Lam, mu, comp, seed, iteration, c)
    if mixture:
        reseed(seed, iteration, STREAM_MIXTURE)
        update_mixture(Lam, mu, comp, V, w, alpha, alpha_shape, alpha_rate)


@nb.njit(cache=True)
def run_factor_sweeps(n_sweeps, start, burn_in, X, H, Lam, G, B, Z, Pi, rho, tau, psi, col_kind,
                      prior_mean, prior_var, m, a, r, s, tau_shape, tau_rate, psi_shape,
                      psi_rate, force_z, pi_fixed, rho_fixed, tau_fixed, psi_fixed, collapse,
                      anchors, mu, comp, V, w, alpha, mixture, alpha_shape, alpha_rate, seed,
                      parallel, sumZ, sumB, sumB2, sum_rho, sum_tau, sum_psi, sumLam,
                      sumLam2, sum_occupied):
    saved = 0
    k, n = Lam.shape
    T = mu.shape[0]
    occ = np.zeros(T, dtype=np.bool_)
    for t in range(n_sweeps):
        it = start + t
        factor_sweep(X, H, Lam, G, B, Z, Pi, rho, tau, psi, col_kind, prior_mean, prior_var,
                     m, a, r, s, tau_shape, tau_rate, psi_shape, psi_rate, force_z, pi_fixed,
                     rho_fixed, tau_fixed, psi_fixed, collapse, anchors, mu, comp, V, w, alpha,
                     mixture, alpha_shape, alpha_rate, seed, it, parallel)
        if it >= burn_in:
            accumulate(B, Z, rho, tau, psi, sumZ, sumB, sumB2, sum_rho, sum_tau, sum_psi)
            for a_ in range(k):
                for i in range(n):
                    sumLam[a_, i] += Lam[a_, i]
                    sumLam2[a_, i] += Lam[a_, i] * Lam[a_, i]
            occ[:] = False
            for i in range(n):
                occ[comp[i]] = True
            sum_occupied[0] += occ.sum()
            saved += 1
    return saved


# --------------------------------------------------------------------------
# single-gene exact enumeration over factor indicators


@nb.njit(cache=True)
def enumerate_factor_inclusion(GtG, Gty, yty, n, prior_var, n_fixed, prior_prob, psi):
    """Posterior inclusion probability of each enumerable column.

    The first ``n_fixed`` columns are always in the model with Gaussian
    priors; each of the remaining columns is in or out, with the given prior
    inclusion probabilities. Returns marginal inclusion probabilities.
    """
    d = GtG.shape[0]
    k = d - n_fixed
    n_cfg = 1 << k
    logpost = np.empty(n_cfg)
    idx = np.empty(d, dtype=np.int64)
    for cfg in range(n_cfg):
        na = 0
        lp = 0.0
        for j in range(n_fixed):
            idx[na] = j
            na += 1
        for f in range(k):
            if (cfg >> f) & 1:
                idx[na] = n_fixed + f
                na += 1
                lp += math.log(prior_prob[f]) if prior_prob[f] > 0 else -np.inf
            else:
                lp += math.log1p(-prior_prob[f]) if prior_prob[f] < 1 else -np.inf
        if lp == -np.inf:
            logpost[cfg] = -np.inf
            continue
        M = np.empty((na, na))
        rhs = np.empty(na)
        logD = 0.0
        for u in range(na):
            for v in range(na):
                M[u, v] = GtG[idx[u], idx[v]]
            M[u, u] += psi / prior_var[idx[u]]
            rhs[u] = Gty[idx[u]]
            logD += math.log(prior_var[idx[u]])
        L = np.linalg.cholesky(M)
        logdet = 0.0
        for u in range(na):
            logdet += 2.0 * math.log(L[u, u])
        sol = _cholesky_solve(L, rhs)
        q = 0.0
        for u in range(na):
            q += rhs[u] * sol[u]
        logdetC = n * math.log(psi) + logD + logdet - na * math.log(psi)
        quad = (yty - q) / psi
        logpost[cfg] = lp - 0.5 * (logdetC + quad)
    mx = -np.inf
    for cfg in range(n_cfg):
        if logpost[cfg] > mx:
            mx = logpost[cfg]
    tot = 0.0
    incl = np.zeros(k)
    for cfg in range(n_cfg):
        wgt = math.exp(logpost[cfg] - mx) if logpost[cfg] > -np.inf else 0.0
        tot += wgt
        for f in range(k):
            if (cfg >> f) & 1:
                incl[f] += wgt
    for f in range(k):
        incl[f] /= tot
    return incl
