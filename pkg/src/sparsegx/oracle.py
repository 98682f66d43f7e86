"""Generative simulation and independent oracles for checking the samplers.

Everything here is written with plain numpy/scipy and shares no sampling
code with the compiled kernels, so agreement between the two is evidence
of correctness rather than of a shared bug.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate, stats

from . import _kernels as K_
from ._io import atomic_write_text
from .config import HyperParameters, McmcControl
from .dataset import (DataFormatError, DesignColumn, DesignMatrix, ExpressionMatrix,
                      ValidationError, build_design, mouse_annotations, ARTIFACT, INTERCEPT)

ENUMERATION_LIMIT = 12


class EnumerationBoundError(ValidationError):
    """Instance too large for exhaustive enumeration."""


# --------------------------------------------------------------------------
# prior draws and simulation


@dataclass(frozen=True)
class Scenario:
    """How synthetic parameters are generated.

    ``effects="prior"`` draws every parameter from the prior. ``"planted"``
    switches on a ``planted_rate`` fraction of each sparse column with
    effects of magnitude in ``effect_range`` (random sign), intercepts in
    ``intercept_range`` and residual variances in ``psi_range``. Any of
    ``psi``, ``tau``, ``rho`` pins that parameter (``psi=0`` gives
    noiseless data).
    """

    design: str = "mouse"  # mouse | random | intercept
    effects: str = "prior"  # prior | planted
    planted_rate: float = 0.05
    effect_range: tuple = (0.5, 1.5)
    intercept_range: tuple = (6.0, 10.0)
    psi_range: tuple = (0.01, 0.04)
    psi: Optional[float] = None
    tau: Optional[float] = None
    rho: Optional[float] = None


@dataclass(frozen=True)
class SyntheticTruth:
    B: np.ndarray
    Z: np.ndarray
    tau: np.ndarray
    psi: np.ndarray
    rho: np.ndarray
    seed: int
    Pi: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    Lam: Optional[np.ndarray] = None
    design: Optional[DesignMatrix] = None
    extras: dict = field(default_factory=dict, compare=False)


def draw_prior(h: HyperParameters, p: int, K: int, rng: np.random.Generator,
               sparse: np.ndarray | None = None) -> dict:
    """One joint draw of (B, Z, Pi, rho, tau, psi) from the prior.

    Column 0 (or every column not flagged in ``sparse``) gets the intercept
    prior N(b, tau1); its rho, tau entries are NaN.
    """
    if sparse is None:
        sparse = np.arange(K) > 0
    rho = np.where(sparse, rng.beta(h.s * h.r, h.s * (1 - h.r), size=K), np.nan)
    tau = np.where(sparse, 1.0 / rng.gamma(h.tau_shape, 1.0 / h.tau_rate, size=K), np.nan)
    nonzero = rng.random((p, K)) < np.where(sparse, rho, 0.0)
    Pi = np.where(nonzero, rng.beta(h.a * h.m, h.a * (1 - h.m), size=(p, K)), 0.0)
    Pi[:, ~sparse] = 1.0
    Z = (rng.random((p, K)) < Pi).astype(np.int8)
    Z[:, ~sparse] = 1
    sd = np.sqrt(np.where(sparse, tau, h.tau1))
    B = np.where(Z == 1, rng.standard_normal((p, K)) * sd, 0.0)
    B[:, ~sparse] += h.b
    psi = 1.0 / rng.gamma(h.psi_shape, 1.0 / h.psi_rate, size=p)
    return {"B": B, "Z": Z, "Pi": Pi, "rho": rho, "tau": tau, "psi": psi}


def random_design(n: int, K: int, rng: np.random.Generator) -> DesignMatrix:
    """Intercept plus alternating 0/1 indicator and centered Gaussian columns."""
    cols = [np.ones(n)]
    for j in range(1, K):
        if j % 2:
            col = np.zeros(n)
            col[rng.permutation(n)[: max(1, n // 2)]] = 1.0
        else:
            col = rng.standard_normal(n)
            col -= col.mean()
        cols.append(col)
    names = [DesignColumn("intercept", INTERCEPT)] + [DesignColumn(f"x{j + 1}", ARTIFACT)
                                                      for j in range(1, K)]
    return DesignMatrix(tuple(names), np.column_stack(cols),
                        tuple(f"s{i + 1:03d}" for i in range(n)))


def make_design(kind: str, n: int, K: int, rng: np.random.Generator) -> DesignMatrix:
    if kind == "mouse":
        D = build_design(mouse_annotations(n))
        if K != D.shape[1]:
            if K < D.shape[1]:
                raise ValidationError(f"the mouse design has {D.shape[1]} columns, got K={K}")
            extra = rng.standard_normal((n, K - D.shape[1]))
            D = D.with_covariates(extra)
        return D
    if kind == "random":
        return random_design(n, K, rng)
    if kind == "intercept":
        if K != 1:
            raise ValidationError("the intercept-only design has K=1")
        return random_design(n, 1, rng)
    raise ValueError(f"unknown design {kind!r}")


def simulate(h: HyperParameters, dims, scenario: Scenario | None = None, seed: int = 0):
    """Draw parameters, then data X = B H' + E with E_g ~ N(0, psi_g I).

    Returns ``(ExpressionMatrix, SyntheticTruth)``; the design is stored on
    the truth object.
    """
    p, n, K = (int(d) for d in dims)
    if min(p, n, K) < 1:
        raise ValidationError("dimensions must be positive")
    sc = scenario or Scenario()
    rng = np.random.default_rng(seed)
    D = make_design(sc.design, n, K, rng)
    sparse = np.array([c.kind != INTERCEPT for c in D.columns])
    par = draw_prior(h, p, K, rng, sparse)
    if sc.effects == "planted":
        Z = (rng.random((p, K)) < sc.planted_rate).astype(np.int8)
        Z[:, ~sparse] = 1
        mag = rng.uniform(*sc.effect_range, size=(p, K)) * rng.choice([-1.0, 1.0], size=(p, K))
        B = np.where(Z == 1, mag, 0.0)
        B[:, ~sparse] = rng.uniform(*sc.intercept_range, size=(p, int((~sparse).sum())))
        par.update(B=B, Z=Z, psi=rng.uniform(*sc.psi_range, size=p), Pi=Z.astype(float),
                   rho=np.where(sparse, Z.mean(axis=0), np.nan))
        # report the realized mean squared effect as each column's variance
        nz = Z[:, sparse] == 1
        par["tau"] = np.full(K, np.nan)
        par["tau"][sparse] = (B[:, sparse] ** 2 * nz).sum(axis=0) / np.maximum(nz.sum(axis=0), 1)
    elif sc.effects != "prior":
        raise ValueError(f"unknown effects mode {sc.effects!r}")
    if sc.psi is not None:
        par["psi"] = np.full(p, float(sc.psi))
    if sc.tau is not None:
        par["tau"] = np.where(sparse, float(sc.tau), np.nan)
    if sc.rho is not None:
        par["rho"] = np.where(sparse, float(sc.rho), np.nan)
    noise = rng.standard_normal((p, n)) * np.sqrt(par["psi"])[:, None]
    X = par["B"] @ D.values.T + noise
    genes = tuple(f"g{g + 1:04d}" for g in range(p))
    truth = SyntheticTruth(B=par["B"], Z=par["Z"], tau=par["tau"], psi=par["psi"],
                           rho=par["rho"], Pi=par["Pi"], seed=int(seed), design=D)
    return ExpressionMatrix(genes, D.sample_ids, X), truth


def simulate_factor(p: int, n: int, k: int, seed: int = 0, density: float = 0.3,
                    loading_range=(0.5, 1.5), psi_range=(0.01, 0.04),
                    intercept_range=(6.0, 10.0), clusters: int = 0):
    """Data from a sparse factor model x_i = A lambda_i + mu + e_i.

    Each gene loads on each factor with probability ``density``; the first
    gene of each factor's block loads on that factor only, so every factor
    has at least one pure gene. Scores are standard normal, or drawn around
    ``clusters`` well-separated centers when ``clusters > 0``.
    """
    rng = np.random.default_rng(seed)
    Zt = rng.random((p, k)) < density
    for f in range(k):
        Zt[f] = False
        Zt[f, f] = True
    A = np.where(Zt, rng.uniform(*loading_range, size=(p, k)) * rng.choice([-1.0, 1.0], (p, k)),
                 0.0)
    if clusters:
        centers = rng.standard_normal((clusters, k)) * 2.0
        lab = rng.integers(0, clusters, size=n)
        Lam = (centers[lab] + 0.5 * rng.standard_normal((n, k))).T
    else:
        Lam = rng.standard_normal((k, n))
    mu = rng.uniform(*intercept_range, size=p)
    psi = rng.uniform(*psi_range, size=p)
    X = A @ Lam + mu[:, None] + rng.standard_normal((p, n)) * np.sqrt(psi)[:, None]
    genes = tuple(f"g{g + 1:04d}" for g in range(p))
    samples = tuple(f"s{i + 1:03d}" for i in range(n))
    B = mu[:, None]
    truth = SyntheticTruth(B=B, Z=np.ones((p, 1), dtype=np.int8), tau=np.array([np.nan]),
                           psi=psi, rho=np.array([np.nan]), seed=int(seed), A=A, Lam=Lam)
    return ExpressionMatrix(genes, samples, X), truth


# --------------------------------------------------------------------------
# exact enumeration oracle


def _fixed_vector(value, K, name):
    if value is None:
        raise ValidationError(f"the exact oracle needs {name} fixed")
    arr = np.broadcast_to(np.asarray(value, dtype=float), (K,)).copy()
    return arr


def _config_log_marginal(x, H, active, mean, var, psi):
    """log N(x; H_a mean_a, psi I + H_a diag(var_a) H_a')."""
    Ha = H[:, active]
    cov = psi * np.eye(len(x)) + (Ha * var[active]) @ Ha.T
    return stats.multivariate_normal.logpdf(x, Ha @ mean[active], cov)


def exact_tiny_posterior(X, H, h: HyperParameters, tau, psi, rho,
                         prior_prob=None) -> np.ndarray:
    """Exact posterior inclusion probabilities by enumerating every indicator pattern.

    With column effect variances ``tau``, residual variances ``psi`` and base
    rates ``rho`` fixed, genes are independent and each sparse effect is
    included a priori with probability rho_j * m (``prior_prob`` overrides
    this). Effects are integrated out analytically. Column 0 is the
    intercept and is always included.
    """
    Xv = X.values if isinstance(X, ExpressionMatrix) else np.atleast_2d(np.asarray(X, float))
    Hv = H.values if isinstance(H, DesignMatrix) else np.asarray(H, float)
    p, n = Xv.shape
    K = Hv.shape[1]
    if p * (K - 1) > ENUMERATION_LIMIT:
        raise EnumerationBoundError(
            f"p*(K-1) = {p * (K - 1)} exceeds the enumeration bound {ENUMERATION_LIMIT}")
    tau = _fixed_vector(tau, K, "tau")
    psi = np.broadcast_to(np.asarray(psi, dtype=float), (p,))
    if prior_prob is None:
        prior = _fixed_vector(rho, K, "rho") * h.m
    else:
        prior = np.broadcast_to(np.asarray(prior_prob, float), (K,)).copy()
    mean = np.zeros(K)
    mean[0] = h.b
    var = tau.copy()
    var[0] = h.tau1
    out = np.zeros((p, K))
    out[:, 0] = 1.0
    for g in range(p):
        logw, pats = [], []
        for pat in itertools.product((0, 1), repeat=K - 1):
            z = np.array((1,) + pat, dtype=bool)
            lp = np.sum(np.where(z[1:], np.log(prior[1:]), np.log1p(-prior[1:])))
            logw.append(lp + _config_log_marginal(Xv[g], Hv, z, mean, var, psi[g]))
            pats.append(z)
        logw = np.array(logw)
        w = np.exp(logw - logw.max())
        w /= w.sum()
        out[g, 1:] = np.sum(w[:, None] * np.array(pats)[:, 1:], axis=0)
    return out


def quadrature_log_marginal(x, H, active, over: int, h: HyperParameters, tau, psi) -> float:
    """Same marginal likelihood as the enumeration oracle, integrating effect
    ``over`` by adaptive 1-D quadrature and the remaining effects analytically."""
    Hv = H.values if isinstance(H, DesignMatrix) else np.asarray(H, float)
    K = Hv.shape[1]
    tau = _fixed_vector(tau, K, "tau")
    mean = np.zeros(K)
    mean[0] = h.b
    var = tau.copy()
    var[0] = h.tau1
    active = np.asarray(active, dtype=bool)
    rest = active.copy()
    rest[over] = False
    col = Hv[:, over]

    def logf(beta):
        r = x - beta * col
        lp = stats.norm.logpdf(beta, mean[over], math.sqrt(var[over]))
        if rest.any():
            return lp + _config_log_marginal(r, Hv, rest, mean, var, psi)
        return lp + np.sum(stats.norm.logpdf(r, 0.0, math.sqrt(psi)))

    # centre on the exact conditional mode; width from its precision
    C = psi * np.eye(len(x)) + (Hv[:, rest] * var[rest]) @ Hv[:, rest].T
    Cinv_col = np.linalg.solve(C, col)
    prec = 1.0 / var[over] + col @ Cinv_col
    centre = (mean[over] / var[over] + Cinv_col @ (x - Hv[:, rest] @ mean[rest])) / prec
    peak = logf(centre)
    half = 40.0 / math.sqrt(prec)
    val, _ = integrate.quad(lambda b: math.exp(logf(b) - peak), centre - half, centre + half,
                            epsabs=0.0, epsrel=1e-13, limit=200)
    return peak + math.log(val)


# --------------------------------------------------------------------------
# tiny-instance oracle comparison


@dataclass(frozen=True)
class TinyInstance:
    X: np.ndarray
    design: DesignMatrix
    tau: np.ndarray
    psi: np.ndarray
    rho: np.ndarray

    def control(self, samples: int, burn_in: int, seed: int) -> McmcControl:
        return McmcControl(burn_in=burn_in, samples=samples, seed=seed,
                           fixed_tau=tuple(self.tau), fixed_psi=tuple(self.psi),
                           fixed_rho=tuple(self.rho))


def tiny_instance(rng: np.random.Generator, p: int | None = None, n: int | None = None,
                  K: int | None = None) -> TinyInstance:
    """A random instance inside the enumeration regime with fixed variances and rates.

    Unpinned dimensions are drawn from p in 1..3, n in 4..8, K in 2..3.
    """
    p = int(rng.integers(1, 4)) if p is None else p
    n = int(rng.integers(4, 9)) if n is None else n
    K = int(rng.integers(2, 4)) if K is None else K
    D = random_design(n, K, rng)
    tau = np.concatenate([[np.nan], rng.uniform(0.3, 2.0, K - 1)])
    psi = rng.uniform(0.05, 0.5, p)
    rho = np.concatenate([[np.nan], rng.uniform(0.2, 0.8, K - 1)])
    B = np.zeros((p, K))
    B[:, 0] = rng.uniform(6.0, 10.0, p)
    on = rng.random((p, K - 1)) < 0.5
    B[:, 1:] = np.where(on, rng.standard_normal((p, K - 1)) * np.sqrt(tau[1:]), 0.0)
    X = B @ D.values.T + rng.standard_normal((p, n)) * np.sqrt(psi)[:, None]
    return TinyInstance(X, D, tau, psi, rho)


@dataclass(frozen=True)
class OracleReport:
    max_abs_diff: np.ndarray  # one entry per instance
    tolerance: float
    exact: tuple
    mcmc: tuple

    @property
    def worst(self) -> float:
        return float(np.max(self.max_abs_diff))

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def oracle_check(h: HyperParameters | None = None, instances: int = 20, samples: int = 50_000,
                 burn_in: int = 1_000, seed: int = 0, tolerance: float = 0.02,
                 variant: int = K_.VARIANT_OK) -> OracleReport:
    """Compare MCMC inclusion frequencies with exact enumeration on random tiny instances."""
    from .sampler import run_chain

    h = h or HyperParameters()
    rng = np.random.default_rng(seed)
    diffs, exact, mc = [], [], []
    for k in range(instances):
        inst = tiny_instance(rng)
        ex = exact_tiny_posterior(inst.X, inst.design, h, inst.tau, inst.psi, inst.rho)
        summ = run_chain(inst.X, inst.design, h, inst.control(samples, burn_in, seed + k),
                         variant=variant, block=samples + burn_in)
        diffs.append(np.max(np.abs(summ.pi_star - ex)))
        exact.append(ex)
        mc.append(summ.pi_star)
    return OracleReport(np.array(diffs), tolerance, tuple(exact), tuple(mc))


# --------------------------------------------------------------------------
# joint-distribution (Geweke) test

MONITORED = ("mean_beta_sq", "mean_z", "mean_rho", "mean_tau_inv", "mean_psi_inv")


def _prior_moments(h: HyperParameters, p: int, K: int, draws: int, rng) -> np.ndarray:
    """Monitored statistics for ``draws`` independent prior draws (vectorized)."""
    k = K - 1
    rho = rng.beta(h.s * h.r, h.s * (1 - h.r), size=(draws, k))
    tau_inv = rng.gamma(h.tau_shape, 1.0 / h.tau_rate, size=(draws, k))
    nonzero = rng.random((draws, p, k)) < rho[:, None, :]
    Pi = np.where(nonzero, rng.beta(h.a * h.m, h.a * (1 - h.m), size=(draws, p, k)), 0.0)
    Z = rng.random((draws, p, k)) < Pi
    beta = np.where(Z, rng.standard_normal((draws, p, k)) / np.sqrt(tau_inv)[:, None, :], 0.0)
    psi_inv = rng.gamma(h.psi_shape, 1.0 / h.psi_rate, size=(draws, p))
    return np.column_stack([(beta ** 2).mean(axis=(1, 2)), Z.mean(axis=(1, 2)),
                            rho.mean(axis=1), tau_inv.mean(axis=1), psi_inv.mean(axis=1)])


def monitored_statistics(B, Z, rho, tau, psi, sparse=None) -> np.ndarray:
    """The monitored statistics of one state (sparse columns only)."""
    K = B.shape[1]
    sparse = np.arange(K) > 0 if sparse is None else np.asarray(sparse)
    return np.array([np.mean(B[:, sparse] ** 2), np.mean(Z[:, sparse]), np.mean(rho[sparse]),
                     np.mean(1.0 / tau[sparse]), np.mean(1.0 / psi)])


def batch_means_se(x: np.ndarray, batches: int = 100) -> np.ndarray:
    """Monte Carlo standard error of column means by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    N = x.shape[0]
    batches = max(2, min(batches, N // 2))
    size = N // batches
    means = x[: size * batches].reshape(batches, size, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / math.sqrt(batches)


@dataclass(frozen=True)
class GewekeResult:
    names: tuple
    z: np.ndarray
    prior_mean: np.ndarray
    chain_mean: np.ndarray
    prior_se: np.ndarray
    chain_se: np.ndarray
    sweeps: int

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z)))

    def as_dict(self):
        return dict(zip(self.names, self.z.tolist()))


def geweke_harness(h: HyperParameters | None = None, dims=(5, 10, 3), sweeps: int = 200_000,
                   seed: int = 0, variant: int = K_.VARIANT_OK, prior_draws: int | None = None,
                   batches: int = 100, marginalize_pi: bool = True) -> GewekeResult:
    """Marginal-conditional versus successive-conditional simulation.

    The first simulator draws parameters independently from the prior. The
    second alternates one Gibbs sweep with a fresh draw of the data given
    the parameters; if every conditional is right its stationary parameter
    marginal is also the prior. Returns one z-score per monitored
    statistic, with the chain's standard error from batch means.
    """
    from .sampler import _prepare, init_state

    if sweeps < 1:
        raise ValueError("the joint-distribution test needs at least one sweep")
    h = h or HyperParameters()
    p, n, K = (int(d) for d in dims)
    if K < 2:
        raise ValidationError("at least one sparse column is required")
    rng = np.random.default_rng(seed)
    D = random_design(n, K, rng)
    M = prior_draws or sweeps
    prior_stats = _prior_moments(h, p, K, M, rng)

    par = draw_prior(h, p, K, rng)
    X = par["B"] @ D.values.T + rng.standard_normal((p, n)) * np.sqrt(par["psi"])[:, None]
    ctl = McmcControl(burn_in=0, samples=sweeps, seed=seed, marginalize_pi=marginalize_pi)
    model = _prepare(X, D, h, ctl, variant)
    st = init_state(X, D, h, seed)
    st.B[:] = par["B"]
    st.Z[:] = par["Z"]
    st.Pi[:] = par["Pi"]
    st.rho[:] = par["rho"]
    st.tau[:] = par["tau"]
    st.psi[:] = par["psi"]
    chain = np.zeros((sweeps, len(MONITORED)))
    r, s, ts, tr, ps, pr = model.scalars()
    K_.successive_conditional(
        sweeps, model.X, model.G, model.colS, st.B, st.Z, st.Pi, st.rho, st.tau, st.psi,
        model.col_kind, model.prior_mean, model.prior_var, model.m, model.a, r, s, ts, tr, ps, pr,
        model.force_z, model.pi_fixed, model.rho_fixed, model.tau_fixed, model.psi_fixed,
        model.collapse, model.variant, np.uint64(seed), chain)
    pm, cm = prior_stats.mean(axis=0), chain.mean(axis=0)
    pse = prior_stats.std(axis=0, ddof=1) / math.sqrt(M)
    cse = batch_means_se(chain, batches)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (cm - pm) / np.sqrt(pse ** 2 + cse ** 2)
    z = np.where(np.isfinite(z), z, 0.0)
    return GewekeResult(MONITORED, z, pm, cm, pse, cse, sweeps)


# --------------------------------------------------------------------------
# golden files


def format_golden(pi_star: np.ndarray, header: dict) -> str:
    lines = [f"# {k}={v}" for k, v in header.items()]
    K = pi_star.shape[1]
    lines.append("\t".join(["gene"] + [f"j{j + 1}" for j in range(K)]))
    for g, row in enumerate(pi_star):
        lines.append("\t".join([f"g{g + 1}"] + [repr(float(v)) for v in row]))
    return "\n".join(lines) + "\n"


def save_golden(path, pi_star: np.ndarray, header: dict) -> None:
    atomic_write_text(path, format_golden(pi_star, header))


def load_golden(path):
    """Return (pi_star matrix, header dict)."""
    header, rows = {}, []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = []
    for lineno, line in enumerate(lines, start=1):
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            header[key] = value
        elif line.strip():
            body.append((lineno, line.split("\t")))
    if not body or body[0][1][0] != "gene":
        raise DataFormatError(path, body[0][0] if body else 1, "missing golden header row")
    for lineno, fields in body[1:]:
        try:
            rows.append([float(v) for v in fields[1:]])
        except ValueError as exc:
            raise DataFormatError(path, lineno, str(exc)) from None
    return np.array(rows), header


def simulate_module(n_seed: int = 10, n_module: int = 20, n_noise: int = 50, n: int = 60,
                    seed: int = 0, loading_range=(0.5, 1.5), psi_range=(0.01, 0.04),
                    noise_sd: float = 0.5, intercept_range=(6.0, 10.0)):
    """A seed gene set and its co-expression module sharing one latent factor, plus noise genes.

    Seed and module genes load on a common standard-normal factor; noise
    genes are independent normals with standard deviation ``noise_sd``.
    Returns the pool matrix and the (seed, module, noise) gene id tuples.
    """
    rng = np.random.default_rng(seed)
    lam = rng.standard_normal(n)
    q = n_seed + n_module
    load = rng.uniform(*loading_range, q) * rng.choice([-1.0, 1.0], q)
    mu = rng.uniform(*intercept_range, q + n_noise)
    psi = rng.uniform(*psi_range, q)
    signal = np.outer(load, lam) + rng.standard_normal((q, n)) * np.sqrt(psi)[:, None]
    noise = rng.standard_normal((n_noise, n)) * noise_sd
    X = np.vstack([signal, noise]) + mu[:, None]
    ids = [f"seed{i + 1:03d}" for i in range(n_seed)] + [f"mod{i + 1:03d}" for i in range(n_module)]
    ids += [f"noise{i + 1:03d}" for i in range(n_noise)]
    M = ExpressionMatrix(tuple(ids), tuple(f"s{i + 1:03d}" for i in range(n)), X)
    return M, tuple(ids[:n_seed]), tuple(ids[n_seed:q]), tuple(ids[q:])
