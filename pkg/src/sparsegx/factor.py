"""Sparse latent factor regression with a nonparametric factor-score distribution.

Each gene is regressed jointly on the control design (intercept and
artifact covariates) and on k latent factor scores. Loadings carry the
same point-mass sparsity hierarchy as the regression effects and are
updated by the same compiled gene scan. Factor scores have a truncated
stick-breaking mixture of unit-covariance normals as their prior, or a
standard normal when the mixture is switched off.

Rotation and sign are pinned by one anchor gene per factor: its loading on
that factor is always included and folded positive, and its loadings on
later factors are structurally zero.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K_
from .config import EvolutionControl, FactorOptions, HyperParameters, McmcControl, validate
from .dataset import (ARTIFACT, INTERCEPT, DesignColumn, DesignMatrix, ExpressionMatrix,
                      ValidationError, intercept_design)
from .sampler import PSI_FLOOR, _prepare, _set_threads, column_kinds
from .summary import PosteriorSummary, summarize

logger = logging.getLogger(__name__)

DEFAULT_TRUNCATION = 50


@dataclass
class MixtureState:
    comp: np.ndarray  # component of each sample
    mu: np.ndarray  # T x k component locations
    V: np.ndarray  # stick-breaking fractions
    w: np.ndarray  # component weights (the last stick takes the remainder)
    alpha: np.ndarray  # concentration, length-1 array

    @property
    def truncation(self) -> int:
        return self.mu.shape[0]


@dataclass
class FactorState:
    """Chain state of a factor fit over the combined design [controls | factors]."""

    B: np.ndarray
    Z: np.ndarray
    Pi: np.ndarray
    rho: np.ndarray
    tau: np.ndarray
    psi: np.ndarray
    Lam: np.ndarray  # k x n factor scores
    mixture: MixtureState
    n_controls: int
    anchors: np.ndarray  # gene index per factor, -1 for none
    seed: int = 0
    iteration: int = 0

    @property
    def k(self) -> int:
        return self.Lam.shape[0]

    @property
    def A(self) -> np.ndarray:
        return self.B[:, self.n_controls:]

    @property
    def controls(self) -> np.ndarray:
        return self.B[:, : self.n_controls]

    def check(self) -> None:
        c = self.n_controls
        cols = np.arange(1, self.B.shape[1])
        Bs, Zs, Ps = self.B[:, cols], self.Z[:, cols], self.Pi[:, cols]
        assert np.array_equal(Zs == 0, Bs == 0), "z = 0 must coincide with a zero loading"
        assert np.all(Ps[Zs == 1] > 0), "z = 1 requires pi > 0"
        assert np.all(self.psi > 0), "psi must be positive"
        assert self.k >= 1, "at least one factor"
        w = self.mixture.w
        assert np.all(w >= 0) and w.sum() <= 1 + 1e-9, "stick weights must sum to at most one"
        for f, g in enumerate(self.anchors):
            if g >= 0:
                assert self.B[g, c + f] > 0, "anchor loading must be positive"
                assert np.all(self.B[g, c + f + 1:] == 0), "anchor loads on a later factor"


@dataclass(frozen=True)
class FactorFit:
    state: FactorState
    summary: PosteriorSummary
    loadings: np.ndarray  # p x k posterior mean (zero when excluded)
    loading_pi: np.ndarray  # p x k inclusion probabilities
    scores: np.ndarray  # k x n posterior mean
    scores_sd: np.ndarray
    gene_ids: tuple
    sample_ids: tuple
    anchors: tuple  # anchor gene id per factor (None when unanchored)
    design: DesignMatrix
    mean_occupied: float

    @property
    def k(self) -> int:
        return self.loadings.shape[1]

    @property
    def factor_names(self):
        return tuple(f"factor{f + 1}" for f in range(self.k))

    def column_tau(self) -> np.ndarray:
        return self.summary.tau_mean

    def column_rho(self) -> np.ndarray:
        return self.summary.rho_mean


# --------------------------------------------------------------------------
# initialization


def varimax(L: np.ndarray, max_iter: int = 500, tol: float = 1e-12):
    """Orthogonal varimax rotation; returns (rotated loadings, rotation matrix).

    Uses Kaiser's pairwise plane rotations with closed-form optimal angles,
    which increase the criterion monotonically.
    """
    p, k = L.shape
    R = np.eye(k)
    rot = np.array(L, dtype=float, copy=True)
    if k < 2:
        return rot, R
    for _ in range(max_iter):
        largest = 0.0
        for i in range(k - 1):
            for j in range(i + 1, k):
                x, y = rot[:, i], rot[:, j]
                u, v = x * x - y * y, 2.0 * x * y
                A, B = u.sum(), v.sum()
                C = np.sum(u * u - v * v)
                D = 2.0 * np.sum(u * v)
                phi = 0.25 * np.arctan2(D - 2.0 * A * B / p, C - (A * A - B * B) / p)
                if abs(phi) < tol:
                    continue
                largest = max(largest, abs(phi))
                c, s_ = np.cos(phi), np.sin(phi)
                G = np.array([[c, -s_], [s_, c]])
                rot[:, [i, j]] = rot[:, [i, j]] @ G
                R[:, [i, j]] = R[:, [i, j]] @ G
        if largest < tol:
            break
    return rot, R


def _control_design(controls, n: int, sample_ids=()) -> DesignMatrix:
    if controls is None:
        return intercept_design(sample_ids or tuple(f"s{i + 1}" for i in range(n)))
    if isinstance(controls, DesignMatrix):
        if controls.columns[0].kind != INTERCEPT:
            raise ValidationError("the control design must start with the intercept")
        return controls
    cov = np.asarray(controls, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != n:
        raise ValidationError("controls must be an n x m covariate matrix")
    base = intercept_design(sample_ids or tuple(f"s{i + 1}" for i in range(n)))
    return base.with_covariates(cov) if cov.shape[1] else base


def pca_start(X: np.ndarray, k: int):
    """Varimax-rotated principal components of the row-centered data.

    Returns loadings (p x k) and unit-variance scores (k x n) ordered by
    rotated explained variance.
    """
    p, n = X.shape
    Xc = X - X.mean(axis=1, keepdims=True)
    U, d, Vt = np.linalg.svd(Xc, full_matrices=False)
    k_eff = min(k, len(d))
    L = U[:, :k_eff] * d[:k_eff] / np.sqrt(n)
    F = Vt[:k_eff] * np.sqrt(n)
    if k_eff < k:
        L = np.hstack([L, np.zeros((p, k - k_eff))])
        F = np.vstack([F, np.zeros((k - k_eff, n))])
    L, R = varimax(L)
    F = R.T @ F
    order = np.argsort(-(L ** 2).sum(axis=0), kind="stable")
    return L[:, order], F[order]


def choose_anchors(L: np.ndarray) -> np.ndarray:
    """One distinct anchor gene per factor, the gene loading most purely on it.

    Purity is |L_gf| minus the largest |L_gl| over the other factors.
    """
    p, k = L.shape
    absL = np.abs(L)
    taken = np.zeros(p, dtype=bool)
    anchors = np.full(k, -1, dtype=np.int64)
    for f in range(k):
        if k > 1:
            other = np.max(np.delete(absL, f, axis=1), axis=1)
        else:
            other = np.zeros(p)
        purity = np.where(taken, -np.inf, absL[:, f] - other)
        g = int(np.argmax(purity))
        anchors[f] = g
        taken[g] = True
    return anchors


# --------------------------------------------------------------------------
# fitting


def _mixture_init(n: int, k: int, options: FactorOptions) -> tuple[MixtureState, bool]:
    if not options.dirichlet_process:
        T = 1
    else:
        T = options.truncation or min(n, DEFAULT_TRUNCATION)
    # a single component is pinned at the origin, which is the Gaussian model
    active = T > 1
    V = 1.0 / (T - np.arange(T, dtype=float))
    w = V * np.concatenate([[1.0], np.cumprod(1 - V)[:-1]])
    return MixtureState(np.zeros(n, dtype=np.int64), np.zeros((T, k)), V, w,
                        np.array([options.alpha_shape / options.alpha_rate])), active


def fit_factors(X, controls=None, k: int = 1, h: HyperParameters | None = None,
                c: McmcControl | None = None, options: FactorOptions | None = None,
                zero_loadings: bool = False, threads: int = 1) -> FactorFit:
    """Fit the sparse factor regression of ``X`` (genes x samples) with k factors.

    ``controls`` is ``None`` (intercept only), a :class:`DesignMatrix` whose
    first column is the intercept, or an n x m covariate matrix.
    ``zero_loadings=True`` pins every loading at zero, leaving the scores
    under their prior.
    """
    h = h or HyperParameters()
    c = c or McmcControl(burn_in=2000, samples=8000)
    options = options or FactorOptions()
    problems = validate(h, c)
    if problems:
        raise ValidationError("; ".join(problems))
    if isinstance(X, ExpressionMatrix):
        gene_ids, sample_ids, Xv = X.gene_ids, X.sample_ids, X.values
    else:
        Xv = np.atleast_2d(np.asarray(X, dtype=float))
        gene_ids = tuple(f"g{g + 1}" for g in range(Xv.shape[0]))
        sample_ids = ()
    p, n = Xv.shape
    if p < 1:
        raise ValidationError("the gene subset is empty")
    if k < 1:
        raise ValidationError("at least one factor is required")
    if k > n:
        raise ValidationError(f"k = {k} factors exceeds the {n} samples")
    if not zero_loadings and k > p:
        raise ValidationError(f"k = {k} factors needs at least {k} genes for anchors")
    D = _control_design(controls, n, sample_ids)
    sample_ids = sample_ids or D.sample_ids
    if D.shape[0] != n:
        raise ValidationError(f"control design has {D.shape[0]} rows for {n} samples")
    nc = D.shape[1]
    Xv = np.ascontiguousarray(Xv, dtype=float)
    Hc = np.ascontiguousarray(D.values)

    L0, F0 = pca_start(Xv, k)
    if zero_loadings:
        anchors = np.full(k, -1, dtype=np.int64)
    else:
        anchors = choose_anchors(L0)
        for f, g in enumerate(anchors):
            if L0[g, f] < 0:
                L0[:, f] *= -1
                F0[f] *= -1

    kinds = np.concatenate([column_kinds(D), np.full(k, K_.SPARSE)]).astype(np.int64)
    G = np.ascontiguousarray(np.hstack([Hc, F0.T]))
    ctl = McmcControl(burn_in=c.burn_in, samples=c.samples, thin=1, seed=c.seed,
                      marginalize_pi=c.marginalize_pi)
    model = _prepare(Xv, G, h, ctl, col_kind=kinds)
    K = nc + k
    B = np.zeros((p, K))
    Z = np.zeros((p, K), dtype=np.int8)
    Pi = np.zeros((p, K))
    gauss = kinds == K_.GAUSSIAN
    B[:, gauss] = Xv.mean(axis=1, keepdims=True)
    Z[:, gauss] = 1
    Pi[:, gauss] = 1.0
    if not zero_loadings:
        B[:, nc:] = L0
        Z[:, nc:] = 1
        Pi[:, nc:] = h.m
        for f, g in enumerate(anchors):
            model.force_z[g, nc + f] = 1
            model.force_z[g, nc + f + 1:] = 0
            B[g, nc + f + 1:] = 0.0
            Z[g, nc + f + 1:] = 0
            Pi[g, nc + f + 1:] = 0.0
    else:
        model.force_z[:, nc:] = 0
    resid = Xv - B @ G.T
    psi = np.maximum(resid.var(axis=1, ddof=1) if n > 1 else np.ones(p), PSI_FLOOR)
    rho = np.where(gauss, np.nan, h.r)
    tau = np.where(gauss, np.nan, h.tau_prior_mean)
    mix, active = _mixture_init(n, k, options)
    Lam = np.ascontiguousarray(F0.copy())
    state = FactorState(B, Z, Pi, rho.astype(float), tau.astype(float), psi, Lam, mix, nc,
                        anchors, int(c.seed), 0)

    sums = {name: np.zeros((p, K)) for name in ("Z", "B", "B2")}
    sum_rho, sum_tau, sum_psi = np.zeros(K), np.zeros(K), np.zeros(p)
    sumLam, sumLam2 = np.zeros((k, n)), np.zeros((k, n))
    occ = np.zeros(1)
    r, s, ts, tr, ps, pr = model.scalars()
    parallel = _set_threads(threads)
    total = c.burn_in + c.samples
    saved = K_.run_factor_sweeps(
        total, 0, c.burn_in, Xv, Hc, state.Lam, G, state.B, state.Z, state.Pi, state.rho,
        state.tau, state.psi, model.col_kind, model.prior_mean, model.prior_var, model.m,
        model.a, r, s, ts, tr, ps, pr, model.force_z, model.pi_fixed, model.rho_fixed,
        model.tau_fixed, model.psi_fixed, model.collapse, anchors, mix.mu, mix.comp, mix.V,
        mix.w, mix.alpha, active, options.alpha_shape, options.alpha_rate,
        np.uint64(c.seed), parallel, sums["Z"], sums["B"], sums["B2"], sum_rho, sum_tau,
        sum_psi, sumLam, sumLam2, occ)
    state.iteration = total
    names = D.names + tuple(f"factor{f + 1}" for f in range(k))
    summ = summarize(sums["Z"], sums["B"], sums["B2"], sum_rho, sum_tau, sum_psi, saved,
                     c.seed, gene_ids, names, c.burn_in, 1)
    scores = sumLam / saved
    sd = np.sqrt(np.maximum(sumLam2 / saved - scores ** 2, 0.0))
    design = DesignMatrix(D.columns + tuple(DesignColumn(f"factor{f + 1}", ARTIFACT)
                                            for f in range(k)),
                          np.hstack([Hc, scores.T]), D.sample_ids)
    return FactorFit(
        state=state, summary=summ, loadings=sums["B"][:, nc:] / saved,
        loading_pi=summ.pi_star[:, nc:], scores=scores, scores_sd=sd, gene_ids=tuple(gene_ids),
        sample_ids=tuple(sample_ids),
        anchors=tuple(gene_ids[g] if g >= 0 else None for g in anchors), design=design,
        mean_occupied=float(occ[0] / saved))


# --------------------------------------------------------------------------
# out-of-model genes


def predictive_inclusion(fit: FactorFit, x, h: HyperParameters | None = None) -> np.ndarray:
    """Exact single-gene posterior inclusion probability of each factor for a new gene.

    The gene is regressed on the control design and the posterior-mean
    factor scores. Intercept and control effects are always included with
    normal priors (the intercept prior, and each control column's posterior
    mean effect variance). Factor f is included a priori with probability
    rho_f * m and effect variance tau_f, both at posterior means. The
    residual variance is plugged in at its conditional posterior mean given
    the least-squares fit. A constant gene returns the prior probabilities.
    """
    h = h or HyperParameters()
    y = np.asarray(x, dtype=float).ravel()
    G = fit.design.values
    n, d = G.shape
    if y.shape[0] != n:
        raise ValidationError(f"gene has {y.shape[0]} values for {n} samples")
    nc = d - fit.k
    prior_prob = np.clip(fit.summary.rho_mean[nc:] * h.m, 0.0, 1.0)
    if np.ptp(y) == 0.0:
        return prior_prob.copy()
    tau = fit.summary.tau_mean.copy()
    tau[0] = h.tau1
    y0 = y - h.b * G[:, 0]
    coef, *_ = np.linalg.lstsq(G, y0, rcond=None)
    rss = float(np.sum((y0 - G @ coef) ** 2))
    shape = h.psi_shape + 0.5 * max(n - d, 0)
    psi = (h.psi_rate + 0.5 * rss) / (shape - 1.0 if shape > 1.0 else shape)
    return K_.enumerate_factor_inclusion(G.T @ G, G.T @ y0, float(y0 @ y0), n,
                                         np.ascontiguousarray(tau), nc,
                                         np.ascontiguousarray(prior_prob), psi)


# --------------------------------------------------------------------------
# evolutionary gene/factor search


@dataclass(frozen=True)
class StageRecord:
    stage: int
    k: int
    gene_count: int
    admitted: tuple
    factor_added: bool
    trial_support: Optional[int]
    decision: str

    def as_dict(self):
        d = dataclasses.asdict(self)
        d["admitted"] = list(self.admitted)
        return d


@dataclass(frozen=True)
class EvolutionResult:
    fit: FactorFit
    genes: tuple
    log: tuple

    def format_log(self) -> str:
        return "".join(json.dumps(r.as_dict(), sort_keys=True) + "\n" for r in self.log)


def _stage_seed(seed: int, stage: int, trial: int) -> int:
    return int(K_.stream_seed(np.uint64(seed), stage, trial))


def evolve(seed_genes: Sequence[str], pool: ExpressionMatrix, controls=None,
           ec: EvolutionControl | None = None, h: HyperParameters | None = None,
           options: FactorOptions | None = None, seed: int = 0, k_start: int = 1,
           threads: int = 1, progress=None) -> EvolutionResult:
    """Grow a factor model from seed genes by admitting pool genes and adding factors.

    Each stage fits the current model, tries one more factor (kept when at
    least ``factor_gene_count`` in-model genes have inclusion probability
    above ``factor_gene_threshold`` on it in the trial fit), then admits the
    out-of-model genes whose best predictive inclusion probability exceeds
    ``gene_inclusion_threshold``, best first and at most
    ``max_admit_per_stage`` per stage, without exceeding ``max_genes``.
    Stops when a stage changes nothing; if a stage reaches both caps, one
    final fit is made on the final gene set.
    """
    ec = ec or EvolutionControl()
    h = h or HyperParameters()
    options = options or FactorOptions()
    problems = validate(h, None, ec)
    if problems:
        raise ValidationError("; ".join(problems))
    seed_genes = list(dict.fromkeys(seed_genes))
    if not seed_genes:
        raise ValidationError("at least one seed gene is required")
    if len(pool.gene_ids) < len(seed_genes):
        raise ValidationError("the pool is smaller than the seed set")
    index = {g: i for i, g in enumerate(pool.gene_ids)}
    missing = [g for g in seed_genes if g not in index]
    if missing:
        raise ValidationError(f"seed genes not in the pool: {', '.join(missing)}")
    if len(seed_genes) > ec.max_genes:
        raise ValidationError("more seed genes than the gene cap allows")
    included = sorted(seed_genes, key=index.get)
    k = max(1, min(k_start, ec.max_factors, len(included)))
    ctl = McmcControl(burn_in=ec.stage_burn_in, samples=ec.stage_samples, seed=seed)

    def fit_at(genes, kf, stage, trial):
        c = dataclasses.replace(ctl, seed=_stage_seed(seed, stage, trial))
        return fit_factors(pool.subset_genes(genes), controls, kf, h, c, options,
                           threads=threads)

    log = []
    stage = 0
    while True:
        stage += 1
        fit = fit_at(included, k, stage, 0)
        added, support = False, None
        if k < ec.max_factors and len(included) > k and k + 1 <= pool.shape[1]:
            trial = fit_at(included, k + 1, stage, 1)
            support = int(np.sum(trial.loading_pi[:, k] > ec.factor_gene_threshold))
            if support >= ec.factor_gene_count:
                fit, k, added = trial, k + 1, True
        room = min(ec.max_admit_per_stage, ec.max_genes - len(included))
        admitted = []
        if room > 0:
            inset = set(included)
            scored = []
            for g in pool.gene_ids:
                if g in inset:
                    continue
                prob = predictive_inclusion(fit, pool.values[index[g]], h)
                best = float(np.max(prob))
                if best > ec.gene_inclusion_threshold:
                    scored.append((-best, g))
            scored.sort()
            admitted = [g for _, g in scored[:room]]
        decision = "+factor" if added else "keep"
        if admitted:
            included = sorted(included + admitted, key=index.get)
        changed = added or bool(admitted)
        at_caps = len(included) >= ec.max_genes and k >= ec.max_factors
        log.append(StageRecord(stage, k, len(included), tuple(admitted), added, support,
                               decision))
        logger.info("stage %d: k=%d genes=%d admitted=%d %s", stage, k, len(included),
                    len(admitted), decision)
        if progress is not None:
            progress(log[-1])
        if not changed:
            break
        if at_caps:
            stage += 1
            fit = fit_at(included, k, stage, 0)
            log.append(StageRecord(stage, k, len(included), (), False, None, "final"))
            break
    return EvolutionResult(fit, tuple(included), tuple(log))


# --------------------------------------------------------------------------
# tables


def format_loadings(fit: FactorFit) -> str:
    lines = ["gene\tfactor\tpi_star\tloading_mean"]
    for g, gid in enumerate(fit.gene_ids):
        for f, name in enumerate(fit.factor_names):
            lines.append(f"{gid}\t{name}\t{fit.loading_pi[g, f]:.6f}\t{fit.loadings[g, f]:.6f}")
    return "\n".join(lines) + "\n"


def format_factor_scores(fit: FactorFit) -> str:
    lines = ["factor\tsample\tscore_mean\tscore_sd"]
    sids = fit.sample_ids or tuple(f"s{i + 1}" for i in range(fit.scores.shape[1]))
    for f, name in enumerate(fit.factor_names):
        for i, sid in enumerate(sids):
            lines.append(f"{name}\t{sid}\t{fit.scores[f, i]:.6f}\t{fit.scores_sd[f, i]:.6f}")
    return "\n".join(lines) + "\n"
