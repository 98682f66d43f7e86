"""Gibbs sampler for the sparse multivariate regression / ANOVA model.

Each gene's expression is regressed on the design columns. The intercept
has a normal prior. Every other coefficient is exactly zero unless its
indicator is on, and the indicator probabilities follow a point-mass/beta
hierarchy with a column-level base rate. Effect variances and residual
variances are conditionally conjugate inverse gammas.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numba
import numpy as np

from . import _kernels as K_
from ._io import load_npz, save_npz
from .config import HyperParameters, McmcControl, validate
from .dataset import INTERCEPT, DesignMatrix, ExpressionMatrix, ValidationError
from .summary import PosteriorSummary, summarize

logger = logging.getLogger(__name__)

PSI_FLOOR = 1e-6


@dataclass
class SamplerState:
    """Full chain state.

    Column 0 is the intercept: its indicator is always on and its base rate
    and effect variance are not sampled (stored as NaN). The generator state
    is the pair (seed, iteration): sweep ``t`` draws from substreams keyed
    on ``(seed, t)``.
    """

    B: np.ndarray
    Z: np.ndarray
    Pi: np.ndarray
    rho: np.ndarray
    tau: np.ndarray
    psi: np.ndarray
    seed: int
    iteration: int = 0

    def copy(self) -> "SamplerState":
        return dataclasses.replace(self, B=self.B.copy(), Z=self.Z.copy(), Pi=self.Pi.copy(),
                                   rho=self.rho.copy(), tau=self.tau.copy(), psi=self.psi.copy())

    def check(self, sparse_cols=None) -> None:
        """Raise AssertionError if a state invariant is violated."""
        p, K = self.B.shape
        cols = np.arange(1, K) if sparse_cols is None else np.asarray(sparse_cols)
        Bs, Zs, Ps = self.B[:, cols], self.Z[:, cols], self.Pi[:, cols]
        assert np.array_equal(Zs == 0, Bs == 0), "z = 0 must coincide with beta = 0"
        assert np.all(Ps[Zs == 1] > 0), "z = 1 requires pi > 0"
        assert np.all((Ps >= 0) & (Ps <= 1)), "pi outside [0, 1]"
        assert np.all(self.psi > 0), "psi must be positive"
        assert np.all(self.tau[cols] > 0), "tau must be positive"
        assert np.all((self.rho[cols] > 0) & (self.rho[cols] < 1)), "rho outside (0, 1)"


def _values(X):
    return X.values if isinstance(X, ExpressionMatrix) else np.ascontiguousarray(X, dtype=float)


def _design_values(H):
    return H.values if isinstance(H, DesignMatrix) else np.ascontiguousarray(H, dtype=float)


def column_kinds(H) -> np.ndarray:
    """Kernel column kinds: the intercept is Gaussian, every other column sparse."""
    if isinstance(H, DesignMatrix):
        kinds = [K_.GAUSSIAN if c.kind == INTERCEPT else K_.SPARSE for c in H.columns]
    else:
        kinds = [K_.GAUSSIAN] + [K_.SPARSE] * (np.shape(H)[1] - 1)
    return np.array(kinds, dtype=np.int64)


def _broadcast_override(value, shape):
    """Values and mask for a fixed-parameter override (NaN entries stay free)."""
    if value is None:
        return np.zeros(shape), np.zeros(shape, dtype=np.bool_)
    arr = np.broadcast_to(np.asarray(value, dtype=float), shape).copy()
    mask = ~np.isnan(arr)
    return np.where(mask, arr, 0.0), mask


@dataclass
class _Model:
    """Arrays the kernels need, prepared once per chain."""

    X: np.ndarray
    G: np.ndarray
    colS: np.ndarray
    col_kind: np.ndarray
    prior_mean: np.ndarray
    prior_var: np.ndarray
    m: np.ndarray
    a: np.ndarray
    h: HyperParameters
    force_z: np.ndarray
    pi_fixed: np.ndarray
    rho_fixed: np.ndarray
    tau_fixed: np.ndarray
    psi_fixed: np.ndarray
    collapse: bool
    variant: int = 0

    def scalars(self):
        h = self.h
        return (h.r, h.s, h.tau_shape, h.tau_rate, h.psi_shape, h.psi_rate)


def _prepare(X, H, h: HyperParameters, c: McmcControl | None, variant=0, col_kind=None):
    Xv = np.ascontiguousarray(_values(X), dtype=float)
    Hv = np.ascontiguousarray(_design_values(H), dtype=float)
    if Xv.shape[1] != Hv.shape[0]:
        raise ValidationError(
            f"expression has {Xv.shape[1]} samples but the design has {Hv.shape[0]} rows")
    p, K = Xv.shape[0], Hv.shape[1]
    kinds = column_kinds(H) if col_kind is None else np.asarray(col_kind, dtype=np.int64)
    c = c or McmcControl()
    _, tau_mask = _broadcast_override(c.fixed_tau, (K,))
    _, rho_mask = _broadcast_override(c.fixed_rho, (K,))
    _, psi_mask = _broadcast_override(c.fixed_psi, (p,))
    _, pi_mask = _broadcast_override(c.fixed_pi, (p, K))
    gaussian = kinds == K_.GAUSSIAN
    tau_mask[gaussian] = True
    rho_mask[gaussian] = True
    pi_mask[:, gaussian] = True
    return _Model(
        X=Xv, G=Hv, colS=K_.column_norms(Hv), col_kind=kinds,
        prior_mean=np.where(gaussian, h.b, 0.0), prior_var=np.where(gaussian, h.tau1, 1.0),
        m=np.full(K, h.m), a=np.full(K, h.a), h=h,
        force_z=np.full((p, K), -1, dtype=np.int8), pi_fixed=pi_mask, rho_fixed=rho_mask,
        tau_fixed=tau_mask, psi_fixed=psi_mask, collapse=bool(c.marginalize_pi),
        variant=int(variant))


def init_state(X, H, h: HyperParameters, seed: int, control: McmcControl | None = None,
               col_kind=None) -> SamplerState:
    """Initial state: intercepts at gene means, all other effects excluded.

    Base rates start at ``r``, effect variances at their prior mean and
    residual variances at each gene's sample variance (floored at 1e-6).
    Fixed-parameter overrides in ``control`` replace the matching entries.
    """
    Xv, Hv = _values(X), _design_values(H)
    if Xv.shape[1] != Hv.shape[0]:
        raise ValidationError(
            f"expression has {Xv.shape[1]} samples but the design has {Hv.shape[0]} rows")
    p, n = Xv.shape
    K = Hv.shape[1]
    kinds = column_kinds(H) if col_kind is None else np.asarray(col_kind)
    gaussian = kinds == K_.GAUSSIAN
    B = np.zeros((p, K))
    Z = np.zeros((p, K), dtype=np.int8)
    Pi = np.zeros((p, K))
    if n:
        B[:, gaussian] = Xv.mean(axis=1, keepdims=True)
    else:
        B[:, gaussian] = h.b
    Z[:, gaussian] = 1
    Pi[:, gaussian] = 1.0
    rho = np.where(gaussian, np.nan, h.r)
    tau = np.where(gaussian, np.nan, h.tau_prior_mean)
    psi = np.maximum(Xv.var(axis=1, ddof=1), PSI_FLOOR) if n > 1 else np.full(p, 1.0)
    state = SamplerState(B, Z, Pi, rho.astype(float), tau.astype(float), psi, int(seed), 0)
    if control is not None:
        apply_overrides(state, control, gaussian)
    return state


def apply_overrides(state: SamplerState, c: McmcControl, gaussian=None) -> None:
    p, K = state.B.shape
    if gaussian is None:
        gaussian = np.zeros(K, dtype=bool)
        gaussian[0] = True
    for name, attr, shape in (("fixed_tau", "tau", (K,)), ("fixed_rho", "rho", (K,)),
                              ("fixed_psi", "psi", (p,))):
        vals, mask = _broadcast_override(getattr(c, name), shape)
        if attr != "psi":
            mask &= ~gaussian
        getattr(state, attr)[mask] = vals[mask]
    vals, mask = _broadcast_override(c.fixed_pi, (p, K))
    mask[:, gaussian] = False
    state.Pi[mask] = vals[mask]
    # an effect whose inclusion probability is pinned at zero must be excluded
    off = mask & (vals <= 0.0)
    state.Z[off] = 0
    state.B[off] = 0.0


# --------------------------------------------------------------------------
# single-step updates (reference implementations of the full conditionals)

def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def partial_residual(state: SamplerState, g: int, j: int, X, H) -> np.ndarray:
    Xv, Hv = _values(X), _design_values(H)
    return Xv[g] - Hv @ state.B[g] + state.B[g, j] * Hv[:, j]


def inclusion_conditional(state: SamplerState, g: int, j: int, X, H,
                          prior_prob: float | None = None) -> float:
    """Pr(z_gj = 1 | everything except beta_gj), with beta_gj integrated out.

    ``prior_prob`` defaults to the current pi_gj; pass rho_j * m_j to get the
    conditional with pi_gj integrated out as well.
    """
    Hv = _design_values(H)
    h = Hv[:, j]
    r = partial_residual(state, g, j, X, H)
    S = float(h @ h)
    prior = state.Pi[g, j] if prior_prob is None else prior_prob
    lbf = K_.log_bayes_factor(float(h @ r), S, float(state.tau[j]), float(state.psi[g]))
    return float(K_.inclusion_probability(float(prior), lbf))


def sample_effect_and_indicator(state: SamplerState, g: int, j: int, X, H, rng=None,
                                prior_prob: float | None = None):
    """Draw (z_gj, beta_gj) jointly; updates ``state`` in place and returns them."""
    if j < 1:
        raise ValueError("column 0 is the intercept")
    rng = _rng(rng)
    prob = inclusion_conditional(state, g, j, X, H, prior_prob)
    z = int(rng.random() < prob) if 0.0 < prob < 1.0 else int(prob >= 1.0)
    if z:
        Hv = _design_values(H)
        h = Hv[:, j]
        r = partial_residual(state, g, j, X, H)
        mean, var = K_.effect_conditional(float(h @ r), float(h @ h), 0.0,
                                          float(state.tau[j]), float(state.psi[g]))
        beta = mean + np.sqrt(var) * rng.standard_normal()
    else:
        beta = 0.0
    state.Z[g, j] = z
    state.B[g, j] = beta
    return z, beta


def sample_intercept(state: SamplerState, g: int, X, H, h: HyperParameters, rng=None) -> float:
    rng = _rng(rng)
    Hv = _design_values(H)
    col = Hv[:, 0]
    r = partial_residual(state, g, 0, X, H)
    mean, var = K_.effect_conditional(float(col @ r), float(col @ col), h.b, h.tau1,
                                      float(state.psi[g]))
    state.B[g, 0] = mean + np.sqrt(var) * rng.standard_normal()
    return state.B[g, 0]


def sparsity_conditionals(state: SamplerState, j: int, h: HyperParameters):
    """Parameters of the pi and rho full conditionals for column ``j``.

    Returns (prob_pi_zero for excluded genes, beta params given z=1,
    beta params given z=0 and pi>0, rho beta params given current pi).
    """
    m, a, rho = h.m, h.a, state.rho[j]
    p0 = (1 - rho) / ((1 - rho) + rho * (1 - m))
    nplus = int(np.sum(state.Pi[:, j] > 0))
    p = state.Pi.shape[0]
    return (p0, (a * m + 1, a * (1 - m)), (a * m, a * (1 - m) + 1),
            (h.s * h.r + nplus, h.s * (1 - h.r) + p - nplus))


def sample_sparsity_levels(state: SamplerState, j: int, h: HyperParameters, rng=None,
                           control: McmcControl | None = None):
    """Draw pi_{.,j} given the indicators, then rho_j given pi_{.,j}."""
    if j < 1:
        raise ValueError("column 0 is the intercept")
    rng = _rng(rng)
    p, K = state.Pi.shape
    c = control or McmcControl()
    _, pi_mask = _broadcast_override(c.fixed_pi, (p, K))
    _, rho_mask = _broadcast_override(c.fixed_rho, (K,))
    free = ~pi_mask[:, j]
    p0, on, off, _ = sparsity_conditionals(state, j, h)
    z = state.Z[:, j] == 1
    draw_on = rng.beta(*on, size=p)
    zero = rng.random(p) < p0
    draw_off = np.where(zero, 0.0, rng.beta(*off, size=p))
    new = np.where(z, np.maximum(draw_on, 5e-324), draw_off)
    state.Pi[free, j] = new[free]
    if not rho_mask[j]:
        _, _, _, rho_params = sparsity_conditionals(state, j, h)
        state.rho[j] = min(max(rng.beta(*rho_params), 1e-300), 1 - 1e-16)
    return state.Pi[:, j], state.rho[j]


def variance_conditionals(state: SamplerState, X, H, h: HyperParameters):
    """Gamma (shape, rate) parameters of every 1/tau_j and 1/psi_g conditional."""
    Xv, Hv = _values(X), _design_values(H)
    n = Xv.shape[1]
    on = state.Z == 1
    n1 = on.sum(axis=0)
    ss = np.where(on, state.B ** 2, 0.0).sum(axis=0)
    tau_params = np.column_stack([h.tau_shape + 0.5 * n1, h.tau_rate + 0.5 * ss])
    rss = ((Xv - state.B @ Hv.T) ** 2).sum(axis=1)
    psi_params = np.column_stack([np.full(len(rss), h.psi_shape + 0.5 * n),
                                  h.psi_rate + 0.5 * rss])
    return tau_params, psi_params


def sample_variances(state: SamplerState, X, H, h: HyperParameters, rng=None,
                     control: McmcControl | None = None):
    rng = _rng(rng)
    p, K = state.B.shape
    c = control or McmcControl()
    _, tau_mask = _broadcast_override(c.fixed_tau, (K,))
    tau_mask[column_kinds(H) == K_.GAUSSIAN] = True
    _, psi_mask = _broadcast_override(c.fixed_psi, (p,))
    tau_params, psi_params = variance_conditionals(state, X, H, h)
    tau_draw = 1.0 / rng.gamma(tau_params[:, 0], 1.0 / tau_params[:, 1])
    psi_draw = 1.0 / rng.gamma(psi_params[:, 0], 1.0 / psi_params[:, 1])
    state.tau[~tau_mask] = tau_draw[~tau_mask]
    state.psi[~psi_mask] = psi_draw[~psi_mask]
    return state.tau, state.psi


# --------------------------------------------------------------------------
# compiled sweeps


def _set_threads(threads: int) -> bool:
    if threads and threads > 1:
        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
        return True
    return False


def _sweep_model(model: _Model, st: SamplerState, iteration: int, parallel: bool):
    r, s, ts, tr, ps, pr = model.scalars()
    K_.sweep(model.X, model.G, model.colS, st.B, st.Z, st.Pi, st.rho, st.tau, st.psi,
             model.col_kind, model.prior_mean, model.prior_var, model.m, model.a,
             r, s, ts, tr, ps, pr, model.force_z, model.pi_fixed, model.rho_fixed,
             model.tau_fixed, model.psi_fixed, model.collapse, model.variant,
             np.uint64(st.seed), iteration, parallel)


def gibbs_sweep(state: SamplerState, X, H, h: HyperParameters | None = None,
                control: McmcControl | None = None, threads: int = 1,
                variant: int = 0) -> SamplerState:
    """One full scan, returning a new state with ``iteration`` advanced by one.

    Genes are visited in order (intercept, then every sparse column); then
    each column's inclusion probabilities, base rate and effect variance.
    Each gene's residual variance is drawn at the end of its own scan,
    which has the same conditional as drawing it after the column updates.
    """
    h = h or HyperParameters()
    model = _prepare(X, H, h, control, variant)
    st = state.copy()
    _sweep_model(model, st, st.iteration, _set_threads(threads))
    st.iteration += 1
    return st


@dataclass
class ChainAccumulator:
    sumZ: np.ndarray
    sumB: np.ndarray
    sumB2: np.ndarray
    sum_rho: np.ndarray
    sum_tau: np.ndarray
    sum_psi: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, p, K):
        return cls(np.zeros((p, K)), np.zeros((p, K)), np.zeros((p, K)),
                   np.zeros(K), np.zeros(K), np.zeros(p), 0)


def save_checkpoint(path, state: SamplerState, acc: ChainAccumulator | None = None,
                    control: McmcControl | None = None) -> None:
    arrays = {"B": state.B, "Z": state.Z, "Pi": state.Pi, "rho": state.rho, "tau": state.tau,
              "psi": state.psi, "seed": np.uint64(state.seed),
              "iteration": np.int64(state.iteration)}
    if acc is not None:
        arrays.update({"acc_sumZ": acc.sumZ, "acc_sumB": acc.sumB, "acc_sumB2": acc.sumB2,
                       "acc_sum_rho": acc.sum_rho, "acc_sum_tau": acc.sum_tau,
                       "acc_sum_psi": acc.sum_psi, "acc_count": np.int64(acc.count)})
    if control is not None:
        arrays["control"] = np.array([control.burn_in, control.samples, control.thin],
                                     dtype=np.int64)
    save_npz(path, arrays)


def load_checkpoint(path):
    """Return (state, accumulator or None, (burn_in, samples, thin) or None)."""
    d = load_npz(path)
    state = SamplerState(d["B"], d["Z"].astype(np.int8), d["Pi"], d["rho"], d["tau"], d["psi"],
                         int(d["seed"]), int(d["iteration"]))
    acc = None
    if "acc_sumZ" in d:
        acc = ChainAccumulator(d["acc_sumZ"], d["acc_sumB"], d["acc_sumB2"], d["acc_sum_rho"],
                               d["acc_sum_tau"], d["acc_sum_psi"], int(d["acc_count"]))
    ctl = tuple(int(x) for x in d["control"]) if "control" in d else None
    return state, acc, ctl


def run_chain(X, H, h: HyperParameters, c: McmcControl, state: SamplerState | None = None,
              acc: ChainAccumulator | None = None, threads: int = 1, variant: int = 0,
              block: int = 1000, progress: Optional[Callable[[int, int], None]] = None,
              checkpoint_path=None, checkpoint_every: int | None = None,
              stop_after: int | None = None) -> PosteriorSummary:
    """Run burn-in and sampling sweeps and summarize the saved draws.

    Passing a ``state``/``acc`` pair loaded from a checkpoint resumes the
    chain on exactly the trajectory it would have followed uninterrupted.
    ``stop_after`` halts after that many total sweeps (for checkpoint tests)
    and returns ``None``.
    """
    problems = validate(h, c)
    if problems:
        raise ValidationError("; ".join(problems))
    model = _prepare(X, H, h, c, variant)
    p, K = model.X.shape[0], model.G.shape[1]
    if state is None:
        state = init_state(X, H, h, c.seed, c)
    else:
        state = state.copy()
        if state.B.shape != (p, K):
            raise ValidationError("checkpoint state does not match the data dimensions")
    acc = ChainAccumulator.empty(p, K) if acc is None else dataclasses.replace(acc)
    parallel = _set_threads(threads)
    total = c.burn_in + c.samples
    end = total if stop_after is None else min(total, stop_after)
    r, s, ts, tr, ps, pr = model.scalars()
    next_ckpt = None
    if checkpoint_path is not None and checkpoint_every:
        next_ckpt = (state.iteration // checkpoint_every + 1) * checkpoint_every
    while state.iteration < end:
        n = min(block, end - state.iteration)
        if next_ckpt is not None:
            n = min(n, next_ckpt - state.iteration)
        saved = K_.run_sweeps(
            n, state.iteration, c.burn_in, c.thin, model.X, model.G, model.colS,
            state.B, state.Z, state.Pi, state.rho, state.tau, state.psi, model.col_kind,
            model.prior_mean, model.prior_var, model.m, model.a, r, s, ts, tr, ps, pr,
            model.force_z, model.pi_fixed, model.rho_fixed, model.tau_fixed,
            model.psi_fixed, model.collapse, model.variant, np.uint64(state.seed), parallel,
            acc.sumZ, acc.sumB, acc.sumB2, acc.sum_rho, acc.sum_tau, acc.sum_psi)
        acc.count += saved
        state.iteration += n
        if progress is not None:
            progress(state.iteration, total)
        if next_ckpt is not None and state.iteration >= next_ckpt:
            save_checkpoint(checkpoint_path, state, acc, c)
            next_ckpt += checkpoint_every
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state, acc, c)
    if state.iteration < total:
        return None
    gene_ids = X.gene_ids if isinstance(X, ExpressionMatrix) else ()
    names = H.names if isinstance(H, DesignMatrix) else ()
    return summarize(acc.sumZ, acc.sumB, acc.sumB2, acc.sum_rho, acc.sum_tau, acc.sum_psi,
                     acc.count, c.seed, gene_ids, names, c.burn_in, c.thin,
                     extras={"final_state": state})
