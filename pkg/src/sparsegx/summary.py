"""Posterior summaries of sparse regression chains and the quantities derived from them."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ._io import atomic_write_text
from .dataset import DataFormatError, DesignMatrix, ExpressionMatrix, ValidationError


@dataclass(frozen=True)
class PosteriorSummary:
    """Monte Carlo summaries over saved draws.

    ``beta_mean`` and ``beta_sd`` are conditional on inclusion and are NaN
    where a coefficient was never drawn nonzero.
    """

    pi_star: np.ndarray
    beta_mean: np.ndarray
    beta_sd: np.ndarray
    rho_mean: np.ndarray
    tau_mean: np.ndarray
    psi_mean: np.ndarray
    sample_count: int
    seed: int
    gene_ids: tuple = ()
    column_names: tuple = ()
    burn_in: int = 0
    thin: int = 1
    extras: dict = field(default_factory=dict, compare=False)

    @property
    def shape(self):
        return self.pi_star.shape

    @property
    def shrunk_effects(self) -> np.ndarray:
        """beta_hat * pi_star, with never-included coefficients contributing zero."""
        return np.where(np.isnan(self.beta_mean), 0.0, self.beta_mean) * self.pi_star

    def column_index(self, column) -> int:
        if isinstance(column, (int, np.integer)):
            return int(column)
        return self.column_names.index(column)


def summarize(sumZ, sumB, sumB2, sum_rho, sum_tau, sum_psi, count, seed,
              gene_ids=(), column_names=(), burn_in=0, thin=1, extras=None) -> PosteriorSummary:
    if count < 1:
        raise ValueError("no saved draws to summarize")
    with np.errstate(invalid="ignore", divide="ignore"):
        pi_star = sumZ / count
        mean = np.where(sumZ > 0, sumB / np.where(sumZ > 0, sumZ, 1.0), np.nan)
        second = np.where(sumZ > 0, sumB2 / np.where(sumZ > 0, sumZ, 1.0), np.nan)
        sd = np.sqrt(np.maximum(second - mean * mean, 0.0))
    return PosteriorSummary(
        pi_star=pi_star, beta_mean=mean, beta_sd=sd,
        rho_mean=sum_rho / count, tau_mean=sum_tau / count, psi_mean=sum_psi / count,
        sample_count=int(count), seed=int(seed), gene_ids=tuple(gene_ids),
        column_names=tuple(column_names), burn_in=int(burn_in), thin=int(thin),
        extras=dict(extras or {}))


def threshold_counts(s: PosteriorSummary, q: float) -> np.ndarray:
    """Number of genes with pi_star > q in each column."""
    if not 0.0 < q < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return (s.pi_star > q).sum(axis=0)


def selected_genes(s: PosteriorSummary, column, q: float = 0.95) -> list:
    j = s.column_index(column)
    ids = s.gene_ids or tuple(range(s.pi_star.shape[0]))
    return [ids[g] for g in np.flatnonzero(s.pi_star[:, j] > q)]


def gene_set_intersections(sets: Mapping[str, Sequence]) -> dict:
    """Venn-region counts for up to five named sets.

    Keys are tuples of the set names whose members fall in that region
    exactly (in every named set and in none of the others). Every one of
    the 2^k - 1 regions is present, so the counts partition the union.
    """
    names = list(sets)
    if len(names) > 5:
        raise ValueError("at most five sets are supported")
    members = {k: set(v) for k, v in sets.items()}
    union = set().union(*members.values()) if members else set()
    counts = {}
    for size in range(1, len(names) + 1):
        for combo in itertools.combinations(names, size):
            counts[combo] = 0
    for item in union:
        key = tuple(k for k in names if item in members[k])
        counts[key] += 1
    return counts


def expected_fdr(s: PosteriorSummary, column, q: float) -> float:
    """Posterior expected false discovery rate of the genes with pi_star > q."""
    p = s.pi_star[:, s.column_index(column)]
    sel = p[p > q]
    if sel.size == 0:
        raise ValueError("no genes pass the threshold; expected FDR is undefined")
    return float(np.mean(1.0 - sel))


def _check_alignment(X, s: PosteriorSummary, H: DesignMatrix | np.ndarray):
    Xv = X.values if isinstance(X, ExpressionMatrix) else np.asarray(X, float)
    Hv = H.values if isinstance(H, DesignMatrix) else np.asarray(H, float)
    if Xv.shape[0] != s.pi_star.shape[0] or Hv.shape[1] != s.pi_star.shape[1] \
            or Hv.shape[0] != Xv.shape[1]:
        raise ValidationError(
            f"summary {s.pi_star.shape}, expression {Xv.shape} and design {Hv.shape} do not align")
    if isinstance(X, ExpressionMatrix) and s.gene_ids and tuple(s.gene_ids) != X.gene_ids:
        raise ValidationError("summary genes do not match expression genes")
    return Xv, Hv


def corrected_expression(X, s: PosteriorSummary, H, control_columns: Sequence,
                         include_intercept: bool = True):
    """Subtract fitted intercept and control-covariate terms from expression.

    Each removed term is beta_hat * pi_star * h_j; the result is returned as
    an :class:`ExpressionMatrix` when ``X`` is one, else as an array.
    """
    Xv, Hv = _check_alignment(X, s, H)
    cols = [s.column_index(c) for c in control_columns]
    if any(c < 0 or c >= Hv.shape[1] for c in cols):
        raise ValidationError("control columns are not design columns")
    if include_intercept:
        cols = [0] + [c for c in cols if c != 0]
    eff = s.shrunk_effects
    out = Xv - eff[:, cols] @ Hv[:, cols].T if cols else Xv.copy()
    if isinstance(X, ExpressionMatrix):
        return ExpressionMatrix(X.gene_ids, X.sample_ids, out)
    return out


@dataclass(frozen=True)
class Decomposition:
    gene: str
    sample_ids: tuple
    components: tuple  # ((label, values), ...) in plotting order

    def as_dict(self):
        return dict(self.components)


def decompose_gene(X, s: PosteriorSummary, H, g, threshold: float | None = 0.95,
                   columns: Sequence | None = None) -> Decomposition:
    """Split one gene's expression into data, fitted terms and residual.

    Fitted terms are beta_hat * pi_star * h_j for the intercept and for each
    column with pi_star > ``threshold`` (or the explicit ``columns``; pass
    ``threshold=None`` to use every column). They sum with the residual to
    the data.
    """
    Xv, Hv = _check_alignment(X, s, H)
    if isinstance(g, str):
        g = s.gene_ids.index(g) if s.gene_ids else X.gene_ids.index(g)
    x = Xv[g]
    eff = s.shrunk_effects[g]
    K = Hv.shape[1]
    if columns is not None:
        chosen = [s.column_index(c) for c in columns if s.column_index(c) != 0]
    elif threshold is None:
        chosen = list(range(1, K))
    else:
        chosen = [j for j in range(1, K) if s.pi_star[g, j] > threshold]
    names = s.column_names or tuple(f"j{j + 1}" for j in range(K))
    comps = [("data", x.copy()), (names[0], eff[0] * Hv[:, 0])]
    fitted = comps[1][1].copy()
    for j in chosen:
        term = eff[j] * Hv[:, j]
        comps.append((names[j], term))
        fitted += term
    comps.append(("residual", x - fitted))
    gid = s.gene_ids[g] if s.gene_ids else str(g)
    sids = X.sample_ids if isinstance(X, ExpressionMatrix) else tuple(str(i) for i in range(len(x)))
    return Decomposition(gid, sids, tuple(comps))


# --------------------------------------------------------------------------
# tab-delimited output

def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    return f"{v:.6f}"


def format_summary_table(s: PosteriorSummary, gene_label="gene", column_label="column") -> str:
    p, K = s.pi_star.shape
    genes = s.gene_ids or tuple(str(g) for g in range(p))
    cols = s.column_names or tuple(f"j{j + 1}" for j in range(K))
    lines = [f"{gene_label}\t{column_label}\tpi_star\tbeta_mean\tbeta_sd"]
    for g in range(p):
        for j in range(K):
            lines.append(f"{genes[g]}\t{cols[j]}\t{_fmt(float(s.pi_star[g, j]))}\t"
                         f"{_fmt(float(s.beta_mean[g, j]))}\t{_fmt(float(s.beta_sd[g, j]))}")
    return "\n".join(lines) + "\n"


def format_column_table(s: PosteriorSummary) -> str:
    cols = s.column_names or tuple(f"j{j + 1}" for j in range(s.pi_star.shape[1]))
    lines = ["column\trho_mean\ttau_mean"]
    for j, c in enumerate(cols):
        lines.append(f"{c}\t{_fmt(float(s.rho_mean[j]))}\t{_fmt(float(s.tau_mean[j]))}")
    return "\n".join(lines) + "\n"


def format_gene_table(s: PosteriorSummary) -> str:
    genes = s.gene_ids or tuple(str(g) for g in range(s.pi_star.shape[0]))
    lines = ["gene\tpsi_mean"]
    for g, gid in enumerate(genes):
        lines.append(f"{gid}\t{_fmt(float(s.psi_mean[g]))}")
    return "\n".join(lines) + "\n"


def save_summary_table(s: PosteriorSummary, path) -> None:
    atomic_write_text(path, format_summary_table(s))


def load_summary_table(path, sample_count: int = 0, seed: int = 0) -> PosteriorSummary:
    """Read a summary table; column-level and residual means are not stored there."""
    genes, cols, rows = [], [], {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[2:] != ["pi_star", "beta_mean", "beta_sd"]:
            raise DataFormatError(path, 1, "not a summary table")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            f = line.rstrip("\n").split("\t")
            if len(f) != 5:
                raise DataFormatError(path, lineno, f"expected 5 fields, got {len(f)}")
            g, c = f[0], f[1]
            if not genes or genes[-1] != g:
                if g in rows:
                    raise DataFormatError(path, lineno, f"gene {g!r} is not contiguous")
                genes.append(g)
                rows[g] = []
            if len(genes) == 1:
                cols.append(c)
            try:
                rows[g].append([float("nan") if v == "NA" else float(v) for v in f[2:]])
            except ValueError as exc:
                raise DataFormatError(path, lineno, str(exc)) from None
    K = len(cols)
    arr = np.array([rows[g] for g in genes], dtype=float)
    if arr.shape != (len(genes), K, 3):
        raise DataFormatError(path, 0, "ragged summary table")
    return PosteriorSummary(
        pi_star=arr[:, :, 0], beta_mean=arr[:, :, 1], beta_sd=arr[:, :, 2],
        rho_mean=np.full(K, np.nan), tau_mean=np.full(K, np.nan),
        psi_mean=np.full(len(genes), np.nan), sample_count=sample_count, seed=seed,
        gene_ids=tuple(genes), column_names=tuple(cols))


def format_decompositions(decs: Sequence[Decomposition]) -> str:
    lines = ["gene\tcomponent\tsample\tvalue"]
    for d in decs:
        for label, values in d.components:
            for sid, v in zip(d.sample_ids, values):
                lines.append(f"{d.gene}\t{label}\t{sid}\t{v:.6f}")
    return "\n".join(lines) + "\n"
