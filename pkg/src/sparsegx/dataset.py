"""Expression matrices, sample annotations, design matrices and gene maps."""

from __future__ import annotations

import itertools
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._io import atomic_write_text

logger = logging.getLogger(__name__)


class DataFormatError(ValueError):
    """A data file could not be parsed."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class ValidationError(ValueError):
    """Parsed data violates a structural invariant."""


def _check_unique(ids, what):
    seen = set()
    dups = []
    for i in ids:
        if i in seen:
            dups.append(i)
        seen.add(i)
    if dups:
        raise ValidationError(f"duplicate {what}: {', '.join(sorted(set(dups)))}")


@dataclass(frozen=True)
class ExpressionMatrix:
    """A genes x samples matrix of log2 expression intensities."""

    gene_ids: tuple
    sample_ids: tuple
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        if values.ndim != 2 or values.shape != (len(self.gene_ids), len(self.sample_ids)):
            raise ValidationError(
                f"values shape {values.shape} does not match "
                f"{len(self.gene_ids)} genes x {len(self.sample_ids)} samples")
        if not np.all(np.isfinite(values)):
            raise ValidationError("expression values must be finite")
        _check_unique(self.gene_ids, "gene ids")
        _check_unique(self.sample_ids, "sample ids")
        object.__setattr__(self, "values", values)

    def __eq__(self, other):
        if not isinstance(other, ExpressionMatrix):
            return NotImplemented
        return (self.gene_ids == other.gene_ids and self.sample_ids == other.sample_ids
                and np.array_equal(self.values, other.values))

    __hash__ = None

    @property
    def shape(self):
        return self.values.shape

    def subset_genes(self, gene_ids: Sequence[str]) -> "ExpressionMatrix":
        index = {g: i for i, g in enumerate(self.gene_ids)}
        missing = [g for g in gene_ids if g not in index]
        if missing:
            raise KeyError(f"genes not in matrix: {', '.join(missing)}")
        rows = [index[g] for g in gene_ids]
        return ExpressionMatrix(tuple(gene_ids), self.sample_ids, self.values[rows])

    def subset_samples(self, sample_ids: Sequence[str]) -> "ExpressionMatrix":
        index = {s: i for i, s in enumerate(self.sample_ids)}
        missing = [s for s in sample_ids if s not in index]
        if missing:
            raise KeyError(f"samples not in matrix: {', '.join(missing)}")
        cols = [index[s] for s in sample_ids]
        return ExpressionMatrix(self.gene_ids, tuple(sample_ids), self.values[:, cols])


def _read_rows(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line.split("\t")


def load_expression(path) -> ExpressionMatrix:
    """Read a tab-delimited expression file.

    The header row is ``probe_id`` followed by the sample ids; every other
    row is a probe id followed by one decimal value per sample.
    """
    rows = _read_rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise DataFormatError(path, 1, "empty file") from None
    if header[0] != "probe_id":
        raise DataFormatError(path, lineno, f"expected 'probe_id' header, got {header[0]!r}")
    sample_ids = header[1:]
    gene_ids, values = [], []
    for lineno, fields in rows:
        if len(fields) != len(header):
            raise DataFormatError(
                path, lineno, f"expected {len(header)} fields, got {len(fields)}")
        try:
            values.append([float(v) for v in fields[1:]])
        except ValueError as exc:
            raise DataFormatError(path, lineno, str(exc)) from None
        gene_ids.append(fields[0])
    arr = np.array(values, dtype=float).reshape(len(gene_ids), len(sample_ids))
    return ExpressionMatrix(tuple(gene_ids), tuple(sample_ids), arr)


def format_expression(X: ExpressionMatrix) -> str:
    lines = ["\t".join(("probe_id",) + X.sample_ids)]
    for gid, row in zip(X.gene_ids, X.values):
        lines.append("\t".join([gid] + [repr(float(v)) for v in row]))
    return "\n".join(lines) + "\n"


def save_expression(X: ExpressionMatrix, path) -> None:
    atomic_write_text(path, format_expression(X))


def filter_genes(X: ExpressionMatrix, min_range: float = 0.25,
                 min_median: float = 5.0) -> ExpressionMatrix:
    """Keep genes whose range across samples is at least ``min_range`` and
    whose median is at least ``min_median``; row order is preserved."""
    if X.values.shape[1] < 2:
        raise ValidationError("filtering needs at least two samples")
    v = X.values
    keep = (v.max(axis=1) - v.min(axis=1) >= min_range) & (np.median(v, axis=1) >= min_median)
    logger.info("filter_genes kept %d of %d genes", int(keep.sum()), len(keep))
    ids = tuple(g for g, k in zip(X.gene_ids, keep) if k)
    return ExpressionMatrix(ids, X.sample_ids, v[keep].reshape(len(ids), v.shape[1]))


# --------------------------------------------------------------------------
# annotations and design

@dataclass(frozen=True)
class FactorLayout:
    """Ordered categorical factors of a saturated cross-classification.

    The first level of each factor is the baseline. Cells are enumerated by
    the number of non-baseline factors, then by factor order, then by level
    order; for the four binary mouse factors this reproduces the effect
    numbering of the published mouse design.
    """

    factors: tuple  # ((name, (level0, level1, ...)), ...)

    @property
    def names(self):
        return tuple(name for name, _ in self.factors)

    def cells(self):
        """Non-baseline cells as tuples of (factor index, level index)."""
        out = []
        nf = len(self.factors)
        for size in range(1, nf + 1):
            for subset in itertools.combinations(range(nf), size):
                level_ranges = [range(1, len(self.factors[f][1])) for f in subset]
                for levels in itertools.product(*level_ranges):
                    out.append(tuple(zip(subset, levels)))
        return out

    def cell_label(self, cell):
        return ".".join(f"{self.factors[f][0]}={self.factors[f][1][lv]}" for f, lv in cell)


MOUSE_LAYOUT = FactorLayout((
    ("genotype", ("WildType", "ApoEKO")),
    ("age", ("6wk", "12wk")),
    ("sex", ("Female", "Male")),
    ("diet", ("Chow", "Western")),
))


# replicates per cell of the mouse layout, baseline first, then in cell order
MOUSE_CELL_COUNTS = (5, 6, 5, 5, 5, 3, 8, 4, 5, 6, 5, 3, 9, 5, 5, 11)


@dataclass(frozen=True)
class SampleAnnotations:
    """One record of factor levels per sample."""

    sample_ids: tuple
    records: tuple  # tuple of dicts, aligned with sample_ids

    def __post_init__(self):
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "records", tuple(dict(r) for r in self.records))
        if len(self.sample_ids) != len(self.records):
            raise ValidationError("one annotation record is required per sample")
        _check_unique(self.sample_ids, "sample ids")

    def reorder(self, sample_ids: Sequence[str]) -> "SampleAnnotations":
        index = {s: i for i, s in enumerate(self.sample_ids)}
        missing = [s for s in sample_ids if s not in index]
        if missing:
            raise ValidationError(f"samples without annotation: {', '.join(missing)}")
        return SampleAnnotations(tuple(sample_ids), tuple(self.records[index[s]] for s in sample_ids))


def allocate_cells(counts: Sequence[int], n: int) -> list:
    """Scale per-cell replicate counts to total ``n`` (largest remainder, at least one each)."""
    counts = np.asarray(counts, dtype=float)
    if n < len(counts):
        raise ValidationError(f"need at least {len(counts)} samples for {len(counts)} cells")
    share = 1 + counts / counts.sum() * (n - len(counts))
    out = np.floor(share).astype(int)
    order = np.argsort(-(share - out), kind="stable")
    out[order[: n - out.sum()]] += 1
    return out.tolist()


def layout_annotations(counts: Sequence[int], layout: FactorLayout = MOUSE_LAYOUT,
                       prefix: str = "s") -> SampleAnnotations:
    """Annotations with ``counts[c]`` samples in cell ``c`` (baseline first, then cell order)."""
    cells = [()] + layout.cells()
    if len(counts) != len(cells):
        raise ValidationError(f"expected {len(cells)} cell counts, got {len(counts)}")
    ids, recs = [], []
    for cell, count in zip(cells, counts):
        levels = dict(cell)
        rec = {name: lv[levels.get(f, 0)] for f, (name, lv) in enumerate(layout.factors)}
        for _ in range(int(count)):
            ids.append(f"{prefix}{len(ids) + 1:03d}")
            recs.append(dict(rec))
    return SampleAnnotations(tuple(ids), tuple(recs))


def mouse_annotations(n: int | None = None) -> SampleAnnotations:
    """The mouse layout with its published replicate counts, optionally rescaled to ``n``."""
    counts = MOUSE_CELL_COUNTS if n is None else allocate_cells(MOUSE_CELL_COUNTS, n)
    return layout_annotations(counts)


def load_annotations(path) -> SampleAnnotations:
    rows = _read_rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise DataFormatError(path, 1, "empty file") from None
    if header[0] != "sample_id":
        raise DataFormatError(path, lineno, f"expected 'sample_id' header, got {header[0]!r}")
    ids, recs = [], []
    for lineno, fields in rows:
        if len(fields) != len(header):
            raise DataFormatError(path, lineno, f"expected {len(header)} fields, got {len(fields)}")
        ids.append(fields[0])
        recs.append(dict(zip(header[1:], fields[1:])))
    return SampleAnnotations(tuple(ids), tuple(recs))


def format_annotations(ann: SampleAnnotations, factor_names: Sequence[str]) -> str:
    lines = ["\t".join(["sample_id", *factor_names])]
    for sid, rec in zip(ann.sample_ids, ann.records):
        lines.append("\t".join([sid] + [rec[f] for f in factor_names]))
    return "\n".join(lines) + "\n"


INTERCEPT, DESIGN_CELL, ARTIFACT = "intercept", "design", "artifact"


@dataclass(frozen=True)
class DesignColumn:
    name: str
    kind: str  # intercept | design | artifact


@dataclass(frozen=True)
class DesignMatrix:
    """An n x K regressor matrix with column descriptors."""

    columns: tuple
    values: np.ndarray
    sample_ids: tuple = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        if values.ndim != 2 or values.shape[1] != len(self.columns):
            raise ValidationError("design values do not match column descriptors")
        if self.sample_ids and len(self.sample_ids) != values.shape[0]:
            raise ValidationError("design rows do not match sample ids")
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape

    @property
    def names(self):
        return tuple(c.name for c in self.columns)

    def indices(self, kind: str):
        return [j for j, c in enumerate(self.columns) if c.kind == kind]

    def with_covariates(self, covariates: np.ndarray, prefix: str = "artifact") -> "DesignMatrix":
        """Append real-valued artifact covariate columns (centered to zero mean)."""
        cov = np.asarray(covariates, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != self.values.shape[0]:
            raise ValidationError("covariates must have one row per sample")
        cov = cov - cov.mean(axis=0, keepdims=True)
        cols = self.columns + tuple(DesignColumn(f"{prefix}{i + 1}", ARTIFACT)
                                    for i in range(cov.shape[1]))
        return DesignMatrix(cols, np.hstack([self.values, cov]), self.sample_ids)


def build_design(ann: SampleAnnotations, layout: FactorLayout = MOUSE_LAYOUT,
                 coding: str = "cell") -> DesignMatrix:
    """Build the 0/1 design of a saturated cross-classification.

    Column 1 is the intercept, followed by one column per non-baseline cell.
    With ``coding="cell"`` a sample activates only its own cell's column, so
    each parameter is that cell's offset from the baseline cell. With
    ``coding="factorial"`` a sample activates every main-effect and
    interaction column implied by its levels.
    """
    if coding not in ("cell", "factorial"):
        raise ValueError(f"unknown coding {coding!r}")
    cells = layout.cells()
    index = {c: j + 1 for j, c in enumerate(cells)}
    H = np.zeros((len(ann.sample_ids), len(cells) + 1))
    H[:, 0] = 1.0
    for i, (sid, rec) in enumerate(zip(ann.sample_ids, ann.records)):
        active = []
        for f, (name, levels) in enumerate(layout.factors):
            if name not in rec:
                raise ValidationError(f"sample {sid}: missing factor {name!r}")
            try:
                lv = levels.index(rec[name])
            except ValueError:
                raise ValidationError(
                    f"sample {sid}: unknown level {rec[name]!r} for factor {name!r}, "
                    f"expected one of {list(levels)}") from None
            if lv:
                active.append((f, lv))
        if not active:
            continue
        if coding == "cell":
            H[i, index[tuple(active)]] = 1.0
        else:
            for size in range(1, len(active) + 1):
                for sub in itertools.combinations(active, size):
                    H[i, index[sub]] = 1.0
    columns = [DesignColumn("intercept", INTERCEPT)]
    columns += [DesignColumn(layout.cell_label(c), DESIGN_CELL) for c in cells]
    return DesignMatrix(tuple(columns), H, ann.sample_ids)


def intercept_design(sample_ids: Sequence[str]) -> DesignMatrix:
    return DesignMatrix((DesignColumn("intercept", INTERCEPT),),
                        np.ones((len(sample_ids), 1)), tuple(sample_ids))


def format_design(D: DesignMatrix) -> str:
    lines = ["\t".join(["sample_id"] + [f"{c.name}|{c.kind}" for c in D.columns])]
    sids = D.sample_ids or tuple(f"s{i + 1}" for i in range(D.values.shape[0]))
    for sid, row in zip(sids, D.values):
        lines.append("\t".join([sid] + [repr(float(v)) for v in row]))
    return "\n".join(lines) + "\n"


def save_design(D: DesignMatrix, path) -> None:
    atomic_write_text(path, format_design(D))


def load_design(path) -> DesignMatrix:
    rows = _read_rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise DataFormatError(path, 1, "empty file") from None
    cols = []
    for token in header[1:]:
        name, _, kind = token.rpartition("|")
        if kind not in (INTERCEPT, DESIGN_CELL, ARTIFACT):
            raise DataFormatError(path, lineno, f"bad column descriptor {token!r}")
        cols.append(DesignColumn(name, kind))
    sids, vals = [], []
    for lineno, fields in rows:
        if len(fields) != len(header):
            raise DataFormatError(path, lineno, f"expected {len(header)} fields, got {len(fields)}")
        sids.append(fields[0])
        try:
            vals.append([float(v) for v in fields[1:]])
        except ValueError as exc:
            raise DataFormatError(path, lineno, str(exc)) from None
    return DesignMatrix(tuple(cols), np.array(vals).reshape(len(sids), len(cols)), tuple(sids))


def housekeeping_pcs(X_hk: ExpressionMatrix | np.ndarray, num_pcs: int = 5) -> np.ndarray:
    """Leading principal-component score vectors of housekeeping probes.

    Probes are row-centered before the SVD. Each returned column is a
    unit-norm right singular vector (zero mean across samples), ordered by
    decreasing singular value, with its sign chosen so that the
    largest-magnitude probe loading is positive.
    """
    values = X_hk.values if isinstance(X_hk, ExpressionMatrix) else np.asarray(X_hk, float)
    n = values.shape[1]
    if num_pcs == 0:
        return np.zeros((n, 0))
    centered = values - values.mean(axis=1, keepdims=True)
    U, s, Vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(s > 1e-10 * max(s[0] if s.size else 0.0, 1e-300)))
    if num_pcs > rank:
        raise ValidationError(
            f"requested {num_pcs} principal components but the centered housekeeping "
            f"matrix has rank {rank}; at most {rank} are achievable")
    pcs = Vt[:num_pcs].T.copy()
    for k in range(num_pcs):
        lead = np.argmax(np.abs(U[:, k]))
        if U[lead, k] < 0:
            pcs[:, k] *= -1.0
    return pcs - pcs.mean(axis=0, keepdims=True)


# --------------------------------------------------------------------------
# gene maps

@dataclass(frozen=True)
class GeneMapEntry:
    source: str
    target: str | None
    score: float | None = None


@dataclass(frozen=True)
class GeneMap:
    entries: tuple

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def as_dict(self) -> dict:
        return {e.source: e.target for e in self.entries if e.target}

    def is_one_to_one(self) -> bool:
        pairs = [(e.source, e.target) for e in self.entries if e.target]
        srcs = [s for s, _ in pairs]
        tgts = [t for _, t in pairs]
        return len(set(srcs)) == len(srcs) and len(set(tgts)) == len(tgts)


def gene_map(pairs) -> GeneMap:
    """Build a map from (source, target[, score]) tuples."""
    entries = []
    for p in pairs:
        src, tgt = p[0], p[1]
        score = p[2] if len(p) > 2 else None
        entries.append(GeneMapEntry(src, tgt or None, None if score is None else float(score)))
    return GeneMap(tuple(entries))


def load_gene_map(path) -> GeneMap:
    entries = []
    for lineno, fields in _read_rows(path):
        if lineno == 1 and fields[:2] == ["source", "target"]:
            continue
        if len(fields) not in (2, 3):
            raise DataFormatError(path, lineno, f"expected 2 or 3 fields, got {len(fields)}")
        score = None
        if len(fields) == 3 and fields[2] != "":
            try:
                score = float(fields[2])
            except ValueError as exc:
                raise DataFormatError(path, lineno, str(exc)) from None
        entries.append(GeneMapEntry(fields[0], fields[1] or None, score))
    return GeneMap(tuple(entries))


def format_gene_map(m: GeneMap) -> str:
    lines = ["source\ttarget\tscore"]
    for e in m.entries:
        lines.append("\t".join([e.source, e.target or "", "" if e.score is None else repr(e.score)]))
    return "\n".join(lines) + "\n"


def resolve_gene_map(raw: GeneMap) -> GeneMap:
    """Reduce a candidate ortholog map to a one-to-one map.

    Sources without a target are dropped; a source with several candidate
    targets keeps the highest-scoring one (ties go to the lexicographically
    smallest target); targets still claimed by more than one source are
    dropped together with all of their sources.
    """
    candidates: Mapping[str, list] = defaultdict(list)
    for e in raw.entries:
        if e.target:
            candidates[e.source].append(e)
    chosen = {}
    for src, cands in candidates.items():
        distinct = {c.target for c in cands}
        if len(distinct) == 1:
            best = max(cands, key=lambda c: -np.inf if c.score is None else c.score)
        else:
            if any(c.score is None for c in cands):
                raise ValidationError(
                    f"source {src!r} has {len(distinct)} candidate targets without similarity "
                    "scores; supply scores or a pre-resolved map")
            best = min(cands, key=lambda c: (-c.score, c.target))
        chosen[src] = best
    claims = defaultdict(int)
    for e in chosen.values():
        claims[e.target] += 1
    out = [e for src, e in sorted(chosen.items()) if claims[e.target] == 1]
    return GeneMap(tuple(out))
