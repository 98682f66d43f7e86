"""Metagene signatures from the leading singular factor of a gene set, and their projection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._io import atomic_write_text
from .dataset import DataFormatError, ExpressionMatrix, GeneMap, ValidationError

# singular values below this fraction of the largest are treated as zero
RANK_TOLERANCE = 1e-10


class RankError(ValueError):
    """The gene-set matrix has no nonzero singular value."""


@dataclass(frozen=True)
class MetageneSignature:
    """Weights and scores of the first singular factor of a q x n gene-set matrix.

    ``weights`` is the first column of U D^-1, so ``weights @ X_Q`` equals
    ``scores``, the first right singular vector.
    """

    gene_ids: tuple
    weights: np.ndarray
    scores: np.ndarray
    singular_values: np.ndarray
    sample_ids: tuple = ()
    name: str = "signature"
    source: str = ""
    extras: dict = field(default_factory=dict, compare=False)

    @property
    def rank(self) -> int:
        return len(self.singular_values)


def metagene(X_Q, gene_ids: Sequence[str] | None = None, sample_ids: Sequence[str] = (),
             name: str = "signature", source: str = "") -> MetageneSignature:
    """Signature of the gene set whose expression rows are ``X_Q``.

    The sign is fixed so the largest-magnitude weight is positive.
    """
    if isinstance(X_Q, ExpressionMatrix):
        gene_ids = X_Q.gene_ids if gene_ids is None else gene_ids
        sample_ids = sample_ids or X_Q.sample_ids
        X_Q = X_Q.values
    X = np.atleast_2d(np.asarray(X_Q, dtype=float))
    q, n = X.shape
    if q < 1 or n < 1:
        raise ValidationError("the gene-set matrix must have at least one gene and one sample")
    if not np.all(np.isfinite(X)):
        raise ValidationError("the gene-set matrix has non-finite values")
    gene_ids = tuple(gene_ids) if gene_ids is not None else tuple(f"g{g + 1}" for g in range(q))
    if len(gene_ids) != q:
        raise ValidationError(f"{len(gene_ids)} gene ids for {q} rows")
    U, d, Vt = np.linalg.svd(X, full_matrices=False)
    if d.size == 0 or d[0] == 0.0:
        raise RankError("the gene-set matrix is zero; no signature exists (rank 0)")
    keep = d > RANK_TOLERANCE * d[0]
    weights = U[:, 0] / d[0]
    scores = Vt[0].copy()
    lead = int(np.argmax(np.abs(weights)))
    if weights[lead] < 0:
        weights, scores = -weights, -scores
    return MetageneSignature(gene_ids, weights, scores, d[keep].copy(), tuple(sample_ids),
                             name, source)


def project(sig: MetageneSignature, Y, gene_map: GeneMap | dict | None = None) -> np.ndarray:
    """Scores ``weights @ Y_Q`` on another matrix.

    ``Y`` is either an array whose rows are already aligned with the
    signature genes, or an :class:`ExpressionMatrix` whose rows are looked
    up by gene id, after translating through ``gene_map`` when given.
    """
    if not isinstance(Y, ExpressionMatrix):
        Yv = np.atleast_2d(np.asarray(Y, dtype=float))
        if Yv.shape[0] != len(sig.weights):
            raise ValidationError(
                f"projection matrix has {Yv.shape[0]} rows for {len(sig.weights)} signature genes")
        return sig.weights @ Yv
    if gene_map is None:
        lookup = {g: g for g in sig.gene_ids}
    else:
        lookup = gene_map.as_dict() if isinstance(gene_map, GeneMap) else dict(gene_map)
    index = {g: i for i, g in enumerate(Y.gene_ids)}
    rows, missing = [], []
    for g in sig.gene_ids:
        target = lookup.get(g)
        if target is None or target not in index:
            missing.append(g)
        else:
            rows.append(index[target])
    if missing:
        raise ValidationError(f"signature genes without a mapped row: {', '.join(missing)}")
    if len(set(rows)) != len(rows):
        raise ValidationError("the gene map sends two signature genes to the same row")
    return sig.weights @ Y.values[rows]


# --------------------------------------------------------------------------
# signature file


def format_signature(sig: MetageneSignature) -> str:
    lines = [f"# name={sig.name}", f"# source={sig.source}",
             "# singular_values=" + ",".join(f"{v:.17g}" for v in sig.singular_values),
             "gene\tweight"]
    lines += [f"{g}\t{w:.17g}" for g, w in zip(sig.gene_ids, sig.weights)]
    lines.append("")
    lines.append("sample\tscore")
    sids = sig.sample_ids or tuple(f"s{i + 1}" for i in range(len(sig.scores)))
    lines += [f"{s}\t{v:.17g}" for s, v in zip(sids, sig.scores)]
    return "\n".join(lines) + "\n"


def save_signature(sig: MetageneSignature, path) -> None:
    atomic_write_text(path, format_signature(sig))


def load_signature(path) -> MetageneSignature:
    header, sections, current = {}, {}, None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key] = value
                continue
            if not line.strip():
                continue
            fields = line.split("\t")
            if fields in (["gene", "weight"], ["sample", "score"]):
                current = fields[0]
                sections[current] = []
                continue
            if current is None or len(fields) != 2:
                raise DataFormatError(path, lineno, "expected a two-column section row")
            try:
                sections[current].append((fields[0], float(fields[1])))
            except ValueError as exc:
                raise DataFormatError(path, lineno, str(exc)) from None
    if "gene" not in sections:
        raise DataFormatError(path, 0, "missing gene/weight section")
    genes = sections["gene"]
    samples = sections.get("sample", [])
    sv = header.get("singular_values", "")
    return MetageneSignature(
        tuple(g for g, _ in genes), np.array([w for _, w in genes]),
        np.array([v for _, v in samples]),
        np.array([float(v) for v in sv.split(",") if v]),
        tuple(s for s, _ in samples), header.get("name", "signature"), header.get("source", ""))


def format_scores(sample_ids: Sequence[str], scores: np.ndarray, label: str = "score") -> str:
    lines = [f"sample\t{label}"]
    lines += [f"{s}\t{v:.6f}" for s, v in zip(sample_ids, scores)]
    return "\n".join(lines) + "\n"
