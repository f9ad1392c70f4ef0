"""Agreement indices between two partitions of the same objects.

Pair-counting indices (RI, ARI) and information-theoretic ones (entropy,
mutual information, NMI, AMI). Logarithms are base 2 throughout.

Every function accepts either two :class:`Clustering` objects, matched by
key, or two equal-length label sequences.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import gammaln

from .data_model import Clustering
from .errors import UndefinedIndexError, ValidationError

MEANS = ("arithmetic", "geometric")


@dataclass(frozen=True)
class PairCounts:
    n11: int
    n00: int
    n01: int
    n10: int

    @property
    def total(self) -> int:
        return self.n11 + self.n00 + self.n01 + self.n10


@dataclass(frozen=True)
class ContingencyTable:
    table: np.ndarray  # r x s intersection sizes

    @property
    def n(self) -> int:
        return int(self.table.sum())

    @property
    def row_sums(self) -> np.ndarray:
        return self.table.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.table.sum(axis=0)


def _labels(c) -> np.ndarray:
    if isinstance(c, Clustering):
        return np.asarray(c.labels)
    arr = np.asarray(c)
    if arr.ndim != 1:
        raise ValidationError("labels must be one-dimensional")
    return arr


def _aligned(c1, c2) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(c1, Clustering) and isinstance(c2, Clustering):
        if set(c1.keys) != set(c2.keys):
            raise ValidationError("clusterings cover different object sets")
        pos = {k: i for i, k in enumerate(c2.keys)}
        order = [pos[k] for k in c1.keys]
        return np.asarray(c1.labels), np.asarray(c2.labels)[order]
    a, b = _labels(c1), _labels(c2)
    if a.shape != b.shape:
        raise ValidationError("label sequences differ in length")
    return a, b


def contingency(c1, c2) -> ContingencyTable:
    a, b = _aligned(c1, c2)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    r = int(ai.max()) + 1 if ai.size else 0
    s = int(bi.max()) + 1 if bi.size else 0
    table = np.zeros((r, s), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return ContingencyTable(table)


def _comb2(x):
    x = np.asarray(x, dtype=np.int64)
    return x * (x - 1) // 2


def pair_counts(c1, c2) -> PairCounts:
    """Count unordered object pairs by same/different cluster in each partition."""
    t = contingency(c1, c2)
    n = t.n
    both = int(_comb2(t.table).sum())
    same_1 = int(_comb2(t.row_sums).sum())
    same_2 = int(_comb2(t.col_sums).sum())
    total = n * (n - 1) // 2
    n11 = both
    n01 = same_1 - both
    n10 = same_2 - both
    n00 = total - n11 - n01 - n10
    return PairCounts(n11=n11, n00=n00, n01=n01, n10=n10)


def _identical(a, b) -> bool:
    t = contingency(a, b).table
    # identical up to relabeling: each row and column has exactly one non-zero
    nz = t > 0
    return bool(np.all(nz.sum(axis=0) == 1) and np.all(nz.sum(axis=1) == 1))


def rand_index(c1, c2) -> float:
    pc = pair_counts(c1, c2)
    if pc.total == 0:
        raise UndefinedIndexError("Rand index needs at least 2 objects")
    return (pc.n11 + pc.n00) / pc.total


def adjusted_rand_index(c1, c2) -> float:
    pc = pair_counts(c1, c2)
    if pc.total == 0:
        raise UndefinedIndexError("adjusted Rand index needs at least 2 objects")
    n11, n00, n01, n10 = pc.n11, pc.n00, pc.n01, pc.n10
    den = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11)
    if den == 0:
        if _identical(c1, c2):
            return 1.0
        raise UndefinedIndexError("adjusted Rand index denominator is zero")
    return 2.0 * (n00 * n11 - n01 * n10) / den


def _entropy_from_counts(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    counts = counts[counts > 0]
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(-(p * np.log2(p)).sum())


def entropy(c) -> float:
    """Shannon entropy of the cluster-size distribution, in bits."""
    labels = _labels(c)
    _, counts = np.unique(labels, return_counts=True)
    return _entropy_from_counts(counts)


def _mi_from_table(table) -> float:
    table = np.asarray(table, dtype=float)
    n = table.sum()
    if n == 0:
        return 0.0
    pi = table.sum(axis=1) / n
    pj = table.sum(axis=0) / n
    i, j = np.nonzero(table)
    pij = table[i, j] / n
    mi = float((pij * np.log2(pij / (pi[i] * pj[j]))).sum())
    return max(mi, 0.0)


def mutual_information(c1, c2) -> float:
    return _mi_from_table(contingency(c1, c2).table)


def _mean(h1: float, h2: float, mean_kind: str) -> float:
    if mean_kind == "arithmetic":
        return 0.5 * (h1 + h2)
    if mean_kind == "geometric":
        return float(np.sqrt(h1 * h2))
    raise ValidationError(f"mean_kind must be one of {MEANS}")


def nmi(c1, c2, mean_kind: str = "arithmetic") -> float:
    """Mutual information normalized by a mean of the two entropies."""
    t = contingency(c1, c2).table
    h1 = _entropy_from_counts(t.sum(axis=1))
    h2 = _entropy_from_counts(t.sum(axis=0))
    m = _mean(h1, h2, mean_kind)
    mi = _mi_from_table(t)
    if m <= 0:
        if _identical(c1, c2):
            return 1.0
        if mi == 0.0:
            # one side is a single cluster under the geometric mean
            return 0.0
        raise UndefinedIndexError("NMI undefined: zero entropy mean")
    return float(min(max(mi / m, 0.0), 1.0))


def expected_mutual_information(row_sums, col_sums) -> float:
    """Exact E[I] under random relabeling with both marginals fixed, in bits.

    Sums the hypergeometric probability of every feasible cell count.
    """
    a = np.asarray(row_sums, dtype=np.int64)
    b = np.asarray(col_sums, dtype=np.int64)
    n = int(a.sum())
    if n != int(b.sum()):
        raise ValidationError("marginals must have the same total")
    if n <= 1:
        return 0.0
    gln_n = gammaln(n + 1)
    total = 0.0
    for ai in a.tolist():
        for bj in b.tolist():
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            if lo > hi:
                continue
            nij = np.arange(lo, hi + 1, dtype=float)
            term = (nij / n) * np.log2(n * nij / (ai * bj))
            log_p = (
                gammaln(ai + 1) + gammaln(bj + 1) + gammaln(n - ai + 1) + gammaln(n - bj + 1)
                - gln_n - gammaln(nij + 1) - gammaln(ai - nij + 1) - gammaln(bj - nij + 1)
                - gammaln(n - ai - bj + nij + 1)
            )
            total += float((term * np.exp(log_p)).sum())
    return total


def ami(c1, c2, mean_kind: str = "arithmetic") -> float:
    """Mutual information adjusted for chance agreement."""
    t = contingency(c1, c2).table
    rows, cols = t.sum(axis=1), t.sum(axis=0)
    h1 = _entropy_from_counts(rows)
    h2 = _entropy_from_counts(cols)
    mi = _mi_from_table(t)
    emi = expected_mutual_information(rows, cols)
    den = _mean(h1, h2, mean_kind) - emi
    if den <= 0 or np.isclose(den, 0.0, atol=1e-15):
        if _identical(c1, c2):
            return 1.0
        raise UndefinedIndexError("AMI undefined: non-positive denominator")
    return float((mi - emi) / den)


INDEX_FUNCS = {
    "ARI": adjusted_rand_index,
    "NMI": nmi,
    "AMI": ami,
}


def agreement(c1, c2, mean_kind: str = "arithmetic") -> dict[str, float]:
    return {
        "ARI": adjusted_rand_index(c1, c2),
        "AMI": ami(c1, c2, mean_kind),
        "NMI": nmi(c1, c2, mean_kind),
    }


def cross_assembly_agreement(
    labelings: Mapping[str, Clustering], mean_kind: str = "arithmetic"
) -> dict:
    """Pairwise ARI/NMI/AMI between per-assembly clusterings over shared cycles.

    Returns ``{"assemblies": [...], "keys": [...], "ARI": A, "NMI": N, "AMI": M}``
    with symmetric matrices and unit diagonal.
    """
    if len(labelings) < 2:
        raise ValidationError("need at least two assemblies")
    names = sorted(labelings)
    common = set(labelings[names[0]].keys)
    for name in names[1:]:
        common &= set(labelings[name].keys)
    if not common:
        raise ValidationError("assemblies share no cycles")
    keys = [k for k in labelings[names[0]].keys if k in common]
    restricted = {name: labelings[name].restrict(keys) for name in names}
    m = len(names)
    out = {"assemblies": names, "keys": keys}
    for index in ("ARI", "NMI", "AMI"):
        mat = np.eye(m)
        for i in range(m):
            for j in range(i + 1, m):
                a, b = restricted[names[i]], restricted[names[j]]
                if index == "ARI":
                    v = adjusted_rand_index(a, b)
                else:
                    v = INDEX_FUNCS[index](a, b, mean_kind)
                mat[i, j] = mat[j, i] = v
        out[index] = mat
    return out


def write_agreement_csv(result: dict, index: str, path) -> None:
    names = result["assemblies"]
    mat = result[index]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["assembly_id", *names])
        for name, row in zip(names, mat):
            w.writerow([name, *(repr(float(v)) for v in row)])
