"""Frechet distance / FID and Friedman + Nemenyi rank statistics."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats as sps


class StatsError(ValueError):
    pass


# -- Gaussian statistics & Frechet distance ----------------------------------------


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        f = self.mu.shape[0]
        if self.sigma.shape != (f, f):
            raise StatsError(f"covariance shape {self.sigma.shape} does not match mean length {f}")
        if not np.allclose(self.sigma, self.sigma.T, rtol=1e-10, atol=1e-12):
            raise StatsError("covariance matrix is not symmetric")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def fit(cls, features: np.ndarray) -> GaussianStats:
        """Mean and unbiased (N - 1) covariance of an (N, F) feature matrix."""
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise StatsError("need an (N >= 2, F) feature matrix")
        if x.shape[0] < x.shape[1] + 1:
            warnings.warn(
                f"{x.shape[0]} samples for {x.shape[1]}-dim features: covariance is rank deficient",
                stacklevel=2,
            )
        sigma = np.cov(x, rowvar=False, ddof=1)
        return cls(x.mean(axis=0), (sigma + sigma.T) / 2)


def _psd_eigvals(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decompose a symmetric matrix, clamping small negative eigenvalues."""
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    tol = 1e-6 * max(float(np.abs(vals).max(initial=0.0)), np.finfo(float).tiny)
    if vals.min(initial=0.0) < -tol:
        raise StatsError(f"{what} is not positive semi-definite (min eigenvalue {vals.min():.3e})")
    return np.clip(vals, 0.0, None), vecs


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared Frechet distance between two Gaussians.

    The trace of the product square root is computed through the symmetric
    form ``sqrt(A) B sqrt(A)``, which shares its eigenvalues with ``A B``.
    """
    if a.dim != b.dim:
        raise StatsError(f"dimension mismatch: {a.dim} vs {b.dim}")
    va, ua = _psd_eigvals(a.sigma, "first covariance")
    _psd_eigvals(b.sigma, "second covariance")
    sqrt_a = (ua * np.sqrt(va)) @ ua.T
    inner, _ = _psd_eigvals(sqrt_a @ b.sigma @ sqrt_a, "covariance product")
    diff = a.mu - b.mu
    d2 = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.sqrt(inner).sum())
    return max(d2, 0.0)


# -- feature extractors ------------------------------------------------------------


class FeatureExtractor:
    kind: str = "base"
    output_dim: int

    def embed(self, images) -> np.ndarray:
        raise NotImplementedError

    def identity(self) -> dict:
        return {"kind": self.kind, "output_dim": self.output_dim}


class RandomProjectionExtractor(FeatureExtractor):
    """Seeded Gaussian projection of flattened images."""

    kind = "random_projection"

    def __init__(self, output_dim: int = 64, seed: int = 0):
        self.output_dim = output_dim
        self.seed = seed
        self._cache: dict[int, np.ndarray] = {}

    def matrix(self, in_dim: int) -> np.ndarray:
        if in_dim not in self._cache:
            rng = np.random.default_rng([self.seed, in_dim])
            self._cache[in_dim] = rng.standard_normal((in_dim, self.output_dim)) / math.sqrt(in_dim)
        return self._cache[in_dim]

    def embed(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        return x @ self.matrix(x.shape[1])

    def identity(self) -> dict:
        return {**super().identity(), "seed": self.seed}


class TrainedCNNExtractor(FeatureExtractor):
    """Global-average-pooled bottleneck activations of a trained U-Net."""

    kind = "trained_cnn"

    def __init__(self, model, name: str = "unet"):
        import torch  # local: keeps the statistics core torch-free

        self._torch = torch
        self.model = model.eval()
        self.name = name
        widths = model.cfg.base_width * 2**model.cfg.depth
        self.output_dim = widths

    def embed(self, images) -> np.ndarray:
        torch = self._torch
        x = torch.as_tensor(np.asarray(images, dtype=np.float32))
        with torch.no_grad():
            feats = self.model.bottleneck(x).mean(dim=(2, 3))
        return feats.double().numpy()

    def identity(self) -> dict:
        return {**super().identity(), "model": self.name}


class PrecomputedExtractor(FeatureExtractor):
    """Reads externally computed features (e.g. 2048-d Inception pool features) from disk."""

    kind = "precomputed_file"

    def __init__(self, output_dim: int = 2048):
        self.output_dim = output_dim

    def embed(self, source) -> np.ndarray:
        feats = read_features(source) if isinstance(source, (str, Path)) else np.asarray(source, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.output_dim:
            raise StatsError(f"features have shape {feats.shape}, extractor expects dim {self.output_dim}")
        return feats


def write_features(features: np.ndarray, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise StatsError("features must be a 2-D (count, dim) matrix")
    (root / "features.json").write_text(json.dumps({"count": arr.shape[0], "dim": arr.shape[1]}))
    (root / "features.bin").write_bytes(arr.tobytes())
    return root


def read_features(root: str | Path) -> np.ndarray:
    root = Path(root)
    head = json.loads((root / "features.json").read_text())
    raw = (root / "features.bin").read_bytes()
    count, dim = int(head["count"]), int(head["dim"])
    if len(raw) != count * dim * 4:
        raise StatsError(f"features.bin holds {len(raw)} bytes, header implies {count * dim * 4}")
    return np.frombuffer(raw, dtype="<f4").reshape(count, dim).astype(np.float64)


@dataclass
class FidResult:
    fid: float
    extractor: dict
    n_real: int
    n_generated: int

    def __float__(self) -> float:
        return self.fid


def compute_fid(extractor: FeatureExtractor, real, generated) -> FidResult:
    """FID between two image (or feature-file) collections under one extractor."""
    for name, coll in (("real", real), ("generated", generated)):
        if not isinstance(coll, (str, Path)) and len(coll) == 0:
            raise StatsError(f"FID needs a non-empty {name} set")
    fr, fg = extractor.embed(real), extractor.embed(generated)
    if fr.shape[1] != extractor.output_dim or fg.shape[1] != extractor.output_dim:
        raise StatsError("extractor produced features of unexpected dimension")
    d = frechet_distance(GaussianStats.fit(fr), GaussianStats.fit(fg))
    return FidResult(d, extractor.identity(), len(fr), len(fg))


# -- Friedman ----------------------------------------------------------------------


def rank_rows(scores: np.ndarray) -> np.ndarray:
    """Per-row ranks, 1 = highest score, ties receive their average rank."""
    return sps.rankdata(-np.asarray(scores, dtype=np.float64), axis=1, method="average")


@dataclass
class FriedmanResult:
    chi2: float
    p_value: float
    avg_ranks: np.ndarray
    n_blocks: int
    n_methods: int
    degenerate: bool = False


def _check_scores(scores) -> np.ndarray:
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise StatsError(f"need an (N >= 2, k >= 2) score table, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise StatsError("score table has non-finite entries")
    return x


def friedman_test(scores) -> FriedmanResult:
    """Friedman rank test over an (N blocks x k methods) table, with tie correction."""
    x = _check_scores(scores)
    n, k = x.shape
    ranks = rank_rows(x)
    avg = ranks.mean(axis=0)
    ties = 0.0
    for row in x:
        _, counts = np.unique(row, return_counts=True)
        ties += float((counts**3 - counts).sum())
    correction = 1.0 - ties / (n * (k**3 - k))
    if correction <= 0:
        return FriedmanResult(0.0, 1.0, avg, n, k, degenerate=True)
    chi2 = 12.0 * n / (k * (k + 1)) * (float((avg**2).sum()) - k * (k + 1) ** 2 / 4.0)
    chi2 = max(chi2 / correction, 0.0)
    p = float(sps.chi2.sf(chi2, k - 1))
    return FriedmanResult(chi2, p, avg, n, k)


# -- Nemenyi -----------------------------------------------------------------------

# Studentized range quantiles (infinite degrees of freedom) divided by sqrt(2),
# for k = 2..30 methods.  Produced by numerically integrating the range
# distribution of k standard normals and root-finding the upper quantile.
Q_TABLE = {
    0.05: (
        1.959964, 2.343701, 2.569032, 2.727774, 2.849705, 2.948320, 3.030878,
        3.101730, 3.163684, 3.218654, 3.268004, 3.312739, 3.353618, 3.391230,
        3.426041, 3.458425, 3.488685, 3.517073, 3.543799, 3.569040, 3.592946,
        3.615646, 3.637252, 3.657861, 3.677556, 3.696413, 3.714498, 3.731869,
        3.748578,
    ),
    0.10: (
        1.644854, 2.052293, 2.291341, 2.459516, 2.588521, 2.692732, 2.779884,
        2.854606, 2.919889, 2.977768, 3.029694, 3.076733, 3.119693, 3.159199,
        3.195743, 3.229723, 3.261461, 3.291224, 3.319233, 3.345676, 3.370712,
        3.394477, 3.417089, 3.438651, 3.459253, 3.478971, 3.497878, 3.516033,
        3.533492,
    ),
}


def nemenyi_q(k: int, alpha: float = 0.05) -> float:
    table = Q_TABLE.get(alpha)
    if table is None:
        raise StatsError(f"no embedded quantiles for alpha={alpha}; available: {sorted(Q_TABLE)}")
    if not 2 <= k <= len(table) + 1:
        raise StatsError(f"k={k} outside the embedded range 2..{len(table) + 1}")
    return table[k - 2]


def critical_difference(k: int, n: int, alpha: float = 0.05) -> float:
    return nemenyi_q(k, alpha) * math.sqrt(k * (k + 1) / (6.0 * n))


@dataclass
class DirectionMatrix:
    methods: list[str]
    entries: np.ndarray  # (k, k) in {-1, 0, +1}
    scores: np.ndarray = field(default=None)
    critical_difference: float | None = None
    avg_ranks: np.ndarray | None = None

    def __post_init__(self):
        e = np.asarray(self.entries)
        k = len(self.methods)
        if e.shape != (k, k):
            raise StatsError(f"entries shape {e.shape} does not match {k} methods")
        if not np.isin(e, (-1, 0, 1)).all():
            raise StatsError("entries must be -1, 0 or +1")
        if np.any(np.diag(e) != 0):
            raise StatsError("direction matrix diagonal must be zero")
        if not np.array_equal(e, -e.T):
            raise StatsError("direction matrix is not antisymmetric")
        self.entries = e.astype(np.int64)
        row_sums = self.entries.sum(axis=1)
        if self.scores is None:
            self.scores = row_sums
        elif not np.array_equal(np.asarray(self.scores), row_sums):
            raise StatsError("scores must equal the row sums of the direction entries")
        self.scores = np.asarray(self.scores, dtype=np.int64)


def nemenyi_directions(scores, alpha: float = 0.05, methods: Sequence[str] | None = None) -> DirectionMatrix:
    """Pairwise Nemenyi outcomes: +1 where the row method ranks significantly better."""
    x = _check_scores(scores)
    n, k = x.shape
    methods = list(methods) if methods is not None else [f"m{i}" for i in range(k)]
    if len(methods) != k:
        raise StatsError("method names do not match score columns")
    cd = critical_difference(k, n, alpha)
    avg = rank_rows(x).mean(axis=0)
    diff = avg[None, :] - avg[:, None]  # R_j - R_i; positive when i ranks better
    entries = np.where(diff > cd, 1, np.where(diff < -cd, -1, 0))
    np.fill_diagonal(entries, 0)
    return DirectionMatrix(methods, entries, critical_difference=cd, avg_ranks=avg)


_SYMBOL = {1: "+", 0: "0", -1: "-"}
_VALUE = {v: k for k, v in _SYMBOL.items()}


def direction_report(dm: DirectionMatrix, path: str | Path | None = None) -> str:
    """CSV of the +/0/- matrix (diagonal blank) with a trailing score column."""
    DirectionMatrix(list(dm.methods), np.asarray(dm.entries), np.asarray(dm.scores))  # re-validate
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", *dm.methods, "score"])
    for i, name in enumerate(dm.methods):
        cells = ["" if i == j else _SYMBOL[int(v)] for j, v in enumerate(dm.entries[i])]
        w.writerow([name, *cells, int(dm.scores[i])])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_direction_report(text: str) -> DirectionMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    methods = rows[0][1:-1]
    entries = np.zeros((len(methods), len(methods)), dtype=np.int64)
    scores = []
    for i, row in enumerate(rows[1:]):
        for j, cell in enumerate(row[1:-1]):
            if i != j:
                entries[i, j] = _VALUE[cell]
        scores.append(int(row[-1]))
    return DirectionMatrix(methods, entries, np.array(scores))


def read_score_table(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Score CSV: header row of method names, one row per block."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if header and header[0] in ("block", "patient_id"):
        return header[1:], np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return header, np.array([[float(v) for v in r] for r in rows[1:]])
