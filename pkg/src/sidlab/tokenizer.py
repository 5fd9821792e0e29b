"""Embedding tokenizers: residual k-means, product quantization, and FSQ.

All fits are deterministic functions of (input, seed, max_iters).  The
k-means here is deliberately hand-rolled: seeding is k-means++ style driven
by one generator, Lloyd iterations run to an assignment fixed point or
``max_iters``, clusters that empty out are re-seeded to the point currently
farthest from its own centroid, and every nearest-centroid decision breaks
ties toward the lowest centroid index.  Distances are computed with the
direct (x - c)**2 sum so exact ties stay exact.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass

import numpy as np

from .vocab import CodebookSpec, TokenSeq

_BIN_MAGIC = b"SIDEMB64"  # 8 bytes; header totals 16 with the two uint32 fields


class DegenerateInputError(ValueError):
    """Too few distinct points to cut the requested number of clusters."""


class SubspaceSplitError(ValueError):
    """Embedding dimensions cannot be split into k contiguous subspaces."""


@dataclass
class ItemEmbeddings:
    """Dense item vectors, one row per item id."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"embeddings must be a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embeddings must be finite")
        self.values = arr

    @property
    def n_items(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def synth_embeddings(n_items: int, dim: int, seed: int) -> ItemEmbeddings:
    """Standard-normal embeddings from a seeded generator."""
    rng = np.random.default_rng(seed)
    return ItemEmbeddings(rng.standard_normal((n_items, dim)))


# ---------------------------------------------------------------------------
# embedding file formats


def save_embeddings_csv(emb: ItemEmbeddings, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"dim{j}" for j in range(emb.dim)])
        for row in emb.values:
            writer.writerow([repr(v) for v in row.tolist()])


def load_embeddings_csv(path) -> ItemEmbeddings:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header != [f"dim{j}" for j in range(len(header))]:
            raise ValueError(f"bad embeddings CSV header in {path}")
        rows = [[float(v) for v in row] for row in reader]
    return ItemEmbeddings(np.asarray(rows))


def save_embeddings_bin(emb: ItemEmbeddings, path) -> None:
    """Raw little-endian float64 rows behind a 16-byte header (magic, n, dim)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sII", _BIN_MAGIC, emb.n_items, emb.dim))
        fh.write(np.ascontiguousarray(emb.values, dtype="<f8").tobytes())


def load_embeddings_bin(path) -> ItemEmbeddings:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise ValueError(f"truncated embeddings header in {path}")
        magic, n, d = struct.unpack("<8sII", header)
        if magic != _BIN_MAGIC:
            raise ValueError(f"bad embeddings magic in {path}")
        payload = fh.read()
    want = n * d * 8
    if len(payload) != want:
        raise ValueError(f"embeddings payload is {len(payload)} bytes, expected {want}")
    values = np.frombuffer(payload, dtype="<f8").reshape(n, d).astype(np.float64)
    return ItemEmbeddings(values)


# ---------------------------------------------------------------------------
# k-means core


def squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, X) squared euclidean distances, computed directly so that points
    exactly equidistant from two centers get exactly equal entries."""
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def nearest_centroid(centers: np.ndarray, x: np.ndarray) -> int:
    """Index of the closest center; ties go to the lowest index."""
    d2 = ((centers - x[None, :]) ** 2).sum(axis=1)
    return int(d2.argmin())


def _kmeans_pp_seed(points: np.ndarray, X: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((X, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, X):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # all points coincide with some chosen center; any pick works
            idx = int(rng.integers(n))
        centers[j] = points[idx]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def fit_kmeans(
    points: np.ndarray, X: int, max_iters: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd k-means; returns (centers (X, d), assignments (n,))."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    centers = _kmeans_pp_seed(points, X, rng)
    assign = None
    for _ in range(max_iters):
        d2 = squared_distances(points, centers)
        new_assign = d2.argmin(axis=1)
        for j in range(X):
            if np.any(new_assign == j):
                continue
            # re-seed to the point farthest from its current centroid, but
            # never steal a cluster's only member (that would just move the
            # hole); with nothing stealable the cluster stays empty and keeps
            # its seeded center
            counts = np.bincount(new_assign, minlength=X)
            own = d2[np.arange(n), new_assign].copy()
            own[counts[new_assign] <= 1] = -1.0
            idx = int(own.argmax())
            if own[idx] < 0.0:
                continue
            centers[j] = points[idx]
            new_assign[idx] = j
            d2[:, j] = ((points - centers[j]) ** 2).sum(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(X):
            members = assign == j
            if np.any(members):
                centers[j] = points[members].mean(axis=0)
    return centers, assign


# ---------------------------------------------------------------------------
# residual k-means (one codebook per level, fitted on residuals)


@dataclass
class RQKmeansModel:
    spec: CodebookSpec
    codebooks: list[np.ndarray]  # k arrays of shape (X, dim)

    def __post_init__(self):
        if len(self.codebooks) != self.spec.k:
            raise ValueError(f"expected {self.spec.k} codebooks, got {len(self.codebooks)}")
        for cb in self.codebooks:
            if cb.shape[0] != self.spec.X:
                raise ValueError(f"codebook has {cb.shape[0]} rows, expected {self.spec.X}")


def fit_rq_kmeans(
    emb: ItemEmbeddings, spec: CodebookSpec, max_iters: int = 50, seed: int = 0
) -> RQKmeansModel:
    """Fit level codebooks on successive residuals.

    Level 1 clusters the raw embeddings; each later level clusters what the
    previous levels failed to explain.  Only level 1 insists on X distinct
    inputs: residuals may legitimately collapse (a perfectly quantized level
    leaves all-zero residuals, and later centroids land on zero).

    Raises:
        DegenerateInputError: fewer than X distinct embedding rows.
    """
    if emb.n_items < spec.X:
        raise DegenerateInputError(
            f"need at least X={spec.X} items, got {emb.n_items}"
        )
    if np.unique(emb.values, axis=0).shape[0] < spec.X:
        raise DegenerateInputError(
            f"need at least X={spec.X} distinct embedding rows"
        )
    rng = np.random.default_rng(seed)
    residuals = emb.values.copy()
    codebooks = []
    for _ in range(spec.k):
        centers, assign = fit_kmeans(residuals, spec.X, max_iters, rng)
        codebooks.append(centers)
        residuals = residuals - centers[assign]
    return RQKmeansModel(spec=spec, codebooks=codebooks)


def encode_rq(model: RQKmeansModel, emb: ItemEmbeddings) -> list[TokenSeq]:
    """Greedy nearest-centroid walk down the levels, quantizing the running residual."""
    out = []
    for x in emb.values:
        residual = x.copy()
        seq = []
        for cb in model.codebooks:
            t = nearest_centroid(cb, residual)
            seq.append(t)
            residual -= cb[t]
        out.append(tuple(seq))
    return out


# ---------------------------------------------------------------------------
# product quantization (contiguous subspace split, one codebook per subspace)


@dataclass
class PQModel:
    spec: CodebookSpec
    subspace_dims: list[int]
    codebooks: list[np.ndarray]  # k arrays of shape (X, subspace_dims[m])

    def __post_init__(self):
        if len(self.subspace_dims) != self.spec.k or len(self.codebooks) != self.spec.k:
            raise ValueError("need one subspace width and codebook per position")
        for dims, cb in zip(self.subspace_dims, self.codebooks):
            if dims < 1:
                raise ValueError("subspace widths must be positive")
            if cb.shape != (self.spec.X, dims):
                raise ValueError(f"codebook shape {cb.shape} does not match width {dims}")

    @property
    def offsets(self) -> list[int]:
        out, acc = [], 0
        for d in self.subspace_dims:
            out.append(acc)
            acc += d
        return out


def split_subspace_dims(dim: int, k: int) -> list[int]:
    """Contiguous near-equal split; the first dim % k subspaces get the extra column.

    Raises:
        SubspaceSplitError: dim < k leaves some subspace empty.
    """
    if dim < k:
        raise SubspaceSplitError(f"cannot split {dim} dims into {k} non-empty subspaces")
    base, rem = divmod(dim, k)
    return [base + 1 if m < rem else base for m in range(k)]


def fit_pq(
    emb: ItemEmbeddings, spec: CodebookSpec, max_iters: int = 50, seed: int = 0
) -> PQModel:
    """Independent k-means per contiguous subspace."""
    dims = split_subspace_dims(emb.dim, spec.k)
    rng = np.random.default_rng(seed)
    codebooks = []
    offset = 0
    for width in dims:
        block = emb.values[:, offset : offset + width]
        centers, _ = fit_kmeans(block, spec.X, max_iters, rng)
        codebooks.append(centers)
        offset += width
    return PQModel(spec=spec, subspace_dims=dims, codebooks=codebooks)


def encode_pq(model: PQModel, emb: ItemEmbeddings) -> list[TokenSeq]:
    if emb.dim != sum(model.subspace_dims):
        raise ValueError(
            f"embeddings have {emb.dim} dims, model expects {sum(model.subspace_dims)}"
        )
    out = []
    offsets = model.offsets
    for x in emb.values:
        seq = []
        for m, width in enumerate(model.subspace_dims):
            block = x[offsets[m] : offsets[m] + width]
            seq.append(nearest_centroid(model.codebooks[m], block))
        out.append(tuple(seq))
    return out


# ---------------------------------------------------------------------------
# finite scalar quantization (training-free per-dimension grid)


@dataclass
class FSQModel:
    """Affine per-dimension grid: dimension m maps [lo, hi] onto 0..levels[m]-1.

    Training-free.  Used for a strict bijection the product of levels must
    cover the catalogue; that is checked where the map is built, not here.
    """

    levels: list[int]
    per_dim_bounds: list[tuple[float, float]]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("need at least one level entry")
        if len(self.per_dim_bounds) != len(self.levels):
            raise ValueError("need one (lo, hi) pair per quantized dimension")
        for lv in self.levels:
            if lv < 1:
                raise ValueError(f"levels must be positive, got {lv}")
        for lo, hi in self.per_dim_bounds:
            if not lo < hi:
                raise ValueError(f"bounds must satisfy lo < hi, got ({lo}, {hi})")

    @property
    def k(self) -> int:
        return len(self.levels)


def encode_fsq(model: FSQModel, emb: ItemEmbeddings) -> list[TokenSeq]:
    """Quantize the first k embedding dimensions; round half up, then clamp."""
    if emb.dim < model.k:
        raise ValueError(f"embeddings have {emb.dim} dims, FSQ needs {model.k}")
    out = []
    for x in emb.values:
        seq = []
        for m, (lv, (lo, hi)) in enumerate(zip(model.levels, model.per_dim_bounds)):
            scaled = (float(x[m]) - lo) / (hi - lo) * (lv - 1)
            t = int(np.floor(scaled + 0.5))
            seq.append(min(max(t, 0), lv - 1))
        out.append(tuple(seq))
    return out


# ---------------------------------------------------------------------------
# tokenizer model serialization


def tokenizer_to_json_dict(model) -> dict:
    if isinstance(model, RQKmeansModel):
        return {
            "scheme": "rq_kmeans",
            "k": model.spec.k,
            "X": model.spec.X,
            "codebooks": [cb.tolist() for cb in model.codebooks],
        }
    if isinstance(model, PQModel):
        return {
            "scheme": "pq",
            "k": model.spec.k,
            "X": model.spec.X,
            "subspace_dims": list(model.subspace_dims),
            "codebooks": [cb.tolist() for cb in model.codebooks],
        }
    if isinstance(model, FSQModel):
        return {
            "scheme": "fsq",
            "levels": list(model.levels),
            "per_dim_bounds": [list(b) for b in model.per_dim_bounds],
        }
    raise TypeError(f"not a tokenizer model: {type(model)!r}")


def tokenizer_from_json_dict(payload: dict):
    scheme = payload.get("scheme")
    if scheme == "rq_kmeans":
        spec = CodebookSpec(k=int(payload["k"]), X=int(payload["X"]))
        return RQKmeansModel(
            spec=spec, codebooks=[np.asarray(cb, dtype=np.float64) for cb in payload["codebooks"]]
        )
    if scheme == "pq":
        spec = CodebookSpec(k=int(payload["k"]), X=int(payload["X"]))
        return PQModel(
            spec=spec,
            subspace_dims=[int(d) for d in payload["subspace_dims"]],
            codebooks=[np.asarray(cb, dtype=np.float64) for cb in payload["codebooks"]],
        )
    if scheme == "fsq":
        return FSQModel(
            levels=[int(v) for v in payload["levels"]],
            per_dim_bounds=[(float(lo), float(hi)) for lo, hi in payload["per_dim_bounds"]],
        )
    raise ValueError(f"unknown tokenizer scheme {scheme!r}")


def save_tokenizer(model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tokenizer_to_json_dict(model), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_tokenizer(path):
    with open(path, "r", encoding="utf-8") as fh:
        return tokenizer_from_json_dict(json.load(fh))
