"""Tabular conditional-logit models over token sequences.

Two parameterizations of the per-position token scorer l(t_m | h, prefix):

* ``CascadedLogitModel``: one table per position of shape (C, X**(m-1), X),
  indexed by context id, base-X prefix integer, and token.  Every prefix node
  has its own row of X free logits.
* ``ParallelLogitModel``: one table per position of shape (C, X); the prefix
  argument is accepted for interface parity but ignored.

An item's logit is the sum of its token logits along the path given by a
token map.  Both models support an optional lookup counter that tallies how
many table entries each operation touches, which the benchmark module uses
to cross-check closed-form operation counts.
"""

from __future__ import annotations

import json

import numpy as np

from .vocab import CodebookSpec, TokenMap, TokenSeq


class FormError(TypeError):
    """An operation was applied to a model form it does not support."""


class LookupCounter:
    """Counts scalar logit-table entries touched by model reads."""

    def __init__(self):
        self.entries = 0

    def reset(self) -> None:
        self.entries = 0


def _check_context(C: int, h: int) -> None:
    if not 0 <= h < C:
        raise ValueError(f"context {h} outside [0, {C})")


class CascadedLogitModel:
    """Prefix-conditioned token logits with one free row per prefix node."""

    form = "cascaded"

    def __init__(self, spec: CodebookSpec, C: int, tables: list[np.ndarray]):
        if C < 1:
            raise ValueError(f"C must be >= 1, got {C}")
        if len(tables) != spec.k:
            raise ValueError(f"expected {spec.k} tables, got {len(tables)}")
        for m, tab in enumerate(tables):
            want = (C, spec.X**m, spec.X)
            if tab.shape != want:
                raise ValueError(
                    f"position {m + 1} table has shape {tab.shape}, expected {want}"
                )
        self.spec = spec
        self.C = C
        self.tables = [np.asarray(t, dtype=np.float64) for t in tables]
        self.counter: LookupCounter | None = None

    @classmethod
    def random(cls, spec: CodebookSpec, C: int, sigma: float, seed: int) -> "CascadedLogitModel":
        """Tables drawn i.i.d. normal(0, sigma) from one seeded generator."""
        rng = np.random.default_rng(seed)
        tables = [
            rng.normal(0.0, sigma, size=(C, spec.X**m, spec.X)) for m in range(spec.k)
        ]
        return cls(spec, C, tables)

    @classmethod
    def zeros(cls, spec: CodebookSpec, C: int) -> "CascadedLogitModel":
        return cls(spec, C, [np.zeros((C, spec.X**m, spec.X)) for m in range(spec.k)])

    def node_logits(self, h: int, prefix: TokenSeq) -> np.ndarray:
        """The X-vector of logits at node (h, prefix); position is len(prefix) + 1."""
        _check_context(self.C, h)
        if len(prefix) >= self.spec.k:
            raise ValueError(f"prefix length {len(prefix)} must be < k={self.spec.k}")
        row = self.tables[len(prefix)][h, self.spec.prefix_index(prefix)]
        if self.counter is not None:
            self.counter.entries += self.spec.X
        return row

    def token_logit(self, h: int, prefix: TokenSeq, t: int) -> float:
        """Single entry l(t | h, prefix)."""
        _check_context(self.C, h)
        if not 0 <= t < self.spec.X:
            raise ValueError(f"token {t} outside [0, {self.spec.X})")
        val = self.tables[len(prefix)][h, self.spec.prefix_index(prefix), t]
        if self.counter is not None:
            self.counter.entries += 1
        return float(val)

    def copy(self) -> "CascadedLogitModel":
        return CascadedLogitModel(self.spec, self.C, [t.copy() for t in self.tables])

    def zero_like_tables(self) -> list[np.ndarray]:
        return [np.zeros_like(t) for t in self.tables]

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tables)


class ParallelLogitModel:
    """Position-wise token logits shared across all prefixes."""

    form = "parallel"

    def __init__(self, spec: CodebookSpec, C: int, tables: list[np.ndarray]):
        if C < 1:
            raise ValueError(f"C must be >= 1, got {C}")
        if len(tables) != spec.k:
            raise ValueError(f"expected {spec.k} tables, got {len(tables)}")
        for m, tab in enumerate(tables):
            if tab.shape != (C, spec.X):
                raise ValueError(
                    f"position {m + 1} table has shape {tab.shape}, expected {(C, spec.X)}"
                )
        self.spec = spec
        self.C = C
        self.tables = [np.asarray(t, dtype=np.float64) for t in tables]
        self.counter: LookupCounter | None = None

    @classmethod
    def random(cls, spec: CodebookSpec, C: int, sigma: float, seed: int) -> "ParallelLogitModel":
        rng = np.random.default_rng(seed)
        tables = [rng.normal(0.0, sigma, size=(C, spec.X)) for _ in range(spec.k)]
        return cls(spec, C, tables)

    @classmethod
    def zeros(cls, spec: CodebookSpec, C: int) -> "ParallelLogitModel":
        return cls(spec, C, [np.zeros((C, spec.X)) for _ in range(spec.k)])

    def node_logits(self, h: int, prefix: TokenSeq) -> np.ndarray:
        _check_context(self.C, h)
        if len(prefix) >= self.spec.k:
            raise ValueError(f"prefix length {len(prefix)} must be < k={self.spec.k}")
        row = self.tables[len(prefix)][h]
        if self.counter is not None:
            self.counter.entries += self.spec.X
        return row

    def token_logit(self, h: int, prefix: TokenSeq, t: int) -> float:
        _check_context(self.C, h)
        if not 0 <= t < self.spec.X:
            raise ValueError(f"token {t} outside [0, {self.spec.X})")
        val = self.tables[len(prefix)][h, t]
        if self.counter is not None:
            self.counter.entries += 1
        return float(val)

    def copy(self) -> "ParallelLogitModel":
        return ParallelLogitModel(self.spec, self.C, [t.copy() for t in self.tables])

    def zero_like_tables(self) -> list[np.ndarray]:
        return [np.zeros_like(t) for t in self.tables]

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tables)


LogitModel = CascadedLogitModel | ParallelLogitModel


def prefix_index_arrays(spec: CodebookSpec, token_matrix: np.ndarray) -> np.ndarray:
    """Base-X prefix integer of every item at every position, shape (k, n_items).

    Row m holds the encoded prefix (t_1 .. t_m-1) of each item, row 0 is all
    zeros (empty prefix).
    """
    n = token_matrix.shape[0]
    out = np.zeros((spec.k, n), dtype=np.int64)
    for m in range(1, spec.k):
        out[m] = out[m - 1] * spec.X + token_matrix[:, m - 1]
    return out


def item_logit(model: LogitModel, h: int, tmap: TokenMap, item: int) -> float:
    """Item logit: the sum of token logits along the item's sequence path."""
    seq = tmap.forward(item)
    return sum(model.token_logit(h, seq[:m], seq[m]) for m in range(len(seq)))


def item_logits_all(model: LogitModel, h: int, tmap: TokenMap) -> np.ndarray:
    """Item logits of every item in the map, shape (n_items,).

    Equivalent to calling :func:`item_logit` per item; vectorized, and counts
    n_items entry reads per position against the attached lookup counter.
    """
    _check_context(model.C, h)
    spec = model.spec
    mat = tmap.token_matrix
    n = mat.shape[0]
    scores = np.zeros(n)
    if model.form == "cascaded":
        prefixes = prefix_index_arrays(spec, mat)
        for m in range(spec.k):
            scores += model.tables[m][h, prefixes[m], mat[:, m]]
    else:
        for m in range(spec.k):
            scores += model.tables[m][h, mat[:, m]]
    if model.counter is not None:
        model.counter.entries += spec.k * n
    return scores


def embed_parallel_as_cascaded(model: ParallelLogitModel) -> CascadedLogitModel:
    """Copy a parallel model into cascaded tables (every prefix row identical)."""
    if model.form != "parallel":
        raise FormError("embed_parallel_as_cascaded needs a parallel model")
    spec = model.spec
    tables = [
        np.repeat(model.tables[m][:, None, :], spec.X**m, axis=1)
        for m in range(spec.k)
    ]
    return CascadedLogitModel(spec, model.C, tables)


def table_entry_count(spec: CodebookSpec, C: int, form: str) -> int:
    """Total table entries a model of this shape would hold."""
    if form == "cascaded":
        return C * spec.X * (spec.X**spec.k - 1) // (spec.X - 1)
    if form == "parallel":
        return C * spec.X * spec.k
    raise FormError(f"unknown model form {form!r}")


def model_to_json_dict(model: LogitModel) -> dict:
    """Checkpoint payload; each position's table is flattened context-major,
    then prefix, then token."""
    return {
        "form": model.form,
        "k": model.spec.k,
        "X": model.spec.X,
        "C": model.C,
        "params": [t.ravel(order="C").tolist() for t in model.tables],
    }


def model_from_json_dict(payload: dict) -> LogitModel:
    spec = CodebookSpec(k=int(payload["k"]), X=int(payload["X"]))
    C = int(payload["C"])
    form = str(payload["form"])
    flat = [np.asarray(p, dtype=np.float64) for p in payload["params"]]
    if form == "cascaded":
        tables = [flat[m].reshape(C, spec.X**m, spec.X) for m in range(spec.k)]
        return CascadedLogitModel(spec, C, tables)
    if form == "parallel":
        tables = [flat[m].reshape(C, spec.X) for m in range(spec.k)]
        return ParallelLogitModel(spec, C, tables)
    raise FormError(f"unknown model form {form!r}")


def save_model(model: LogitModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_json_dict(model), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_model(path) -> LogitModel:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_json_dict(json.load(fh))
