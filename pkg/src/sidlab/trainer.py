"""Synthetic worlds, datasets, per-sample SGD on the next-token loss, and KL eval.

The world is a table of target distributions p*(. | h) over N items for C
discrete contexts.  Training is deliberately plain: per-sample SGD with the
teacher-forcing gradient, data reshuffled every epoch from one seed, no
momentum or decay, so whatever the model converges to is attributable to the
loss alone.

Two evaluation views are provided.  ``eval_kl`` scores the flat softmax over
summed item logits (the full-partition view the equivalence checker also
uses).  ``eval_kl_chain`` scores the chained softmax distribution, which is
what next-token training actually fits; for parallel models the two coincide,
for cascaded models they generally do not (see the losses module docstring).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from math import exp

import numpy as np

from .logits import LogitModel, item_logits_all, prefix_index_arrays
from .losses import log_sum_exp
from .vocab import TokenMap


class DivergenceError(RuntimeError):
    """The mean epoch loss stopped being finite; lr is too hot for the data."""


@dataclass
class SyntheticWorld:
    """Target conditionals: p_star[h, i] = p*(item i | context h)."""

    C: int
    N: int
    p_star: np.ndarray
    seed: int

    def __post_init__(self):
        arr = np.asarray(self.p_star, dtype=np.float64)
        if arr.shape != (self.C, self.N):
            raise ValueError(f"p_star shape {arr.shape} does not match ({self.C}, {self.N})")
        if np.any(arr < 0):
            raise ValueError("p_star entries must be non-negative")
        if not np.allclose(arr.sum(axis=1), 1.0, rtol=0.0, atol=1e-12):
            raise ValueError("p_star rows must sum to 1 within 1e-12")
        self.p_star = arr


def synth_world(C: int, N: int, alpha: float, seed: int, uniform: bool = False) -> SyntheticWorld:
    """Rows drawn from a symmetric Dirichlet(alpha) via normalized Gamma draws.

    ``uniform=True`` is the explicit alpha -> infinity limit: every row is
    exactly 1/N without touching the generator.
    """
    if C < 1 or N < 2:
        raise ValueError(f"need C >= 1 and N >= 2, got C={C}, N={N}")
    if uniform:
        p = np.full((C, N), 1.0 / N)
    else:
        if alpha <= 0:
            raise ValueError(f"alpha must be positive, got {alpha}")
        rng = np.random.default_rng(seed)
        g = rng.gamma(alpha, 1.0, size=(C, N))
        sums = g.sum(axis=1, keepdims=True)
        if np.any(sums == 0.0):
            raise ValueError("degenerate Dirichlet draw: a row of Gamma draws summed to zero")
        p = g / sums
    return SyntheticWorld(C=C, N=N, p_star=p, seed=seed)


@dataclass
class Dataset:
    """Observed (context, positive item) pairs in draw order."""

    contexts: np.ndarray
    items: np.ndarray

    def __post_init__(self):
        self.contexts = np.asarray(self.contexts, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        if self.contexts.shape != self.items.shape or self.contexts.ndim != 1:
            raise ValueError("contexts and items must be matching 1-D arrays")

    def __len__(self) -> int:
        return int(self.contexts.shape[0])

    def pairs(self):
        return zip(self.contexts.tolist(), self.items.tolist())


def sample_dataset(world: SyntheticWorld, n_samples: int, seed: int) -> Dataset:
    """Contexts uniform over C, items by inverse CDF from p*(. | h)."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    rng = np.random.default_rng(seed)
    contexts = rng.integers(0, world.C, size=n_samples)
    u = rng.random(n_samples)
    items = np.empty(n_samples, dtype=np.int64)
    cdf = np.cumsum(world.p_star, axis=1)
    for h in range(world.C):
        mask = contexts == h
        items[mask] = np.searchsorted(cdf[h], u[mask], side="right")
    np.clip(items, 0, world.N - 1, out=items)
    return Dataset(contexts=contexts, items=items)


@dataclass
class EpochRecord:
    epoch: int
    mean_ntp_loss: float
    mean_fv_mle_loss: float
    kl: float


@dataclass
class TrainingTrace:
    records: list[EpochRecord]

    CSV_FIELDS = ("epoch", "mean_ntp_loss", "mean_fv_mle_loss", "kl")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_FIELDS)
            for rec in self.records:
                writer.writerow([rec.epoch, rec.mean_ntp_loss, rec.mean_fv_mle_loss, rec.kl])


def _model_log_probs_flat(model: LogitModel, tmap: TokenMap, h: int) -> np.ndarray:
    scores = item_logits_all(model, h, tmap)
    return scores - log_sum_exp(scores)


def _model_log_probs_chain(model: LogitModel, tmap: TokenMap, h: int) -> np.ndarray:
    spec = model.spec
    mat = tmap.token_matrix
    out = np.zeros(mat.shape[0])
    if model.form == "cascaded":
        prefixes = prefix_index_arrays(spec, mat)
        for m in range(spec.k):
            rows = model.tables[m][h]
            log_z = np.array([log_sum_exp(rows[p]) for p in range(rows.shape[0])])
            out += rows[prefixes[m], mat[:, m]] - log_z[prefixes[m]]
    else:
        for m in range(spec.k):
            row = model.tables[m][h]
            out += row[mat[:, m]] - log_sum_exp(row)
    return out


def _forward_kl(world: SyntheticWorld, log_q_rows: list[np.ndarray]) -> float:
    total = 0.0
    for h in range(world.C):
        p = world.p_star[h]
        mask = p > 0.0
        total += float((p[mask] * (np.log(p[mask]) - log_q_rows[h][mask])).sum())
    return total / world.C


def eval_kl(model: LogitModel, tmap: TokenMap, world: SyntheticWorld) -> float:
    """Mean over contexts of KL(p* || flat softmax of summed item logits).

    Zero target mass contributes zero (0 * log 0 := 0).
    """
    return _forward_kl(world, [_model_log_probs_flat(model, tmap, h) for h in range(world.C)])


def eval_kl_chain(model: LogitModel, tmap: TokenMap, world: SyntheticWorld) -> float:
    """Mean over contexts of KL(p* || chained softmax probabilities).

    The chained view is the distribution next-token training optimizes; it
    equals the flat view exactly when per-node partition values do not depend
    on the prefix.
    """
    return _forward_kl(world, [_model_log_probs_chain(model, tmap, h) for h in range(world.C)])


def _epoch_metrics(
    model: LogitModel, tmap: TokenMap, counts: np.ndarray, n: int,
    world: SyntheticWorld | None,
) -> tuple[float, float, float]:
    """Dataset-mean losses at the current parameters, plus eval KL.

    Means are exact: per-(h, i) losses are computed once and weighted by the
    dataset's (h, i) counts.
    """
    spec = model.spec
    mat = tmap.token_matrix
    mean_ntp = 0.0
    mean_fv = 0.0
    for h in range(model.C):
        if model.form == "cascaded":
            prefixes = prefix_index_arrays(spec, mat)
            ntp_tab = np.zeros(mat.shape[0])
            for m in range(spec.k):
                rows = model.tables[m][h]
                log_z = np.array([log_sum_exp(rows[p]) for p in range(rows.shape[0])])
                ntp_tab -= rows[prefixes[m], mat[:, m]] - log_z[prefixes[m]]
        else:
            ntp_tab = np.zeros(mat.shape[0])
            for m in range(spec.k):
                row = model.tables[m][h]
                ntp_tab -= row[mat[:, m]] - log_sum_exp(row)
        scores = item_logits_all(model, h, tmap)
        fv_tab = -(scores - log_sum_exp(scores))
        w = counts[h]
        mean_ntp += float((w * ntp_tab).sum())
        mean_fv += float((w * fv_tab).sum())
    mean_ntp /= n
    mean_fv /= n
    kl = eval_kl(model, tmap, world) if world is not None else float("nan")
    return mean_ntp, mean_fv, kl


def train_sgd(
    model: LogitModel,
    tmap: TokenMap,
    data: Dataset,
    lr: float,
    epochs: int,
    seed: int,
    world: SyntheticWorld | None = None,
) -> tuple[LogitModel, TrainingTrace]:
    """Per-sample SGD on the next-token loss; returns (trained copy, trace).

    Each step updates only the k visited nodes with lr * (softmax - onehot).
    The trace records the exact dataset-mean next-token and full-vocabulary
    losses at end-of-epoch parameters, and eval_kl when a world is supplied.
    The input model is not modified; lr = 0 is allowed and leaves the copy
    bit-identical.

    Raises:
        DivergenceError: a mean epoch loss went non-finite.
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if tmap.mode != "strict":
        raise ValueError("training needs a strict token map")

    model = model.copy()
    spec = model.spec
    X = spec.X
    n = len(data)
    rng = np.random.default_rng(seed)

    mat = tmap.token_matrix
    prefixes = prefix_index_arrays(spec, mat)
    # hot loop runs on plain python floats; ndarray round trips happen per epoch
    pfx_py = [prefixes[m].tolist() for m in range(spec.k)]
    tok_py = [mat[:, m].tolist() for m in range(spec.k)]
    ctx_list = data.contexts.tolist()
    item_list = data.items.tolist()

    counts = np.zeros((model.C, tmap.n_items))
    np.add.at(counts, (data.contexts, data.items), 1.0)

    records = []
    cascaded = model.form == "cascaded"
    tables_py = [t.tolist() for t in model.tables]
    positions = list(range(spec.k))
    token_range = list(range(X))
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n).tolist()
        for s in order:
            h = ctx_list[s]
            i = item_list[s]
            for m in positions:
                if cascaded:
                    row = tables_py[m][h][pfx_py[m][i]]
                else:
                    row = tables_py[m][h]
                mx = max(row)
                es = [exp(v - mx) for v in row]
                scale = lr / sum(es)
                for j in token_range:
                    row[j] -= es[j] * scale
                row[tok_py[m][i]] += lr
        for m in positions:
            model.tables[m][...] = np.asarray(tables_py[m])
        mean_ntp, mean_fv, kl = _epoch_metrics(model, tmap, counts, n, world)
        if not np.isfinite(mean_ntp):
            raise DivergenceError(f"mean epoch loss became non-finite at epoch {epoch}")
        records.append(EpochRecord(epoch=epoch, mean_ntp_loss=mean_ntp, mean_fv_mle_loss=mean_fv, kl=kl))
    return model, TrainingTrace(records=records)
