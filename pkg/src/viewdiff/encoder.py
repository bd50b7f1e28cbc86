"""Visit encoding and the condition blocks of the diffusion latent.

A visit's continuous state is h0 = z + c + b + v (concatenation), where
v sums code embeddings per view (zero slice for a missing view), b embeds
the per-view observed/missing flags, z attention-pools the patient's
earlier visit vectors, and c holds the per-view nearest k-means prototype
(zeros for missing views). All four blocks are 3*width wide; the full
latent is 12 slots of `width`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import ParamStore, Tensor
from .corpus import N_VIEWS, Visit
from .errors import DomainError, ShapeError
from .rng import substream

BLOCKS = ("z", "c", "b", "v")


@dataclass(frozen=True)
class SlotLayout:
    """Offsets of the 12 width-d slots: z(3), c(3), b(3), v(3)."""

    width: int

    @property
    def block_width(self) -> int:
        return N_VIEWS * self.width

    @property
    def total(self) -> int:
        return len(BLOCKS) * N_VIEWS * self.width

    @property
    def n_slots(self) -> int:
        return len(BLOCKS) * N_VIEWS

    def block(self, name: str) -> slice:
        i = BLOCKS.index(name)
        return slice(i * self.block_width, (i + 1) * self.block_width)

    def slot(self, index: int) -> slice:
        if not 0 <= index < self.n_slots:
            raise DomainError(f"slot index {index} outside [0, {self.n_slots})")
        return slice(index * self.width, (index + 1) * self.width)

    def v_slot(self, view: int) -> slice:
        return self.slot(3 * BLOCKS.index("v") + view)

    def c_slot(self, view: int) -> slice:
        return self.slot(3 * BLOCKS.index("c") + view)


@dataclass
class EmbeddingTables:
    """Learned code/mask embeddings; all tables share one width."""

    code_tables: tuple[Tensor, Tensor, Tensor]
    mask_table: Tensor

    @property
    def width(self) -> int:
        return self.mask_table.shape[1]

    @classmethod
    def create(cls, store: ParamStore, vocab_sizes: Sequence[int], width: int,
               rng: np.random.Generator, prefix: str = "embed") -> "EmbeddingTables":
        scale = 1.0 / np.sqrt(width)
        tables = tuple(
            store.add(f"{prefix}.{name}", rng.normal(size=(size, width)) * scale)
            for name, size in zip(("diagnosis", "procedure", "medication"), vocab_sizes))
        mask = store.add(f"{prefix}.mask", rng.normal(size=(2, width)) * scale)
        return cls(code_tables=tables, mask_table=mask)


# ---------------------------------------------------------------------------
# visit vectors


def encode_visit(visit: Visit, tables: EmbeddingTables) -> Tensor:
    """Sum-pooled per-view embeddings concatenated to a 3*width vector."""
    return ad.reshape(encode_visits([visit], tables), (N_VIEWS * tables.width,))


def encode_visits(visits: Sequence[Visit], tables: EmbeddingTables,
                  observed: np.ndarray | None = None) -> Tensor:
    """Batched visit vectors, shape (N, 3*width).

    ``observed`` optionally overrides each visit's own flags (used to apply
    artificial masks during training); a view contributes only when observed.
    """
    n = len(visits)
    if observed is None:
        observed = np.array([v.observed for v in visits], dtype=bool)
    observed = np.asarray(observed, dtype=bool)
    if observed.shape != (n, N_VIEWS):
        raise ShapeError(f"encode_visits: observed flags {observed.shape} for {n} visits")
    parts = []
    for k in range(N_VIEWS):
        idx: list[int] = []
        seg: list[int] = []
        for i, visit in enumerate(visits):
            if observed[i, k]:
                idx.extend(visit.codes[k])
                seg.extend([i] * len(visit.codes[k]))
        rows = ad.embedding(tables.code_tables[k], np.asarray(idx, dtype=np.int64))
        parts.append(ad.segment_sum(rows, np.asarray(seg, dtype=np.int64), n))
    return ad.concat(parts, axis=1)


def visit_vectors_raw(visits: Sequence[Visit], tables: EmbeddingTables,
                      observed: np.ndarray | None = None) -> np.ndarray:
    """Detached (numpy) visit vectors reshaped to (N, 3, width)."""
    v = encode_visits(visits, tables, observed=observed)
    return v.data.reshape(len(visits), N_VIEWS, tables.width)


def mask_vector(observed: Sequence[bool], tables: EmbeddingTables) -> Tensor:
    """Mask-embedding block for a single visit's observed flags."""
    if len(observed) != N_VIEWS:
        raise ShapeError(f"mask_vector: expected {N_VIEWS} flags, got {len(observed)}")
    return ad.reshape(mask_vectors(np.asarray(observed, dtype=bool)[None, :], tables),
                      (N_VIEWS * tables.width,))


def mask_vectors(observed: np.ndarray, tables: EmbeddingTables) -> Tensor:
    """Batched mask blocks, shape (N, 3*width)."""
    observed = np.asarray(observed, dtype=bool)
    n = observed.shape[0]
    rows = ad.embedding(tables.mask_table, observed.astype(np.int64))
    return ad.reshape(rows, (n, N_VIEWS * tables.width))


# ---------------------------------------------------------------------------
# intra-patient condition (attention-pooled history)


@dataclass
class IntraAttention:
    """Single shared-width attention over a patient's earlier visit vectors."""

    wq: Tensor
    wk: Tensor
    wv: Tensor

    @classmethod
    def create(cls, store: ParamStore, block_width: int, rng: np.random.Generator,
               prefix: str = "intra") -> "IntraAttention":
        scale = 1.0 / np.sqrt(block_width)
        return cls(*(store.add(f"{prefix}.{n}", rng.normal(size=(block_width, block_width)) * scale)
                     for n in ("wq", "wk", "wv")))


def intra_condition(history: Tensor | None, attn: IntraAttention) -> Tensor:
    """History summary z for one visit; empty history gives the zero vector."""
    width = attn.wq.shape[0]
    if history is None or history.shape[0] == 0:
        return ad.constant(np.zeros(width))
    hist = ad.reshape(history, (1,) + tuple(history.shape))
    out = intra_condition_batch(hist, np.ones((1, history.shape[0]), dtype=bool), attn)
    return ad.reshape(out, (width,))


def intra_condition_batch(history: Tensor, valid: np.ndarray,
                          attn: IntraAttention) -> Tensor:
    """Batched z over padded histories.

    history: (N, H, D) visit vectors, valid: (N, H) row mask. Rows with an
    empty history yield zeros.
    """
    n, h, width = history.shape
    if attn.wq.shape[0] != width:
        raise ShapeError(f"intra_condition: width {width} vs weights {attn.wq.shape}")
    valid = np.asarray(valid, dtype=bool)
    q = ad.matmul(history, attn.wq)
    k = ad.matmul(history, attn.wk)
    v = ad.matmul(history, attn.wv)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(width))
    key_bias = np.where(valid, 0.0, ad.NEG_BIG)[:, None, :]
    weights = ad.softmax(ad.add(scores, ad.constant(key_bias)))
    attended = ad.matmul(weights, v)  # (N, H, D)
    row_w = valid.astype(np.float64)
    counts = row_w.sum(axis=1)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    pooled = ad.sum_(ad.mul(attended, ad.constant(row_w[:, :, None])), axis=1)
    return ad.mul(pooled, ad.constant(inv[:, None]))


# ---------------------------------------------------------------------------
# inter-patient condition (k-means prototypes)


@dataclass(frozen=True)
class PrototypeSet:
    """Per-view centroid banks of shape (K, width)."""

    centroids: tuple[np.ndarray, ...]

    @property
    def k(self) -> int:
        return self.centroids[0].shape[0]

    def __post_init__(self):
        if not self.centroids or self.centroids[0].shape[0] < 1:
            raise DomainError("PrototypeSet needs at least one centroid per view")
        for c in self.centroids:
            if not np.isfinite(c).all():
                raise DomainError("PrototypeSet centroids must be finite")


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective: list[float]


def lloyd_kmeans(points: np.ndarray, k: int, seed: int, max_iters: int = 50,
                 init: np.ndarray | None = None) -> KMeansResult:
    """Lloyd's iterations with Forgy init (k distinct seed points).

    ``init`` warm-starts from existing centroids instead (used when
    prototypes are refreshed against drifting embeddings, which keeps the
    cluster geometry stable across refits). The within-cluster
    squared-distance objective is recorded once per assignment pass and is
    non-increasing; iteration stops when assignments are stable or after
    max_iters.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k:
        raise DomainError(f"k-means needs >= {k} points, got {n}")
    if init is not None:
        if init.shape[0] != k:
            raise DomainError(f"k-means init has {init.shape[0]} centroids, want {k}")
        centroids = np.array(init, dtype=np.float64)
    else:
        rng = substream(seed, "encoder.kmeans")
        centroids = points[np.sort(rng.choice(n, size=k, replace=False))].copy()
    labels = np.full(n, -1, dtype=np.int64)
    objective: list[float] = []
    for _ in range(max_iters):
        new_labels, d2 = kernels.kmeans_assign(points, centroids)
        objective.append(float(d2.sum()))
        if (new_labels == labels).all():
            break
        labels = new_labels
        for c in range(k):
            members = points[labels == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    return KMeansResult(centroids=centroids, labels=labels, objective=objective)


def fit_prototypes(vectors_per_view: Sequence[np.ndarray], k: int, seed: int,
                   max_iters: int = 50,
                   warm_start: PrototypeSet | None = None) -> PrototypeSet:
    """K-means per view over (observed) visit vectors."""
    cents = []
    for view, vecs in enumerate(vectors_per_view):
        init = None if warm_start is None else warm_start.centroids[view]
        result = lloyd_kmeans(np.asarray(vecs), k, seed=seed + view,
                              max_iters=max_iters, init=init)
        cents.append(result.centroids)
    return PrototypeSet(centroids=tuple(cents))


def assign_prototype(v: np.ndarray, centroids: np.ndarray) -> tuple[int, np.ndarray]:
    """Nearest centroid (squared Euclidean; ties take the lowest index)."""
    labels, _ = kernels.kmeans_assign(
        np.ascontiguousarray(v[None, :], dtype=np.float64),
        np.ascontiguousarray(centroids, dtype=np.float64))
    idx = int(labels[0])
    return idx, centroids[idx]


def prototype_block(view_vectors: np.ndarray, observed: np.ndarray,
                    prototypes: PrototypeSet) -> np.ndarray:
    """Per-visit prototype condition c, shape (N, 3*width).

    ``view_vectors`` is (N, 3, width); a missing view's slice is zeros.
    """
    n, n_views, width = view_vectors.shape
    out = np.zeros((n, n_views * width))
    for k in range(n_views):
        obs = np.asarray(observed[:, k], dtype=bool)
        if not obs.any():
            continue
        labels, _ = kernels.kmeans_assign(
            np.ascontiguousarray(view_vectors[obs, k, :]),
            np.ascontiguousarray(prototypes.centroids[k]))
        out[obs, k * width:(k + 1) * width] = prototypes.centroids[k][labels]
    return out


# ---------------------------------------------------------------------------
# latent assembly


def assemble_h0(z: Tensor, c: Tensor, b: Tensor, v: Tensor) -> Tensor:
    """Concatenate the four width-3d blocks into the diffusion latent."""
    shapes = {t.shape[-1] for t in (z, c, b, v)}
    if len(shapes) != 1:
        raise ShapeError(f"assemble_h0: block widths differ: "
                         f"{[t.shape[-1] for t in (z, c, b, v)]}")
    return ad.concat([z, c, b, v], axis=-1)
