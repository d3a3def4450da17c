"""The probabilistic segmentation head.

Reduced pixel features are filed into per-class memory banks (one family
for context data, one for target data); bank means give class centers.
Each target map is re-expressed through the centers by a distance-softmax
attention, pooled, and turned into

* a latent Gaussian (target centers) that is sampled ``T`` times, and
* an order-invariant context vector (context centers),

which are tiled, stacked onto the original feature map and decoded ``T``
times with shared weights.  Averaging the ``T`` softmax maps gives the
prediction; its entropy gives the uncertainty map.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
import numpy as np

from .errors import AggregationError, DataError, FormatError, ShapeError
from .ops import Linear, global_avg_pool, softmax, tile_vector
from .rng import Rng
from .segmodel import Decoder, DecoderConfig, SmallConvNet, SmallConvNetConfig
from .tensor import (Tensor, add, broadcast_to, check_finite, concat, make_node, no_grad, note_branch, relu,
                     softplus, sqrt)

IGNORE_INDEX = 255
VAR_FLOOR = 1e-4
AGGREGATORS = ("attention", "mean")


# memory banks --------------------------------------------------------------

class ClassMemoryBank:
    """FIFO ring buffer of ``dim``-vectors for one class."""

    def __init__(self, class_id: int, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("bank capacity must be positive")
        self.class_id = class_id
        self.capacity = capacity
        self.dim = dim
        self.buffer = np.zeros((capacity, dim), dtype=np.float32)
        self.count = 0
        self._next = 0

    def insert(self, vectors: np.ndarray) -> None:
        vectors = np.asarray(vectors, dtype=np.float32).reshape(-1, self.dim)
        n = len(vectors)
        if n == 0:
            return
        if n >= self.capacity:
            vectors = vectors[n - self.capacity:]
            self._next = (self._next + n - self.capacity) % self.capacity
            n = self.capacity
        idx = (self._next + np.arange(n)) % self.capacity
        self.buffer[idx] = vectors
        self._next = (self._next + n) % self.capacity
        self.count = min(self.capacity, self.count + n)

    def vectors(self) -> np.ndarray:
        """Stored vectors, oldest first."""
        if self.count < self.capacity:
            return self.buffer[:self.count].copy()
        return np.concatenate([self.buffer[self._next:], self.buffer[:self._next]])

    def mean(self) -> np.ndarray:
        return self.buffer[:self.count].mean(axis=0, dtype=np.float64).astype(np.float32)

    def clear(self) -> None:
        self.count = 0
        self._next = 0


class BankSet:
    """One memory bank per class."""

    def __init__(self, n_class: int, capacity: int, dim: int):
        self.n_class = n_class
        self.dim = dim
        self.banks = [ClassMemoryBank(c, capacity, dim) for c in range(n_class)]

    def __getitem__(self, c: int) -> ClassMemoryBank:
        return self.banks[c]

    def counts(self) -> list[int]:
        return [b.count for b in self.banks]

    def clear(self) -> None:
        for b in self.banks:
            b.clear()


def bank_insert(banks: BankSet, reduced_map: np.ndarray, label_map: np.ndarray,
                ignore_index: int = IGNORE_INDEX) -> BankSet:
    """File each pixel's reduced vector into the bank of its label (row-major order)."""
    reduced_map = np.asarray(reduced_map)
    label_map = np.asarray(label_map)
    r = reduced_map.shape[0]
    if r != banks.dim:
        raise ShapeError(f"bank dimension is {banks.dim}, reduced map has {r} channels")
    if label_map.shape != reduced_map.shape[1:]:
        raise ShapeError(f"label map {label_map.shape} does not match feature map {reduced_map.shape[1:]}")
    labels = label_map.reshape(-1).astype(np.int64)
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= banks.n_class))
    if bad.any():
        raise DataError(f"label {labels[bad][0]} outside [0, {banks.n_class})")
    vecs = reduced_map.reshape(r, -1).T
    for c in np.unique(labels[valid]):
        banks[int(c)].insert(vecs[labels == c])
    return banks


@dataclass
class CenterSet:
    centers: np.ndarray      # (n_class, R) float32; zero rows where unpopulated
    populated: np.ndarray    # (n_class,) bool

    @classmethod
    def empty(cls, n_class: int, dim: int) -> "CenterSet":
        return cls(np.zeros((n_class, dim), np.float32), np.zeros(n_class, bool))

    @property
    def any(self) -> bool:
        return bool(self.populated.any())

    def active(self) -> np.ndarray:
        """Centers of populated classes, in class order."""
        return self.centers[self.populated]

    def copy(self) -> "CenterSet":
        return CenterSet(self.centers.copy(), self.populated.copy())


def compute_centers(banks: BankSet) -> CenterSet:
    out = CenterSet.empty(banks.n_class, banks.dim)
    for c, bank in enumerate(banks.banks):
        if bank.count:
            out.centers[c] = bank.mean()
            out.populated[c] = True
    return out


# attention -----------------------------------------------------------------

def _pixel_distances(m: np.ndarray, centers: np.ndarray):
    diff = m[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    return diff, dist


def attention_weights(featmap: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Per-pixel softmax of negative Euclidean distances, shape (H*W, L)."""
    r = featmap.shape[0]
    _, dist = _pixel_distances(featmap.reshape(r, -1).T.astype(np.float64), np.asarray(centers, np.float64))
    s = -(dist - dist.min(axis=1, keepdims=True))
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def attention_aggregate(featmap: Tensor, centers: np.ndarray) -> Tensor:
    """Replace every pixel vector by a distance-weighted mix of the centers.

    ``featmap`` is (R, H, W); ``centers`` is (L, R) and treated as a constant.
    """
    centers = np.asarray(centers)
    if centers.ndim != 2 or len(centers) == 0:
        raise AggregationError("attention needs at least one populated center")
    r, h, w = featmap.shape
    if centers.shape[1] != r:
        raise ShapeError(f"centers have dimension {centers.shape[1]}, feature map has {r}")
    # distances and weights in float64; float32 distances of far-apart vectors lose ~1e-5
    dtype = featmap.data.dtype
    centers = centers.astype(np.float64)
    m = featmap.data.reshape(r, -1).T.astype(np.float64)
    diff, dist = _pixel_distances(m, centers)
    s = -(dist - dist.min(axis=1, keepdims=True))
    e = np.exp(s)
    weights = e / e.sum(axis=1, keepdims=True)
    out = (weights @ centers).T.reshape(r, h, w).astype(dtype)
    note_branch(dist > 0)

    def backward(g):
        gp = g.reshape(r, -1).T
        gw = gp @ centers.T
        gs = weights * (gw - (gw * weights).sum(axis=1, keepdims=True))
        safe = np.where(dist > 0, dist, 1.0)
        coef = np.where(dist > 0, -gs / safe, 0.0)
        gm = (coef[:, :, None] * diff).sum(axis=1)
        return (gm.T.reshape(r, h, w).astype(dtype),)

    return make_node(np.ascontiguousarray(out), (featmap,), backward)


def mean_aggregate(featmap: Tensor, centers: np.ndarray) -> Tensor:
    """Ablation aggregator: every pixel gets the plain mean of the centers."""
    centers = np.asarray(centers)
    if centers.ndim != 2 or len(centers) == 0:
        raise AggregationError("mean aggregation needs at least one populated center")
    r, h, w = featmap.shape
    mean = centers.mean(axis=0, dtype=np.float64).astype(np.float32)
    return Tensor(np.broadcast_to(mean[:, None, None], (r, h, w)).copy())


# latent and deterministic paths ---------------------------------------------

@dataclass
class LatentDistribution:
    mu: Tensor
    var: Tensor

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


class LatentHead:
    """Pooled centers map -> two-layer MLP trunk -> mean and variance heads."""

    def __init__(self, in_dim: int, hidden: int, latent_dim: int, rng: Rng, var_floor: float = VAR_FLOOR):
        self.fc1 = Linear(in_dim, hidden, rng.child("fc1"), "latent.fc1")
        self.fc2 = Linear(hidden, hidden, rng.child("fc2"), "latent.fc2")
        self.mu_head = Linear(hidden, latent_dim, rng.child("mu"), "latent.mu")
        self.var_head = Linear(hidden, latent_dim, rng.child("var"), "latent.var")
        self.var_floor = var_floor

    def from_pooled(self, pooled: Tensor) -> LatentDistribution:
        h = relu(self.fc2(relu(self.fc1(pooled))))
        mu = self.mu_head(h)
        var = add(softplus(self.var_head(h)), self.var_floor)
        check_finite(mu, "latent mean")
        check_finite(var, "latent variance")
        return LatentDistribution(mu, var)

    def parameters(self):
        return (self.fc1.parameters() + self.fc2.parameters()
                + self.mu_head.parameters() + self.var_head.parameters())


def infer_latent(centers_map: Tensor, mlp: LatentHead) -> LatentDistribution:
    return mlp.from_pooled(global_avg_pool(centers_map))


def sample_latents(dist: LatentDistribution, T: int, rng: Rng) -> Tensor:
    """Reparameterised draws ``mu + sqrt(var) * eps``, shape (T, D_t)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    eps = rng.normal((T, dist.dim))
    return add(dist.mu, sqrt(dist.var) * eps)


def deterministic_context(target_reduced: Tensor, context_centers: CenterSet, proj: Linear,
                          aggregator: str = "attention") -> Tensor:
    agg = _aggregate(target_reduced, context_centers.active(), aggregator)
    return proj(global_avg_pool(agg))


def _aggregate(featmap: Tensor, centers: np.ndarray, aggregator: str) -> Tensor:
    if aggregator == "attention":
        return attention_aggregate(featmap, centers)
    if aggregator == "mean":
        return mean_aggregate(featmap, centers)
    raise ValueError(f"unknown aggregator {aggregator!r}")


# predictions ---------------------------------------------------------------

def entropy(probs: np.ndarray, axis: int = 0) -> np.ndarray:
    """Shannon entropy in nats with ``0 ln 0 = 0``, clipped to ``[0, ln C]``."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -terms.sum(axis=axis)
    return np.clip(h, 0.0, math.log(p.shape[axis])).astype(np.float32)


@dataclass
class PredictionBundle:
    per_sample_probs: np.ndarray   # (T, C, H, W)
    avg_probs: np.ndarray          # (C, H, W)
    uncertainty: np.ndarray        # (H, W), nats

    @classmethod
    def from_samples(cls, per_sample_probs: np.ndarray) -> "PredictionBundle":
        per = np.asarray(per_sample_probs, dtype=np.float32)
        avg = per.mean(axis=0)
        return cls(per, avg, entropy(avg, axis=0))

    @property
    def labels(self) -> np.ndarray:
        return self.avg_probs.argmax(axis=0)


# the head ------------------------------------------------------------------

@dataclass(frozen=True)
class HeadConfig:
    feature_channels: int = 32      # D
    reduced_dim: int = 8            # R
    latent_dim: int = 8             # D_t
    context_dim: int = 8            # D_c
    latent_hidden: int = 32
    decoder_hidden: int = 64
    n_class: int = 4
    bank_capacity: int = 2560       # Q
    n_samples: int = 5              # T
    aggregator: str = "attention"
    var_floor: float = VAR_FLOOR

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")

    @property
    def assembled_channels(self) -> int:
        return self.feature_channels + self.latent_dim + self.context_dim


@dataclass
class HeadOutput:
    probs: Tensor                           # (T, C, H, W)
    assembled_shape: tuple[int, ...]
    target_dist: LatentDistribution | None
    context_dist: LatentDistribution | None = None
    featmap: Tensor | None = field(default=None, repr=False)
    vectors: Tensor | None = field(default=None, repr=False)   # (T, D_t + D_c)

    def bundle(self) -> PredictionBundle:
        return PredictionBundle.from_samples(self.probs.data)

    def assembled(self) -> Tensor:
        """The explicit (T, D + D_t + D_c, H, W) decoder input."""
        h, w = self.featmap.shape[-2:]
        return concat([_repeat_map(self.featmap, len(self.vectors)),
                       tile_vector(self.vectors, h, w)], axis=1)


class NPHead:
    def __init__(self, cfg: HeadConfig, rng: Rng):
        self.cfg = cfg
        self.reduce = SmallConvNet(SmallConvNetConfig(cfg.feature_channels, cfg.reduced_dim), rng.child("reduce"))
        self.latent = LatentHead(cfg.reduced_dim, cfg.latent_hidden, cfg.latent_dim, rng.child("latent"),
                                 cfg.var_floor)
        self.proj = Linear(cfg.reduced_dim, cfg.context_dim, rng.child("proj"), "proj")
        self.decoder = Decoder(DecoderConfig(cfg.assembled_channels, cfg.decoder_hidden, cfg.n_class),
                               rng.child("decoder"))
        self.context_banks = BankSet(cfg.n_class, cfg.bank_capacity, cfg.reduced_dim)
        self.target_banks = BankSet(cfg.n_class, cfg.bank_capacity, cfg.reduced_dim)
        self.context_centers = CenterSet.empty(cfg.n_class, cfg.reduced_dim)
        self.target_centers = CenterSet.empty(cfg.n_class, cfg.reduced_dim)

    def parameters(self):
        return (self.reduce.parameters() + self.latent.parameters()
                + self.proj.parameters() + self.decoder.parameters())

    def refresh_centers(self) -> None:
        self.context_centers = compute_centers(self.context_banks)
        self.target_centers = compute_centers(self.target_banks)

    def forward(self, featmap: Tensor, rng: Rng, T: int | None = None,
                reduced: Tensor | None = None, allow_cold_start: bool = False) -> HeadOutput:
        """Run both paths for one target feature map (D, H, W).

        A path whose center family is empty feeds zeros to the decoder.  With
        both families empty this is an error unless ``allow_cold_start``.
        """
        cfg = self.cfg
        T = cfg.n_samples if T is None else T
        d, h, w = featmap.shape
        if d != cfg.feature_channels:
            raise ShapeError(f"head expects {cfg.feature_channels} feature channels, got {d}")
        if not (self.target_centers.any or self.context_centers.any) and not allow_cold_start:
            raise AggregationError("both center families are empty")
        if reduced is None:
            reduced = self.reduce(featmap)
        zero = np.zeros((), dtype=featmap.dtype)

        target_dist = None
        if self.target_centers.any:
            t_map = _aggregate(reduced, self.target_centers.active(), cfg.aggregator)
            target_dist = infer_latent(t_map, self.latent)
            z = sample_latents(target_dist, T, rng.child("latent"))
        else:
            z = Tensor(np.broadcast_to(zero, (T, cfg.latent_dim)).copy())

        context_dist = None
        if self.context_centers.any:
            c_map = _aggregate(reduced, self.context_centers.active(), cfg.aggregator)
            c_pooled = global_avg_pool(c_map)
            ctx = self.proj(c_pooled)
            context_dist = self.latent.from_pooled(c_pooled)
        else:
            ctx = Tensor(np.broadcast_to(zero, (cfg.context_dim,)).copy())

        vectors = concat([z, broadcast_to(ctx, (T, cfg.context_dim))], axis=1)
        probs = softmax(self.decoder.decode_shared(featmap, vectors), axis=1)
        return HeadOutput(probs, (T, cfg.assembled_channels, h, w), target_dist, context_dist,
                          featmap=featmap, vectors=vectors)

    def predict(self, featmap: Tensor, rng: Rng, T: int | None = None,
                allow_cold_start: bool = False) -> PredictionBundle:
        with no_grad():
            return self.forward(featmap, rng, T, allow_cold_start=allow_cold_start).bundle()

    def export_centers(self) -> "CenterSnapshot":
        return CenterSnapshot(self.context_centers.copy(), self.target_centers.copy(),
                              self.cfg.reduced_dim, self.cfg.n_class, self.cfg.context_dim)

    def import_centers(self, snap: "CenterSnapshot") -> "NPHead":
        if (snap.reduced_dim, snap.n_class, snap.context_dim) != (
                self.cfg.reduced_dim, self.cfg.n_class, self.cfg.context_dim):
            raise FormatError(
                f"snapshot has R={snap.reduced_dim}, classes={snap.n_class}, D_c={snap.context_dim}; "
                f"model has R={self.cfg.reduced_dim}, classes={self.cfg.n_class}, D_c={self.cfg.context_dim}")
        self.context_centers = snap.context_centers.copy()
        self.target_centers = snap.target_centers.copy()
        return self


def _repeat_map(featmap: Tensor, T: int) -> Tensor:
    """Stack ``T`` copies of a (D, H, W) map into (T, D, H, W)."""
    out = np.broadcast_to(featmap.data[None], (T,) + featmap.shape).copy()
    return make_node(out, (featmap,), lambda g: (g.sum(axis=0),))


# persistence ---------------------------------------------------------------

SNAPSHOT_MAGIC = b"NPSS"
SNAPSHOT_VERSION = 1
_SNAP_HEADER = struct.Struct("<4sHIII")


@dataclass
class CenterSnapshot:
    context_centers: CenterSet
    target_centers: CenterSet
    reduced_dim: int
    n_class: int
    context_dim: int

    def to_bytes(self) -> bytes:
        parts = [_SNAP_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, self.reduced_dim,
                                   self.n_class, self.context_dim)]
        for cs in (self.context_centers, self.target_centers):
            parts.append(cs.centers.astype("<f4").tobytes())
            parts.append(cs.populated.astype(np.uint8).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["CenterSnapshot", int]:
        """Parse a snapshot starting at ``offset``; returns it and the end offset."""
        if len(buf) - offset < _SNAP_HEADER.size:
            raise FormatError("truncated center snapshot header")
        magic, version, r, k, dc = _SNAP_HEADER.unpack_from(buf, offset)
        if magic != SNAPSHOT_MAGIC:
            raise FormatError(f"bad snapshot magic {magic!r}")
        if version != SNAPSHOT_VERSION:
            raise FormatError(f"unsupported snapshot version {version}")
        pos = offset + _SNAP_HEADER.size
        need = 2 * (k * r * 4 + k)
        if len(buf) - pos < need:
            raise FormatError("truncated center snapshot body")
        sets = []
        for _ in range(2):
            centers = np.frombuffer(buf, "<f4", k * r, pos).reshape(k, r).astype(np.float32)
            pos += k * r * 4
            flags = np.frombuffer(buf, np.uint8, k, pos).astype(bool)
            pos += k
            sets.append(CenterSet(centers, flags))
        return cls(sets[0], sets[1], r, k, dc), pos

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CenterSnapshot":
        with open(path, "rb") as fh:
            snap, _ = cls.from_bytes(fh.read())
        return snap


def export_centers(head: NPHead) -> CenterSnapshot:
    return head.export_centers()


def import_centers(head: NPHead, snap: CenterSnapshot) -> NPHead:
    return head.import_centers(snap)
