"""k-means codebooks and residual vector quantization."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

SCQB_MAGIC = b"SCQB"
SCQB_VERSION = 1
_SCQB_HEADER = struct.Struct("<4sHHII")


def fingerprint(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=16).digest()


@dataclass
class Codebook:
    entries: np.ndarray  # (N, D) float32
    trained_on: str = ""
    history: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.entries = np.ascontiguousarray(self.entries, dtype=np.float32)
        if self.entries.ndim != 2:
            raise ValueError("codebook entries must be (N, D)")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("codebook entries must be finite")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


def sq_distances(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances (n, N), never negative."""
    d = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def nearest(x: np.ndarray, c: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest entry (lowest index on ties) and its squared distance."""
    idx = np.empty(len(x), dtype=np.int64)
    dist = np.empty(len(x))
    for s in range(0, len(x), chunk):
        d = sq_distances(x[s : s + chunk], c)
        idx[s : s + chunk] = np.argmin(d, axis=1)
        dist[s : s + chunk] = d[np.arange(len(d)), idx[s : s + chunk]]
    return idx, dist


def _kmeans_pp(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((n, x.shape[1]))
    centers[0] = x[rng.integers(len(x))]
    d2 = ((x - centers[0]) ** 2).sum(1)
    k = 1
    while k < n:
        total = d2.sum()
        if total <= 0:
            break
        centers[k] = x[rng.choice(len(x), p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[k]) ** 2).sum(1))
        k += 1
    if k < n:
        # fewer distinct points than entries: fill with jittered copies
        scale = 1e-3 * max(float(np.std(x)), 1.0)
        picks = x[rng.integers(len(x), size=n - k)]
        centers[k:] = picks + scale * rng.normal(size=picks.shape)
    return centers


def _make_distinct(c: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    c32 = c.astype(np.float32)
    _, first = np.unique(c32, axis=0, return_index=True)
    dup = np.setdiff1d(np.arange(len(c32)), first)
    scale = 1e-3 * max(float(np.std(c32)), 1.0)
    while len(dup):
        c32[dup] += (scale * rng.normal(size=(len(dup), c32.shape[1]))).astype(np.float32)
        _, first = np.unique(c32, axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(len(c32)), first)
    return c32


def train_kmeans(vectors, N: int = 1024, max_iters: int = 100, tol: float = 1e-6, seed=0) -> Codebook:
    """Lloyd iterations from a k-means++ start.

    Stops after ``max_iters`` or when the relative drop in mean distortion
    falls below ``tol``. Empty clusters take the point farthest from its
    centroid. ``Codebook.history`` holds the distortion after every
    assignment step.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("need a non-empty (n, D) array of training vectors")
    rng = np.random.default_rng(seed)
    c = _kmeans_pp(x, N, rng)
    history = []
    for _ in range(max_iters):
        labels, _ = nearest(x, c)
        dist = ((x - c[labels]) ** 2).sum(1)
        history.append(float(dist.mean()))
        sums = np.zeros_like(c)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=N)
        filled = counts > 0
        c[filled] = sums[filled] / counts[filled, None]
        dist = ((x - c[labels]) ** 2).sum(1)
        for e in np.nonzero(~filled)[0]:
            far = int(np.argmax(dist))
            if dist[far] <= 0:
                break
            c[e] = x[far]
            dist[far] = 0.0
        if len(history) > 1:
            prev, cur = history[-2], history[-1]
            if prev <= 0 or (prev - cur) / prev < tol:
                break
    labels, _ = nearest(x, c)
    history.append(float(((x - c[labels]) ** 2).sum(1).mean()))
    return Codebook(_make_distinct(c, rng), fingerprint(x.tobytes()).hex(), history)


@dataclass
class RVQCoder:
    stages: list

    def __post_init__(self):
        if len(self.stages) < 1:
            raise ValueError("an RVQ coder needs at least one stage")
        dims = {cb.dim for cb in self.stages}
        if len(dims) != 1:
            raise ValueError("all stages must share one dimension")

    @property
    def dim(self) -> int:
        return self.stages[0].dim

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def size(self) -> int:
        return self.stages[0].size

    def encode(self, v, num_stages: int | None = None) -> np.ndarray:
        """Greedy per-stage nearest entry on the running residual; returns (n, S) indices."""
        x = np.asarray(v, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise ValueError(f"vector dimension {x.shape[1]} != codebook dimension {self.dim}")
        stages = self.stages[: num_stages or self.num_stages]
        out = np.empty((len(x), len(stages)), dtype=np.int64)
        residual = x.copy()
        for s, cb in enumerate(stages):
            c = cb.entries.astype(np.float64)
            out[:, s], _ = nearest(residual, c)
            residual -= c[out[:, s]]
        return out[0] if single else out

    def decode(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        single = idx.ndim == 1
        idx = np.atleast_2d(idx)
        if idx.shape[1] > self.num_stages:
            raise ValueError("more indices than stages")
        out = np.zeros((len(idx), self.dim))
        for s in range(idx.shape[1]):
            cb = self.stages[s]
            if idx[:, s].min(initial=0) < 0 or idx[:, s].max(initial=0) >= cb.size:
                raise IndexError(f"stage {s} index outside [0, {cb.size})")
            out += cb.entries.astype(np.float64)[idx[:, s]]
        return out[0] if single else out

    def distortion(self, vectors, num_stages: int | None = None) -> float:
        x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        idx = self.encode(x, num_stages)
        return float(((x - self.decode(idx)) ** 2).sum(1).mean())


def rvq_encode(v, coder: RVQCoder) -> np.ndarray:
    return coder.encode(v)


def rvq_decode(indices, coder: RVQCoder) -> np.ndarray:
    return coder.decode(indices)


def _with_zero_entry(cb: Codebook, x: np.ndarray) -> Codebook:
    # a zero entry lets every stage keep the incoming residual unchanged
    entries = cb.entries.copy()
    if np.any(np.all(entries == 0, axis=1)):
        return cb
    labels, _ = nearest(x, entries.astype(np.float64))
    counts = np.bincount(labels, minlength=len(entries))
    entries[int(np.argmin(counts))] = 0.0
    return Codebook(entries, cb.trained_on, cb.history)


def train_rvq(vectors, stages: int = 2, N: int = 1024, seed=0, max_iters: int = 100, tol: float = 1e-6) -> RVQCoder:
    """Train ``stages`` codebooks, each on the residual left by the ones before it."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("need a non-empty (n, D) array of training vectors")
    if stages < 1:
        raise ValueError("stages must be >= 1")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = ss.spawn(stages)
    books = []
    residual = x.copy()
    for s in range(stages):
        cb = train_kmeans(residual, N, max_iters, tol, np.random.default_rng(seeds[s]))
        cb = _with_zero_entry(cb, residual)
        books.append(cb)
        idx, _ = nearest(residual, cb.entries.astype(np.float64))
        residual = residual - cb.entries.astype(np.float64)[idx]
    return RVQCoder(books)


def rvq_to_bytes(coder: RVQCoder) -> bytes:
    head = _SCQB_HEADER.pack(SCQB_MAGIC, SCQB_VERSION, coder.num_stages, coder.size, coder.dim)
    body = b"".join(cb.entries.astype("<f4").tobytes() for cb in coder.stages)
    return head + body


def rvq_from_bytes(buf: bytes, offset: int = 0) -> tuple[RVQCoder, int]:
    """Parse one SCQB record at ``offset``; returns the coder and the end offset."""
    if len(buf) - offset < _SCQB_HEADER.size:
        raise ValueError("truncated SCQB header")
    magic, version, n_stages, N, D = _SCQB_HEADER.unpack_from(buf, offset)
    if magic != SCQB_MAGIC:
        raise ValueError(f"bad codebook magic {magic!r}")
    if version != SCQB_VERSION:
        raise ValueError(f"unsupported codebook version {version}")
    pos = offset + _SCQB_HEADER.size
    need = n_stages * N * D * 4
    if len(buf) - pos < need:
        raise ValueError("truncated SCQB entries")
    data = np.frombuffer(buf, dtype="<f4", count=n_stages * N * D, offset=pos).reshape(n_stages, N, D)
    return RVQCoder([Codebook(data[s].copy()) for s in range(n_stages)]), pos + need


def save_codebook(path, coder: RVQCoder) -> None:
    with open(path, "wb") as fh:
        fh.write(rvq_to_bytes(coder))


def load_codebook(path) -> RVQCoder:
    with open(path, "rb") as fh:
        buf = fh.read()
    coder, end = rvq_from_bytes(buf)
    if end != len(buf):
        raise ValueError("trailing bytes after SCQB record")
    return coder
