"""Toy paired embeddings and the embedding-dump file format."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binio import Reader, write_atomic
from .errors import ContractError, FormatError

EMB_MAGIC = b"MDDE"
EMB_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class PairedEmbeddingSet:
    """Index-matched image and text representations."""

    img_reps: np.ndarray
    txt_reps: np.ndarray
    split: str = "train"
    cluster_ids: np.ndarray | None = field(default=None, repr=False, compare=False)
    anchors: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.img_reps.ndim != 2 or self.txt_reps.ndim != 2:
            raise ContractError("representations must be 2-D")
        if self.img_reps.shape[0] != self.txt_reps.shape[0]:
            raise ContractError(
                f"row counts differ: {self.img_reps.shape[0]} images vs {self.txt_reps.shape[0]} texts"
            )
        if not (np.all(np.isfinite(self.img_reps)) and np.all(np.isfinite(self.txt_reps))):
            raise ContractError("representations contain non-finite entries")

    def __len__(self):
        return self.img_reps.shape[0]

    @property
    def d_img(self) -> int:
        return self.img_reps.shape[1]

    @property
    def d_txt(self) -> int:
        return self.txt_reps.shape[1]

    def subset(self, idx) -> "PairedEmbeddingSet":
        idx = np.asarray(idx, dtype=np.intp)
        ids = None if self.cluster_ids is None else self.cluster_ids[idx]
        return PairedEmbeddingSet(self.img_reps[idx], self.txt_reps[idx], self.split, ids, self.anchors)

    def fingerprint(self) -> bytes:
        """SHA-256 over shapes and f64 little-endian contents."""
        h = hashlib.sha256()
        h.update(struct.pack("<QII", len(self), self.d_img, self.d_txt))
        h.update(np.ascontiguousarray(self.img_reps, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.txt_reps, dtype="<f8").tobytes())
        return h.digest()


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def gen_toy_dataset(
    n: int,
    d: int,
    clusters: int,
    intra_noise: float,
    cross_noise: float,
    seed: int,
) -> PairedEmbeddingSet:
    """Clustered pairs: image = anchor + noise, text = rotated anchor + noise.

    Anchors are unit vectors; every anchor is used when n >= clusters. The
    rotation is a fixed seeded orthogonal map standing in for the gap between
    modality-specific encoders.
    """
    if clusters < 1 or clusters > n:
        raise ContractError(f"need 1 <= clusters <= n, got clusters={clusters}, n={n}")
    if d < 2:
        raise ContractError(f"need d >= 2, got {d}")
    if intra_noise < 0 or cross_noise < 0:
        raise ContractError("noise levels must be non-negative")
    rng = np.random.default_rng(seed)
    anchors = rng.standard_normal((clusters, d))
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
    rot = random_rotation(d, rng)
    ids = rng.permutation(np.arange(n) % clusters)
    img = anchors[ids] + intra_noise * rng.standard_normal((n, d))
    txt = anchors[ids] @ rot + cross_noise * rng.standard_normal((n, d))
    return PairedEmbeddingSet(img, txt, "train", ids, anchors)


def split(data: PairedEmbeddingSet, train_frac: float, seed: int):
    """Seeded disjoint partition into (train, test) that keeps pairs together."""
    if not 0 < train_frac < 1:
        raise ContractError(f"train_frac must lie in (0, 1), got {train_frac}")
    n = len(data)
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(n * train_frac))
    train = data.subset(perm[:k])
    test = data.subset(perm[k:])
    train.split, test.split = "train", "test"
    return train, test


def toy_benchmark(
    n_train=2000, n_test=500, d=32, clusters=20, intra_noise=0.3, cross_noise=0.1, seed=7
):
    """The canonical desk-scale benchmark: 2000 train / 500 test pairs in 32-d."""
    full = gen_toy_dataset(n_train + n_test, d, clusters, intra_noise, cross_noise, seed)
    return split(full, n_train / (n_train + n_test), seed)


# -- embedding files -----------------------------------------------------------

_HEADER = "<4sHQIIB"


def embeddings_to_bytes(data: PairedEmbeddingSet, dtype="f64") -> bytes:
    code = {"f32": 0, "f64": 1}[dtype]
    dt = _DTYPE_CODES[code]
    header = struct.pack(_HEADER, EMB_MAGIC, EMB_VERSION, len(data), data.d_img, data.d_txt, code)
    return (
        header
        + np.ascontiguousarray(data.img_reps, dtype=dt).tobytes()
        + np.ascontiguousarray(data.txt_reps, dtype=dt).tobytes()
    )


def save_embeddings(data: PairedEmbeddingSet, path, dtype="f64") -> None:
    """Write magic 'MDDE', u16 version, u64 n, u32 d_img, u32 d_txt, u8 dtype, payload."""
    write_atomic(path, embeddings_to_bytes(data, dtype))


def embeddings_from_bytes(buf: bytes, split_tag="train") -> PairedEmbeddingSet:
    r = Reader(buf, "embedding file")
    r.magic(EMB_MAGIC)
    version = r.unpack("<H")
    if version != EMB_VERSION:
        raise FormatError(f"embedding file: unsupported version {version}", 4)
    n, d_img, d_txt, code = r.unpack("<QIIB")
    if code not in _DTYPE_CODES:
        raise FormatError(f"embedding file: unknown dtype code {code}", r.pos - 1)
    dt = _DTYPE_CODES[code]
    expected = struct.calcsize(_HEADER) + n * (d_img + d_txt) * dt.itemsize
    if len(buf) != expected:
        raise FormatError(
            f"embedding file: header implies {expected} bytes but file has {len(buf)}",
            min(len(buf), expected),
        )
    img = r.array((n, d_img), dt).astype(np.float64 if code == 1 else np.float32)
    txt = r.array((n, d_txt), dt).astype(img.dtype)
    r.finish()
    return PairedEmbeddingSet(img, txt, split_tag)


def load_embeddings(path, split_tag="train") -> PairedEmbeddingSet:
    return embeddings_from_bytes(Path(path).read_bytes(), split_tag)
