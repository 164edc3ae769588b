"""Frozen encoders, per-modality projection heads and the cross-modal similarity."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tape as T
from .errors import DimensionError, FormatError, StateError

NORM_EPS = 1e-8


@dataclass
class ProjectionHead:
    """Linear map ``reps @ weight + bias``. ``weight`` is d_in x d_emb, ``bias`` 1 x d_emb.

    Fields hold either numpy arrays (a stored checkpoint) or tape nodes (a head
    being trained inside an unrolled loop).
    """

    weight: object
    bias: object

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_emb(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, d_in: int, d_emb: int, rng: np.random.Generator) -> "ProjectionHead":
        w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_emb))
        return cls(w, np.zeros((1, d_emb)))

    @classmethod
    def identity(cls, d: int) -> "ProjectionHead":
        return cls(np.eye(d), np.zeros((1, d)))

    def numpy(self) -> "ProjectionHead":
        return ProjectionHead(_arr(self.weight), _arr(self.bias))

    def on(self, tape: T.Tape, requires_grad=False) -> "ProjectionHead":
        return ProjectionHead(
            tape.leaf(_arr(self.weight), requires_grad), tape.leaf(_arr(self.bias), requires_grad)
        )

    def params(self) -> list:
        return [self.weight, self.bias]

    def flatten(self) -> np.ndarray:
        return np.concatenate([_arr(self.weight).ravel(), _arr(self.bias).ravel()]).astype(np.float64)

    @classmethod
    def unflatten(cls, flat: np.ndarray, d_in: int, d_emb: int) -> "ProjectionHead":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != head_size(d_in, d_emb):
            raise DimensionError(f"flat head has {flat.size} entries, expected {head_size(d_in, d_emb)}")
        k = d_in * d_emb
        return cls(flat[:k].reshape(d_in, d_emb).copy(), flat[k:].reshape(1, d_emb).copy())

    def to_bytes(self) -> bytes:
        """Dims (u32 d_in, u32 d_emb) then weight row-major and bias as f64 LE."""
        return struct.pack("<II", self.d_in, self.d_emb) + self.flatten().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ProjectionHead":
        if len(buf) < 8:
            raise FormatError("head record shorter than its 8-byte dims prefix", 0)
        d_in, d_emb = struct.unpack_from("<II", buf, 0)
        need = 8 + 8 * head_size(d_in, d_emb)
        if len(buf) != need:
            raise FormatError(f"head record is {len(buf)} bytes, expected {need}", min(len(buf), need))
        flat = np.frombuffer(buf, dtype="<f8", offset=8).astype(np.float64)
        return cls.unflatten(flat, d_in, d_emb)


def head_size(d_in: int, d_emb: int) -> int:
    return d_in * d_emb + d_emb


@dataclass
class TrainableEncoder:
    """Two-layer tanh MLP whose weights are trained.

    Stands in for a fine-tuned image encoder when matching encoder trajectories
    (the asymmetric diagnostic); output goes straight to normalization.
    """

    w1: object
    w2: object

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def d_emb(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def from_frozen(cls, enc: "FrozenEncoder") -> "TrainableEncoder":
        return cls(enc.w1.copy(), enc.w2.copy())

    def numpy(self) -> "TrainableEncoder":
        return TrainableEncoder(_arr(self.w1), _arr(self.w2))

    def on(self, tape: T.Tape, requires_grad=False) -> "TrainableEncoder":
        return TrainableEncoder(
            tape.leaf(_arr(self.w1), requires_grad), tape.leaf(_arr(self.w2), requires_grad)
        )

    def params(self) -> list:
        return [self.w1, self.w2]

    def flatten(self) -> np.ndarray:
        return np.concatenate([_arr(self.w1).ravel(), _arr(self.w2).ravel()]).astype(np.float64)

    @classmethod
    def unflatten(cls, flat, d_in: int, hidden: int, d_emb: int) -> "TrainableEncoder":
        flat = np.asarray(flat, dtype=np.float64)
        k = d_in * hidden
        if flat.size != k + hidden * d_emb:
            raise DimensionError(f"flat encoder has {flat.size} entries, expected {k + hidden * d_emb}")
        return cls(flat[:k].reshape(d_in, hidden).copy(), flat[k:].reshape(hidden, d_emb).copy())


@dataclass
class FrozenEncoder:
    """``identity`` or ``fixed-mlp``: tanh(reps @ w1) @ w2 with seeded, untrained weights."""

    kind: str
    d_in: int
    d_out: int
    w1: np.ndarray | None = None
    w2: np.ndarray | None = None

    @classmethod
    def identity(cls, d: int) -> "FrozenEncoder":
        return cls("identity", d, d)

    @classmethod
    def fixed_mlp(cls, d_in: int, hidden: int, d_out: int, seed: int) -> "FrozenEncoder":
        rng = np.random.default_rng(seed)
        w1 = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, hidden))
        w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, d_out))
        return cls("fixed-mlp", d_in, d_out, w1, w2)

    @property
    def hidden(self) -> int:
        return 0 if self.w1 is None else self.w1.shape[1]

    def params(self) -> list:
        return [] if self.kind == "identity" else [self.w1, self.w2]


def encode(enc: FrozenEncoder, reps: T.GradMatrix) -> T.GradMatrix:
    if reps.cols != enc.d_in:
        raise DimensionError(f"encode: reps have {reps.cols} columns, encoder expects {enc.d_in}")
    if enc.kind == "identity":
        return reps
    tape = reps.tape
    return mlp_forward(reps, tape.const(enc.w1), tape.const(enc.w2))


def mlp_forward(reps: T.GradMatrix, w1: T.GradMatrix, w2: T.GradMatrix) -> T.GradMatrix:
    return T.matmul(T.tanh(T.matmul(reps, w1)), w2)


def project(head: ProjectionHead, reps: T.GradMatrix) -> T.GradMatrix:
    """Un-normalized head output ``reps @ weight + bias``."""
    if reps.cols != head.weight.shape[0]:
        raise DimensionError(
            f"embed: reps have {reps.cols} columns, head expects {head.weight.shape[0]}"
        )
    return T.add_row(T.matmul(reps, head.weight), head.bias)


def forward(branch, reps: T.GradMatrix) -> T.GradMatrix:
    """Un-normalized output of a head or a trainable encoder."""
    if isinstance(branch, TrainableEncoder):
        if reps.cols != branch.w1.shape[0]:
            raise DimensionError(f"encoder expects {branch.w1.shape[0]} columns, got {reps.cols}")
        return mlp_forward(reps, branch.w1, branch.w2)
    return project(branch, reps)


def embed(head, reps: T.GradMatrix, eps: float = NORM_EPS) -> T.GradMatrix:
    """Row-normalized head output; every non-degenerate row has unit norm."""
    return T.row_normalize(forward(head, reps), eps)


def similarity_matrix(img_emb: T.GradMatrix, txt_emb: T.GradMatrix) -> T.GradMatrix:
    if img_emb.cols != txt_emb.cols:
        raise DimensionError(
            f"similarity_matrix: embedding dims {img_emb.cols} and {txt_emb.cols} differ"
        )
    return T.matmul(img_emb, T.transpose(txt_emb))


def sgd_step(params: list, grads: list | None, lr: T.GradMatrix) -> list:
    """One plain SGD update ``p - lr * g`` recorded on the tape.

    ``grads`` come from ``Tape.grad(..., create_graph=True)`` over the inner
    loss, so the update stays differentiable in ``lr`` and in the data behind
    the gradient.
    """
    if grads is None or len(grads) != len(params):
        raise StateError("sgd_step: gradients are missing; run a backward pass over the inner loss first")
    out = []
    for p, g in zip(params, grads):
        if g is None or g.shape != p.shape:
            raise StateError("sgd_step: gradient missing or mismatched for a parameter")
        out.append(T.sub(p, T.scale(g, lr)))
    return out


def sgd_step_head(head, grads, lr: T.GradMatrix):
    """SGD on a head (or trainable encoder), returning the same type."""
    return type(head)(*sgd_step(head.params(), grads, lr))


def _arr(x) -> np.ndarray:
    return x.value if isinstance(x, T.GradMatrix) else np.asarray(x)
