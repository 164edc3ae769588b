"""Expert trajectories: generation on real data, segment sampling, and the MDDT file."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binio import Reader, f64le, write_atomic
from .data import PairedEmbeddingSet
from .errors import ContractError, DegenerateBufferError, FormatError
from .losses import LossConfig
from .model import ProjectionHead, TrainableEncoder, head_size
from .train import ASYMMETRIC, Architecture, train_branches

TRAJ_MAGIC = b"MDDT"
# v1: head/head checkpoints. v2 appends the image-side kind and hidden width so
# encoder/head checkpoints (asymmetric diagnostic) fit in the same container.
TRAJ_VERSION_HEADS = 1
TRAJ_VERSION_ENCODER = 2
_HEADER_V1 = "<4sHQIIII32s"
_HEADER_V2_EXTRA = "<BI"
MAX_RESAMPLES = 1000


@dataclass
class ExpertTrajectory:
    """Per-epoch checkpoints of (image branch, text head); index 0 is the initialization."""

    checkpoints: list  # of (img_flat, txt_flat) float64 arrays
    seed: int
    epochs: int
    d_in_img: int
    d_in_txt: int
    d_emb: int
    fingerprint: bytes
    img_kind: str = "head"  # or "encoder"
    hidden: int = 0
    batch_size: int | None = field(default=None, compare=False)
    lr: float | None = field(default=None, compare=False)
    losses: list | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if len(self.checkpoints) != self.epochs + 1:
            raise ContractError(
                f"trajectory has {len(self.checkpoints)} checkpoints, expected epochs + 1 = {self.epochs + 1}"
            )

    def img(self, k: int):
        flat = self.checkpoints[k][0]
        if self.img_kind == "encoder":
            return TrainableEncoder.unflatten(flat, self.d_in_img, self.hidden, self.d_emb)
        return ProjectionHead.unflatten(flat, self.d_in_img, self.d_emb)

    def txt(self, k: int) -> ProjectionHead:
        return ProjectionHead.unflatten(self.checkpoints[k][1], self.d_in_txt, self.d_emb)

    def moved(self, t: int, m: int) -> bool:
        a, b = self.checkpoints[t], self.checkpoints[t + m]
        return bool(np.any(a[0] != b[0]) or np.any(a[1] != b[1]))

    def img_bytes(self) -> int:
        return 8 * self.checkpoints[0][0].size

    def txt_bytes(self) -> int:
        return 8 * self.checkpoints[0][1].size

    def checkpoint_bytes(self) -> int:
        return self.img_bytes() + self.txt_bytes()

    def __eq__(self, other):
        if not isinstance(other, ExpertTrajectory):
            return NotImplemented
        same_meta = (
            (self.seed, self.epochs, self.d_in_img, self.d_in_txt, self.d_emb, self.fingerprint, self.img_kind, self.hidden)
            == (other.seed, other.epochs, other.d_in_img, other.d_in_txt, other.d_emb, other.fingerprint, other.img_kind, other.hidden)
        )
        return same_meta and all(
            np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
            for a, b in zip(self.checkpoints, other.checkpoints)
        )


def _snapshot(img, txt):
    return (img.flatten(), txt.flatten())


def generate_trajectory(
    dataset: PairedEmbeddingSet,
    epochs: int,
    batch: int,
    lr: float,
    seed: int,
    arch: Architecture | None = None,
    loss_cfg: LossConfig | None = None,
    dtype=np.float64,
    lr_txt: float | None = None,
) -> ExpertTrajectory:
    """Train both branches on real pairs with identity labels, snapshotting every epoch."""
    if len(dataset) == 0:
        raise ContractError("generate_trajectory: dataset is empty")
    if epochs < 1:
        raise ContractError(f"generate_trajectory: epochs must be >= 1, got {epochs}")
    arch = arch or Architecture.build(d_img=dataset.d_img, d_txt=dataset.d_txt)
    loss_cfg = loss_cfg or LossConfig()
    lr_txt = lr if lr_txt is None else lr_txt
    rng = np.random.default_rng(seed)
    img, txt = arch.init_branches(rng)
    checkpoints = [_snapshot(img, txt)]
    losses = []

    def record(k, img_b, txt_b, mean_loss):
        checkpoints.append(_snapshot(img_b, txt_b))
        losses.append(mean_loss)

    train_branches(
        arch, img, txt, dataset.img_reps, dataset.txt_reps, None, epochs, batch, lr, lr_txt,
        loss_cfg, rng, dtype=dtype, on_epoch=record,
    )
    encoder = arch.mode == ASYMMETRIC
    return ExpertTrajectory(
        checkpoints=checkpoints,
        seed=seed,
        epochs=epochs,
        d_in_img=arch.d_img if encoder else arch.img_feature_dim,
        d_in_txt=arch.d_txt,
        d_emb=arch.d_emb,
        fingerprint=dataset.fingerprint(),
        img_kind="encoder" if encoder else "head",
        hidden=arch.encoder.hidden if encoder else 0,
        batch_size=batch,
        lr=lr,
        losses=losses,
    )


@dataclass
class Segment:
    start: tuple  # (img branch, txt head) at epoch t
    end: tuple  # at epoch t + m
    trajectory: int
    t: int


def sample_segment(trajs: list, max_start: int, m: int, rng: np.random.Generator) -> Segment:
    """Uniform trajectory and uniform start t in [0, max_start]; never a zero-movement segment."""
    if not trajs:
        raise ContractError("sample_segment: no trajectories")
    if m < 1 or max_start < 0:
        raise ContractError(f"sample_segment: need m >= 1 and max_start >= 0, got m={m}, max_start={max_start}")
    for i, tr in enumerate(trajs):
        if len(tr.checkpoints) < max_start + m + 1:
            raise ContractError(
                f"trajectory {i} has {len(tr.checkpoints)} checkpoints; need max_start + m + 1 = {max_start + m + 1}"
            )
    if not any(tr.moved(t, m) for tr in trajs for t in range(max_start + 1)):
        raise DegenerateBufferError("every candidate segment has zero expert movement")
    for _ in range(MAX_RESAMPLES):
        i = int(rng.integers(len(trajs)))
        t = int(rng.integers(max_start + 1))
        tr = trajs[i]
        if tr.moved(t, m):
            return Segment((tr.img(t), tr.txt(t)), (tr.img(t + m), tr.txt(t + m)), i, t)
    raise DegenerateBufferError(f"no moving segment found in {MAX_RESAMPLES} draws")


# -- file format ---------------------------------------------------------------


def trajectory_to_bytes(traj: ExpertTrajectory) -> bytes:
    version = TRAJ_VERSION_ENCODER if traj.img_kind == "encoder" else TRAJ_VERSION_HEADS
    parts = [
        struct.pack(
            _HEADER_V1, TRAJ_MAGIC, version, traj.seed, traj.epochs,
            traj.d_in_img, traj.d_in_txt, traj.d_emb, traj.fingerprint,
        )
    ]
    if version == TRAJ_VERSION_ENCODER:
        parts.append(struct.pack(_HEADER_V2_EXTRA, 1, traj.hidden))
    for img_flat, txt_flat in traj.checkpoints:
        parts.append(f64le(img_flat))
        parts.append(f64le(txt_flat))
    return b"".join(parts)


def header_size(version: int = TRAJ_VERSION_HEADS) -> int:
    size = struct.calcsize(_HEADER_V1)
    if version == TRAJ_VERSION_ENCODER:
        size += struct.calcsize(_HEADER_V2_EXTRA)
    return size


def save_trajectory(traj: ExpertTrajectory, path) -> None:
    """Magic 'MDDT', u16 version, u64 seed, u32 epochs, u32 d_in_img, u32 d_in_txt,
    u32 d_emb, 32-byte fingerprint, then f64 LE checkpoints (img weight | img bias |
    txt weight | txt bias), written atomically."""
    write_atomic(path, trajectory_to_bytes(traj))


def trajectory_from_bytes(buf: bytes) -> ExpertTrajectory:
    r = Reader(buf, "trajectory file")
    r.magic(TRAJ_MAGIC)
    version = r.unpack("<H")
    if version not in (TRAJ_VERSION_HEADS, TRAJ_VERSION_ENCODER):
        raise FormatError(f"trajectory file: unsupported version {version}", 4)
    seed, epochs, d_in_img, d_in_txt, d_emb, fingerprint = r.unpack("<QIIII32s")
    img_kind, hidden = "head", 0
    if version == TRAJ_VERSION_ENCODER:
        kind_code, hidden = r.unpack(_HEADER_V2_EXTRA)
        if kind_code != 1:
            raise FormatError(f"trajectory file: unknown image-side kind {kind_code}", r.pos - 5)
        img_kind = "encoder"
    if img_kind == "encoder":
        img_size = d_in_img * hidden + hidden * d_emb
    else:
        img_size = head_size(d_in_img, d_emb)
    txt_size = head_size(d_in_txt, d_emb)
    expected = r.pos + (epochs + 1) * 8 * (img_size + txt_size)
    if len(buf) != expected:
        raise FormatError(
            f"trajectory file: header implies {expected} bytes but file has {len(buf)}",
            min(len(buf), expected),
        )
    checkpoints = []
    for _ in range(epochs + 1):
        checkpoints.append((r.array((img_size,)), r.array((txt_size,))))
    r.finish()
    return ExpertTrajectory(
        checkpoints, seed, epochs, d_in_img, d_in_txt, d_emb, fingerprint, img_kind, hidden
    )


def load_trajectory(path) -> ExpertTrajectory:
    return trajectory_from_bytes(Path(path).read_bytes())
