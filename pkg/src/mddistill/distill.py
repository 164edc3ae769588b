"""Outer distillation loop: unroll student heads on the synthetic set, match expert
trajectories, and update the synthetic pairs, soft labels and inner learning rates."""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tape as T
from ._binio import Reader, f64le, write_atomic
from .blend import BlendConfig, noise_perturb, rep_blend
from .buffer import sample_segment
from .data import PairedEmbeddingSet
from .errors import ContractError, DegenerateBufferError, DegenerateSegmentError, FormatError
from .losses import LossConfig, SoftLabelMatrix, contrastive_loss, label_block, matching_components, matching_loss_symmetric, matching_loss_asymmetric
from .metrics import intra_modal_sim, modality_gap, probe_batch, update_norms
from .model import NORM_EPS, project, sgd_step_head, similarity_matrix
from .train import ASYMMETRIC, Architecture, embed_arrays

log = logging.getLogger(__name__)

LR_FLOOR = 1e-6
MAX_SEGMENT_RETRIES = 20
LOG_COLUMNS = (
    "iteration", "loss", "sim_img", "sim_txt", "gap", "lr_img", "lr_txt",
    "match_img", "match_txt", "upd_img", "upd_txt", "diag_min",
)


@dataclass
class SyntheticDataset:
    img_reps: np.ndarray
    txt_reps: np.ndarray
    labels: SoftLabelMatrix
    lr_img: float
    lr_txt: float

    def __post_init__(self):
        if self.img_reps.shape[0] != self.txt_reps.shape[0]:
            raise ContractError("synthetic image and text counts differ")
        if self.labels.n != self.img_reps.shape[0]:
            raise ContractError(f"soft labels cover {self.labels.n} pairs, synthetic set has {self.img_reps.shape[0]}")

    def __len__(self):
        return self.img_reps.shape[0]

    def copy(self) -> "SyntheticDataset":
        return SyntheticDataset(
            self.img_reps.copy(), self.txt_reps.copy(), self.labels.copy(), self.lr_img, self.lr_txt
        )

    def as_pairs(self) -> PairedEmbeddingSet:
        return PairedEmbeddingSet(self.img_reps, self.txt_reps, "synthetic")

    def __eq__(self, other):
        if not isinstance(other, SyntheticDataset):
            return NotImplemented
        return (
            np.array_equal(self.img_reps, other.img_reps)
            and np.array_equal(self.txt_reps, other.txt_reps)
            and self.labels.mode == other.labels.mode
            and self.labels.alpha == other.labels.alpha
            and all(np.array_equal(a, b) for a, b in zip(self.labels.arrays(), other.labels.arrays()))
            and self.lr_img == other.lr_img
            and self.lr_txt == other.lr_txt
        )


@dataclass
class DistillConfig:
    iterations: int = 2000
    syn_steps: int = 8
    expert_epochs: int = 1
    max_start_epoch: int = 2
    mini_batch_size: int = 20
    n_syn: int = 20
    lr_img_data: float = 100.0
    lr_txt_data: float = 100.0
    lr_sim: float = 10.0
    lr_lr: float = 1e-2
    momentum: float = 0.5
    lr_teacher: float = 0.1
    label_mode: str = "lowrank"
    sim_rank: int = 10
    sim_alpha: float = 3.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    blend: BlendConfig = field(default_factory=BlendConfig)
    precision: str = "f64"
    # Gaussian perturbation of text reps inside the inner loop (0 disables)
    noise_lambda: float = 0.0

    def __post_init__(self):
        if self.syn_steps < 0 or self.iterations < 0:
            raise ContractError("syn_steps and iterations must be non-negative")
        if self.expert_epochs < 1:
            raise ContractError(f"expert_epochs must be >= 1, got {self.expert_epochs}")
        if self.max_start_epoch < 0:
            raise ContractError("max_start_epoch must be >= 0")
        if not 1 <= self.mini_batch_size <= self.n_syn:
            raise ContractError(
                f"mini_batch_size must lie in [1, n_syn={self.n_syn}], got {self.mini_batch_size}"
            )
        if not self.lr_teacher > 0:
            raise ContractError("lr_teacher must be > 0")
        if self.precision not in T.DTYPES:
            raise ContractError(f"precision must be one of {sorted(T.DTYPES)}, got {self.precision!r}")
        if self.label_mode not in ("dense", "lowrank"):
            raise ContractError(f"unknown soft-label mode {self.label_mode!r}")
        if not 0.0 <= self.noise_lambda <= 1.0:
            raise ContractError(f"noise_lambda must lie in [0, 1], got {self.noise_lambda}")

    @property
    def dtype(self):
        return T.DTYPES[self.precision]


def init_synthetic(
    real: PairedEmbeddingSet,
    n: int,
    rng: np.random.Generator,
    lr_img: float = 0.1,
    lr_txt: float | None = None,
    label_mode: str = "lowrank",
    rank: int = 10,
    alpha: float = 1.0,
) -> SyntheticDataset:
    """n distinct random real pairs with identity soft labels and teacher learning rates."""
    if n > len(real):
        raise ContractError(f"init_synthetic: asked for {n} pairs from a dataset of {len(real)}")
    if n < 1:
        raise ContractError("init_synthetic: n must be >= 1")
    idx = rng.choice(len(real), size=n, replace=False)
    labels = SoftLabelMatrix.identity(n, label_mode, rank=min(rank, n), alpha=alpha, rng=rng)
    return SyntheticDataset(
        np.array(real.img_reps[idx], dtype=np.float64),
        np.array(real.txt_reps[idx], dtype=np.float64),
        labels,
        float(lr_img),
        float(lr_img if lr_txt is None else lr_txt),
    )


@dataclass
class SynNodes:
    """The learnable synthetic fields as leaves on one tape."""

    img: T.GradMatrix
    txt: T.GradMatrix
    labels: list
    lr_img: T.GradMatrix
    lr_txt: T.GradMatrix

    @classmethod
    def on(cls, syn: SyntheticDataset, tape: T.Tape) -> "SynNodes":
        return cls(
            tape.leaf(syn.img_reps),
            tape.leaf(syn.txt_reps),
            [tape.leaf(a) for a in syn.labels.arrays()],
            tape.scalar(syn.lr_img, requires_grad=True),
            tape.scalar(syn.lr_txt, requires_grad=True),
        )

    def leaves(self) -> list:
        return [self.img, self.txt, *self.labels, self.lr_img, self.lr_txt]


def unroll_on_tape(
    arch: Architecture,
    nodes: SynNodes,
    labels: SoftLabelMatrix,
    start: tuple,
    t_steps: int,
    batch_size: int,
    loss_cfg: LossConfig,
    blend: BlendConfig,
    rng: np.random.Generator,
    lam=None,
    noise_lambda: float = 0.0,
):
    """Differentiable inner SGD; returns the student (image branch, text head) as tape nodes.

    Each sweep shuffles the synthetic set and walks it in contiguous batches.
    ``lam`` forces the blending coefficient. ``noise_lambda`` mixes Gaussian
    noise into the text reps of every batch before blending.
    """
    tape = nodes.img.tape
    img_b = start[0].on(tape, True)
    txt_b = start[1].on(tape, True)
    n = nodes.img.rows
    for _ in range(t_steps):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            feats = arch.img_pre(img_b, T.take_rows(nodes.img, idx))
            txt = T.take_rows(nodes.txt, idx)
            if noise_lambda > 0:
                txt = noise_perturb(txt, noise_lambda, rng)
            if blend.enabled:
                feats, txt = rep_blend(feats, txt, blend, rng, lam=lam)
            ie = T.row_normalize(arch.img_post(img_b, feats), NORM_EPS)
            te = T.row_normalize(project(txt_b, txt), NORM_EPS)
            targets = label_block(labels, nodes.labels, idx)
            loss = contrastive_loss(similarity_matrix(ie, te), targets, loss_cfg)
            img_params, txt_params = img_b.params(), txt_b.params()
            grads = tape.grad(loss, img_params + txt_params, create_graph=True)
            k = len(img_params)
            img_b = sgd_step_head(img_b, grads[:k], nodes.lr_img)
            txt_b = sgd_step_head(txt_b, grads[k:], nodes.lr_txt)
    return img_b, txt_b


def inner_unroll(
    syn: SyntheticDataset,
    start: tuple,
    t_steps: int,
    blend: BlendConfig,
    rng: np.random.Generator,
    arch: Architecture | None = None,
    loss_cfg: LossConfig | None = None,
    batch_size: int | None = None,
    dtype=np.float64,
    lam=None,
):
    """Run the inner loop off any outer graph and return plain (image branch, text head)."""
    if t_steps == 0:
        return start[0].numpy(), start[1].numpy()
    arch = arch or Architecture.build(d_img=syn.img_reps.shape[1], d_txt=syn.txt_reps.shape[1], d_emb=start[1].d_emb)
    tape = T.Tape(dtype)
    nodes = SynNodes.on(syn, tape)
    img_b, txt_b = unroll_on_tape(
        arch, nodes, syn.labels, start, t_steps, batch_size or len(syn),
        loss_cfg or LossConfig(), blend, rng, lam=lam,
    )
    return img_b.numpy(), txt_b.numpy()


def _match(arch, student, segment):
    fn = matching_loss_asymmetric if arch.mode == ASYMMETRIC else matching_loss_symmetric
    return fn(student[0], student[1], segment.end[0], segment.end[1], segment.start[0], segment.start[1])


def matching_objective(syn, segment, cfg: DistillConfig, arch: Architecture, rng, tape=None):
    """Build the full graph for one segment; returns (loss node, syn nodes, student nodes)."""
    tape = tape or T.Tape(cfg.dtype)
    nodes = SynNodes.on(syn, tape)
    student = unroll_on_tape(
        arch, nodes, syn.labels, segment.start, cfg.syn_steps, cfg.mini_batch_size,
        cfg.loss, cfg.blend, rng, noise_lambda=cfg.noise_lambda,
    )
    return _match(arch, student, segment), nodes, student


@dataclass
class OuterState:
    """Momentum buffers for every learnable synthetic field."""

    velocity: list | None = None

    def step(self, params: list, grads: list, lrs: list, momentum: float) -> list:
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        out = []
        for i, (p, g, lr) in enumerate(zip(params, grads, lrs)):
            self.velocity[i] = momentum * self.velocity[i] + g
            out.append(p - lr * self.velocity[i])
        return out


def _fields(syn: SyntheticDataset) -> list:
    return [syn.img_reps, syn.txt_reps, *syn.labels.arrays(), np.array([[syn.lr_img]]), np.array([[syn.lr_txt]])]


def _field_lrs(syn: SyntheticDataset, cfg: DistillConfig) -> list:
    n_label = len(syn.labels.arrays())
    return [cfg.lr_img_data, cfg.lr_txt_data, *[cfg.lr_sim] * n_label, cfg.lr_lr, cfg.lr_lr]


def _rebuild(syn: SyntheticDataset, fields: list) -> SyntheticDataset:
    n_label = len(syn.labels.arrays())
    labels = syn.labels.with_arrays(fields[2 : 2 + n_label])
    if labels.mode == "dense":
        labels.dense = np.clip(labels.dense, 0.0, 1.0)
    return SyntheticDataset(
        np.asarray(fields[0], dtype=np.float64),
        np.asarray(fields[1], dtype=np.float64),
        labels,
        max(float(fields[-2][0, 0]), LR_FLOOR),
        max(float(fields[-1][0, 0]), LR_FLOOR),
    )


@dataclass
class StepResult:
    loss: float
    syn: SyntheticDataset
    segment: object
    student: tuple  # plain (image branch, text head) at the end of the unroll


def distill_step(
    syn: SyntheticDataset,
    buffer: list,
    cfg: DistillConfig,
    state: OuterState,
    rng: np.random.Generator,
    arch: Architecture,
) -> StepResult:
    """Sample a segment, unroll, match, and take one momentum-SGD step on every synthetic field."""
    for _ in range(MAX_SEGMENT_RETRIES):
        segment = sample_segment(buffer, cfg.max_start_epoch, cfg.expert_epochs, rng)
        tape = T.Tape(cfg.dtype)
        try:
            loss, nodes, student = matching_objective(syn, segment, cfg, arch, rng, tape)
        except DegenerateSegmentError:
            continue
        break
    else:
        raise DegenerateBufferError(f"no usable segment after {MAX_SEGMENT_RETRIES} draws")
    grads = tape.backward(loss)
    field_grads = [np.asarray(grads[n], dtype=np.float64) for n in nodes.leaves()]
    new_fields = state.step(_fields(syn), field_grads, _field_lrs(syn, cfg), cfg.momentum)
    return StepResult(loss.item(), _rebuild(syn, new_fields), segment, (student[0].numpy(), student[1].numpy()))


def _log_row(it, result, arch, probes, beta):
    syn = result.syn
    img_end, txt_end = result.student
    seg = result.segment
    ie, te = embed_arrays(arch, img_end, txt_end, syn.img_reps, syn.txt_reps)
    m_img, m_txt = matching_components(img_end, txt_end, seg.end[0], seg.end[1], seg.start[0], seg.start[1])
    u_img, u_txt = update_norms(
        (seg.start[0], seg.start[1]), (img_end, txt_end), probe_embedders(arch), probes
    )
    diag_min = float(np.min(np.diag(syn.labels.materialize())))
    if diag_min < beta:
        log.warning("iteration %d: soft-label diagonal fell to %.4f, below beta=%.2f", it, diag_min, beta)
    return {
        "iteration": it,
        "loss": result.loss,
        "sim_img": intra_modal_sim(ie),
        "sim_txt": intra_modal_sim(te),
        "gap": modality_gap(ie, te),
        "lr_img": syn.lr_img,
        "lr_txt": syn.lr_txt,
        "match_img": m_img,
        "match_txt": m_txt,
        "upd_img": u_img,
        "upd_txt": u_txt,
        "diag_min": diag_min,
    }


def probe_embedders(arch: Architecture):
    """(image, text) functions giving un-normalized branch outputs on a probe batch."""

    def img_fn(branch, probe):
        tape = T.Tape(np.float64)
        return arch.img_unnormalized(branch.on(tape), tape.const(probe)).value

    def txt_fn(head, probe):
        tape = T.Tape(np.float64)
        return project(head.on(tape), tape.const(probe)).value

    return img_fn, txt_fn


def run_distillation(
    cfg: DistillConfig,
    real: PairedEmbeddingSet,
    buffer: list,
    arch: Architecture | None = None,
    on_step=None,
):
    """Iterate distill_step ``cfg.iterations`` times; returns (final synthetic set, log rows).

    ``on_step(result)`` sees every StepResult.
    """
    if not buffer:
        raise ContractError("run_distillation: empty buffer")
    arch = arch or Architecture.build(d_img=real.d_img, d_txt=real.d_txt, d_emb=buffer[0].d_emb)
    rng = np.random.default_rng(cfg.seed)
    syn = init_synthetic(
        real, cfg.n_syn, rng, cfg.lr_teacher, cfg.lr_teacher, cfg.label_mode, cfg.sim_rank, cfg.sim_alpha
    )
    probes = probe_batch(real.d_img, real.d_txt)
    state = OuterState()
    rows = []
    for it in range(cfg.iterations):
        result = distill_step(syn, buffer, cfg, state, rng, arch)
        rows.append(_log_row(it, result, arch, probes, cfg.loss.beta))
        syn = result.syn
        if on_step is not None:
            on_step(result)
    return syn, rows


def log_to_csv(rows: list) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


# -- file format ---------------------------------------------------------------

SYN_MAGIC = b"MDDS"
SYN_VERSION = 1
_SYN_HEADER = "<4sHQQQBQd"
_LABEL_CODES = {"dense": 0, "lowrank": 1}


def synthetic_to_bytes(syn: SyntheticDataset) -> bytes:
    n, d_img = syn.img_reps.shape
    d_txt = syn.txt_reps.shape[1]
    labels = syn.labels
    header = struct.pack(
        _SYN_HEADER, SYN_MAGIC, SYN_VERSION, n, d_img, d_txt,
        _LABEL_CODES[labels.mode], labels.rank, labels.alpha,
    )
    parts = [header, f64le(syn.img_reps), f64le(syn.txt_reps)]
    parts += [f64le(a) for a in labels.arrays()]
    parts.append(f64le(np.array([syn.lr_img, syn.lr_txt])))
    return b"".join(parts)


def save_synthetic(syn: SyntheticDataset, path) -> None:
    """Magic 'MDDS', u16 version, u64 n, u64 d_img, u64 d_txt, u8 label mode,
    u64 rank, f64 alpha, then reps, label payload and the two lrs as f64 LE."""
    write_atomic(path, synthetic_to_bytes(syn))


def synthetic_from_bytes(buf: bytes) -> SyntheticDataset:
    r = Reader(buf, "synthetic file")
    r.magic(SYN_MAGIC)
    version = r.unpack("<H")
    if version != SYN_VERSION:
        raise FormatError(f"synthetic file: unsupported version {version}", 4)
    n, d_img, d_txt, code, rank, alpha = r.unpack("<QQQBQd")
    modes = {v: k for k, v in _LABEL_CODES.items()}
    if code not in modes:
        raise FormatError(f"synthetic file: unknown label mode {code}", 30)
    mode = modes[code]
    label_shapes = [(n, n)] if mode == "dense" else [(n, rank), (n, rank)]
    floats = n * (d_img + d_txt) + sum(a * b for a, b in label_shapes) + 2
    expected = struct.calcsize(_SYN_HEADER) + 8 * floats
    if len(buf) != expected:
        raise FormatError(
            f"synthetic file: header implies {expected} bytes but file has {len(buf)}",
            min(len(buf), expected),
        )
    img = r.array((n, d_img))
    txt = r.array((n, d_txt))
    arrays = [r.array(s) for s in label_shapes]
    lr_img, lr_txt = r.array((2,))
    r.finish()
    if mode == "dense":
        labels = SoftLabelMatrix("dense", dense=arrays[0])
    else:
        labels = SoftLabelMatrix("lowrank", u=arrays[0], v=arrays[1], alpha=alpha)
    return SyntheticDataset(img, txt, labels, float(lr_img), float(lr_txt))


def load_synthetic(path) -> SyntheticDataset:
    return synthetic_from_bytes(Path(path).read_bytes())
