"""Network layout shared by expert training, distillation and evaluation.

Two layouts exist. ``symmetric`` runs a frozen image encoder followed by a
trainable image projection head, and a trainable text head on raw text
representations. ``asymmetric`` has no image head: the image encoder itself is
trained and its output is normalized directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .losses import TARGET_HI, TARGET_LO, LossConfig, contrastive_loss
from .model import (
    NORM_EPS,
    FrozenEncoder,
    ProjectionHead,
    TrainableEncoder,
    encode,
    forward,
    project,
    similarity_matrix,
)

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"


@dataclass
class Architecture:
    mode: str
    d_img: int
    d_txt: int
    d_emb: int
    encoder: FrozenEncoder

    @classmethod
    def build(cls, mode=SYMMETRIC, d_img=32, d_txt=32, d_emb=64, encoder="identity", hidden=128, encoder_seed=0):
        if mode == ASYMMETRIC:
            # the trainable encoder starts from these fixed "pretrained" weights
            enc = FrozenEncoder.fixed_mlp(d_img, hidden, d_emb, encoder_seed)
        elif encoder == "identity":
            enc = FrozenEncoder.identity(d_img)
        elif encoder == "fixed-mlp":
            enc = FrozenEncoder.fixed_mlp(d_img, hidden, d_img, encoder_seed)
        else:
            raise ValueError(f"unknown encoder kind {encoder!r}")
        if mode not in (SYMMETRIC, ASYMMETRIC):
            raise ValueError(f"unknown matching mode {mode!r}")
        return cls(mode, d_img, d_txt, d_emb, enc)

    @property
    def img_feature_dim(self) -> int:
        return self.encoder.d_out

    def init_branches(self, rng: np.random.Generator):
        """Fresh (image branch, text head): heads random, encoder at its pretrained weights."""
        if self.mode == ASYMMETRIC:
            img = TrainableEncoder.from_frozen(self.encoder)
        else:
            img = ProjectionHead.init(self.img_feature_dim, self.d_emb, rng)
        txt = ProjectionHead.init(self.d_txt, self.d_emb, rng)
        return img, txt

    def img_pre(self, branch, reps: T.GradMatrix) -> T.GradMatrix:
        """Image representation before blending (encoder output)."""
        if self.mode == ASYMMETRIC:
            return forward(branch, reps)
        return encode(self.encoder, reps)

    def img_post(self, branch, feats: T.GradMatrix) -> T.GradMatrix:
        if self.mode == ASYMMETRIC:
            return feats
        return project(branch, feats)

    def img_embed(self, branch, reps: T.GradMatrix) -> T.GradMatrix:
        return T.row_normalize(self.img_post(branch, self.img_pre(branch, reps)), NORM_EPS)

    def img_unnormalized(self, branch, reps: T.GradMatrix) -> T.GradMatrix:
        return self.img_post(branch, self.img_pre(branch, reps))


def embed_arrays(arch: Architecture, img_branch, txt_branch, img_reps, txt_reps, dtype=np.float64):
    """Normalized embeddings of plain arrays, computed off-tape."""
    tape = T.Tape(dtype)
    ib = img_branch.on(tape)
    tb = txt_branch.on(tape)
    ie = arch.img_embed(ib, tape.const(img_reps)).value
    te = T.row_normalize(project(tb, tape.const(txt_reps)), NORM_EPS).value
    return ie.astype(np.float64), te.astype(np.float64)


def batch_loss(arch, img_branch, txt_branch, img_reps, txt_reps, targets, loss_cfg):
    """Inner contrastive loss for one batch; every argument is already on a tape."""
    ie = arch.img_embed(img_branch, img_reps)
    te = T.row_normalize(project(txt_branch, txt_reps), NORM_EPS)
    return contrastive_loss(similarity_matrix(ie, te), targets, loss_cfg)


def clipped_block(labels: np.ndarray | None, idx) -> np.ndarray:
    """Clipped label block at ``idx``; ``None`` means identity labels."""
    block = np.eye(len(idx)) if labels is None else labels[np.ix_(idx, idx)]
    return np.clip(block, TARGET_LO, TARGET_HI)


def train_branches(
    arch: Architecture,
    img_branch,
    txt_branch,
    img_reps: np.ndarray,
    txt_reps: np.ndarray,
    labels: np.ndarray | None,
    epochs: int,
    batch_size: int,
    lr_img: float,
    lr_txt: float,
    loss_cfg: LossConfig,
    rng: np.random.Generator,
    dtype=np.float64,
    on_epoch=None,
):
    """Plain minibatch SGD on both branches; returns the trained (image, text) pair.

    ``labels`` defaults to the identity. ``on_epoch(k, img, txt, mean_loss)`` is
    called after every epoch.
    """
    n = img_reps.shape[0]
    img_branch, txt_branch = img_branch.numpy(), txt_branch.numpy()
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            tape = T.Tape(dtype)
            ib = img_branch.on(tape, True)
            tb = txt_branch.on(tape, True)
            loss = batch_loss(
                arch, ib, tb, tape.const(img_reps[idx]), tape.const(txt_reps[idx]),
                tape.const(clipped_block(labels, idx)), loss_cfg,
            )
            tape.backward(loss)
            img_branch = type(img_branch)(*[p.value - lr_img * p.grad for p in ib.params()])
            txt_branch = type(txt_branch)(*[p.value - lr_txt * p.grad for p in tb.params()])
            losses.append(loss.item())
        if on_epoch is not None:
            on_epoch(epoch + 1, img_branch, txt_branch, float(np.mean(losses)))
    return img_branch, txt_branch


def dataset_loss(arch, img_branch, txt_branch, img_reps, txt_reps, loss_cfg, batch_size=128, dtype=np.float64):
    """Mean identity-label loss over fixed contiguous batches (no shuffling)."""
    n = img_reps.shape[0]
    vals = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        tape = T.Tape(dtype)
        loss = batch_loss(
            arch, img_branch.on(tape), txt_branch.on(tape),
            tape.const(img_reps[idx]), tape.const(txt_reps[idx]),
            tape.const(clipped_block(None, idx)), loss_cfg,
        )
        vals.append(loss.item())
    return float(np.mean(vals))
