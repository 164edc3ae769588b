"""Inner contrastive objectives and outer trajectory-matching objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .errors import ContractError, DegenerateSegmentError, DimensionError, NumericError

# BCE targets are clipped into this open interval before entering the loss;
# gradients still pass for any label value inside [0, 1].
TARGET_LO = 1e-6
TARGET_HI = 1.0 - 1e-6


@dataclass
class LossConfig:
    gamma: float = 0.5
    beta: float = 0.5
    kind: str = "wbce"

    def __post_init__(self):
        if not self.gamma > 0:
            raise ContractError(f"gamma must be > 0, got {self.gamma}")
        if not 0 < self.beta < 1:
            raise ContractError(f"beta must lie in (0, 1), got {self.beta}")
        if self.kind not in ("wbce", "infonce"):
            raise ContractError(f"unknown loss kind {self.kind!r}")


@dataclass
class SoftLabelMatrix:
    """Learned pairwise correspondence between synthetic images and texts.

    ``dense`` keeps the full n x n matrix. ``lowrank`` stores
    I + alpha * U @ V.T with U, V of shape n x rank. Both start at the identity.
    """

    mode: str
    dense: np.ndarray | None = None
    u: np.ndarray | None = None
    v: np.ndarray | None = None
    alpha: float = 1.0

    @classmethod
    def identity(cls, n: int, mode: str = "lowrank", rank: int = 10, alpha: float = 1.0, rng=None):
        if mode == "dense":
            return cls("dense", dense=np.eye(n))
        if mode != "lowrank":
            raise ContractError(f"unknown soft-label mode {mode!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        # U = 0 keeps the product zero at init while V gives U a nonzero gradient
        u = np.zeros((n, rank))
        v = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(n, rank))
        return cls("lowrank", u=u, v=v, alpha=float(alpha))

    @property
    def n(self) -> int:
        return (self.dense if self.mode == "dense" else self.u).shape[0]

    @property
    def rank(self) -> int:
        return 0 if self.mode == "dense" else self.u.shape[1]

    def arrays(self) -> list:
        return [self.dense] if self.mode == "dense" else [self.u, self.v]

    def with_arrays(self, arrays) -> "SoftLabelMatrix":
        if self.mode == "dense":
            return SoftLabelMatrix("dense", dense=np.array(arrays[0], dtype=np.float64))
        return SoftLabelMatrix(
            "lowrank",
            u=np.array(arrays[0], dtype=np.float64),
            v=np.array(arrays[1], dtype=np.float64),
            alpha=self.alpha,
        )

    def materialize(self) -> np.ndarray:
        if self.mode == "dense":
            return np.array(self.dense, dtype=np.float64)
        return np.eye(self.n) + self.alpha * (self.u @ self.v.T)

    def copy(self) -> "SoftLabelMatrix":
        return self.with_arrays([a.copy() for a in self.arrays()])


def label_block(labels: SoftLabelMatrix, nodes: list, idx) -> T.GradMatrix:
    """Tape node for the |B| x |B| block of the soft labels at batch indices ``idx``.

    ``nodes`` are the tape versions of ``labels.arrays()``. Targets are clipped
    into (TARGET_LO, TARGET_HI) with gradients passed through on [0, 1].
    """
    idx = np.asarray(idx, dtype=np.intp)
    tape = nodes[0].tape
    if labels.mode == "dense":
        rows = T.take_rows(nodes[0], idx)
        block = T.transpose(T.take_rows(T.transpose(rows), idx))
    else:
        u = T.take_rows(nodes[0], idx)
        v = T.take_rows(nodes[1], idx)
        low = T.scale_const(T.matmul(u, T.transpose(v)), labels.alpha)
        block = T.add(low, tape.const(np.eye(len(idx))))
    return T.clip(block, TARGET_LO, TARGET_HI, 0.0, 1.0)


def wbce_weights(y: np.ndarray, beta: float) -> np.ndarray:
    """Balanced weights: positives (y > beta) share total weight 1, negatives share 1.

    An empty class simply contributes nothing.
    """
    y = np.asarray(y)
    pos = y > beta
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    w = np.zeros(y.shape, dtype=np.float64)
    if n_pos:
        w[pos] = 1.0 / n_pos
    if n_neg:
        w[~pos] = 1.0 / n_neg
    return w


def _as_node(tape, y):
    return y if isinstance(y, T.GradMatrix) else tape.const(y)


def wbce_loss(y_hat: T.GradMatrix, y, cfg: LossConfig) -> T.GradMatrix:
    """Sum of w_ij * BCE(y_ij, sigmoid(y_hat_ij / gamma)).

    Uses BCE(y, sigmoid(x)) = softplus(x) - y * x. Weights are constants for
    the tape, recomputed from the current label values.
    """
    tape = y_hat.tape
    y = _as_node(tape, y)
    if y.shape != y_hat.shape:
        raise DimensionError(f"wbce_loss: labels {y.shape} vs similarities {y_hat.shape}")
    if not (np.all(np.isfinite(y_hat.value)) and np.all(np.isfinite(y.value))):
        raise NumericError("wbce_loss: non-finite input")
    w = tape.const(wbce_weights(y.value, cfg.beta))
    x = T.scale_const(y_hat, 1.0 / cfg.gamma)
    per_pair = T.sub(T.softplus(x), T.mul(y, x))
    return T.sum_all(T.mul(w, per_pair))


def infonce_loss(y_hat: T.GradMatrix, cfg: LossConfig) -> T.GradMatrix:
    """Symmetric softmax cross-entropy over rows and columns with diagonal targets."""
    n, m = y_hat.shape
    if n != m:
        raise ContractError(f"infonce_loss needs a square batch, got {y_hat.shape}")
    if not np.all(np.isfinite(y_hat.value)):
        raise NumericError("infonce_loss: non-finite input")
    tape = y_hat.tape
    z = T.scale_const(y_hat, 1.0 / cfg.gamma)
    diag = T.sum_all(T.mul(z, tape.const(np.eye(n))))
    rows = T.sum_all(T.logsumexp_rows(z))
    cols = T.sum_all(T.logsumexp_rows(T.transpose(z)))
    total = T.sub(T.add(rows, cols), T.scale_const(diag, 2.0))
    return T.scale_const(total, 0.5 / n)


def contrastive_loss(y_hat: T.GradMatrix, y, cfg: LossConfig) -> T.GradMatrix:
    if cfg.kind == "infonce":
        return infonce_loss(y_hat, cfg)
    return wbce_loss(y_hat, y, cfg)


# -- trajectory matching -------------------------------------------------------


def _flat(branch) -> np.ndarray:
    return branch.flatten()


def _sq_dist_node(student, target) -> T.GradMatrix:
    """||student - target||^2 over all parameter arrays, on the student's tape."""
    total = None
    for p, q in zip(student.params(), target.params()):
        tape = p.tape
        diff = T.sub(p, tape.const(np.asarray(q.value if isinstance(q, T.GradMatrix) else q)))
        term = T.sum_all(T.mul(diff, diff))
        total = term if total is None else T.add(total, term)
    return total


def _matching_loss(student_img, student_txt, expert_img_m, expert_txt_m, expert_img_0, expert_txt_0):
    denom = float(
        np.sum((_flat(expert_img_0) - _flat(expert_img_m)) ** 2)
        + np.sum((_flat(expert_txt_0) - _flat(expert_txt_m)) ** 2)
    )
    if not denom > 0:
        raise DegenerateSegmentError("expert did not move over the segment; resample")
    num = T.add(_sq_dist_node(student_img, expert_img_m), _sq_dist_node(student_txt, expert_txt_m))
    return T.scale_const(num, 1.0 / denom)


def matching_loss_symmetric(
    student_img_t, student_txt_t, expert_img_m, expert_txt_m, expert_img_0, expert_txt_0
) -> T.GradMatrix:
    """Normalized endpoint distance over both projection heads.

    (|S_img - D_img^M|^2 + |S_txt - D_txt^M|^2) / (|D_img^0 - D_img^M|^2 + |D_txt^0 - D_txt^M|^2)
    with the denominator a constant.
    """
    return _matching_loss(student_img_t, student_txt_t, expert_img_m, expert_txt_m, expert_img_0, expert_txt_0)


def matching_loss_asymmetric(
    student_enc_t, student_txt_t, expert_enc_m, expert_txt_m, expert_enc_0, expert_txt_0
) -> T.GradMatrix:
    """Same normalized distance, with the image side being a trainable encoder's weights."""
    return _matching_loss(student_enc_t, student_txt_t, expert_enc_m, expert_txt_m, expert_enc_0, expert_txt_0)


def matching_components(student_img, student_txt, expert_img_m, expert_txt_m, expert_img_0, expert_txt_0):
    """Per-modality normalized matching losses (image, text), as plain floats."""
    out = []
    for s, m, z in ((student_img, expert_img_m, expert_img_0), (student_txt, expert_txt_m, expert_txt_0)):
        den = float(np.sum((_flat(z) - _flat(m)) ** 2))
        num = float(np.sum((_flat(s) - _flat(m)) ** 2))
        out.append(num / den if den > 0 else float("nan"))
    return tuple(out)
