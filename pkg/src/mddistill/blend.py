"""Representation blending within a batch, and the Gaussian-noise perturbation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .errors import ContractError


@dataclass
class BlendConfig:
    alpha: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ContractError(f"blend alpha must be > 0, got {self.alpha}")


def sample_blend(n: int, cfg: BlendConfig, rng: np.random.Generator):
    """One shuffle of the batch and one Beta(alpha, alpha) coefficient."""
    perm = rng.permutation(n)
    lam = float(rng.beta(cfg.alpha, cfg.alpha))
    return perm, lam


def rep_blend(img_reps: T.GradMatrix, txt_reps: T.GradMatrix, cfg: BlendConfig, rng, lam=None, perm=None):
    """Blend each row with a shuffled partner: lam * row_b + (1 - lam) * row_perm(b).

    The same permutation and coefficient are used for both modalities. ``lam``
    and ``perm`` may be forced; otherwise they are drawn from ``rng`` (the
    permutation first, then the coefficient).
    """
    n = img_reps.rows
    if txt_reps.rows != n:
        raise ContractError(f"rep_blend: batch sizes differ ({n} vs {txt_reps.rows})")
    if lam is not None and lam == 1.0:
        # a forced identity draws nothing, so later rng use matches blending off
        return img_reps, txt_reps
    if perm is None or lam is None:
        drawn_perm, drawn_lam = sample_blend(n, cfg, rng)
        perm = drawn_perm if perm is None else perm
        lam = drawn_lam if lam is None else lam
    perm = np.asarray(perm, dtype=np.intp)
    return _mix(img_reps, perm, lam), _mix(txt_reps, perm, lam)


def _mix(x: T.GradMatrix, perm, lam: float) -> T.GradMatrix:
    # endpoints skip the arithmetic so they are exact, signed zeros included
    if lam == 1.0:
        return x
    if lam == 0.0:
        return T.take_rows(x, perm)
    return T.add(T.scale_const(x, lam), T.scale_const(T.take_rows(x, perm), 1.0 - lam))


def noise_perturb(reps: T.GradMatrix, lam: float, rng: np.random.Generator, noise=None) -> T.GradMatrix:
    """(1 - lam) * reps + lam * N(0, 1), noise drawn fresh for every row."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"noise_perturb: lambda must lie in [0, 1], got {lam}")
    if noise is None:
        noise = rng.standard_normal(reps.shape)
    delta = reps.tape.const(np.asarray(noise, dtype=reps.value.dtype))
    return T.add(T.scale_const(reps, 1.0 - lam), T.scale_const(delta, lam))


def noise_perturb_array(reps: np.ndarray, lam: float, rng: np.random.Generator) -> np.ndarray:
    tape = T.Tape(reps.dtype)
    return noise_perturb(tape.const(reps), lam, rng).value
