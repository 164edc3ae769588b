"""Finite-difference gradient checks for every tape primitive and the full unrolled graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .blend import BlendConfig
from .distill import SynNodes, unroll_on_tape
from .losses import LossConfig, SoftLabelMatrix, matching_loss_symmetric
from .model import ProjectionHead
from .train import Architecture

GATE = 1e-5


def _weighted_sum(out: T.GradMatrix, seed) -> T.GradMatrix:
    # a fixed random projection so every output entry matters to the check;
    # keyed apart from the input stream so w never equals an input draw
    w = np.random.default_rng([0x5EED, *np.atleast_1d(seed)]).standard_normal(out.shape)
    return T.sum_all(T.mul(out, out.tape.const(w)))


def _primitives(rng):
    """(name, fn(nodes) -> matrix, input arrays) for each primitive."""
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    c = rng.standard_normal((4, 2))
    row = rng.standard_normal((1, 4))
    col = rng.standard_normal((3, 1))
    s = rng.standard_normal((1, 1))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    # away from the clip corners so the one-sided slopes agree
    inside = rng.uniform(-0.8, 0.8, (3, 4))
    idx = np.array([2, 0, 2, 1])
    return [
        ("matmul", lambda n: T.matmul(n[0], n[1]), [a, c]),
        ("transpose", lambda n: T.transpose(n[0]), [a]),
        ("add", lambda n: T.add(n[0], n[1]), [a, b]),
        ("sub", lambda n: T.sub(n[0], n[1]), [a, b]),
        ("mul", lambda n: T.mul(n[0], n[1]), [a, b]),
        ("scale_const", lambda n: T.scale_const(n[0], -1.7), [a]),
        ("add_const", lambda n: T.add_const(n[0], 0.3), [a]),
        ("scale", lambda n: T.scale(n[0], n[1]), [a, s]),
        ("sum_all", lambda n: T.sum_all(n[0]), [a]),
        ("broadcast", lambda n: T.broadcast(n[0], (3, 2)), [s]),
        ("add_row", lambda n: T.add_row(n[0], n[1]), [a, row]),
        ("colsum", lambda n: T.colsum(n[0]), [a]),
        ("tile_rows", lambda n: T.tile_rows(n[0], 3), [row]),
        ("rowsum", lambda n: T.rowsum(n[0]), [a]),
        ("tile_cols", lambda n: T.tile_cols(n[0], 4), [col]),
        ("mul_col", lambda n: T.mul_col(n[0], n[1]), [a, col]),
        ("take_rows", lambda n: T.take_rows(n[0], idx), [a]),
        ("put_rows", lambda n: T.put_rows(n[0], idx[:3], 4), [a]),
        ("sigmoid", lambda n: T.sigmoid(n[0]), [a]),
        ("softplus", lambda n: T.softplus(n[0]), [a]),
        ("tanh", lambda n: T.tanh(n[0]), [a]),
        ("exp", lambda n: T.exp(n[0]), [a]),
        ("recip", lambda n: T.recip(n[0]), [pos]),
        ("logsumexp_rows", lambda n: T.logsumexp_rows(n[0]), [a]),
        ("clip", lambda n: T.clip(n[0], -0.9, 0.9), [inside]),
        ("row_norms", lambda n: T.row_norms(n[0], 1e-8), [a]),
        ("row_normalize", lambda n: T.row_normalize(n[0], 1e-8), [a]),
    ]


@dataclass
class CheckResult:
    name: str
    route: str  # "first" (numpy VJPs) or "second" (node VJPs through create_graph)
    error: float

    @property
    def ok(self) -> bool:
        return self.error < GATE


def primitive_checks(seed: int = 0) -> list[CheckResult]:
    """First-order and second-order checks for every primitive.

    The second-order route differentiates g . d where g = dL/dx is built with
    ``create_graph``, which exercises the node-level VJPs.
    """
    rng = np.random.default_rng(seed)
    out = []
    for k, (name, fn, arrays) in enumerate(_primitives(rng)):

        def first(tape, nodes, fn=fn, k=k):
            return _weighted_sum(fn(nodes), (seed, k))

        def second(tape, nodes, fn=fn, k=k):
            inner = _weighted_sum(fn(nodes), (seed, k))
            # square the inner loss so linear primitives still have curvature
            inner = T.mul(inner, inner)
            grads = tape.grad(inner, nodes, create_graph=True)
            total = None
            for j, g in enumerate(grads):
                term = _weighted_sum(g, (seed, k, j + 1))
                total = term if total is None else T.add(total, term)
            return total

        out.append(CheckResult(name, "first", T.grad_check(first, arrays, oracle_dtype=np.longdouble)))
        out.append(CheckResult(name, "second", T.grad_check(second, arrays, oracle_dtype=np.longdouble)))
    return out


def unroll_check(n: int = 4, d: int = 8, d_emb: int = 8, t_steps: int = 8, seed: int = 0, rank: int = 2):
    """Relative error of the matching-loss gradient through a full T-step unroll.

    Covers synthetic reps, soft-label factors and both inner learning rates,
    with blending on. Label factors start off zero so no target sits exactly
    on a clip boundary, where finite differences are one-sided.
    """
    rng = np.random.default_rng(seed)
    arch = Architecture.build(d_img=d, d_txt=d, d_emb=d_emb)
    start = (ProjectionHead.init(d, d_emb, rng), ProjectionHead.init(d, d_emb, rng))
    end = (
        ProjectionHead(start[0].weight + 0.1 * rng.standard_normal((d, d_emb)), start[0].bias + 0.1),
        ProjectionHead(start[1].weight + 0.1 * rng.standard_normal((d, d_emb)), start[1].bias - 0.1),
    )
    labels = SoftLabelMatrix("lowrank", u=0.1 * rng.standard_normal((n, rank)), v=rng.standard_normal((n, rank)), alpha=1.0)
    leaves = [
        rng.standard_normal((n, d)),
        rng.standard_normal((n, d)),
        labels.u,
        labels.v,
        np.array([[0.5]]),
        np.array([[0.7]]),
    ]
    loss_cfg, blend = LossConfig(), BlendConfig(alpha=1.0)

    def build(tape, nodes):
        syn = SynNodes(nodes[0], nodes[1], [nodes[2], nodes[3]], nodes[4], nodes[5])
        student = unroll_on_tape(
            arch, syn, labels, start, t_steps, 2, loss_cfg, blend, np.random.default_rng(seed + 1)
        )
        return matching_loss_symmetric(student[0], student[1], end[0], end[1], start[0], start[1])

    return T.grad_check(build, leaves, step=1e-6)
