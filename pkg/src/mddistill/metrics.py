"""Collapse and retrieval metrics: Sim, Gap, concentration ratio, R@K, stripes, update norms."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError
from .special import betainc

RECALL_KS = (1, 5, 10)


@dataclass
class MetricsReport:
    sim_img: float
    sim_txt: float
    gap: float
    cr_img: float
    cr_txt: float
    recall: dict = field(default_factory=dict)  # (direction, k) -> percent
    stripe_var: float = float("nan")
    update_norm_img: float = float("nan")
    update_norm_txt: float = float("nan")

    def to_flat(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "recall"}
        for (direction, k), v in sorted(self.recall.items()):
            out[f"{direction.lower()}_at_{k}"] = v
        return {k: float(v) for k, v in out.items()}

    def to_json(self) -> str:
        # NaN (e.g. no update norms before the first iteration) becomes null
        flat = {k: None if math.isnan(v) else v for k, v in self.to_flat().items()}
        return json.dumps(flat, indent=2, sort_keys=True)

    @classmethod
    def from_flat(cls, flat: dict) -> "MetricsReport":
        recall = {}
        base = {}
        for key, val in flat.items():
            val = float("nan") if val is None else val
            if "_at_" in key:
                direction, k = key.split("_at_")
                recall[(direction.upper(), int(k))] = val
            else:
                base[key] = val
        return cls(recall=recall, **base)

    def check(self):
        """Raise if any field is outside its valid range."""
        for v in self.recall.values():
            if not 0.0 <= v <= 100.0:
                raise ContractError(f"recall {v} outside [0, 100]")
        for name in ("sim_img", "sim_txt"):
            if not -1.0 - 1e-9 <= getattr(self, name) <= 1.0 + 1e-9:
                raise ContractError(f"{name} outside [-1, 1]")
        if not self.gap >= 0:
            raise ContractError("gap must be non-negative")
        for name in ("cr_img", "cr_txt"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} outside [0, 1]")


def reports_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    keys = list(rows[0].keys()) if rows else []
    writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def normalize_rows(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), eps)


def intra_modal_sim(emb: np.ndarray) -> float:
    """Mean cosine over ordered pairs i != j of row-normalized embeddings."""
    emb = np.asarray(emb, dtype=np.float64)
    n = emb.shape[0]
    if n < 2:
        raise ContractError(f"intra_modal_sim needs at least 2 rows, got {n}")
    s = emb.sum(axis=0)
    total = float(s @ s) - float(np.einsum("ij,ij->", emb, emb))
    return total / (n * (n - 1))


def modality_gap(img_emb: np.ndarray, txt_emb: np.ndarray) -> float:
    """||sum(img rows) - sum(txt rows)|| / n, the distance between modality centroids."""
    img_emb = np.asarray(img_emb, dtype=np.float64)
    txt_emb = np.asarray(txt_emb, dtype=np.float64)
    if img_emb.shape[0] != txt_emb.shape[0]:
        raise ContractError(f"modality_gap: {img_emb.shape[0]} images vs {txt_emb.shape[0]} texts")
    n = img_emb.shape[0]
    return float(np.linalg.norm(img_emb.sum(axis=0) - txt_emb.sum(axis=0)) / n)


def cap_area_fraction(c: float, d: int) -> float:
    return betainc((d - 1) / 2.0, 0.5, 1.0 - c * c)


def concentration_ratio(c: float, d: int) -> float:
    """1 - I_{1-c^2}((d-1)/2, 1/2) for a cosine level c in [0, 1] on the (d-1)-sphere."""
    if not 0.0 <= c <= 1.0:
        raise ContractError(f"concentration_ratio: c must lie in [0, 1], got {c}")
    if d < 2:
        raise ContractError(f"concentration_ratio: d must be >= 2, got {d}")
    return 1.0 - cap_area_fraction(c, d)


def _match_ranks(scores: np.ndarray) -> np.ndarray:
    """Rank of the index-matched item for each query row; ties go to the lower index."""
    n = scores.shape[0]
    target = scores[np.arange(n), np.arange(n)][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    better = (scores > target) | ((scores == target) & (cols < np.arange(n)[:, None]))
    return better.sum(axis=1)


def recall_at_k(img_emb: np.ndarray, txt_emb: np.ndarray, k: int, direction: str) -> float:
    """Percent of queries whose counterpart ranks in the top ``k`` by cosine.

    ``IR`` queries with texts and retrieves images; ``TR`` the reverse.
    """
    img_emb = np.asarray(img_emb, dtype=np.float64)
    txt_emb = np.asarray(txt_emb, dtype=np.float64)
    n = img_emb.shape[0]
    if txt_emb.shape[0] != n:
        raise ContractError("recall_at_k: image and text counts differ")
    if k > n or k < 1:
        raise ContractError(f"recall_at_k: k={k} is not in [1, {n}]")
    sim = img_emb @ txt_emb.T
    if direction == "IR":
        scores = sim.T
    elif direction == "TR":
        scores = sim
    else:
        raise ContractError(f"unknown retrieval direction {direction!r}")
    return 100.0 * float(np.mean(_match_ranks(scores) < k))


def recall_table(img_emb, txt_emb, ks=RECALL_KS) -> dict:
    n = np.asarray(img_emb).shape[0]
    return {
        (direction, k): recall_at_k(img_emb, txt_emb, k, direction)
        for direction in ("IR", "TR")
        for k in ks
        if k <= n
    }


def stripe_statistic(sim_matrix: np.ndarray) -> float:
    """Mean variance of off-diagonal entries per row, averaged with the per-column version.

    Near zero means each row (or column) is nearly constant off the diagonal.
    """
    s = np.asarray(sim_matrix, dtype=np.float64)
    n = s.shape[0]
    if s.ndim != 2 or s.shape[1] != n:
        raise ContractError(f"stripe_statistic needs a square matrix, got {s.shape}")
    if n < 3:
        raise ContractError(f"stripe_statistic needs n >= 3, got {n}")
    off = ~np.eye(n, dtype=bool)
    rows = s[off].reshape(n, n - 1)
    cols = s.T[off].reshape(n, n - 1)
    return 0.5 * (float(rows.var(axis=1).mean()) + float(cols.var(axis=1).mean()))


def update_norms(theta_0, theta_t, embed_fn, probes) -> tuple[float, float]:
    """Relative movement of each modality's probe embeddings.

    ``theta_0`` and ``theta_t`` are (image, text) parameter pairs and
    ``probes`` is (image probe, text probe). For each modality returns
    ||f(theta_t) - f(theta_0)|| / ||f(theta_0)|| with f = ``embed_fn(params, probe)``.
    ``embed_fn`` may also be an (image, text) pair of functions.
    """
    fns = (embed_fn, embed_fn) if callable(embed_fn) else tuple(embed_fn)
    out = []
    for p0, pt, probe, fn in zip(theta_0, theta_t, probes, fns):
        e0 = np.asarray(fn(p0, probe), dtype=np.float64)
        et = np.asarray(fn(pt, probe), dtype=np.float64)
        base = np.linalg.norm(e0)
        out.append(float(np.linalg.norm(et - e0) / base) if base > 0 else float("nan"))
    return tuple(out)


def probe_batch(d_img: int, d_txt: int, size: int = 256, seed: int = 0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((size, d_img)), rng.standard_normal((size, d_txt))


def safe_cr(sim: float, d: int) -> float:
    """Concentration ratio at a measured mean similarity, floored at c = 0."""
    c = min(max(sim, 0.0), 1.0)
    return concentration_ratio(c, d) if not math.isnan(c) else float("nan")


def proposition_check(img_emb, txt_emb, labels, cfg, n: int, m: int, dtype=np.float64):
    """Compare the exact gradient inner product of two image embeddings with its dominant terms.

    exact = (dL/dx_n) . (dL/dx_m) for the wBCE loss of ``img_emb @ txt_emb.T``
    against ``labels``, with texts held fixed. approx keeps the (n, m) cross
    term and the negatives shared by rows n and m:

        w_nm w_mn / g^2 * r_nm r_mn * <t_m, t_n> + sum_{i != n, m} w_ni w_mi / g^2 * r_ni r_mi * |t_i|^2

    where r = sigmoid(y_hat / g) - labels. Returns (exact, approx, residual).
    """
    from . import tape as T
    from .losses import wbce_loss, wbce_weights

    if n == m:
        raise ContractError("proposition_check needs two distinct indices")
    img_emb = np.asarray(img_emb, dtype=np.float64)
    txt_emb = np.asarray(txt_emb, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    size = img_emb.shape[0]
    if not (0 <= n < size and 0 <= m < size):
        raise ContractError(f"indices ({n}, {m}) out of range for batch of {size}")
    tape = T.Tape(dtype)
    x = tape.leaf(img_emb)
    loss = wbce_loss(T.matmul(x, tape.const(txt_emb.T)), labels, cfg)
    (g,) = tape.grad(loss, [x])
    g = np.asarray(g.value, dtype=np.float64)
    exact = float(g[n] @ g[m])

    gamma = cfg.gamma
    y_hat = img_emb @ txt_emb.T
    w = wbce_weights(labels, cfg.beta)
    r = 1.0 / (1.0 + np.exp(-y_hat / gamma)) - labels
    cross = w[n, m] * w[m, n] * r[n, m] * r[m, n] * float(txt_emb[m] @ txt_emb[n])
    others = [i for i in range(txt_emb.shape[0]) if i not in (n, m)]
    shared = sum(w[n, i] * w[m, i] * r[n, i] * r[m, i] * float(txt_emb[i] @ txt_emb[i]) for i in others)
    approx = (cross + shared) / gamma**2
    return exact, approx, abs(exact - approx)


def evaluate_distilled(
    syn,
    test,
    epochs: int = 50,
    lr: float | tuple | None = None,
    seed: int = 0,
    arch=None,
    loss_cfg=None,
    batch_size: int | None = None,
    dtype=np.float64,
) -> MetricsReport:
    """Train fresh heads on a synthetic set, then score retrieval and collapse on ``test``.

    ``syn`` needs img_reps, txt_reps, labels (a soft-label matrix) and lr_img,
    lr_txt; ``lr`` overrides the learned rates.
    """
    from .losses import LossConfig
    from .train import Architecture, embed_arrays, train_branches

    arch = arch or Architecture.build(d_img=syn.img_reps.shape[1], d_txt=syn.txt_reps.shape[1])
    loss_cfg = loss_cfg or LossConfig()
    if lr is None:
        lr_img, lr_txt = syn.lr_img, syn.lr_txt
    elif isinstance(lr, tuple):
        lr_img, lr_txt = lr
    else:
        lr_img = lr_txt = lr
    rng = np.random.default_rng(seed)
    img_b, txt_b = arch.init_branches(rng)
    n_syn = syn.img_reps.shape[0]
    img_b, txt_b = train_branches(
        arch, img_b, txt_b, syn.img_reps, syn.txt_reps, syn.labels.materialize(), epochs,
        batch_size or n_syn, lr_img, lr_txt, loss_cfg, rng, dtype=dtype,
    )
    ie, te = embed_arrays(arch, img_b, txt_b, test.img_reps, test.txt_reps, dtype)
    sim_i, sim_t = intra_modal_sim(ie), intra_modal_sim(te)
    d = ie.shape[1]
    report = MetricsReport(
        sim_img=sim_i,
        sim_txt=sim_t,
        gap=modality_gap(ie, te),
        cr_img=safe_cr(sim_i, d),
        cr_txt=safe_cr(sim_t, d),
        recall=recall_table(ie, te),
    )
    if n_syn >= 3:
        si, st = embed_arrays(arch, img_b, txt_b, syn.img_reps, syn.txt_reps, dtype)
        report.stripe_var = stripe_statistic(si @ st.T)
    return report


def proposition_batch(n: int, d: int, coherence: float | None, gamma: float, seed: int = 0):
    """Batch for ``proposition_check`` with zero residual on every diagonal pair.

    ``coherence=None`` gives orthonormal texts; otherwise each text is
    normalize(sqrt(rho) * shared + sqrt(1 - rho) * own) so pairwise text
    cosines concentrate near rho. Diagonal labels equal sigmoid(y_hat_ii / gamma),
    off-diagonal labels are 0. Returns (img_emb, txt_emb, labels).
    """
    if coherence is None and n > d:
        raise ContractError(f"cannot place {n} orthonormal texts in {d} dimensions")
    rng = np.random.default_rng(seed)
    img = normalize_rows(rng.standard_normal((n, d)))
    if coherence is None:
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        txt = q[:n].copy()
    else:
        if not 0.0 <= coherence <= 1.0:
            raise ContractError(f"coherence must lie in [0, 1], got {coherence}")
        shared = rng.standard_normal(d)
        shared /= np.linalg.norm(shared)
        own = normalize_rows(rng.standard_normal((n, d)))
        txt = normalize_rows(np.sqrt(coherence) * shared + np.sqrt(1.0 - coherence) * own)
    diag = np.einsum("ij,ij->i", img, txt)
    labels = np.diag(1.0 / (1.0 + np.exp(-diag / gamma)))
    return img, txt, labels
