"""Experiment drivers shared by the command line and the acceptance suite."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import tape as T
from .buffer import generate_trajectory, load_trajectory, save_trajectory
from .config import ConfigError, RunConfig
from .data import PairedEmbeddingSet, load_embeddings, save_embeddings, toy_benchmark
from .distill import init_synthetic, run_distillation
from .metrics import (
    evaluate_distilled,
    intra_modal_sim,
    modality_gap,
    normalize_rows,
    proposition_batch,
    proposition_check,
    safe_cr,
    stripe_statistic,
)
from .model import project
from .train import ASYMMETRIC, Architecture

TAIL_FRACTION = 0.1
COHERENCE_SWEEP = (0.5, 0.2, 0.05)
PROPOSITION_GATE = 1e-8


def load_data(cfg: RunConfig):
    d = cfg["data"]
    if d["train_file"] is not None:
        return load_embeddings(d["train_file"], "train"), load_embeddings(d["test_file"], "test")
    return toy_benchmark(
        d["n_train"], d["n_test"], d["d"], d["clusters"], d["intra_noise"], d["cross_noise"], d["seed"]
    )


def trajectory_seeds(cfg: RunConfig) -> list[int]:
    return [1000 * cfg["seed"] + k for k in range(cfg["buffer"]["trajectories"])]


def _trajectory_job(job):
    cfg_doc, seed, path = job
    cfg = RunConfig(cfg_doc)
    train, _ = load_data(cfg)
    b = cfg["buffer"]
    traj = generate_trajectory(
        train, b["epochs"], b["batch_size"], b["lr"], seed,
        cfg.architecture(train.d_img, train.d_txt), cfg.loss_config(), T.DTYPES[cfg["precision"]],
    )
    save_trajectory(traj, path)
    return traj.losses


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_buffer(cfg: RunConfig, out: Path, jobs: int = 1) -> dict:
    """Train and save every expert trajectory plus a manifest; returns the manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = load_data(cfg)
    seeds = trajectory_seeds(cfg)
    names = [f"traj_{k:03d}.mddt" for k in range(len(seeds))]
    work = [(cfg.doc, s, str(out / n)) for s, n in zip(seeds, names)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            losses = list(pool.map(_trajectory_job, work))
    else:
        losses = [_trajectory_job(w) for w in work]
    b = cfg["buffer"]
    manifest = {
        "mode": cfg["model"]["mode"],
        "dataset_fingerprint": train.fingerprint().hex(),
        "epochs": b["epochs"],
        "batch_size": b["batch_size"],
        "lr": b["lr"],
        "trajectories": [
            {"file": n, "seed": s, "sha256": _sha256(out / n), "epoch_losses": l}
            for n, s, l in zip(names, seeds, losses)
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_buffer(cfg: RunConfig, directory: Path, train: PairedEmbeddingSet) -> list:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    want_kind = "encoder" if cfg["model"]["mode"] == ASYMMETRIC else "head"
    fingerprint = train.fingerprint()
    trajs = []
    for entry in manifest["trajectories"]:
        traj = load_trajectory(directory / entry["file"])
        if traj.fingerprint != fingerprint:
            raise ConfigError(f"{entry['file']} was trained on a different dataset")
        if traj.img_kind != want_kind:
            raise ConfigError(
                f"{entry['file']} holds {traj.img_kind} checkpoints but model.mode is {cfg['model']['mode']}"
            )
        trajs.append(traj)
    return trajs


def tail_mean(rows: list, key: str, fraction: float = TAIL_FRACTION):
    if not rows:
        return None
    k = max(1, int(round(len(rows) * fraction)))
    return float(np.mean([r[key] for r in rows[-k:]]))


def head_mean(rows: list, key: str, fraction: float = TAIL_FRACTION):
    if not rows:
        return None
    k = max(1, int(round(len(rows) * fraction)))
    return float(np.mean([r[key] for r in rows[:k]]))


def summarize(rows: list) -> dict:
    """Means over the last tenth of the log (and the first tenth for the loss)."""
    out = {"iterations": len(rows), "loss_first": head_mean(rows, "loss")}
    for key in ("loss", "sim_img", "sim_txt", "gap", "upd_img", "upd_txt", "lr_img", "lr_txt", "diag_min"):
        out[key if key != "loss" else "loss_last"] = tail_mean(rows, key)
    if rows:
        ratios = [dict(r, ratio=r["upd_img"] / r["upd_txt"]) for r in rows]
        out["upd_ratio"] = tail_mean(ratios, "ratio")
    else:
        out["upd_ratio"] = None
    return out


def distill_and_summarize(cfg: RunConfig, train, buffer, on_step=None):
    dcfg = cfg.distill_config()
    arch = cfg.architecture(train.d_img, train.d_txt)
    syn, rows = run_distillation(dcfg, train, buffer, arch, on_step=on_step)
    return syn, rows, summarize(rows)


def initial_state(cfg: RunConfig, train):
    """The synthetic set before any outer step: also the size-matched random coreset."""
    d = cfg.distill_config()
    return init_synthetic(
        train, d.n_syn, np.random.default_rng(d.seed), d.lr_teacher, d.lr_teacher, d.label_mode, d.sim_rank, d.sim_alpha
    )


def evaluate(cfg: RunConfig, syn, train, test):
    e = cfg["eval"]
    arch = cfg.architecture(syn.img_reps.shape[1], syn.txt_reps.shape[1])
    return evaluate_distilled(
        syn, test, e["epochs"], e["lr"], cfg["seed"], arch, cfg.loss_config(), dtype=T.DTYPES[cfg["precision"]]
    )


def arch_for_trajectory(cfg: RunConfig, traj) -> Architecture:
    m = cfg["model"]
    if traj.img_kind == "encoder":
        return Architecture.build(ASYMMETRIC, traj.d_in_img, traj.d_in_txt, traj.d_emb, hidden=traj.hidden, encoder_seed=m["encoder_seed"])
    return Architecture.build("symmetric", traj.d_in_img, traj.d_in_txt, traj.d_emb, m["encoder"], m["hidden"], m["encoder_seed"])


def head_outputs(arch, img_branch, txt_head, img_reps, txt_reps):
    """Un-normalized (image, text) outputs of a branch pair."""
    tape = T.Tape(np.float64)
    img = arch.img_unnormalized(img_branch.on(tape), tape.const(img_reps)).value
    txt = project(txt_head.on(tape), tape.const(txt_reps)).value
    return img, txt


def embedding_metrics(data: PairedEmbeddingSet, heads=None) -> dict:
    """Sim, Gap, CR and stripe statistic of paired rows, optionally through (arch, img, txt) heads."""
    img, txt = data.img_reps, data.txt_reps
    if heads is not None:
        arch, ib, tb = heads
        img, txt = head_outputs(arch, ib, tb, img, txt)
    if img.shape[1] != txt.shape[1]:
        raise ConfigError(
            f"image rows have {img.shape[1]} dims and text rows {txt.shape[1]}; pass --traj to embed them in a shared space"
        )
    ie, te = normalize_rows(img), normalize_rows(txt)
    sim_i, sim_t = intra_modal_sim(ie), intra_modal_sim(te)
    d = ie.shape[1]
    out = {
        "n": int(ie.shape[0]),
        "sim_img": sim_i,
        "sim_txt": sim_t,
        "gap": modality_gap(ie, te),
        "cr_img": safe_cr(sim_i, d),
        "cr_txt": safe_cr(sim_t, d),
    }
    out["stripe_var"] = stripe_statistic(ie @ te.T) if ie.shape[0] >= 3 else None
    return out


def _noise_job(job):
    cfg_doc, buffer_dir, seed, lam, dump = job
    cfg = RunConfig(cfg_doc)
    cfg.set("seed", seed)
    cfg.set("blend.enabled", False)
    cfg.set("distill.iterations", cfg["noise"]["iterations"])
    cfg.set("distill.noise_lambda", float(lam))
    train, _ = load_data(cfg)
    buffer = load_buffer(cfg, Path(buffer_dir), train)
    last = {}

    def keep(result):
        last["student"] = result.student

    syn, rows, summary = distill_and_summarize(cfg, train, buffer, on_step=keep)
    arch = cfg.architecture(train.d_img, train.d_txt)
    if "student" in last:
        img, txt = head_outputs(arch, *last["student"], syn.img_reps, syn.txt_reps)
    else:
        img, txt = syn.img_reps, syn.txt_reps
    emb = PairedEmbeddingSet(img, txt, "synthetic")
    save_embeddings(emb, dump)
    m = embedding_metrics(emb)
    return {"seed": seed, "lambda": float(lam), "sim_img": m["sim_img"], "sim_txt": m["sim_txt"], "gap": m["gap"]}


def noise_sweep(cfg: RunConfig, out: Path, jobs: int = 1) -> list[dict]:
    """Distill with Gaussian text noise of each strength in the inner loop (blending off).

    Per (seed, lambda) the final synthetic set is embedded through the last
    student heads; those raw embeddings are dumped next to the CSV so that
    ``mdd metrics`` reproduces each row. Seed-mean rows follow the per-seed rows.
    """
    out = Path(out)
    buffer_dir = out / "buffer"
    build_buffer(cfg, buffer_dir, jobs)
    n = cfg["noise"]
    seeds = [cfg["seed"] + k for k in range(n["seeds"])]
    work = [
        (cfg.doc, str(buffer_dir), s, lam, str(out / f"emb_seed{s}_lambda{lam:g}.mdde"))
        for s in seeds
        for lam in n["lambdas"]
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_noise_job, work))
    else:
        rows = [_noise_job(w) for w in work]
    means = []
    for lam in n["lambdas"]:
        sel = [r for r in rows if r["lambda"] == float(lam)]
        means.append({
            "seed": "mean",
            "lambda": float(lam),
            **{k: float(np.mean([r[k] for r in sel])) for k in ("sim_img", "sim_txt", "gap")},
        })
    return rows + means


def proposition_report(loss_cfg, seed: int = 0, n: int = 32, d: int = 512) -> dict:
    img, txt, labels = proposition_batch(8, 16, None, loss_cfg.gamma, seed)
    exact, approx, residual = proposition_check(img, txt, labels, loss_cfg, 0, 1)
    sweep = []
    for rho in COHERENCE_SWEEP:
        i, t, y = proposition_batch(n, d, rho, loss_cfg.gamma, seed)
        e, a, r = proposition_check(i, t, y, loss_cfg, 0, 1)
        sweep.append({"coherence": rho, "exact": e, "approx": a, "residual": r})
    monotone = all(b["residual"] < a["residual"] for a, b in zip(sweep, sweep[1:]))
    return {
        "orthogonal": {"exact": exact, "approx": approx, "residual": residual},
        "coherence_sweep": sweep,
        "monotone": monotone,
        "gate": PROPOSITION_GATE,
        "passed": bool(residual < PROPOSITION_GATE and monotone),
    }


def with_overrides(cfg: RunConfig, dotted: dict) -> RunConfig:
    """Copy of ``cfg`` with dotted keys replaced, e.g. ``{"blend.enabled": False}``."""
    new = RunConfig(json.loads(json.dumps(cfg.doc)))
    for key, val in dotted.items():
        new.set(key, val)
    return new
