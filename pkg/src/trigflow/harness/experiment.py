"""Reproducible training runs: data, teacher, loop, evaluation and artifacts."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .. import samplers, train, vsd
from ..core import DataStats, ProposalParams
from ..net import Net, NetConfig, TimeEmbedConfig
from . import checkpoint as ckpt
from .config import RunConfig, config_hash
from .datasets import get_dataset
from .metrics import energy_distance
from .oracles import analytic_F

# frozen column order; new columns may only be appended
CSV_COLUMNS = [
    "iter", "loss", "g_norm_mean", "g_norm_max", "w_q10", "w_q50", "w_q90",
    "vsd_loss", "aux_loss", "dist_pfode", "dist_1step", "dist_2step",
]
CKPT_NAME = "checkpoint.trig"


@dataclass
class Run:
    cfg: RunConfig
    net: Net
    sigma_d: float
    dim: int
    state: train.TrainState
    vsd_state: vsd.VsdState | None
    teacher: object
    teacher_params: dict | None


def _dataset(cfg: RunConfig):
    return get_dataset(cfg.dataset, dim=cfg.data_dim or None, std=cfg.data_std or None)


def estimate_sigma_d(cfg: RunConfig) -> float:
    if cfg.sigma_d > 0:
        return cfg.sigma_d
    ds = _dataset(cfg)
    return DataStats.from_data(ds.sample(100_000, np.random.default_rng(cfg.seed + 7))).sigma_d


def net_config_from_meta(meta: dict) -> NetConfig:
    d = dict(meta["net_config"])
    d["embed"] = TimeEmbedConfig(**d["embed"])
    return NetConfig(**d)


def load_teacher(path: str, cfg: RunConfig, dim: int):
    """``(F, params, net_config, sigma_d)`` from a diffusion checkpoint."""
    ck = ckpt.load(path)
    ncfg = net_config_from_meta(ck.meta)
    if ncfg.dim != dim:
        raise ValueError(f"teacher {path} has dim {ncfg.dim}, dataset has {dim}")
    params = ck.group("ema")
    return Net(ncfg).bind(params), params, ncfg, float(ck.meta["sigma_d"])


def build_run(cfg: RunConfig) -> Run:
    ds = _dataset(cfg)
    teacher = teacher_params = None
    sigma_d = estimate_sigma_d(cfg)
    ncfg = cfg.net_config(ds.dim, sigma_d)
    if cfg.mode != "diffusion" and cfg.mode != "sct":
        if cfg.teacher == "analytic":
            if not ds.analytic:
                raise ValueError(f"no analytic teacher for dataset {cfg.dataset!r}")
            teacher = analytic_F(ds.cov, sigma_d)
        elif cfg.teacher:
            teacher, teacher_params, tcfg, sigma_d = load_teacher(cfg.teacher, cfg, ds.dim)
            ncfg = cfg.net_config(ds.dim, sigma_d)
            if config_hash(tcfg) != config_hash(ncfg):
                raise ValueError("teacher network config differs from the run config")
        else:
            raise ValueError(f"mode {cfg.mode!r} needs a teacher (checkpoint path or 'analytic')")
    net = Net(ncfg)
    init_rng = np.random.default_rng(cfg.seed)
    theta = teacher_params if teacher_params is not None else net.init(init_rng)
    if teacher_params is None and cfg.mode in ("vsd", "scd-vsd"):
        # a zero generator is a fixed point of the score-difference update
        theta["out.W"] = init_rng.normal(0.0, 0.3, size=theta["out.W"].shape)
    state = train.init_state(theta, cfg.train_config(), seed=cfg.seed + 1)
    vs = None
    if cfg.mode in ("vsd", "scd-vsd"):
        aux0 = teacher_params if teacher_params is not None else net.init(init_rng)
        vs = vsd.init_vsd_state(aux0, cfg.vsd_config(), seed=cfg.seed + 2)
    return Run(cfg, net, sigma_d, ds.dim, state, vs, teacher, teacher_params)


def evaluate(run: Run, params: dict | None = None) -> dict:
    """Energy distances of model samples to a fixed held-out data set."""
    cfg = run.cfg
    params = run.state.ema if params is None else params
    ref = _dataset(cfg).sample(cfg.eval_samples, np.random.default_rng(cfg.seed + 1_000_003))
    F = run.net.bind(params)
    out = {}
    if cfg.mode == "diffusion":
        x = samplers.sample_pfode(F, cfg.eval_samples, run.dim, run.sigma_d,
                                  np.random.default_rng(cfg.seed + 17), cfg.sampler_config())
        out["dist_pfode"] = energy_distance(x, ref)
    else:
        for k in (1, 2):
            x = samplers.cm_sample(F, cfg.eval_samples, run.dim, run.sigma_d,
                                   np.random.default_rng(cfg.seed + 17), n_steps=k)
            out[f"dist_{k}step"] = energy_distance(x, ref)
    return out


def step(run: Run, x0, grid=None) -> dict:
    cfg, st = run.cfg, run.state
    if cfg.mode == "diffusion":
        run.state, m = train.diffusion_train_step(
            st, x0, run.net, ProposalParams(cfg.diff_p_mean, cfg.diff_p_std), cfg.diff_adam(),
            run.sigma_d, ema_decay=cfg.diff_ema,
        )
    elif cfg.mode in ("sct", "scd"):
        run.state, m = train.train_step(st, x0, run.net, cfg.train_config(), run.sigma_d, run.teacher)
    elif cfg.mode == "dscd":
        run.state, m = train.dscd_train_step(st, x0, run.net, cfg.train_config(), grid,
                                             run.sigma_d, run.teacher)
    elif cfg.mode == "vsd":
        run.state, run.vsd_state, m = vsd.vsd_train_step(
            st, run.vsd_state, run.net, run.net, cfg.vsd_config(), cfg.train_config(),
            len(x0), run.dim, run.sigma_d, run.teacher,
        )
    else:
        run.state, run.vsd_state, m = vsd.combined_scd_vsd_step(
            st, run.vsd_state, x0, run.net, run.net, cfg.vsd_config(), cfg.train_config(),
            run.sigma_d, run.teacher,
        )
    return m


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def to_checkpoint(run: Run) -> ckpt.Checkpoint:
    st = run.state
    meta = {
        "net_config": asdict(run.net.cfg),
        "run_config": run.cfg.to_dict(),
        "sigma_d": run.sigma_d,
        "rng": ckpt.rng_state(st.rng),
        "opt_count": st.opt.count,
    }
    ck = ckpt.Checkpoint(config_hash(run.net.cfg), st.iteration, meta)
    ck.put("theta", st.theta)
    ck.put("phi", st.phi)
    ck.put("ema", st.ema)
    ck.put("opt_m", st.opt.m)
    ck.put("opt_v", st.opt.v)
    if run.vsd_state is not None:
        vs = run.vsd_state
        meta["vsd_rng"] = ckpt.rng_state(vs.rng)
        meta["aux_opt_count"] = vs.aux_opt.count
        meta["psi_opt_count"] = vs.psi_opt.count
        ck.put("aux", vs.aux)
        ck.put("psi", vs.psi)
        ck.put("aux_m", vs.aux_opt.m)
        ck.put("aux_v", vs.aux_opt.v)
        ck.put("psi_m", vs.psi_opt.m)
        ck.put("psi_v", vs.psi_opt.v)
    return ck


def restore_state(ck: ckpt.Checkpoint) -> train.TrainState:
    return train.TrainState(
        theta=ck.group("theta"), phi=ck.group("phi"), ema=ck.group("ema"),
        opt=train.AdamState(ck.group("opt_m"), ck.group("opt_v"), ck.meta["opt_count"]),
        iteration=ck.iteration, rng=ckpt.rng_from_state(ck.meta["rng"]),
    )


def run_experiment(cfg: RunConfig, log=None) -> dict:
    """Train per ``cfg`` and write ``metrics.csv``, ``manifest.json`` and a checkpoint under ``cfg.out``."""
    try:
        os.makedirs(cfg.out, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {cfg.out}: {e}") from e
    run = build_run(cfg)
    ds = _dataset(cfg)
    data_rng = np.random.default_rng(cfg.seed + 3)
    grid = train.edm_time_grid(cfg.dscd_n, run.sigma_d, cfg.train_config().proposal) \
        if cfg.mode == "dscd" else None
    manifest = {
        "config": cfg.to_dict(), "sigma_d": run.sigma_d, "dim": run.dim,
        "net_config": asdict(run.net.cfg), "config_hash": config_hash(run.net.cfg),
        "csv_columns": CSV_COLUMNS,
    }
    with open(os.path.join(cfg.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    rows, window = [], []
    for i in range(cfg.steps):
        m = step(run, ds.sample(cfg.batch, data_rng), grid)
        window.append(m)
        if (i + 1) % cfg.eval_every == 0 or i + 1 == cfg.steps:
            row = {"iter": i + 1}
            for key in ("loss", "g_norm_mean", "vsd_loss", "aux_loss"):
                vals = [w[key] for w in window if key in w]
                row[key] = float(np.mean(vals)) if vals else None
            gmax = [w["g_norm_max"] for w in window if "g_norm_max" in w]
            row["g_norm_max"] = max(gmax) if gmax else None
            for key in ("w_q10", "w_q50", "w_q90"):
                row[key] = window[-1].get(key)
            row.update(evaluate(run))
            rows.append(row)
            window = []
            if log:
                log(" ".join(f"{k}={_fmt(row.get(k))}" for k in CSV_COLUMNS if row.get(k) is not None))
    path = os.path.join(cfg.out, "metrics.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row.get(k)) for k in CSV_COLUMNS])
    ckpt.save(os.path.join(cfg.out, CKPT_NAME), to_checkpoint(run))
    return {"rows": rows, "run": run, "out": cfg.out}
