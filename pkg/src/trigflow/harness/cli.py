"""Command-line entry point: ``python -m trigflow <subcommand>``."""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time

import numpy as np

from .. import samplers
from ..attention import AttnBlockState, attention_jvp, dense_attention_jvp_oracle
from ..core import edm_schedule, flow_matching_schedule, schedule_to_trigflow, trigflow_schedule
from ..core import trigflow_to_schedule
from ..net import Net
from . import checkpoint as ckpt
from .config import RunConfig, dump_config, load_config
from .experiment import CKPT_NAME, _dataset, net_config_from_meta, run_experiment
from .metrics import energy_distance, sliced_wasserstein

TRAIN_MODES = {
    "train-diffusion": "diffusion", "train-sct": "sct", "train-scd": "scd",
    "train-dscd": "dscd", "train-vsd": "vsd", "train-scd-vsd": "scd-vsd",
}


def _thread_limit():
    n = os.environ.get("TRIGFLOW_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.out:
        kw["out"] = args.out
    if args.steps is not None:
        kw["steps"] = args.steps
    if getattr(args, "method", None) and args.method in samplers.STEPPERS:
        kw["sampler"] = args.method
    return cfg.replace(**kw) if kw else cfg


def cmd_train(args, mode: str):
    cfg = _resolve(args).replace(mode=mode)
    if args.ckpt:
        cfg = cfg.replace(teacher=args.ckpt)
    res = run_experiment(cfg, log=print)
    print(f"wrote {os.path.join(cfg.out, 'metrics.csv')} and {os.path.join(cfg.out, CKPT_NAME)}")
    return res


def _load_model(path: str):
    ck = ckpt.load(path)
    ncfg = net_config_from_meta(ck.meta)
    return ck, Net(ncfg), float(ck.meta["sigma_d"])


def _draw(args, ck, net, sigma_d, n):
    cfg = RunConfig(**ck.meta["run_config"])
    method = args.method or ("cm2" if cfg.mode != "diffusion" else cfg.sampler)
    steps = args.steps or cfg.sampler_steps
    rng = np.random.default_rng(args.seed if args.seed is not None else cfg.seed)
    F = net.bind(ck.group("ema"))
    if method in ("cm1", "cm2"):
        return samplers.cm_sample(F, n, net.cfg.dim, sigma_d, rng, n_steps=int(method[-1])), cfg
    x = samplers.sample_pfode(F, n, net.cfg.dim, sigma_d, rng, samplers.SamplerConfig(method, steps))
    return x, cfg


def cmd_sample(args):
    if not args.ckpt:
        raise SystemExit("sample needs --ckpt")
    ck, net, sigma_d = _load_model(args.ckpt)
    x, _ = _draw(args, ck, net, sigma_d, args.n)
    out = args.out or "samples.csv"
    np.savetxt(out, x, delimiter=",", fmt="%.17g")
    print(f"wrote {len(x)} samples to {out}")


def cmd_eval(args):
    if not args.ckpt:
        raise SystemExit("eval needs --ckpt")
    ck, net, sigma_d = _load_model(args.ckpt)
    x, cfg = _draw(args, ck, net, sigma_d, args.n)
    ref = _dataset(cfg).sample(args.n, np.random.default_rng(cfg.seed + 1_000_003))
    res = {"energy": energy_distance(x, ref), "sliced_w": sliced_wasserstein(x, ref)}
    print(json.dumps(res, sort_keys=True))
    return res


SCHEDULES = {"flow_matching": flow_matching_schedule, "trigflow": trigflow_schedule}


def _schedule(name: str, sigma_d: float):
    if name == "edm":
        return edm_schedule(sigma_d)
    if name not in SCHEDULES:
        raise SystemExit(f"unknown schedule {name!r}")
    return SCHEDULES[name]()


def cmd_convert(args):
    """Rows ``time, x_1 .. x_D`` under one schedule to TrigFlow rows (or back with ``--inverse``)."""
    data = np.loadtxt(args.input, delimiter=",", ndmin=2)
    sched = _schedule(args.schedule, args.sigma_d)
    if args.inverse:
        u, x = trigflow_to_schedule(sched, data[:, 0], data[:, 1:])
    else:
        u, x = schedule_to_trigflow(sched, data[:, 0], data[:, 1:])
    out = args.out or "converted.csv"
    np.savetxt(out, np.column_stack([u, x]), delimiter=",", fmt="%.17g")
    print(f"wrote {len(u)} rows to {out}")


def bench_attention(lengths, block: int = 64, dim: int = 16, seed: int = 0):
    rng = np.random.default_rng(seed)
    rows = []
    for L in lengths:
        x, tx = rng.normal(size=(2, L, L))
        v, tv = rng.normal(size=(2, L, dim))
        t0 = time.perf_counter()
        y, ty = attention_jvp(x, tx, v, tv, block_size=block)
        ts = time.perf_counter() - t0
        t0 = time.perf_counter()
        yd, tyd = dense_attention_jvp_oracle(x, tx, v, tv)
        td = time.perf_counter() - t0
        st = AttnBlockState.empty((L,), dim)
        state_bytes = sum(a.nbytes for a in (st.m, st.l, st.f_v, st.f_tv, st.g, st.mu))
        rows.append({
            "L": L, "stream_s": ts, "dense_s": td,
            "stream_rows_per_s": L / ts, "dense_rows_per_s": L / td,
            # streaming holds the accumulators plus one L x block tile; dense holds p
            "stream_peak_bytes": state_bytes + 3 * L * min(block, L) * 8,
            "dense_peak_bytes": 3 * L * L * 8,
            "max_abs_err": float(max(np.abs(y - yd).max(), np.abs(ty - tyd).max())),
        })
    return rows


def cmd_bench(args):
    lengths = [64, 128, 256, 512, 1024, 2048, 4096] if not args.steps else [64 * 2 ** i for i in range(args.steps)]
    for row in bench_attention(lengths, block=args.block):
        print(json.dumps(row))


def cmd_selfcheck(args):
    from .selfcheck import run_selfcheck

    ok = run_selfcheck(print)
    if not ok:
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trigflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value run configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--ckpt")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--method")
        return sp

    for name in TRAIN_MODES:
        common(sub.add_parser(name, help=f"run {TRAIN_MODES[name]} training"))
    for name, h in (("sample", "draw samples from a checkpoint"), ("eval", "distance to held-out data")):
        sp = common(sub.add_parser(name, help=h))
        sp.add_argument("-n", type=int, default=5000)
    sp = common(sub.add_parser("convert-schedule", help="convert (time, x) rows between schedules"))
    sp.add_argument("input")
    sp.add_argument("--schedule", default="flow_matching", choices=["flow_matching", "trigflow", "edm"])
    sp.add_argument("--sigma-d", type=float, default=0.5)
    sp.add_argument("--inverse", action="store_true")
    sp = common(sub.add_parser("bench-attn-jvp", help="streaming vs dense attention JVP"))
    sp.add_argument("--block", type=int, default=64)
    common(sub.add_parser("selfcheck", help="run the numerical identity suite"))
    sp = sub.add_parser("print-config", help="print the default run configuration")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    with _thread_limit():
        if args.command in TRAIN_MODES:
            cmd_train(args, TRAIN_MODES[args.command])
        elif args.command == "sample":
            cmd_sample(args)
        elif args.command == "eval":
            cmd_eval(args)
        elif args.command == "convert-schedule":
            cmd_convert(args)
        elif args.command == "bench-attn-jvp":
            cmd_bench(args)
        elif args.command == "selfcheck":
            cmd_selfcheck(args)
        elif args.command == "print-config":
            sys.stdout.write(dump_config(RunConfig()))


if __name__ == "__main__":
    main()
