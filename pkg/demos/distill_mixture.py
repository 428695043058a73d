"""Train a diffusion teacher on an 8-mode ring, then distill it into a two-step sampler.

    python demos/distill_mixture.py            # about four minutes on one core
    python demos/distill_mixture.py --quick    # smoke run
"""
import sys

import numpy as np

from trigflow.harness.config import RunConfig
from trigflow.harness.datasets import mixture_centers
from trigflow.harness.experiment import CKPT_NAME, run_experiment
from trigflow.harness.metrics import mode_masses
from trigflow.samplers import cm_sample

quick = "--quick" in sys.argv
teacher_steps, student_steps = (300, 200) if quick else (5000, 3000)
toy = dict(hidden=64, depth=3, cond_dim=64, eval_samples=5000)

# %% teacher: plain TrigFlow diffusion, scored with 64 DDIM steps
teach = run_experiment(RunConfig(mode="diffusion", steps=teacher_steps, eval_every=teacher_steps,
                                 out="runs/demo_teacher", **toy))
print("teacher energy distance:", round(teach["rows"][-1]["dist_pfode"], 5))

# %% student: continuous-time distillation, starting from the teacher weights
log = lambda s: print("  " + s)  # noqa: E731
student = run_experiment(
    RunConfig(mode="scd", steps=student_steps, eval_every=max(student_steps // 4, 1), lr=3e-4,
              warmup=500, ema_decay=0.995, teacher=f"runs/demo_teacher/{CKPT_NAME}",
              out="runs/demo_scd", **toy),
    log=log,
)
last = student["rows"][-1]
print(f"one step {last['dist_1step']:.5f}, two steps {last['dist_2step']:.5f}")

# %% every mode should carry about 1/8 of the mass
run = student["run"]
x = cm_sample(run.net.bind(run.state.ema), 10_000, 2, run.sigma_d, np.random.default_rng(0), n_steps=2)
print("mode masses:", mode_masses(x, mixture_centers()).round(3))
