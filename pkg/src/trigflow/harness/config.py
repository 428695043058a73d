"""Run configuration read from a ``key = value`` file."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass

from ..core import ProposalParams
from ..net import NetConfig, TimeEmbedConfig
from ..samplers import STEPPERS, SamplerConfig
from ..train import AdamConfig, TangentConfig, TrainConfig
from ..vsd import VsdConfig

MODES = ("diffusion", "sct", "scd", "dscd", "vsd", "scd-vsd")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "diffusion"
    dataset: str = "mixture2d"
    data_dim: int = 0
    data_std: float = 0.0
    # 0 means estimate from 10^5 data samples
    sigma_d: float = 0.0
    seed: int = 0
    out: str = "runs/default"

    hidden: int = 128
    depth: int = 3
    cond_dim: int = 64
    embed_dim: int = 64
    embed_scale: float = 0.02
    c_noise: str = "trig"
    attention: bool = False
    heads: int = 1
    attn_block: int = 4

    steps: int = 5000
    batch: int = 256
    eval_every: int = 1000
    eval_samples: int = 5000

    diff_lr: float = 2e-3
    diff_p_mean: float = -0.8
    diff_p_std: float = 1.6
    diff_ema: float = 0.999

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-11
    p_mean: float = -1.0
    p_std: float = 1.4
    tangent_c: float = 0.1
    tangent_mode: str = "normalize"
    warmup: int = 10000
    ema_decay: float = 0.999

    dscd_n: int = 32

    vsd_lambda: float = 1.0
    vsd_p_mean: float = 0.4
    vsd_p_std: float = 2.0
    aux_p_mean: float = -1.0
    aux_p_std: float = 1.4
    aux_lr: float = 2e-3
    psi_lr: float = 1e-3

    # teacher checkpoint for distillation; "analytic" for Gaussian datasets
    teacher: str = ""
    sampler: str = "ddim"
    sampler_steps: int = 64

    def __post_init__(self):
        errs = []
        if self.mode not in MODES:
            errs.append(f"mode must be one of {MODES}")
        if self.sampler not in STEPPERS:
            errs.append(f"sampler must be one of {sorted(STEPPERS)}")
        for name in ("steps", "batch", "eval_every", "eval_samples", "sampler_steps",
                     "hidden", "depth", "cond_dim", "embed_dim"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be positive")
        if self.sigma_d < 0 or self.data_std < 0:
            errs.append("sigma_d and data_std must be non-negative")
        if self.dscd_n < 2:
            errs.append("dscd_n must be at least 2")
        if errs:
            raise ValueError("invalid run config: " + "; ".join(errs))

    def net_config(self, dim: int, sigma_d: float) -> NetConfig:
        return NetConfig(
            dim=dim, hidden=self.hidden, depth=self.depth, cond_dim=self.cond_dim,
            embed=TimeEmbedConfig(self.embed_dim, self.embed_scale), c_noise=self.c_noise,
            sigma_d=sigma_d, attention=self.attention, heads=self.heads,
            attn_block=self.attn_block,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            mode="ct" if self.mode == "sct" else "cd",
            proposal=ProposalParams(self.p_mean, self.p_std),
            tangent=TangentConfig(self.tangent_c, self.warmup, self.tangent_mode),
            adam=AdamConfig(self.lr, self.beta1, self.beta2, self.adam_eps),
            ema_decay=self.ema_decay,
        )

    def diff_adam(self) -> AdamConfig:
        return AdamConfig(self.diff_lr, self.beta1, self.beta2, self.adam_eps)

    def vsd_config(self) -> VsdConfig:
        return VsdConfig(
            lam=self.vsd_lambda,
            gen_proposal=ProposalParams(self.vsd_p_mean, self.vsd_p_std),
            aux_proposal=ProposalParams(self.aux_p_mean, self.aux_p_std),
            aux_adam=AdamConfig(self.aux_lr, self.beta1, self.beta2, self.adam_eps),
            psi_adam=AdamConfig(self.psi_lr, self.beta1, self.beta2, self.adam_eps),
        )

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.sampler, self.sampler_steps)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _coerce(field: dataclasses.Field, raw: str):
    typ = field.type if isinstance(field.type, str) else field.type.__name__
    if typ == "bool":
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"{field.name}: cannot read {raw!r} as a boolean")
        return low in ("1", "true", "yes", "on")
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw.strip()


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines (an optional ``[run]`` header is allowed)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    cp.read_string(text)
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    kw = {}
    for key, raw in cp["run"].items():
        key = key.replace("-", "_")
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        kw[key] = _coerce(fields[key], raw)
    return RunConfig(**kw)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


def config_hash(net_cfg: NetConfig) -> str:
    """SHA-256 over the canonical JSON of the network config."""
    blob = json.dumps(dataclasses.asdict(net_cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
