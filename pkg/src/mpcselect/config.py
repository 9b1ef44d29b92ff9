"""Experiment configuration: a line-oriented key=value grammar with sections.

The format is INI-style (configparser): `[section]` headers, one `key = value`
per line, `#` comments.  Every knob has a documented default below; an
effective-config echo can be emitted and re-parsed to identical values.

All randomness flows from one master seed through named substreams, so runs
are reproducible end to end and consuming one stream never perturbs another.
"""

import configparser
import io
from dataclasses import dataclass, field

import numpy as np

from .nn import TransformerConfig
from .protocols import CompareCostConfig, KernelConfig
from .proxy import ProxySpec
from .ring import FixedPointCodec, Ring
from .scheduler import ComputeModel
from .selection import PhasePlan, PhaseSpec
from .approx import TrainConfig
from .transport import NetworkModel


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


# substream ids off the master seed; order is part of the file format
STREAMS = ("dealer", "weights", "data", "synth", "bootstrap", "quickselect")


def substream(seed: int, name: str) -> np.random.Generator:
    if name not in STREAMS:
        raise ConfigError(f"unknown stream {name!r}")
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(100 + STREAMS.index(name),))
    )


def substream_seed(seed: int, name: str) -> int:
    """A derived 63-bit integer seed for components that seed themselves."""
    ss = np.random.SeedSequence(seed, spawn_key=(100 + STREAMS.index(name),))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


DEFAULTS = {
    "ring": {"bits": "64", "frac_bits": "16"},
    "network": {"bandwidth": "100e6", "latency": "0.1"},
    "compare": {"mode": "model", "rounds": "8", "bytes": "432"},
    "kernels": {
        "exp_iterations": "8",
        "reciprocal_iterations": "10",
        "rsqrt_iterations": "10",
        "log_iterations": "15",
        "domain_mode": "permissive",
    },
    "model": {
        "layers": "2",
        "heads": "4",
        "dim": "32",
        "seq_len": "32",
        "classes": "4",
        "mask_value": "-3",
        "ffn_dim": "0",
        "vocab": "0",
    },
    "data": {"count": "64", "batch_size": "2"},
    "plan": {
        # l,w,d,alpha per phase, semicolon separated: the 2-phase (2,16) schedule
        "phases": "1,1,2,0.5; 2,4,16,0.3",
        "bootstrap_fraction": "0.05",
        "budget": "0",  # 0 = unconstrained; else bootstrap + final set size
    },
    "train": {
        "synth_n": "131072",
        "lr": "0.05",
        "epochs": "16",
        "batch_size": "256",
        "holdout_frac": "0.1",
    },
    "compute": {"flops_per_second": "2e9"},
    "schedule": {"window": "2", "memory_cap": "0", "latency_threshold": "4096"},
    "run": {
        "seed": "42",
        "transport": "loopback",
        "variant": "full",
        "appraise": "open",
        "appraise_threshold": "0.5",
        "out": "out",
        "port": "29550",
    },
}


@dataclass
class ExperimentConfig:
    codec: FixedPointCodec
    network: NetworkModel
    compare: CompareCostConfig
    kernels: KernelConfig
    model: TransformerConfig
    data_count: int
    batch_size: int
    plan: PhasePlan
    train: TrainConfig
    compute: ComputeModel
    window: int
    memory_cap: int | None
    latency_threshold: float
    seed: int
    transport: str
    variant: str
    appraise: str | None
    appraise_threshold: float
    out_dir: str
    port: int
    raw: dict = field(default_factory=dict)

    def rng(self, name: str) -> np.random.Generator:
        return substream(self.seed, name)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            synth_n=self.train.synth_n,
            lr=self.train.lr,
            epochs=self.train.epochs,
            batch_size=self.train.batch_size,
            holdout_frac=self.train.holdout_frac,
            seed=substream_seed(self.seed, "synth"),
        )


def _parse_phases(text: str) -> PhasePlan:
    phases = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        bits = [p.strip() for p in part.split(",")]
        if len(bits) != 4:
            raise ConfigError(f"phase needs l,w,d,alpha: got {part!r}")
        l, w, d = (int(b) for b in bits[:3])
        phases.append(PhaseSpec(ProxySpec(l, w, d), float(bits[3])))
    if not phases:
        raise ConfigError("plan has no phases")
    return phases


def parse(text: str = "", overrides: dict | None = None) -> ExperimentConfig:
    """Parse a config file body over the documented defaults."""
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    if text:
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"bad config syntax: {e}") from e
    for (section, key), value in (overrides or {}).items():
        if not cp.has_section(section):
            raise ConfigError(f"unknown section {section!r}")
        cp.set(section, key, str(value))

    try:
        ring = Ring(cp.getint("ring", "bits"))
        codec = FixedPointCodec(cp.getint("ring", "frac_bits"), ring)
        network = NetworkModel(
            float(cp.get("network", "bandwidth")), float(cp.get("network", "latency"))
        )
        compare = CompareCostConfig(
            cp.get("compare", "mode"),
            cp.getint("compare", "rounds"),
            cp.getint("compare", "bytes"),
        )
        if compare.mode not in ("model", "analytic"):
            raise ConfigError(f"compare mode must be model|analytic, got {compare.mode!r}")
        kernels = KernelConfig(
            cp.getint("kernels", "exp_iterations"),
            cp.getint("kernels", "reciprocal_iterations"),
            cp.getint("kernels", "rsqrt_iterations"),
            cp.getint("kernels", "log_iterations"),
            cp.get("kernels", "domain_mode"),
        )
        model = TransformerConfig(
            layers=cp.getint("model", "layers"),
            heads=cp.getint("model", "heads"),
            dim=cp.getint("model", "dim"),
            seq_len=cp.getint("model", "seq_len"),
            classes=cp.getint("model", "classes"),
            mask_value=cp.getfloat("model", "mask_value"),
            ffn_dim=cp.getint("model", "ffn_dim"),
            vocab=cp.getint("model", "vocab"),
        )
        phases = _parse_phases(cp.get("plan", "phases"))
        budget = cp.getint("plan", "budget")
        plan = PhasePlan(
            phases=tuple(phases),
            bootstrap_fraction=cp.getfloat("plan", "bootstrap_fraction"),
            budget=budget if budget > 0 else None,
        )
        train = TrainConfig(
            synth_n=cp.getint("train", "synth_n"),
            lr=cp.getfloat("train", "lr"),
            epochs=cp.getint("train", "epochs"),
            batch_size=cp.getint("train", "batch_size"),
            holdout_frac=cp.getfloat("train", "holdout_frac"),
        )
        compute = ComputeModel(float(cp.get("compute", "flops_per_second")))
        mem_cap = cp.getint("schedule", "memory_cap")
        cfg = ExperimentConfig(
            codec=codec,
            network=network,
            compare=compare,
            kernels=kernels,
            model=model,
            data_count=cp.getint("data", "count"),
            batch_size=cp.getint("data", "batch_size"),
            plan=plan,
            train=train,
            compute=compute,
            window=cp.getint("schedule", "window"),
            memory_cap=mem_cap if mem_cap > 0 else None,
            latency_threshold=cp.getfloat("schedule", "latency_threshold"),
            seed=cp.getint("run", "seed"),
            transport=cp.get("run", "transport"),
            variant=cp.get("run", "variant"),
            appraise=cp.get("run", "appraise") or None,
            appraise_threshold=cp.getfloat("run", "appraise_threshold"),
            out_dir=cp.get("run", "out"),
            port=cp.getint("run", "port"),
            raw={s: dict(cp.items(s)) for s in cp.sections()},
        )
    except (ValueError, configparser.Error) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e

    if cfg.transport not in ("loopback", "socket"):
        raise ConfigError(f"transport must be loopback|socket, got {cfg.transport!r}")
    if cfg.variant not in ("P", "PM", "PMT", "full"):
        raise ConfigError(f"variant must be P|PM|PMT|full, got {cfg.variant!r}")
    if cfg.appraise not in (None, "open", "threshold", "none"):
        raise ConfigError(f"appraise must be open|threshold|none, got {cfg.appraise!r}")
    if cfg.appraise == "none":
        cfg.appraise = None
    for ph in cfg.plan.phases:
        if ph.proxy.layers > cfg.model.layers:
            raise ConfigError(
                f"phase wants {ph.proxy.layers} layers, model has {cfg.model.layers}"
            )
        if ph.proxy.heads > cfg.model.heads:
            raise ConfigError(
                f"phase wants {ph.proxy.heads} heads, model has {cfg.model.heads}"
            )
    if cfg.data_count < 4:
        raise ConfigError("data count must be at least 4")
    if cfg.batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    return cfg


def load(path: str, overrides: dict | None = None) -> ExperimentConfig:
    with open(path) as f:
        return parse(f.read(), overrides)


def effective_text(cfg: ExperimentConfig) -> str:
    """Echo the effective configuration; parsing it back is the identity."""
    cp = configparser.ConfigParser()
    cp.read_dict(cfg.raw)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
