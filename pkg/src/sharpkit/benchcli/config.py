"""Experiment configuration and its flat ``key = value`` file format.

A config file is UTF-8 text, one ``key = value`` pair per line; ``#`` starts a
comment and blank lines are ignored. The first key must be
``schema_version``. Lists are comma separated, ``none`` is the empty value.
Every key is optional except ``schema_version``; omitted keys take the
defaults of :class:`ExperimentConfig`. See ``FIELDS`` for the schema.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from ..diffcore import HvpBackend, HvpKind
from ..modelzoo import Activation, LossKind, ModelSpec
from ..sharpopt import BaseKind, NormP, SharpnessConfig
from ..spectrum import ProbeDistribution, SpectrumSettings

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class OptimizerName(enum.Enum):
    ADAM = "ADAM"
    SGD = "SGD"
    SAM = "SAM"
    ASAM = "ASAM"
    GSAM = "GSAM"
    WSAM = "WSAM"
    CRSAM = "CRSAM"


# table row order; baselines first
OPTIMIZER_ORDER = [o.value for o in OptimizerName]
DISPLAY_NAMES = {
    "ADAM": "Adam",
    "SGD": "SGD",
    "SAM": "SAM",
    "ASAM": "ASAM",
    "GSAM": "GSAM",
    "WSAM": "WSAM",
    "CRSAM": "CRSAM",
}


@dataclass(frozen=True)
class DatasetConfig:
    name: str = "two_moons"
    n: int = 200
    noise: float = 0.1
    seed: int = 3
    path: Optional[str] = None

    def params(self) -> dict:
        if self.name == "csv":
            if not self.path:
                raise ConfigError("dataset.path is required for csv datasets")
            return {"path": self.path, "seed": self.seed}
        return {"n": self.n, "noise": self.noise, "seed": self.seed}


@dataclass(frozen=True)
class StopConfig:
    target_train_accuracy: float = 1.0
    max_epochs: int = 2000

    def __post_init__(self):
        if not 0 <= self.target_train_accuracy <= 1:
            raise ConfigError("stop.target_train_accuracy must lie in [0, 1]")
        if self.max_epochs < 1:
            raise ConfigError("stop.max_epochs must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = DatasetConfig()
    model: ModelSpec = ModelSpec((2, 16, 2))
    optimizer: OptimizerName = OptimizerName.ADAM
    base_kind: BaseKind = BaseKind.ADAM
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    sharpness: SharpnessConfig = SharpnessConfig()
    ascent_steps: int = 20
    stop: StopConfig = StopConfig()
    seeds: tuple[int, ...] = (0,)
    spectrum: SpectrumSettings = SpectrumSettings()
    label: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "optimizer", OptimizerName(self.optimizer))
        object.__setattr__(self, "base_kind", BaseKind(self.base_kind))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")

    @property
    def effective_base(self) -> BaseKind:
        if self.optimizer is OptimizerName.ADAM:
            return BaseKind.ADAM
        if self.optimizer is OptimizerName.SGD:
            return BaseKind.SGD
        return self.base_kind

    @property
    def display_name(self) -> str:
        return self.label or DISPLAY_NAMES[self.optimizer.value]


# ---------------------------------------------------------------------------
# flat encoding
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, enum.Enum):
        return str(v.value)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _opt(conv):
    return lambda s: None if s.strip().lower() in ("none", "") else conv(s)


def _ints(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


def _str(s):
    return s


# key -> (getter, parser)
FIELDS = {
    "dataset.name": (lambda c: c.dataset.name, _str),
    "dataset.n": (lambda c: c.dataset.n, _int),
    "dataset.noise": (lambda c: c.dataset.noise, _float),
    "dataset.seed": (lambda c: c.dataset.seed, _int),
    "dataset.path": (lambda c: c.dataset.path, _opt(_str)),
    "model.layer_sizes": (lambda c: c.model.layer_sizes, _ints),
    "model.activation": (lambda c: c.model.activation, Activation),
    "model.loss": (lambda c: c.model.loss, LossKind),
    "model.init_seed": (lambda c: c.model.init_seed, _int),
    "optimizer": (lambda c: c.optimizer, lambda s: OptimizerName(s.upper())),
    "base_kind": (lambda c: c.base_kind, lambda s: BaseKind(s.upper())),
    "lr": (lambda c: c.lr, _float),
    "adam_beta1": (lambda c: c.adam_beta1, _float),
    "adam_beta2": (lambda c: c.adam_beta2, _float),
    "adam_eps": (lambda c: c.adam_eps, _float),
    "batch_size": (lambda c: c.batch_size, _int),
    "sharpness.rho": (lambda c: c.sharpness.rho, _float),
    "sharpness.norm_p": (lambda c: c.sharpness.norm_p, NormP),
    "sharpness.weight_decay": (lambda c: c.sharpness.weight_decay, _float),
    "sharpness.asam_eta": (lambda c: c.sharpness.asam_eta, _float),
    "sharpness.gsam_alpha": (lambda c: c.sharpness.gsam_alpha, _float),
    "sharpness.wsam_gamma": (lambda c: c.sharpness.wsam_gamma, _float),
    "sharpness.cr_alpha": (lambda c: c.sharpness.cr_alpha, _float),
    "sharpness.cr_beta": (lambda c: c.sharpness.cr_beta, _float),
    "sharpness.cr_trace_floor": (lambda c: c.sharpness.cr_trace_floor, _float),
    "sharpness.ascent_steps": (lambda c: c.ascent_steps, _int),
    "stop.target_train_accuracy": (lambda c: c.stop.target_train_accuracy, _float),
    "stop.max_epochs": (lambda c: c.stop.max_epochs, _int),
    "seeds": (lambda c: c.seeds, _ints),
    "spectrum.max_iters": (lambda c: c.spectrum.max_iters, _int),
    "spectrum.tol": (lambda c: c.spectrum.tol, _float),
    "spectrum.n_probes": (lambda c: c.spectrum.n_probes, _int),
    "spectrum.distribution": (lambda c: c.spectrum.distribution, ProbeDistribution),
    "spectrum.n_probes_per_batch": (lambda c: c.spectrum.n_probes_per_batch, _int),
    "spectrum.n_batches": (lambda c: c.spectrum.n_batches, _opt(_int)),
    "spectrum.backend": (lambda c: c.spectrum.backend.kind, HvpKind),
    "spectrum.fd_step": (lambda c: c.spectrum.backend.fd_step, _opt(_float)),
    "spectrum.seed": (lambda c: c.spectrum.seed, _int),
    "label": (lambda c: c.label, _opt(_str)),
}


def to_flat(cfg: ExperimentConfig) -> dict[str, str]:
    out = {"schema_version": str(SCHEMA_VERSION)}
    for key, (get, _) in FIELDS.items():
        out[key] = _fmt(get(cfg))
    return out


def from_flat(flat: dict[str, str]) -> ExperimentConfig:
    flat = dict(flat)
    version = flat.pop("schema_version", None)
    if version is None:
        raise ConfigError("missing schema_version")
    if int(version) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    unknown = set(flat) - set(FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        v = {k: FIELDS[k][1](s.strip()) for k, s in flat.items()}
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    d = ExperimentConfig()

    def pick(key, default):
        return v.get(key, default)

    try:
        dataset = DatasetConfig(
            pick("dataset.name", d.dataset.name),
            pick("dataset.n", d.dataset.n),
            pick("dataset.noise", d.dataset.noise),
            pick("dataset.seed", d.dataset.seed),
            pick("dataset.path", d.dataset.path),
        )
        model = ModelSpec(
            pick("model.layer_sizes", d.model.layer_sizes),
            pick("model.activation", d.model.activation),
            pick("model.loss", d.model.loss),
            pick("model.init_seed", d.model.init_seed),
        )
        sh = d.sharpness
        sharpness = SharpnessConfig(
            rho=pick("sharpness.rho", sh.rho),
            norm_p=pick("sharpness.norm_p", sh.norm_p),
            weight_decay=pick("sharpness.weight_decay", sh.weight_decay),
            asam_eta=pick("sharpness.asam_eta", sh.asam_eta),
            gsam_alpha=pick("sharpness.gsam_alpha", sh.gsam_alpha),
            wsam_gamma=pick("sharpness.wsam_gamma", sh.wsam_gamma),
            cr_alpha=pick("sharpness.cr_alpha", sh.cr_alpha),
            cr_beta=pick("sharpness.cr_beta", sh.cr_beta),
            cr_trace_floor=pick("sharpness.cr_trace_floor", sh.cr_trace_floor),
        )
        sp = d.spectrum
        spectrum = SpectrumSettings(
            max_iters=pick("spectrum.max_iters", sp.max_iters),
            tol=pick("spectrum.tol", sp.tol),
            n_probes=pick("spectrum.n_probes", sp.n_probes),
            distribution=pick("spectrum.distribution", sp.distribution),
            n_probes_per_batch=pick("spectrum.n_probes_per_batch", sp.n_probes_per_batch),
            n_batches=pick("spectrum.n_batches", sp.n_batches),
            backend=HvpBackend(
                pick("spectrum.backend", sp.backend.kind),
                pick("spectrum.fd_step", sp.backend.fd_step),
            ),
            seed=pick("spectrum.seed", sp.seed),
        )
        return ExperimentConfig(
            dataset=dataset,
            model=model,
            optimizer=pick("optimizer", d.optimizer),
            base_kind=pick("base_kind", d.base_kind),
            lr=pick("lr", d.lr),
            adam_beta1=pick("adam_beta1", d.adam_beta1),
            adam_beta2=pick("adam_beta2", d.adam_beta2),
            adam_eps=pick("adam_eps", d.adam_eps),
            batch_size=pick("batch_size", d.batch_size),
            sharpness=sharpness,
            ascent_steps=pick("sharpness.ascent_steps", d.ascent_steps),
            stop=StopConfig(
                pick("stop.target_train_accuracy", d.stop.target_train_accuracy),
                pick("stop.max_epochs", d.stop.max_epochs),
            ),
            seeds=pick("seeds", d.seeds),
            spectrum=spectrum,
            label=pick("label", d.label),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def dumps(cfg: ExperimentConfig) -> str:
    lines = [f"{k} = {v}" for k, v in to_flat(cfg).items()]
    return "\n".join(lines) + "\n"


def loads(text: str) -> ExperimentConfig:
    flat: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        flat[key] = value
    return from_flat(flat)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def save(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")


def with_override(cfg: ExperimentConfig, key: str, value: str) -> ExperimentConfig:
    """Copy of ``cfg`` with one flat key replaced (used by sweeps)."""
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    flat = to_flat(cfg)
    flat[key] = value
    return from_flat(flat)


def with_seeds(cfg: ExperimentConfig, seeds) -> ExperimentConfig:
    return replace(cfg, seeds=tuple(seeds))
