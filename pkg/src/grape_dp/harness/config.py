"""Flat key=value experiment configuration with CLI flag overrides."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigurationError, InvalidArgumentError
from ..models import ModelSpec
from ..optimizers import AdamHyper

METHODS = ("adam", "galore", "dp-adam", "naive-dp-galore", "dp-grape", "block-sgd")
PRIVATE_METHODS = ("dp-adam", "naive-dp-galore", "dp-grape", "block-sgd")

_DEFAULTS = {
    "method": "dp-grape",
    "model.sizes": "20,2",
    "model.activation": "tanh",
    "model.loss": "cross-entropy",
    "model.bias": "true",
    "data.source": "two-class-margin",
    "data.n": "1024",
    "data.dim": "20",
    "data.classes": "2",
    "data.margin": "1.0",
    "data.images": "",
    "data.labels": "",
    "eval.fraction": "0.2",
    "priv.epsilon": "",
    "priv.delta": "auto",
    "priv.clip": "1.0",
    "priv.sigma": "",
    "proj.r": "4",
    "proj.f": "20",
    "opt.lr": "0.01",
    "opt.beta1": "0.9",
    "opt.beta2": "0.999",
    "opt.phi": "1e-8",
    "train.steps": "",
    "train.epochs": "1",
    "train.batch": "64",
    "train.micro_batch": "",
    "train.record_every": "10",
    "train.theory_final_iterate": "false",
    "seed": "0",
    "out": "train.csv",
}


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read ``key = value`` lines; '#' starts a comment, blank lines ignored."""
    values: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _as_bool(key: str, raw: str) -> bool:
    if raw.lower() in ("true", "1", "yes", "on"):
        return True
    if raw.lower() in ("false", "0", "no", "off"):
        return False
    raise ConfigurationError(f"field {key}: expected a boolean, got {raw!r}")


def _as_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigurationError(f"field {key}: expected a number, got {raw!r}") from None


def _as_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"field {key}: expected an integer, got {raw!r}") from None


def _optional_float(key: str, raw: str) -> float | None:
    if raw == "" or raw.lower() in ("none", "off"):
        return None
    return _as_float(key, raw)


@dataclass
class ExperimentConfig:
    method: str
    model: ModelSpec
    data_source: str
    data_n: int
    data_dim: int
    data_classes: int
    data_margin: float
    data_images: str
    data_labels: str
    eval_fraction: float
    epsilon: float | None
    delta: float | None  # None means auto (1 / training-set size)
    clip: float | None
    sigma: float | None
    rank: int
    refresh_every: int
    hyper: AdamHyper
    steps: int | None
    epochs: int
    batch: int
    micro_batch: int | None
    record_every: int
    theory_final_iterate: bool
    seed: int
    out: str
    raw: dict[str, str] = field(default_factory=dict)

    @property
    def is_private(self) -> bool:
        return self.method in PRIVATE_METHODS


def build_config(
    config_path: str | Path | None = None, overrides: dict[str, str] | None = None
) -> ExperimentConfig:
    """Merge defaults, an optional config file, and CLI overrides (flags win)."""
    values = dict(_DEFAULTS)
    if config_path is not None:
        file_values = parse_config_file(config_path)
        unknown = set(file_values) - set(_DEFAULTS)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        values.update(file_values)
    for key, val in (overrides or {}).items():
        if key not in _DEFAULTS:
            raise ConfigurationError(f"unknown config key {key!r}")
        values[key] = str(val)

    method = values["method"]
    if method not in METHODS:
        raise ConfigurationError(f"field method: unknown method {values['method']!r}")

    sizes = [_as_int("model.sizes", s) for s in values["model.sizes"].split(",") if s.strip()]
    try:
        model = ModelSpec.mlp(
            sizes,
            activation=values["model.activation"],
            loss=values["model.loss"],
            include_bias=_as_bool("model.bias", values["model.bias"]),
        )
    except InvalidArgumentError as exc:
        raise ConfigurationError(f"field model.*: {exc}") from exc

    source = values["data.source"]
    if source == "idx-files":
        for key in ("data.images", "data.labels"):
            path = values[key]
            if not path:
                raise ConfigurationError(f"field {key}: required for idx-files")
            if not Path(path).exists():
                raise ConfigurationError(f"field {key}: file {path!r} does not exist")

    delta_raw = values["priv.delta"]
    delta = None if delta_raw.lower() in ("auto", "") else _as_float("priv.delta", delta_raw)
    if delta is not None and not 0.0 < delta < 1.0:
        raise ConfigurationError(f"field priv.delta: must lie in (0,1), got {delta}")

    steps_raw = values["train.steps"]
    cfg = ExperimentConfig(
        method=method,
        model=model,
        data_source=source,
        data_n=_as_int("data.n", values["data.n"]),
        data_dim=_as_int("data.dim", values["data.dim"]),
        data_classes=_as_int("data.classes", values["data.classes"]),
        data_margin=_as_float("data.margin", values["data.margin"]),
        data_images=values["data.images"],
        data_labels=values["data.labels"],
        eval_fraction=_as_float("eval.fraction", values["eval.fraction"]),
        epsilon=_optional_float("priv.epsilon", values["priv.epsilon"]),
        delta=delta,
        clip=_optional_float("priv.clip", values["priv.clip"]),
        sigma=_optional_float("priv.sigma", values["priv.sigma"]),
        rank=_as_int("proj.r", values["proj.r"]),
        refresh_every=_as_int("proj.f", values["proj.f"]),
        hyper=AdamHyper(
            eta=_as_float("opt.lr", values["opt.lr"]),
            beta1=_as_float("opt.beta1", values["opt.beta1"]),
            beta2=_as_float("opt.beta2", values["opt.beta2"]),
            phi=_as_float("opt.phi", values["opt.phi"]),
        ),
        steps=None if steps_raw == "" else _as_int("train.steps", steps_raw),
        epochs=_as_int("train.epochs", values["train.epochs"]),
        batch=_as_int("train.batch", values["train.batch"]),
        micro_batch=(
            None
            if values["train.micro_batch"] == ""
            else _as_int("train.micro_batch", values["train.micro_batch"])
        ),
        record_every=_as_int("train.record_every", values["train.record_every"]),
        theory_final_iterate=_as_bool(
            "train.theory_final_iterate", values["train.theory_final_iterate"]
        ),
        seed=_as_int("seed", values["seed"]),
        out=values["out"],
        raw=values,
    )

    if cfg.is_private and cfg.clip is not None and cfg.sigma is None and cfg.epsilon is None:
        raise ConfigurationError(
            "field priv.epsilon: a private method needs either priv.epsilon "
            "(with priv.delta) or an explicit priv.sigma"
        )
    if cfg.batch < 1:
        raise ConfigurationError("field train.batch: must be >= 1")
    if not 0.0 <= cfg.eval_fraction < 1.0:
        raise ConfigurationError("field eval.fraction: must lie in [0, 1)")
    return cfg
