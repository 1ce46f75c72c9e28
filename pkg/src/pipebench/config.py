"""Flat ``key = value`` config files resolved over built-in defaults.

Keys are ``data.<field>`` for the dataset, ``<stage>.<field>`` for a training
stage (``cnn``, ``transformer``, ``composite``, ``baseline``), plus the bare
keys ``seed``, ``out`` and ``workers``. A bare training key such as
``learning_rate`` applies to the stages of the command being run. Later layers
win: defaults, then the file, then command-line overrides; inside one layer a
qualified key beats a bare one.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .pipelines import DEFAULTS, STAGES, TrainConfig
from .scenegen import DatasetConfig

DATA_FIELDS = ("n_train", "n_eval", "n_test", "image_size", "image_h", "image_w", "seed", "margin",
               "min_separation", "square_side_px", "triangle_side_px", "tie_epsilon", "dir")
TOP_KEYS = ("seed", "out", "workers")
_TRAIN_TYPES = typing.get_type_hints(TrainConfig)
_DATA_TYPES = {**typing.get_type_hints(DatasetConfig), "n_train": int, "image_size": int, "dir": str}


@dataclass
class Resolved:
    dataset: DatasetConfig
    data_dir: str | None
    train: dict[str, TrainConfig]
    out: str | None
    workers: int
    values: dict[str, str] = field(default_factory=dict)  # fully qualified, as resolved

    def dump(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.values.items()))


def parse_text(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[k] = v
    return out


def parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _convert(key: str, value: str, typ):
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value.lower() in ("", "none"):
            return None
        typ = next(a for a in args if a is not type(None))
    try:
        if typ is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        return str(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot read {value!r} as {typ.__name__}") from None


def convert_train_value(key: str, value: str):
    """Type a training-key value; ``key`` may carry a stage prefix."""
    name = key.split(".", 1)[1] if "." in key else key
    if name not in _TRAIN_TYPES:
        raise ConfigError(f"unknown training key {key!r}")
    return _convert(key, value, _TRAIN_TYPES[name])


def _qualify(layer: dict[str, str], stages: tuple[str, ...]) -> dict[str, str]:
    bare: dict[str, str] = {}
    qualified: dict[str, str] = {}
    for k, v in layer.items():
        if "." in k:
            section, name = k.split(".", 1)
            if section == "data":
                if name not in DATA_FIELDS:
                    raise ConfigError(f"unknown config key {k!r}")
            elif section in STAGES:
                if name not in _TRAIN_TYPES:
                    raise ConfigError(f"unknown config key {k!r}")
            else:
                raise ConfigError(f"unknown config key {k!r}")
            qualified[k] = v
        elif k == "seed":
            bare["data.seed"] = v
            for s in STAGES:
                bare[f"{s}.seed"] = v
        elif k in TOP_KEYS:
            qualified[k] = v
        elif k in _TRAIN_TYPES:
            for s in stages:
                bare[f"{s}.{k}"] = v
        else:
            raise ConfigError(f"unknown config key {k!r}")
    return {**bare, **qualified}


def resolve_config(path: str | Path | None = None, overrides: dict[str, str] | None = None,
                   stages: tuple[str, ...] = STAGES) -> Resolved:
    """Defaults, then the file at ``path``, then ``overrides``."""
    merged: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config file {p}: {e.strerror or e}") from None
        merged.update(_qualify(parse_text(text, str(p)), stages))
    merged.update(_qualify(overrides or {}, stages))

    data_kw: dict = {}
    size = merged.get("data.image_size")
    if size is not None:
        data_kw["image_h"] = data_kw["image_w"] = _convert("data.image_size", size, int)
    for name in DATA_FIELDS:
        key = f"data.{name}"
        if key in merged and name not in ("image_size", "dir", "n_train"):
            data_kw[name] = _convert(key, merged[key], _DATA_TYPES[name])
    ds_defaults = DatasetConfig.__dataclass_fields__
    n_eval = data_kw.get("n_eval", ds_defaults["n_eval"].default)
    n_test = data_kw.get("n_test", ds_defaults["n_test"].default)
    if "data.n_train" in merged:
        data_kw["n_samples"] = _convert("data.n_train", merged["data.n_train"], int) + n_eval + n_test
    try:
        dataset = DatasetConfig(**data_kw)
    except ValueError as e:
        raise ConfigError(f"invalid dataset settings: {e}") from None

    train = {}
    for stage in STAGES:
        kw = {}
        for name, typ in _TRAIN_TYPES.items():
            key = f"{stage}.{name}"
            if key in merged:
                kw[name] = _convert(key, merged[key], typ)
        try:
            train[stage] = dataclasses.replace(DEFAULTS[stage], **kw)
        except ValueError as e:
            raise ConfigError(f"invalid {stage} settings: {e}") from None

    workers = _convert("workers", merged.get("workers", "1"), int)
    values = {f"data.{k}": str(v) for k, v in dataclasses.asdict(dataset).items()
              if k not in ("n_samples", "channels", "n_squares", "stream")}
    values["data.n_train"] = str(dataset.n_train)
    values["data.dir"] = merged.get("data.dir", "")
    for stage, cfg in train.items():
        values.update({f"{stage}.{k}": str(v) for k, v in dataclasses.asdict(cfg).items()})
    values["out"] = merged.get("out", "")
    values["workers"] = str(workers)
    return Resolved(dataset=dataset, data_dir=merged.get("data.dir") or None, train=train,
                    out=merged.get("out") or None, workers=workers, values=values)
