"""Run configuration: ``key = value`` text with ``[model]``, ``[train]``, ``[grid]``, ``[eval]`` sections."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace

from .bev import GridSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    encoder: str = "pillars"  # projector | pillars
    backbone: str = "gfc-m"  # gfc-t | gfc-m | rnf-s | rnf-d
    depth: int = 2
    patch: int = 4
    hidden: int = 64
    heads: int = 4
    mlp_ratio: int = 2
    c_bev: int = 64
    c_out: int = 64
    n_p: int = 16
    proj_widths: tuple = (16, 32, 64)
    rnf_widths: tuple = (16, 32, 48, 64, 64)
    rnf_lateral: int = 32


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch: int = 4
    lr: float = 2e-4
    seed: int = 0
    val_frames: int = 32
    max_train_frames: int = 0  # 0 means the whole train split
    target_f1: float = 0.0  # stop once held-out F1_conf reaches this (0 disables)


@dataclass(frozen=True)
class GridConfig:
    rows: int = 32
    cols: int = 32
    cell_dx: float = 0.96
    cell_dy: float = 0.48
    x0: float = 0.0
    y0: float = -7.68

    def spec(self) -> GridSpec:
        return GridSpec(self.rows, self.cols, self.cell_dx, self.cell_dy, self.x0, self.y0)


@dataclass(frozen=True)
class EvalConfig:
    sigma_conf: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        m, g = self.model, self.grid
        if m.encoder not in ("projector", "pillars"):
            raise ConfigError(f"unknown encoder {m.encoder!r}")
        if m.backbone not in ("gfc-t", "gfc-m", "rnf-s", "rnf-d"):
            raise ConfigError(f"unknown backbone {m.backbone!r}")
        for name in ("depth", "patch", "hidden", "heads", "mlp_ratio", "c_bev", "c_out", "n_p"):
            v = getattr(m, name)
            if v < (0 if name == "depth" else 1):
                raise ConfigError(f"model.{name} must be positive, got {v}")
        t = self.train
        if t.epochs < 0 or t.batch < 1 or t.lr < 0 or t.val_frames < 0:
            raise ConfigError("train hyperparameters must be nonnegative (batch >= 1)")
        if not 0.0 < self.eval.sigma_conf < 1.0:
            raise ConfigError("sigma_conf must lie in (0, 1)")
        if g.rows <= 0 or g.cols <= 0 or g.cell_dx <= 0 or g.cell_dy <= 0:
            raise ConfigError("grid dims and cell sizes must be positive")
        if m.backbone.startswith("gfc"):
            if g.rows % m.patch or g.cols % m.patch:
                raise ConfigError(f"grid {g.rows}x{g.cols} not divisible by patch {m.patch}")
            if m.hidden % (m.patch * m.patch):
                raise ConfigError(f"hidden {m.hidden} not divisible by patch area {m.patch ** 2}")
            if m.backbone == "gfc-t" and m.hidden % m.heads:
                raise ConfigError(f"hidden {m.hidden} not divisible by {m.heads} heads")
        elif g.rows % 32 or g.cols % 32:
            raise ConfigError(f"RNF needs grid dims divisible by 32, got {g.rows}x{g.cols}")
        return self

    def to_text(self) -> str:
        out = []
        for section in ("model", "train", "grid", "eval"):
            out.append(f"[{section}]")
            for k, v in asdict(getattr(self, section)).items():
                if isinstance(v, (tuple, list)):
                    v = ",".join(str(x) for x in v)
                out.append(f"{k} = {v}")
            out.append("")
        return "\n".join(out)


# Named presets. Widths are desk-scaled; depth/patch/encoder follow the named variants.
PROFILES: dict[str, dict] = {
    "proj28-gfc-t3": {"encoder": "projector", "backbone": "gfc-t", "depth": 3, "patch": 8, "hidden": 512},
    "pillars-gfc-m5": {"encoder": "pillars", "backbone": "gfc-m", "depth": 5, "patch": 8, "hidden": 512},
    "proj28-rnf-s13": {"encoder": "projector", "backbone": "rnf-s"},
    "proj28-rnf-d23": {"encoder": "projector", "backbone": "rnf-d"},
    "pillars-gfc-m": {"encoder": "pillars", "backbone": "gfc-m", "depth": 2, "patch": 4, "hidden": 64},
    "pillars-gfc-t": {"encoder": "pillars", "backbone": "gfc-t", "depth": 2, "patch": 4, "hidden": 64},
}

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "grid": GridConfig, "eval": EvalConfig}


def _coerce(cls, key: str, raw: str):
    types = {f.name: f for f in fields(cls)}
    if key not in types:
        raise ConfigError(f"unknown key {key!r} in [{cls.__name__}]")
    default = getattr(cls(), key)
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw.strip()


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cls = _SECTIONS[section]
        values = dict(parser.items(section))
        base = getattr(cfg, section)
        if section == "model" and "profile" in values:
            name = values.pop("profile")
            if name not in PROFILES:
                raise ConfigError(f"unknown model profile {name!r}")
            base = replace(base, **PROFILES[name])
        kw = {k: _coerce(cls, k, v) for k, v in values.items()}
        cfg = replace(cfg, **{section: replace(base, **kw)})
    return cfg.validate()


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())
