"""Run configuration: dataclass tree, TOML/JSON loading, dotted overrides.

Config files may be TOML (subset: tables, string/int/float/bool scalars, flat
lists) or JSON with the same nesting. The parser here is intentionally small;
it exists because the target interpreter predates tomllib. Unknown keys are
rejected so a typo fails loudly instead of training with silent defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class DataConfig:
    root: str = "data"
    input_size: int = 256
    batch_size: int = 8
    # channel stats applied by normalize(); auto_stats recomputes them from the
    # train split when a trainer is built and records the result in the
    # resolved snapshot
    normalize_mean: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    normalize_std: list = field(default_factory=lambda: [0.25, 0.25, 0.25])
    auto_stats: bool = False
    hflip: bool = True  # train-time horizontal flip augmentation


@dataclass
class ModelConfig:
    backbone: str = "resnet38_wide"  # or "tiny_test"
    width: int = 16                  # base width of the tiny backbone
    z_channels: int = 0              # fused encoder channels; 0 = per-backbone default
    # ablation switches: each removes one component and leaves the rest intact
    use_reconstructor: bool = True
    use_center_consistency: bool = True
    use_attention: bool = True


@dataclass
class LossConfig:
    # weights of the two adversarial objectives and the consistency term
    rec_bce: float = 1.0     # classification term inside the reconstructor loss
    rec_crack: float = 0.5   # crack-region reconstruction, reconstructor phase
    rec_road: float = 0.5    # background reconstruction, reconstructor phase
    cls_bce: float = 1.0     # classification term inside the classifier loss
    cls_crack: float = 0.8   # crack-region reconstruction, classifier phase
    cls_road: float = 0.3    # background reconstruction, classifier phase
    consistency: float = 0.5


@dataclass
class CrfConfig:
    iterations: int = 5
    spatial_weight: float = 3.0
    spatial_sigma: float = 3.0
    bilateral_weight: float = 5.0
    bilateral_sigma_xy: float = 50.0
    bilateral_sigma_rgb: float = 13.0  # in 8-bit intensity units
    compat: float = 1.0
    mode: str = "fast"  # "fast" or "exact"; exact is O(N^2), small images only
    unary_source: str = "direct"  # unaries come straight from the upsampled CAM
    unary_clamp: float = 1e-5
    trunc_eps: float = 1e-9  # fast-mode kernel tail mass allowed to be dropped


@dataclass
class CenterConfig:
    sigma: float = 0.0        # Gaussian prior width in CAM cells; <=0 selects 0.25*min(h,w)
    detach_prior: bool = True  # stop gradients through center/prior computation


@dataclass
class AttentionConfig:
    kernel_size: int = 5
    reduction: int = 16


@dataclass
class DetectorConfig:
    # detector consumes backbone features; by default its gradient stops there
    backprop_into_backbones: bool = False
    # detector/fusion LR = train.base_lr * lr_scale (head vs backbone rate)
    lr_scale: float = 1.0


@dataclass
class TrainConfig:
    epochs: int = 200
    max_steps: int = 0       # >0 caps total optimizer steps regardless of epochs
    base_lr: float = 1e-3
    lr_power: float = 0.9    # polynomial decay exponent
    momentum: float = 0.9
    weight_decay: float = 5e-4
    switch_period: int = 1   # steps between classifier/reconstructor phase flips
    warmup_steps: int = 200  # steps before the detector starts consuming pseudo labels
    seed: int = 0
    min_pixels: int = 1      # pseudo masks with fewer positives are rejected
    log_every: int = 1
    checkpoint_every: int = 0  # 0 = final checkpoint only
    device: str = "cpu"


@dataclass
class EvalConfig:
    threshold: float = 0.5
    patch_grid: int = 1  # 1 = whole-image inference, 3 = 3x3 patch grid
    split: str = "test"
    average: str = "micro"  # "micro" pools counts; "macro" averages per image


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    crf: CrfConfig = field(default_factory=CrfConfig)
    center: CenterConfig = field(default_factory=CenterConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


# ---------------------------------------------------------------- dict <-> cfg

def config_to_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)


def _coerce(value, ftype, where: str):
    if ftype is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected bool, got {value!r}")
    if ftype is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected int, got {value!r}")
        return value
    if ftype is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected float, got {value!r}")
        return float(value)
    if ftype is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {value!r}")
        return value
    if ftype is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected list, got {value!r}")
        return list(value)
    raise ConfigError(f"{where}: unsupported field type {ftype}")


def config_from_dict(d: dict) -> Config:
    if not isinstance(d, dict):
        raise ConfigError("config root must be a table")
    cfg = Config()
    known_sections = {f.name: f for f in fields(Config)}
    for sec_name, sec_val in d.items():
        if sec_name not in known_sections:
            raise ConfigError(f"unknown config section [{sec_name}]")
        if not isinstance(sec_val, dict):
            raise ConfigError(f"[{sec_name}] must be a table")
        section = getattr(cfg, sec_name)
        known_keys = {f.name: f for f in fields(section)}
        for key, value in sec_val.items():
            if key not in known_keys:
                raise ConfigError(f"unknown config key {sec_name}.{key}")
            ftype = known_keys[key].type
            if isinstance(ftype, str):  # from __future__ annotations
                ftype = {"int": int, "float": float, "str": str,
                         "bool": bool, "list": list}[ftype]
            setattr(section, key, _coerce(value, ftype, f"{sec_name}.{key}"))
    return cfg


# ------------------------------------------------------------------- overrides

def apply_overrides(cfg: Config, overrides: list[str]) -> Config:
    """Apply command-line "section.key=value" strings on top of cfg.

    Values use TOML scalar syntax; bare words are accepted where the target
    field is a string.
    """
    d = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        sec, key = parts
        if sec not in d or key not in d[sec]:
            raise ConfigError(f"unknown override key {dotted!r}")
        try:
            value = _parse_value(raw.strip(), where=dotted)
        except ConfigError:
            if isinstance(d[sec][key], str):
                value = raw.strip()
            else:
                raise
        # int literals are fine for float fields
        if isinstance(d[sec][key], float) and isinstance(value, int) \
                and not isinstance(value, bool):
            value = float(value)
        d[sec][key] = value
    return config_from_dict(d)


# ----------------------------------------------------------------- TOML subset

def loads_toml(text: str) -> dict:
    root: dict = {}
    current = root
    for lineno, rawline in enumerate(text.splitlines(), start=1):
        line = _strip_comment(rawline).strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed table header")
            path = line[1:-1].strip()
            if not path:
                raise ConfigError(f"line {lineno}: empty table name")
            current = root
            for part in path.split("."):
                current = current.setdefault(part.strip(), {})
                if not isinstance(current, dict):
                    raise ConfigError(f"line {lineno}: {path} clashes with a value")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        current[key] = _parse_value(raw.strip(), where=f"line {lineno}")
    return root


def _strip_comment(line: str) -> str:
    in_str = False
    for i, ch in enumerate(line):
        if ch == '"' and (i == 0 or line[i - 1] != "\\"):
            in_str = not in_str
        elif ch == "#" and not in_str:
            return line[:i]
    return line


def _parse_value(s: str, where: str):
    if not s:
        raise ConfigError(f"{where}: empty value")
    if s[0] == '"':
        if len(s) < 2 or s[-1] != '"':
            raise ConfigError(f"{where}: unterminated string")
        return s[1:-1].replace('\\"', '"').replace("\\\\", "\\")
    if s[0] == "[":
        if s[-1] != "]":
            raise ConfigError(f"{where}: unterminated list")
        return [_parse_value(p, where) for p in _split_list(s[1:-1], where)]
    if s == "true":
        return True
    if s == "false":
        return False
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    raise ConfigError(f"{where}: cannot parse value {s!r}")


def _split_list(body: str, where: str) -> list[str]:
    items, buf, in_str = [], [], False
    for ch in body:
        if ch == '"':
            in_str = not in_str
        if ch == "," and not in_str:
            items.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    if in_str:
        raise ConfigError(f"{where}: unterminated string in list")
    tail = "".join(buf).strip()
    if tail:
        items.append(tail)
    return [it.strip() for it in items if it.strip()]


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {type(v).__name__} to TOML")


def dumps_toml(d: dict) -> str:
    lines = []
    for sec_name, sec in d.items():
        lines.append(f"[{sec_name}]")
        for key, value in sec.items():
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)


# ------------------------------------------------------------------ file-level

def load_config(path) -> Config:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    elif path.suffix == ".toml":
        d = loads_toml(text)
    else:
        raise ConfigError(f"{path}: config must be .toml or .json")
    return config_from_dict(d)


def save_resolved(cfg: Config, path) -> None:
    """Write the fully-resolved config snapshot (always TOML)."""
    Path(path).write_text(dumps_toml(config_to_dict(cfg)))


def validate_config(cfg: Config) -> Config:
    """Cross-field sanity checks; raises ConfigError on violation."""
    if cfg.data.input_size % 8 != 0 or cfg.data.input_size < 16:
        raise ConfigError("data.input_size must be a multiple of 8 and >= 16")
    if cfg.data.batch_size < 1:
        raise ConfigError("data.batch_size must be >= 1")
    if len(cfg.data.normalize_mean) != 3 or len(cfg.data.normalize_std) != 3:
        raise ConfigError("normalize_mean/std must have 3 entries")
    if any(s <= 0 for s in cfg.data.normalize_std):
        raise ConfigError("normalize_std entries must be positive")
    if cfg.model.backbone not in ("tiny_test", "resnet38_wide"):
        raise ConfigError(f"unknown model.backbone {cfg.model.backbone!r}")
    if cfg.crf.mode not in ("fast", "exact"):
        raise ConfigError("crf.mode must be 'fast' or 'exact'")
    if cfg.crf.unary_source != "direct":
        raise ConfigError("crf.unary_source must be 'direct'")
    if cfg.crf.iterations < 1:
        raise ConfigError("crf.iterations must be >= 1")
    for name in ("spatial_sigma", "bilateral_sigma_xy", "bilateral_sigma_rgb"):
        if getattr(cfg.crf, name) <= 0:
            raise ConfigError(f"crf.{name} must be positive")
    if not 0.0 < cfg.crf.unary_clamp < 0.5:
        raise ConfigError("crf.unary_clamp must be in (0, 0.5)")
    if cfg.attention.kernel_size % 2 != 1 or cfg.attention.kernel_size < 3:
        raise ConfigError("attention.kernel_size must be odd and >= 3")
    if cfg.train.switch_period < 1:
        raise ConfigError("train.switch_period must be >= 1")
    if cfg.train.base_lr <= 0:
        raise ConfigError("train.base_lr must be positive")
    if cfg.detector.lr_scale <= 0:
        raise ConfigError("detector.lr_scale must be positive")
    if not 0.0 < cfg.eval.threshold < 1.0:
        raise ConfigError("eval.threshold must be in (0, 1)")
    if cfg.eval.patch_grid < 1:
        raise ConfigError("eval.patch_grid must be >= 1")
    if cfg.eval.average not in ("micro", "macro"):
        raise ConfigError("eval.average must be 'micro' or 'macro'")
    return cfg
