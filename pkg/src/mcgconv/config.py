"""Flat key-value experiment configuration.

Grammar: one ``key = value`` pair per line; ``#`` starts a comment; blank
lines are ignored.  Keys are dotted lowercase identifiers from a fixed
vocabulary and unknown keys are rejected by name.  Model layers are given
as ``model.layer.<i>`` entries whose value is a descriptor string::

    <kind> key=value key=value ...

with ``kind`` one of ``conv | wmcg | mcg | gcnn | bottleneck`` and keys
``in, out, ch, mid, k, nb, stride, pad, groups, n, residual, act``.

The configuration hash is the first 12 hex digits of the SHA-256 of the
canonical (sorted, whitespace-normalized) explicit entries; run output
directories are keyed by it.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

from .affine import SampleRanges


class ConfigError(Exception):
    pass


LAYER_KINDS = ("conv", "wmcg", "mcg", "gcnn", "bottleneck")

_FLOAT_KEYS = {
    "ranges.alpha_lo", "ranges.alpha_hi", "ranges.theta_max", "ranges.shear_max",
    "optim.lr", "optim.final_lr", "optim.momentum", "optim.weight_decay",
    "data.sigma_lo", "data.sigma_hi",
    "mge.scale_lo", "mge.scale_hi", "mge.theta_max", "mge.shear_max",
}
_INT_KEYS = {
    "basis.kernel_size", "basis.num_basis",
    "optim.epochs", "optim.batch",
    "data.size", "data.test_size", "data.image_size",
    "mge.num_samples", "mge.crop",
    "converge.seeds", "converge.ref_points",
    "seed",
}
_STR_KEYS = {
    "basis.kind", "optim.schedule", "data.kind", "data.path", "data.labels_path",
    "converge.integrand",
}
_LIST_INT_KEYS = {"converge.n_list"}

_BASIS_KINDS = ("fourier_bessel", "dirac")
_SCHEDULES = ("cosine", "exponential", "constant")
_DATA_KINDS = ("shapes_classify", "gaussian_denoise", "idx", "cifar")
_INTEGRANDS = ("fb_patch", "constant")

_DEFAULTS = {
    "basis.kind": "fourier_bessel",
    "basis.kernel_size": 5,
    "basis.num_basis": 9,
    "ranges.alpha_lo": 0.0,
    "ranges.alpha_hi": 1.0,
    "ranges.theta_max": 2.0 * math.pi,
    "ranges.shear_max": 0.25 * math.pi,
    "optim.lr": 0.05,
    "optim.final_lr": 0.0,
    "optim.momentum": 0.9,
    "optim.weight_decay": 0.0,
    "optim.schedule": "cosine",
    "optim.epochs": 10,
    "optim.batch": 32,
    "data.kind": "shapes_classify",
    "data.path": "",
    "data.labels_path": "",
    "data.size": 512,
    "data.test_size": 128,
    "data.image_size": 0,  # 0: per-kind default
    "data.sigma_lo": 0.0,
    "data.sigma_hi": 55.0,
    "mge.scale_lo": 1.0,
    "mge.scale_hi": 1.1,
    "mge.theta_max": 0.125 * math.pi,
    "mge.shear_max": 0.0625 * math.pi,
    "mge.num_samples": 16,
    "mge.crop": 0,  # 0: use the measured layer's kernel size
    "converge.n_list": (16, 64, 256, 1024),
    "converge.seeds": 32,
    "converge.ref_points": 129,
    "converge.integrand": "fb_patch",
    "seed": 0,
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    options: dict

    def opt_int(self, key: str, default=None) -> int:
        if key not in self.options:
            if default is None:
                raise ConfigError(f"layer {self.kind!r} needs option {key!r}")
            return default
        return int(self.options[key])


_LAYER_OPTION_KEYS = {
    "in", "out", "ch", "mid", "k", "nb", "stride", "pad", "groups", "n",
    "residual", "act",
}


def _parse_layer_descriptor(value: str) -> LayerSpec:
    tokens = value.split()
    if not tokens:
        raise ConfigError("empty layer descriptor")
    kind = tokens[0]
    if kind not in LAYER_KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}, expected one of {LAYER_KINDS}")
    options = {}
    for tok in tokens[1:]:
        if "=" not in tok:
            raise ConfigError(f"bad layer option {tok!r}, expected key=value")
        key, _, val = tok.partition("=")
        if key not in _LAYER_OPTION_KEYS:
            raise ConfigError(f"unknown layer option key {key!r}")
        options[key] = val
    return LayerSpec(kind, options)


@dataclass
class ExperimentConfig:
    entries: dict = field(default_factory=dict)  # explicit entries, raw strings
    values: dict = field(default_factory=dict)  # typed, defaults filled in
    layers: list = field(default_factory=list)  # ordered LayerSpec list
    hash: str = ""

    def __getitem__(self, key):
        return self.values[key]

    def sample_ranges(self) -> SampleRanges:
        try:
            return SampleRanges(
                self.values["ranges.alpha_lo"],
                self.values["ranges.alpha_hi"],
                self.values["ranges.theta_max"],
                self.values["ranges.shear_max"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _coerce(key: str, raw: str):
    try:
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _INT_KEYS:
            return int(raw)
        if key in _LIST_INT_KEYS:
            return tuple(int(tok) for tok in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for key {key!r}: {exc}") from exc
    return raw


def parse_config_text(text: str) -> ExperimentConfig:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        is_layer = key.startswith("model.layer.")
        if is_layer:
            suffix = key[len("model.layer."):]
            if not suffix.isdigit():
                raise ConfigError(f"line {lineno}: bad layer index in key {key!r}")
        elif key not in _DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = value
    return build_config(entries)


def build_config(entries: dict[str, str]) -> ExperimentConfig:
    values = dict(_DEFAULTS)
    layer_items = []
    for key, raw in entries.items():
        if key.startswith("model.layer."):
            layer_items.append((int(key[len("model.layer."):]), raw))
        else:
            values[key] = _coerce(key, raw)
    layer_items.sort()
    for pos, (idx, _) in enumerate(layer_items):
        if idx != pos:
            raise ConfigError(f"layer indices must be 0..n-1 without gaps, got {idx}")
    layers = [_parse_layer_descriptor(raw) for _, raw in layer_items]
    cfg = ExperimentConfig(entries=dict(entries), values=values, layers=layers,
                           hash=config_hash(entries))
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    v = cfg.values
    if v["basis.kind"] not in _BASIS_KINDS:
        raise ConfigError(f"basis.kind must be one of {_BASIS_KINDS}")
    k = v["basis.kernel_size"]
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"basis.kernel_size must be odd and >= 1, got {k}")
    nb = v["basis.num_basis"]
    if v["basis.kind"] == "dirac":
        if nb != k * k:
            raise ConfigError(f"dirac basis requires num_basis == {k * k}, got {nb}")
    elif not 1 <= nb <= k * k:
        raise ConfigError(f"basis.num_basis must lie in [1, {k * k}], got {nb}")
    cfg.sample_ranges()  # raises ConfigError on bad ranges
    if v["optim.schedule"] not in _SCHEDULES:
        raise ConfigError(f"optim.schedule must be one of {_SCHEDULES}")
    if not 0.0 <= v["optim.momentum"] < 1.0:
        raise ConfigError("optim.momentum must lie in [0, 1)")
    if v["optim.weight_decay"] < 0.0:
        raise ConfigError("optim.weight_decay must be >= 0")
    if v["optim.epochs"] < 0:
        raise ConfigError("optim.epochs must be >= 0")
    if v["optim.batch"] < 1:
        raise ConfigError("optim.batch must be >= 1")
    if v["data.kind"] not in _DATA_KINDS:
        raise ConfigError(f"data.kind must be one of {_DATA_KINDS}")
    if v["data.size"] < 1 or v["data.test_size"] < 1:
        raise ConfigError("data.size and data.test_size must be >= 1")
    if not 0.0 <= v["data.sigma_lo"] <= v["data.sigma_hi"]:
        raise ConfigError("need 0 <= data.sigma_lo <= data.sigma_hi")
    if v["mge.num_samples"] < 1:
        raise ConfigError("mge.num_samples must be >= 1")
    if v["mge.scale_lo"] <= 0.0 or v["mge.scale_hi"] < v["mge.scale_lo"]:
        raise ConfigError("mge scale factors must satisfy 0 < lo <= hi")
    if not 0.0 <= v["mge.shear_max"] < math.pi / 2.0:
        raise ConfigError("mge.shear_max must lie in [0, pi/2)")
    if v["converge.seeds"] < 1:
        raise ConfigError("converge.seeds must be >= 1")
    if any(n < 1 for n in v["converge.n_list"]):
        raise ConfigError("converge.n_list entries must be >= 1")
    if v["converge.integrand"] not in _INTEGRANDS:
        raise ConfigError(f"converge.integrand must be one of {_INTEGRANDS}")


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        cfg = parse_config_text(fh.read())
    if overrides:
        entries = dict(cfg.entries)
        for key, value in overrides.items():
            if key not in _DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            entries[key] = str(value)
        cfg = build_config(entries)
    return cfg


def config_hash(entries: dict[str, str]) -> str:
    canonical = "\n".join(
        f"{key}={' '.join(str(value).split())}" for key, value in sorted(entries.items())
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
