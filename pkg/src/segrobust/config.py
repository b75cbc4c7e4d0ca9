"""JSON configuration: defaults, layering, validation and conversion.

Precedence is flags > config file > defaults. Every key lives at a dotted path
(``train.learning_rate``); unknown paths are errors. :func:`validate` reports
every violation at once as ``path: message`` strings.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path

from . import attack as A
from .data import SynthConfig
from .errors import ConfigError
from .losses import parse_loss
from .model import TrainConfig, UNetConfig

DEFAULT_SEED = 42

DEFAULT_LOSSES = [
    {"label": "BCE", "spec": "bce"},
    {"label": "Dice", "spec": "dice"},
    {"label": "BCE+Dice", "spec": "bce+dice"},
    {"label": "BCE+Dice+Focal", "spec": "bce+dice+focal(alpha=0.25,gamma=2)"},
]

SWEEP_KINDS = ("noise-level-fixed", "noise-level-wide", "pixel-count-fixed", "pixel-count-random")

DEFAULT_SWEEPS = [
    {"name": "noise-narrow", "kind": "noise-level-fixed", "k": 5, "levels": [0.0, 0.05, 0.1, 0.15, 0.2]},
    {"name": "noise-wide", "kind": "noise-level-wide", "k": 5, "levels": [0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0]},
    {"name": "pixels-fixed", "kind": "pixel-count-fixed", "value": 0.2, "counts": [1, 5, 10, 20, 30, 50]},
    {
        "name": "pixels-random",
        "kind": "pixel-count-random",
        "lo": 0.0,
        "hi": 1.0,
        "iterations": 100,
        "counts": [1, 5, 10, 20, 30, 50],
    },
]

DEFAULTS = {
    "seed": DEFAULT_SEED,
    "output_dir": "runs/default",
    "threads": 1,
    "render": True,
    "data": {
        "source": "synthetic",
        "train_count": 64,
        "val_count": 16,
        "height": 32,
        "width": 32,
        "family": "ellipse-pair",
        "noise": 0.05,
        "intensity_max": 0.2,
        "train_path": None,
        "val_path": None,
    },
    "model": {"depth": 2, "base_channels": 8, "kernel_size": 3},
    "train": {
        "epochs": 40,
        "batch_size": 8,
        "learning_rate": 1e-3,
        "optimizer": "adam",
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "shuffle": True,
    },
    "losses": DEFAULT_LOSSES,
    "attack": {
        "k": 5,
        "replacement": "fixed",
        "value": 0.2,
        "lo": 0.0,
        "hi": 1.0,
        "iterations": 100,
        "selection": "absolute",
        "recompute_saliency": False,
        "region": "all",
    },
    "sweeps": DEFAULT_SWEEPS,
}

# short flag aliases -> dotted paths
ALIASES = {
    "lr": "train.learning_rate",
    "epochs": "train.epochs",
    "batch-size": "train.batch_size",
    "k": "attack.k",
    "iterations": "attack.iterations",
    "selection": "attack.selection",
    "depth": "model.depth",
    "base": "model.base_channels",
}

_SWEEP_KEYS = {
    "noise-level-fixed": {"name", "kind", "k", "levels"},
    "noise-level-wide": {"name", "kind", "k", "levels"},
    "pixel-count-fixed": {"name", "kind", "value", "counts"},
    "pixel-count-random": {"name", "kind", "lo", "hi", "iterations", "counts"},
}


def defaults() -> dict:
    return copy.deepcopy(DEFAULTS)


def merge(base: dict, overlay: dict, prefix: str = "", errors: list | None = None) -> list:
    """Recursively write ``overlay`` into ``base``; returns unknown-key errors."""
    errors = [] if errors is None else errors
    for key, value in overlay.items():
        path = f"{prefix}{key}"
        if key not in base:
            errors.append(f"{path}: unknown key")
        elif isinstance(base[key], dict) and isinstance(value, dict):
            merge(base[key], value, path + ".", errors)
        else:
            base[key] = copy.deepcopy(value)
    return errors


def set_path(cfg: dict, dotted: str, raw: str) -> str | None:
    """Apply one ``--a.b value`` override; the string is parsed as JSON when possible."""
    dotted = ALIASES.get(dotted, dotted)
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node or not isinstance(node[part], dict):
            return f"{dotted}: unknown key"
        node = node[part]
    if parts[-1] not in node:
        return f"{dotted}: unknown key"
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[parts[-1]] = value
    return None


def load_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


def _increasing(xs) -> bool:
    return all(b > a for a, b in zip(xs, xs[1:]))


def validate(cfg: dict) -> list:
    """Every violation in ``cfg`` as a ``path: message`` line."""
    errs = []

    def need(cond, path, msg):
        if not cond:
            errs.append(f"{path}: {msg}")
        return cond

    seed = cfg.get("seed")
    need(_is_int(seed) and 0 <= seed < 2**64, "seed", "must be an integer in [0, 2^64)")
    need(isinstance(cfg.get("output_dir"), str) and cfg.get("output_dir"), "output_dir", "must be a nonempty string")
    need(_is_int(cfg.get("threads")) and cfg.get("threads") >= 1, "threads", "must be an integer >= 1")
    need(isinstance(cfg.get("render"), bool), "render", "must be true or false")

    d = cfg["data"]
    if need(d.get("source") in ("synthetic", "ingest"), "data.source", "must be 'synthetic' or 'ingest'"):
        if d["source"] == "synthetic":
            for key in ("train_count", "val_count"):
                need(_is_int(d.get(key)) and d[key] >= 1, f"data.{key}", "must be an integer >= 1")
            for key in ("height", "width"):
                need(_is_int(d.get(key)) and d[key] >= 16 and d[key] % 4 == 0, f"data.{key}", "must be an integer >= 16 divisible by 4")
            need(d.get("family") in ("ellipse-pair", "single-blob"), "data.family", "must be 'ellipse-pair' or 'single-blob'")
            need(_is_num(d.get("noise")) and d["noise"] >= 0, "data.noise", "must be a number >= 0")
        else:
            for key in ("train_path", "val_path"):
                need(isinstance(d.get(key), str) and d[key], f"data.{key}", "must name a dataset directory")
    need(_is_num(d.get("intensity_max")) and d["intensity_max"] > 0, "data.intensity_max", "must be > 0")

    m = cfg["model"]
    need(_is_int(m.get("depth")) and m["depth"] >= 1, "model.depth", "must be an integer >= 1")
    need(_is_int(m.get("base_channels")) and m["base_channels"] >= 1, "model.base_channels", "must be an integer >= 1")
    need(_is_int(m.get("kernel_size")) and m["kernel_size"] >= 1 and m["kernel_size"] % 2 == 1, "model.kernel_size", "must be a positive odd integer")
    if not errs and d["source"] == "synthetic":
        step = 2 ** m["depth"]
        need(d["height"] % step == 0 and d["width"] % step == 0, "model.depth", f"input {d['height']}x{d['width']} must be divisible by 2^depth = {step}")

    t = cfg["train"]
    need(_is_int(t.get("epochs")) and t["epochs"] >= 1, "train.epochs", "must be an integer >= 1")
    need(_is_int(t.get("batch_size")) and t["batch_size"] >= 1, "train.batch_size", "must be an integer >= 1")
    need(_is_num(t.get("learning_rate")) and t["learning_rate"] >= 0, "train.learning_rate", "must be a number >= 0")
    need(t.get("optimizer") in ("sgd", "adam"), "train.optimizer", "must be 'sgd' or 'adam'")
    for key in ("beta1", "beta2"):
        need(_is_num(t.get(key)) and 0 <= t[key] < 1, f"train.{key}", "must be in [0, 1)")
    need(_is_num(t.get("adam_eps")) and t["adam_eps"] > 0, "train.adam_eps", "must be > 0")
    need(isinstance(t.get("shuffle"), bool), "train.shuffle", "must be true or false")

    losses = cfg.get("losses")
    if need(isinstance(losses, list) and losses, "losses", "must be a nonempty list"):
        labels = set()
        for i, entry in enumerate(losses):
            path = f"losses[{i}]"
            if not need(isinstance(entry, dict) and set(entry) == {"label", "spec"}, path, "must be an object with exactly 'label' and 'spec'"):
                continue
            need(isinstance(entry["label"], str) and entry["label"] and entry["label"] not in labels, f"{path}.label", "must be a unique nonempty string")
            labels.add(entry["label"])
            try:
                parse_loss(str(entry["spec"]))
            except ConfigError as exc:
                errs.append(f"{path}.spec: {exc}")

    a = cfg["attack"]
    need(_is_int(a.get("k")) and a["k"] >= 1, "attack.k", "must be ≥ 1")
    need(a.get("replacement") in ("fixed", "random"), "attack.replacement", "must be 'fixed' or 'random'")
    need(_is_num(a.get("value")), "attack.value", "must be a number")
    if need(_is_num(a.get("lo")) and _is_num(a.get("hi")), "attack.lo", "lo and hi must be numbers"):
        need(a["lo"] <= a["hi"], "attack.hi", "must be >= attack.lo")
    need(_is_int(a.get("iterations")) and a["iterations"] >= 1, "attack.iterations", "must be ≥ 1")
    need(a.get("selection") in ("absolute", "signed"), "attack.selection", "must be 'absolute' or 'signed'")
    need(isinstance(a.get("recompute_saliency"), bool), "attack.recompute_saliency", "must be true or false")
    need(a.get("region") in ("all", "mask"), "attack.region", "must be 'all' or 'mask'")

    sweeps = cfg.get("sweeps")
    if need(isinstance(sweeps, list) and sweeps, "sweeps", "must be a nonempty list"):
        names = set()
        for i, sw in enumerate(sweeps):
            path = f"sweeps[{i}]"
            if not need(isinstance(sw, dict) and sw.get("kind") in SWEEP_KINDS, f"{path}.kind", f"must be one of {', '.join(SWEEP_KINDS)}"):
                continue
            extra = set(sw) - _SWEEP_KEYS[sw["kind"]]
            missing = _SWEEP_KEYS[sw["kind"]] - set(sw)
            for key in sorted(extra):
                errs.append(f"{path}.{key}: unknown key")
            for key in sorted(missing):
                errs.append(f"{path}.{key}: required")
            if extra or missing:
                continue
            need(isinstance(sw["name"], str) and sw["name"] and sw["name"] not in names, f"{path}.name", "must be a unique nonempty string")
            names.add(sw["name"])
            if "levels" in sw:
                xs = sw["levels"]
                if need(isinstance(xs, list) and xs and all(_is_num(x) for x in xs), f"{path}.levels", "must be a nonempty list of numbers"):
                    need(_increasing(xs), f"{path}.levels", "must be strictly increasing")
                need(_is_int(sw["k"]) and sw["k"] >= 1, f"{path}.k", "must be ≥ 1")
            else:
                xs = sw["counts"]
                if need(isinstance(xs, list) and xs and all(_is_int(x) for x in xs), f"{path}.counts", "must be a nonempty list of integers"):
                    need(_increasing(xs), f"{path}.counts", "must be strictly increasing")
                    need(xs[0] >= 1, f"{path}.counts", "must be ≥ 1")
                    if d.get("source") == "synthetic" and _is_int(d.get("height")) and _is_int(d.get("width")):
                        need(xs[-1] <= d["height"] * d["width"], f"{path}.counts", "must not exceed the pixel count")
                if sw["kind"] == "pixel-count-fixed":
                    need(_is_num(sw["value"]), f"{path}.value", "must be a number")
                else:
                    if need(_is_num(sw["lo"]) and _is_num(sw["hi"]), f"{path}.lo", "lo and hi must be numbers"):
                        need(sw["lo"] <= sw["hi"], f"{path}.hi", "must be >= lo")
                    need(_is_int(sw["iterations"]) and sw["iterations"] >= 1, f"{path}.iterations", "must be ≥ 1")
    return errs


def resolve(file_cfg: dict | None = None, overrides: list | None = None) -> tuple:
    """Layer defaults, file and ``(path, raw)`` overrides. Returns ``(cfg, errors)``."""
    cfg = defaults()
    errors = []
    if file_cfg:
        errors += merge(cfg, file_cfg)
    for path, raw in overrides or []:
        err = set_path(cfg, path, raw)
        if err:
            errors.append(err)
    try:
        errors += validate(cfg)
    except (KeyError, TypeError, AttributeError) as exc:
        errors.append(f"config: malformed structure ({exc!r})")
    return cfg, errors


def config_hash(cfg: dict) -> str:
    """Hash of everything that determines results (not output_dir/threads/render)."""
    relevant = {k: v for k, v in cfg.items() if k not in ("output_dir", "threads", "render")}
    blob = json.dumps(relevant, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------- conversions


def unet_config(cfg: dict, input_size: tuple) -> UNetConfig:
    m = cfg["model"]
    return UNetConfig(m["depth"], m["base_channels"], m["kernel_size"], input_size)


def train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        learning_rate=float(t["learning_rate"]),
        optimizer=t["optimizer"],
        beta1=float(t["beta1"]),
        beta2=float(t["beta2"]),
        adam_eps=float(t["adam_eps"]),
        seed=seed,
        shuffle=t["shuffle"],
    )


def synth_config(cfg: dict) -> SynthConfig:
    d = cfg["data"]
    return SynthConfig(d["train_count"] + d["val_count"], d["height"], d["width"], d["family"], float(d["noise"]), cfg["seed"])


def attack_config(cfg: dict, seed: int) -> A.AttackConfig:
    a = cfg["attack"]
    if a["replacement"] == "fixed":
        rep = A.Fixed(float(a["value"]))
    else:
        rep = A.RandomUniform(float(a["lo"]), float(a["hi"]), a["iterations"], seed)
    return A.AttackConfig(a["k"], rep, a["selection"], a["recompute_saliency"], a["region"])
