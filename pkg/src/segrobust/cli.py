"""Command-line entry point.

Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.
Any config value can be overridden with a dotted flag (``--train.learning_rate
1e-3``); short aliases are listed in :data:`segrobust.config.ALIASES`.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import secrets
import sys
from pathlib import Path


from . import __version__
from . import config as C
from .attack import derive_seed, evaluate_robustness, input_saliency
from .data import generate_synthetic, read_dataset, write_dataset
from .errors import ConfigError, SegRobustError
from .experiment import run_protocol, run_sweep, write_curves_csv
from .losses import parse_loss
from .model import build_unet, load_model, save_model, train
from .plotting import curve_chart, slug
from .raster import write_saliency

OUTPUT_ENV = "SEGROBUST_OUTPUT_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flags override it)")
    common.add_argument("--seed", help="integer master seed, or 'random' for an entropy seed")
    common.add_argument("--threads", type=int, help="worker thread cap")
    common.add_argument("--dry-run", action="store_true", help="validate the resolved config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="segrobust", description="Loss-function robustness benchmark for U-Net segmentation.")
    p.add_argument("--version", action="version", version=f"segrobust {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic train/val datasets")
    g.add_argument("--out", help="output directory (gets train/ and val/)")

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--data", required=True, help="dataset directory or gen-data root")
    t.add_argument("--loss", default="bce+dice", help="loss spec, e.g. 'bce+dice+focal(alpha=0.25,gamma=2)'")
    t.add_argument("--label", help="model label (defaults to the loss text)")
    t.add_argument("--out", required=True, help="model file to write")

    e = sub.add_parser("eval", parents=[common], help="clean Dice score of a model")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)

    s = sub.add_parser("saliency", parents=[common], help="export input-gradient saliency maps as PGM")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--index", type=int, action="append", help="sample index (repeatable; default all)")

    a = sub.add_parser("attack", parents=[common], help="top-k pixel replacement attack")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--fixed", type=float, metavar="V", help="replace with the value V")
    a.add_argument("--random", metavar="LO,HI", help="replace with uniform draws in [LO, HI]")
    a.add_argument("--recompute", action="store_true", help="recompute saliency after each replaced pixel")
    a.add_argument("--out", help="write per-sample outcomes as JSON")

    w = sub.add_parser("sweep", parents=[common], help="run configured sweeps for saved models")
    w.add_argument("--model", required=True, action="append", help="model file (repeatable)")
    w.add_argument("--data", required=True)
    w.add_argument("--sweep", action="append", help="sweep name from the config (repeatable; default all)")
    w.add_argument("--out", required=True, help="output directory for CSV and SVG")

    r = sub.add_parser("protocol", parents=[common], help="train all models, run all sweeps, render reports")
    r.add_argument("--out", help="output directory (overrides output_dir)")
    return p


def _split_overrides(extra: list) -> list:
    out = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise UsageError(f"unexpected argument {tok!r}; overrides look like --section.key VALUE")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"flag {tok} needs a value (--section.key VALUE)")
            value = extra[i + 1]
            i += 2
        out.append((key, value))
    return out


def _open_dataset(path, split: str):
    p = Path(path)
    if (p / "manifest.json").is_file():
        return read_dataset(p)
    if (p / split / "manifest.json").is_file():
        return read_dataset(p / split)
    return None


def _require_dataset(path, split: str):
    ds = _open_dataset(path, split)
    if ds is None:
        raise ConfigError(f"{path}: no dataset manifest (looked for manifest.json and {split}/manifest.json)")
    return ds


def _resolve(args, extra) -> tuple:
    overrides = _split_overrides(extra)
    if args.seed is not None and args.seed != "random":
        overrides.append(("seed", args.seed))
    if args.threads is not None:
        overrides.append(("threads", str(args.threads)))
    if getattr(args, "fixed", None) is not None:
        overrides += [("attack.replacement", '"fixed"'), ("attack.value", repr(args.fixed))]
    if getattr(args, "random", None) is not None:
        try:
            lo, hi = (float(v) for v in args.random.split(","))
        except ValueError:
            raise UsageError(f"--random expects LO,HI, got {args.random!r}") from None
        overrides += [("attack.replacement", '"random"'), ("attack.lo", repr(lo)), ("attack.hi", repr(hi))]
    if getattr(args, "recompute", False):
        overrides.append(("attack.recompute_saliency", "true"))
    file_cfg = C.load_file(args.config) if args.config else None
    cfg, errors = C.resolve(file_cfg, overrides)
    if args.seed == "random" and not errors:
        cfg["seed"] = secrets.randbits(63)
        print(f"seed: {cfg['seed']}")
    return cfg, errors


def _default_out(name: str) -> str:
    return str(Path(os.environ.get(OUTPUT_ENV, "runs")) / name)


def _cmd_gen_data(args, cfg):
    out = Path(args.out or _default_out("data"))
    full = generate_synthetic(C.synth_config(cfg), cfg["data"]["intensity_max"])
    n = cfg["data"]["train_count"]
    write_dataset(full.subset(0, n, "train"), out / "train")
    write_dataset(full.subset(n, len(full), "val"), out / "val")
    print(f"wrote {n} train and {len(full) - n} val samples ({full.shape[0]}x{full.shape[1]}) to {out}")


def _cmd_train(args, cfg):
    spec = parse_loss(args.loss)
    train_set = _require_dataset(args.data, "train")
    val_set = _open_dataset(args.data, "val") or train_set
    label = args.label or args.loss
    model = build_unet(C.unet_config(cfg, train_set.shape), derive_seed(cfg["seed"], 2), label)
    model, history = train(model, train_set, val_set, spec, C.train_config(cfg, derive_seed(cfg["seed"], 3)))
    save_model(model, args.out)
    last = history.records[-1]
    print(f"trained {label!r} for {len(history)} epochs: loss {last.train_loss:.4f}, val Dice {last.val_dice:.4f} -> {args.out}")


def _cmd_eval(args, cfg):
    model = load_model(args.model)
    ds = _require_dataset(args.data, "val")
    res = evaluate_robustness(model, ds, C.attack_config(cfg, 0))
    print(f"model {model.label!r}: clean mean Dice {res.clean_mean:.6f} over {len(ds)} samples")


def _cmd_saliency(args, cfg):
    model = load_model(args.model)
    ds = _require_dataset(args.data, "val")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    indices = args.index or range(len(ds))
    for i in indices:
        if not 0 <= i < len(ds):
            raise ConfigError(f"--index {i} out of range for {len(ds)} samples")
        s = ds.samples[i]
        sal = input_saliency(model, s.image, cfg["attack"]["region"], s.mask, s.id)
        write_saliency(out / f"{slug(s.id)}.pgm", sal.values)
    print(f"wrote {len(indices)} saliency maps for {model.label!r} to {out}")


def _cmd_attack(args, cfg):
    model = load_model(args.model)
    ds = _require_dataset(args.data, "val")
    ac = C.attack_config(cfg, derive_seed(cfg["seed"], 5))
    res = evaluate_robustness(model, ds, ac)
    if args.out:
        payload = {
            "model": model.label,
            "k": ac.k,
            "replacement": cfg["attack"]["replacement"],
            "clean_mean": res.clean_mean,
            "attacked_mean": res.mean,
            "attacked_std": res.std,
            "samples": [
                {"id": o.sample_id, "clean_dice": o.clean_dice, "attacked_dice": o.attacked_dice, "sites": o.sites} for o in res.outcomes
            ],
        }
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"model {model.label!r} k={ac.k}: clean mean Dice {res.clean_mean:.6f}, attacked mean Dice {res.mean:.6f} (std {res.std:.6f})")


def _cmd_sweep(args, cfg):
    models = [load_model(p) for p in args.model]
    ds = _require_dataset(args.data, "val")
    wanted = args.sweep or [s["name"] for s in cfg["sweeps"]]
    by_name = {s["name"]: s for s in cfg["sweeps"]}
    unknown = [n for n in wanted if n not in by_name]
    if unknown:
        raise ConfigError(f"unknown sweep(s) {unknown}; configured: {sorted(by_name)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in wanted:
        curves = run_sweep(by_name[name], models, ds, cfg["seed"], cfg["attack"])
        write_curves_csv(curves, out / f"{name}.csv")
        curve_chart(curves, out / f"{name}.svg", title=name)
    print(f"wrote {len(wanted)} sweep(s) for {len(models)} model(s) to {out}")


def _cmd_protocol(args, cfg):
    if args.out:
        cfg["output_dir"] = args.out
    elif cfg["output_dir"] == C.DEFAULTS["output_dir"] and OUTPUT_ENV in os.environ:
        cfg["output_dir"] = _default_out("protocol")
    manifest = run_protocol(cfg)
    clean = ", ".join(f"{k} {v:.3f}" for k, v in manifest["clean_dice"].items())
    print(f"protocol complete ({cfg['output_dir']}): clean Dice {clean}")


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "saliency": _cmd_saliency,
    "attack": _cmd_attack,
    "sweep": _cmd_sweep,
    "protocol": _cmd_protocol,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        cfg, errors = _resolve(args, extra)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if errors:
        for line in errors:
            print(line, file=sys.stderr)
        return 1
    if args.dry_run:
        print("config ok")
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SegRobustError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
