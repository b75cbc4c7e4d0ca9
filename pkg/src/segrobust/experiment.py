"""The full protocol: train one model per loss, sweep attacks, write reports.

Output directory layout::

    data/{train,val}/        dataset containers (synthetic runs)
    models/<slug>-<key>.srun model files, cached by training key
    curves/<sweep>.csv       x,dice_mean,dice_std,model,sweep
    figures/<sweep>.svg      one line per model
    figures/*.png            saliency, mask-shrink and prediction panels
    rasters/<slug>/*.pgm     saliency, overlay, shrink strip, triptych
    manifest.json
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import config as C
from . import plotting
from .attack import AttackConfig, Fixed, RandomUniform, derive_seed, evaluate_robustness, input_saliency, top_k_sites
from .data import generate_synthetic, read_dataset, write_dataset
from .errors import ContractError, FormatError, StageError
from .losses import dice_score, parse_loss
from .model import build_unet, load_model, predict, save_model, train
from .raster import write_pgm, write_saliency

logger = logging.getLogger(__name__)

CSV_HEADER = ["x", "dice_mean", "dice_std", "model", "sweep"]
OVERLAY_THRESHOLD = 0.1  # highlight |saliency| above this fraction of its maximum
OVERLAY_CODES = {"background": 0, "mask": 80, "boundary": 160, "salient": 255}


@dataclass
class RobustnessCurve:
    label: str
    sweep: str
    points: list  # (x, mean, std)
    results: list = field(default=None, compare=False, repr=False)


# ---------------------------------------------------------------- sweeps


def _sweep(models, dataset, name, xs, make_config, keep_results):
    curves = []
    for model in models:
        points, results = [], []
        for x in xs:
            res = evaluate_robustness(model, dataset, make_config(x))
            points.append((float(x), res.mean, res.std))
            results.append(res if keep_results else None)
        curves.append(RobustnessCurve(model.label, name, points, results if keep_results else None))
    return curves


def sweep_noise_level(models, dataset, levels, k=5, selection="absolute", name="noise-level", recompute=False, keep_results=False):
    """Fixed-value replacement of the k most salient pixels, one point per level."""
    return _sweep(models, dataset, name, levels, lambda v: AttackConfig(k, Fixed(float(v)), selection, recompute), keep_results)


def sweep_pixel_count(models, dataset, counts, value=0.2, selection="absolute", name="pixel-count", recompute=False, keep_results=False):
    h, w = dataset.shape
    if any(n < 1 or n > h * w for n in counts):
        raise ContractError(f"pixel counts must lie in [1, {h * w}]")
    return _sweep(models, dataset, name, counts, lambda n: AttackConfig(int(n), Fixed(float(value)), selection, recompute), keep_results)


def sweep_pixel_count_random(
    models, dataset, counts, lo=0.0, hi=1.0, iterations=100, seed=0, selection="absolute", name="pixel-count-random", recompute=False, keep_results=False
):
    """Uniform random replacement, repeated ``iterations`` times per point.

    Every model sees the same per-point seed, derived from ``(seed, N)``.
    """
    h, w = dataset.shape
    if any(n < 1 or n > h * w for n in counts):
        raise ContractError(f"pixel counts must lie in [1, {h * w}]")
    return _sweep(
        models,
        dataset,
        name,
        counts,
        lambda n: AttackConfig(int(n), RandomUniform(float(lo), float(hi), int(iterations), derive_seed(seed, int(n))), selection, recompute),
        keep_results,
    )


def run_sweep(sweep: dict, models, dataset, seed: int, attack: dict) -> list:
    common = {"selection": attack["selection"], "recompute": attack["recompute_saliency"], "name": sweep["name"]}
    kind = sweep["kind"]
    if kind in ("noise-level-fixed", "noise-level-wide"):
        return sweep_noise_level(models, dataset, sweep["levels"], sweep["k"], **common)
    if kind == "pixel-count-fixed":
        return sweep_pixel_count(models, dataset, sweep["counts"], sweep["value"], **common)
    return sweep_pixel_count_random(
        models, dataset, sweep["counts"], sweep["lo"], sweep["hi"], sweep["iterations"], derive_seed(seed, 4, _name_key(sweep["name"])), **common
    )


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


# ---------------------------------------------------------------- curve files


def curves_to_csv(curves) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for c in curves:
        for x, m, s in c.points:
            writer.writerow([repr(float(x)), repr(float(m)), repr(float(s)), c.label, c.sweep])
    return buf.getvalue()


def write_curves_csv(curves, path) -> Path:
    path = Path(path)
    path.write_bytes(curves_to_csv(curves).encode("utf-8"))
    return path


def read_curves_csv(path) -> list:
    text = Path(path).read_bytes().decode("utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != CSV_HEADER:
        raise FormatError(f"{path}: expected header {','.join(CSV_HEADER)}")
    curves = {}
    for row in rows[1:]:
        if len(row) != 5:
            raise FormatError(f"{path}: malformed row {row!r}")
        key = (row[3], row[4])
        if key not in curves:
            curves[key] = RobustnessCurve(row[3], row[4], [])
        curves[key].points.append((float(row[0]), float(row[1]), float(row[2])))
    return list(curves.values())


def auc(curve: RobustnessCurve) -> float:
    xs = [p[0] for p in curve.points]
    ys = [p[1] for p in curve.points]
    return float(np.trapezoid(ys, xs)) if len(xs) > 1 else float(ys[0])


def _mean_level(curve: RobustnessCurve) -> float:
    xs = [p[0] for p in curve.points]
    return auc(curve) / (xs[-1] - xs[0]) if len(xs) > 1 else curve.points[0][1]


def verdict_rows(curves, clean: dict) -> list:
    """Pairwise "degrades faster" rows: larger drop from clean Dice to the curve's mean level."""
    rows = []
    for i, a in enumerate(curves):
        for b in curves[i + 1 :]:
            drop_a = clean[a.label] - _mean_level(a)
            drop_b = clean[b.label] - _mean_level(b)
            faster = a.label if drop_a > drop_b else b.label if drop_b > drop_a else "tie"
            rows.append(
                {
                    "sweep": a.sweep,
                    "model_a": a.label,
                    "model_b": b.label,
                    "auc_a": auc(a),
                    "auc_b": auc(b),
                    "drop_a": drop_a,
                    "drop_b": drop_b,
                    "degrades_faster": faster,
                }
            )
    return rows


# ---------------------------------------------------------------- rasters


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask) > 0
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def overlay_raster(mask: np.ndarray, saliency: np.ndarray, fraction: float = OVERLAY_THRESHOLD) -> np.ndarray:
    """Mask interior, mask boundary and salient pixels (|s| > fraction * max|s|) as grey codes."""
    out = np.full(mask.shape, OVERLAY_CODES["background"], dtype=np.uint8)
    out[np.asarray(mask) > 0] = OVERLAY_CODES["mask"]
    out[mask_boundary(mask)] = OVERLAY_CODES["boundary"]
    mag = np.abs(saliency)
    peak = float(mag.max())
    if peak > 0:
        out[mag > fraction * peak] = OVERLAY_CODES["salient"]
    return out


def _strip(panels, gap=2) -> np.ndarray:
    h = panels[0].shape[0]
    sep = np.full((h, gap), 128, dtype=np.uint8)
    parts = []
    for i, p in enumerate(panels):
        if i:
            parts.append(sep)
        parts.append(p)
    return np.concatenate(parts, axis=1)


def _to_u8(values, scale) -> np.ndarray:
    return np.clip(np.round(np.asarray(values, dtype=np.float64) / scale * 255.0), 0, 255).astype(np.uint8)


def render_artifacts(models, dataset, curves_by_sweep: dict, shrink_levels, out_dir, sample_index: int = 0, k: int = 5, selection="absolute") -> list:
    """Per-model rasters and the panel figures for one showcase sample."""
    out_dir = Path(out_dir)
    written = []
    image = dataset.samples[sample_index].image
    mask = dataset.samples[sample_index].mask
    imax = dataset.intensity_max
    sal_rows, shrink_rows, pred_rows = [], [], []
    for model in models:
        d = out_dir / "rasters" / plotting.slug(model.label)
        d.mkdir(parents=True, exist_ok=True)
        sal = input_saliency(model, image).values
        overlay = overlay_raster(mask, sal)
        written.append(write_saliency(d / "saliency.pgm", sal))
        written.append(write_pgm(d / "overlay.pgm", overlay))
        sites = top_k_sites(sal, k, selection)
        attacked = []
        for v in shrink_levels:
            img = image.copy()
            for r, c in sites:
                img[r, c] = v
            attacked.append(img)
        preds = predict(model, np.stack(attacked)) > 0.5
        written.append(write_pgm(d / "shrink.pgm", _strip([mask.astype(np.uint8) * 255] + [p.astype(np.uint8) * 255 for p in preds])))
        clean = predict(model, image[None])[0]
        written.append(write_pgm(d / "triptych.pgm", _strip([_to_u8(image, imax), _to_u8(clean, 1.0), mask.astype(np.uint8) * 255])))
        sal_rows.append((model.label, sal, overlay))
        shrink_rows.append((model.label, list(preds)))
        pred_rows.append((model.label, clean > 0.5))
    fig_dir = out_dir / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    for name, curves in curves_by_sweep.items():
        xlabel = "replacement value" if curves and "noise" in curves[0].sweep else "pixels replaced (N)"
        p = fig_dir / f"{name}.svg"
        plotting.curve_chart(curves, p, title=name, xlabel=xlabel)
        written.append(p)
    plotting.saliency_figure(image, mask, sal_rows, fig_dir / "saliency.png")
    plotting.shrink_figure(mask, list(shrink_levels), shrink_rows, fig_dir / "mask_shrink.png")
    plotting.prediction_figure(image, mask, pred_rows, fig_dir / "predictions.png")
    written += [fig_dir / "saliency.png", fig_dir / "mask_shrink.png", fig_dir / "predictions.png"]
    return written


# ---------------------------------------------------------------- protocol


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def _training_key(cfg: dict, entry: dict) -> str:
    blob = {
        "seed": cfg["seed"],
        "data": cfg["data"],
        "model": cfg["model"],
        "train": cfg["train"],
        "loss": entry,
        "version": __version__,
    }
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def load_datasets(cfg: dict, out_dir: Path):
    d = cfg["data"]
    if d["source"] == "ingest":
        return read_dataset(d["train_path"]), read_dataset(d["val_path"])
    full = generate_synthetic(C.synth_config(cfg), d["intensity_max"])
    train_set = full.subset(0, d["train_count"], "train")
    val_set = full.subset(d["train_count"], d["train_count"] + d["val_count"], "val")
    write_dataset(train_set, out_dir / "data" / "train")
    write_dataset(val_set, out_dir / "data" / "val")
    return train_set, val_set


def _train_one(cfg, entry, train_set, val_set, model_dir):
    key = _training_key(cfg, entry)
    path = model_dir / f"{plotting.slug(entry['label'])}-{key}.srun"
    hist_path = path.with_suffix(".history.json")
    if path.is_file() and hist_path.is_file():
        try:
            model = load_model(path)
            if model.label == entry["label"]:
                logger.info("reusing cached model %s", path)
                return model, json.loads(hist_path.read_text(encoding="utf-8")), path
        except FormatError as exc:
            logger.warning("ignoring unreadable cached model %s: %s", path, exc)
    unet = C.unet_config(cfg, train_set.shape)
    model = build_unet(unet, derive_seed(cfg["seed"], 2), entry["label"])
    tc = C.train_config(cfg, derive_seed(cfg["seed"], 3))
    model, history = train(model, train_set, val_set, parse_loss(entry["spec"]), tc)
    save_model(model, path)
    records = history.as_dicts()
    hist_path.write_bytes(_json_bytes(records))
    return model, records, path


def run_protocol(cfg: dict) -> dict:
    """Run every stage of the protocol described by a resolved config dict."""
    errors = C.validate(cfg)
    if errors:
        raise StageError("config", "validation", "; ".join(errors))
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "toolkit_version": __version__,
        "seed": cfg["seed"],
        "config_hash": C.config_hash(cfg),
        "config": {k: v for k, v in cfg.items() if k not in ("output_dir", "threads")},
        "status": "incomplete",
        "models": {},
        "clean_dice": {},
        "auc": {},
        "verdicts": [],
        "curves": {},
        "timings": {},
    }
    timings = manifest["timings"]

    def stage(name, context, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        except Exception as exc:
            manifest["failed_stage"] = name
            manifest["error"] = f"{context}: {exc}"
            (out_dir / "manifest.json").write_bytes(_json_bytes(manifest))
            raise StageError(name, context, exc) from exc
        finally:
            timings[name] = round(time.perf_counter() - t0, 3)

    train_set, val_set = stage("data", cfg["data"]["source"], lambda: load_datasets(cfg, out_dir))

    model_dir = out_dir / "models"
    model_dir.mkdir(exist_ok=True)
    entries = cfg["losses"]

    def train_all():
        if cfg["threads"] > 1 and len(entries) > 1:
            with ThreadPoolExecutor(max_workers=cfg["threads"]) as pool:
                futures = [pool.submit(_train_one, cfg, e, train_set, val_set, model_dir) for e in entries]
                return [f.result() for f in futures]
        return [_train_one(cfg, e, train_set, val_set, model_dir) for e in entries]

    trained = stage("train", ", ".join(e["label"] for e in entries), train_all)
    models = [m for m, _, _ in trained]
    for entry, (model, records, path) in zip(entries, trained):
        clean = float(np.mean([dice_score(p, y) for p, y in zip(predict(model, val_set.images()), val_set.masks())]))
        manifest["clean_dice"][model.label] = clean
        last = records[-1]
        manifest["models"][model.label] = {
            "loss": entry["spec"],
            "model_file": str(path.relative_to(out_dir)),
            "parameters": model.n_parameters(),
            "epochs": len(records),
            "final_train_loss": last["train_loss"],
            "final_train_dice": last["train_dice"],
            "final_val_dice": last["val_dice"],
        }

    curves_by_sweep = {}
    (out_dir / "curves").mkdir(exist_ok=True)
    for sw in cfg["sweeps"]:
        curves = stage(f"sweep:{sw['name']}", sw["kind"], lambda sw=sw: run_sweep(sw, models, val_set, cfg["seed"], cfg["attack"]))
        curves_by_sweep[sw["name"]] = curves
        csv_path = write_curves_csv(curves, out_dir / "curves" / f"{sw['name']}.csv")
        manifest["curves"][sw["name"]] = str(csv_path.relative_to(out_dir))
        manifest["auc"][sw["name"]] = {c.label: auc(c) for c in curves}
        manifest["verdicts"] += verdict_rows(curves, manifest["clean_dice"])

    if cfg["render"]:
        wide = next((s for s in cfg["sweeps"] if s["kind"] == "noise-level-wide"), None)
        levels = wide["levels"] if wide else [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
        k = wide["k"] if wide else 5
        stage(
            "render",
            str(out_dir),
            lambda: render_artifacts(models, val_set, curves_by_sweep, levels, out_dir, 0, k, cfg["attack"]["selection"]),
        )

    manifest["status"] = "complete"
    (out_dir / "manifest.json").write_bytes(_json_bytes(manifest))
    return manifest
