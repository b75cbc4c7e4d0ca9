"""Input-gradient saliency and the top-k pixel replacement attack."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .losses import dice_score
from .model import Model, _check_image, predict, unet_logits
from .tensor import Tensor


def derive_seed(*parts: int) -> int:
    """Mix integers into a 64-bit seed (SeedSequence hashing), order-sensitive."""
    return int(np.random.SeedSequence([int(p) & (2**64 - 1) for p in parts]).generate_state(1, np.uint64)[0])


@dataclass
class SaliencyMap:
    values: np.ndarray
    label: str = ""
    sample_id: str = ""


def saliency_batch(model: Model, images: np.ndarray, region: str = "all", masks=None) -> np.ndarray:
    """d(sum of output probabilities)/d(input) for a stack of ``HxW`` images.

    Samples never interact inside the network, so one backward pass over the
    batch total yields every per-image gradient. ``region="mask"`` restricts the
    sum to each sample's ground-truth foreground.
    """
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    _check_image(model, images[:, None])
    if region not in ("all", "mask"):
        raise ConfigError(f"saliency region must be 'all' or 'mask', got {region!r}")
    dt = T.current_dtype()
    params = {k: Tensor._wrap(v.astype(dt, copy=False), False) for k, v in model.params.items()}
    x = Tensor._wrap(images[:, None].astype(dt), True)
    with T.Tape() as tape:
        probs = T.sigmoid(unet_logits(model.config, params, x))
        if region == "mask":
            if masks is None:
                raise ConfigError("region='mask' needs ground-truth masks")
            weight = np.asarray(masks, dtype=dt).reshape(probs.shape)
            root = T.sum_(probs * weight)
        else:
            root = T.sum_(probs)
    tape.backward(root)
    return x.grad[:, 0]


def input_saliency(model: Model, image, region: str = "all", mask=None, sample_id: str = "") -> SaliencyMap:
    image = np.asarray(image.data if isinstance(image, Tensor) else image)
    if image.ndim == 3:
        image = image[0]
    masks = None if mask is None else np.asarray(mask)[None]
    return SaliencyMap(saliency_batch(model, image[None], region, masks)[0], model.label, sample_id)


def top_k_sites(sal, k: int, selection: str = "absolute") -> list:
    """The k most salient ``(row, col)`` sites, ties broken in row-major order."""
    values = sal.values if isinstance(sal, SaliencyMap) else np.asarray(sal)
    h, w = values.shape
    if not 1 <= k <= h * w:
        raise ContractError(f"k must be in [1, {h * w}], got {k}")
    if selection == "absolute":
        key = -np.abs(values).ravel()
    elif selection == "signed":
        key = -values.ravel()
    else:
        raise ConfigError(f"selection must be 'absolute' or 'signed', got {selection!r}")
    order = np.argsort(key, kind="stable")[:k]
    return [(int(i // w), int(i % w)) for i in order]


def _check_sites(image: np.ndarray, sites) -> None:
    h, w = image.shape
    seen = set()
    for r, c in sites:
        if not (0 <= r < h and 0 <= c < w):
            raise ContractError(f"site ({r}, {c}) is outside the {h}x{w} raster")
        if (r, c) in seen:
            raise ContractError(f"duplicate site ({r}, {c})")
        seen.add((r, c))


def apply_fixed(image: np.ndarray, sites, value: float) -> np.ndarray:
    image = np.asarray(image)
    _check_sites(image, sites)
    out = image.copy()
    for r, c in sites:
        out[r, c] = value
    return out


def apply_random(image: np.ndarray, sites, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    """Independent uniform draws in ``[lo, hi]``, consumed in site-list order."""
    if lo > hi:
        raise ContractError(f"empty interval [{lo}, {hi}]")
    image = np.asarray(image)
    _check_sites(image, sites)
    out = image.copy()
    draws = rng.uniform(lo, hi, size=len(sites))
    for (r, c), v in zip(sites, draws):
        out[r, c] = v
    return out


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class Fixed:
    value: float


@dataclass(frozen=True)
class RandomUniform:
    lo: float = 0.0
    hi: float = 1.0
    iterations: int = 100
    seed: int = 0


@dataclass(frozen=True)
class Identity:
    """Write each selected pixel's own value back (a no-op attack)."""


Replacement = Union[Fixed, RandomUniform, Identity]


@dataclass(frozen=True)
class AttackConfig:
    k: int = 5
    replacement: Replacement = Fixed(0.2)
    selection: str = "absolute"
    recompute_saliency: bool = False
    region: str = "all"

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ConfigError("; ".join(errors))

    def violations(self) -> list:
        out = []
        if self.k < 1:
            out.append("k: must be >= 1")
        if self.selection not in ("absolute", "signed"):
            out.append("selection: must be 'absolute' or 'signed'")
        if self.region not in ("all", "mask"):
            out.append("region: must be 'all' or 'mask'")
        rep = self.replacement
        if isinstance(rep, RandomUniform):
            if rep.lo > rep.hi:
                out.append("replacement: lo must be <= hi")
            if rep.iterations < 1:
                out.append("replacement.iterations: must be >= 1")
        elif not isinstance(rep, (Fixed, Identity)):
            out.append("replacement: unknown replacement kind")
        return out

    @property
    def iterations(self) -> int:
        return self.replacement.iterations if isinstance(self.replacement, RandomUniform) else 1


@dataclass
class AttackOutcome:
    sample_id: str
    clean_dice: float
    attacked_dice: list  # one entry per iteration
    sites: list  # per iteration when saliency is recomputed, else one shared list
    attacked_images: list = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.attacked_dice))


@dataclass
class RobustnessResult:
    outcomes: list
    mean: float
    std: float
    clean_mean: float
    iteration_means: list


def _replace(image, sites, rep, sample_index, iteration):
    if isinstance(rep, Fixed):
        return apply_fixed(image, sites, rep.value)
    if isinstance(rep, Identity):
        return _identity(image, sites)
    rng = np.random.Generator(np.random.PCG64(derive_seed(rep.seed, sample_index, iteration)))
    return apply_random(image, sites, rep.lo, rep.hi, rng)


def _identity(image, sites):
    _check_sites(image, sites)
    return image.copy()


def _greedy_sites(model, image, mask, ac, rep, sample_index, iteration):
    """Pick sites one at a time, recomputing saliency on the partly attacked image."""
    current = image.copy()
    chosen = []
    rng = None
    if isinstance(rep, RandomUniform):
        rng = np.random.Generator(np.random.PCG64(derive_seed(rep.seed, sample_index, iteration)))
    for _ in range(ac.k):
        sal = saliency_batch(model, current[None], ac.region, None if mask is None else mask[None])[0]
        key = np.abs(sal) if ac.selection == "absolute" else sal.copy()
        for r, c in chosen:
            key[r, c] = -np.inf
        site = top_k_sites(np.where(np.isfinite(key), key, -np.inf), 1, "signed")[0]
        chosen.append(site)
        if isinstance(rep, Fixed):
            current[site] = rep.value
        elif isinstance(rep, RandomUniform):
            current[site] = rng.uniform(rep.lo, rep.hi)
    return chosen, current


def evaluate_robustness(model: Model, dataset, ac: AttackConfig, retain_images: bool = False, batch_size: int = 64) -> RobustnessResult:
    """Attack every sample of ``dataset`` and score it against its mask.

    Random replacement repeats ``iterations`` times per sample with seeds
    derived from ``(seed, sample index, iteration)``; the reported std is the
    spread of the dataset-mean Dice across iterations.
    """
    images = dataset.images().astype(np.float32)
    masks = dataset.masks()
    ids = dataset.ids()
    n = len(images)
    h, w = images.shape[1:]
    if ac.k > h * w:
        raise ContractError(f"k={ac.k} exceeds the {h * w} pixels of a {h}x{w} image")
    try:
        _check_image(model, images[:1, None])
    except ShapeError as exc:
        raise ShapeError(f"sample {ids[0]}: {exc}") from None

    clean = predict(model, images, batch_size)
    clean_dice = [dice_score(p, m) for p, m in zip(clean, masks)]
    rep = ac.replacement
    iters = ac.iterations

    sites_per = []
    attacked = np.empty((n, iters, h, w), dtype=np.float32)
    if not ac.recompute_saliency:
        sal = np.concatenate(
            [
                saliency_batch(model, images[s : s + batch_size], ac.region, masks[s : s + batch_size])
                for s in range(0, n, batch_size)
            ]
        )
        for i in range(n):
            sites = top_k_sites(sal[i], ac.k, ac.selection)
            sites_per.append(sites)
            for it in range(iters):
                try:
                    attacked[i, it] = _replace(images[i], sites, rep, i, it)
                except ContractError as exc:
                    raise ContractError(f"sample {ids[i]}: {exc}") from None
    else:
        for i in range(n):
            per_iter = []
            for it in range(iters):
                sites, img = _greedy_sites(model, images[i], masks[i], ac, rep, i, it)
                if isinstance(rep, Identity):
                    img = images[i].copy()
                attacked[i, it] = img
                per_iter.append(sites)
            sites_per.append(per_iter if iters > 1 else per_iter[0])

    probs = predict(model, attacked.reshape(n * iters, h, w), batch_size).reshape(n, iters, h, w)
    scores = np.array([[dice_score(probs[i, it], masks[i]) for it in range(iters)] for i in range(n)])
    outcomes = [
        AttackOutcome(
            ids[i],
            clean_dice[i],
            scores[i].tolist(),
            sites_per[i],
            [attacked[i, it].copy() for it in range(iters)] if retain_images else [],
        )
        for i in range(n)
    ]
    iteration_means = scores.mean(axis=0)
    return RobustnessResult(
        outcomes,
        float(iteration_means.mean()),
        float(iteration_means.std()),
        float(np.mean(clean_dice)),
        iteration_means.tolist(),
    )
