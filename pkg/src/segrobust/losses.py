"""Segmentation losses (BCE, Dice, Focal, weighted sums) and the Dice score metric.

Loss specs have a canonical text form used by the CLI and config files::

    spec     := term ("+" term)*
    term     := [weight "*"] name ["(" kwarg ("," kwarg)* ")"]
    name     := "bce" | "dice" | "focal"
    kwarg    := key "=" number          # dice: eps; focal: alpha, gamma

e.g. ``bce+dice``, ``bce+dice+focal(alpha=0.25,gamma=2)``, ``0.5*bce+dice(eps=1e-6)``.
A single term parses to the bare loss; two or more parse to :class:`Weighted`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class BCE:
    def __str__(self):
        return "bce"


@dataclass(frozen=True)
class Dice:
    eps: float = 1e-6

    def __str__(self):
        return "dice" if self.eps == 1e-6 else f"dice(eps={_num(self.eps)})"


@dataclass(frozen=True)
class Focal:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"focal alpha must be in (0, 1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ConfigError(f"focal gamma must be >= 0, got {self.gamma}")

    def __str__(self):
        return f"focal(alpha={_num(self.alpha)},gamma={_num(self.gamma)})"


@dataclass(frozen=True)
class Weighted:
    terms: tuple  # of (weight, LossSpec)

    def __post_init__(self):
        if not self.terms:
            raise ConfigError("weighted loss needs at least one term")
        for w, spec in self.terms:
            if not w > 0:
                raise ConfigError(f"loss weights must be > 0, got {w}")
            if isinstance(spec, Weighted) and any(isinstance(s, Weighted) for _, s in spec.terms):
                raise ConfigError("weighted losses nest at most two levels deep")

    def __str__(self):
        parts = []
        for w, spec in self.terms:
            parts.append(str(spec) if w == 1.0 else f"{_num(w)}*{spec}")
        return "+".join(parts)


LossSpec = Union[BCE, Dice, Focal, Weighted]


def _num(x: float) -> str:
    return repr(float(x)).rstrip("0").rstrip(".") if float(x) != int(x) else str(int(x))


_TERM = re.compile(r"^(?:(?P<w>[0-9.eE+-]+)\*)?(?P<name>[a-z]+)(?:\((?P<args>[^()]*)\))?$")


def _split_terms(text: str) -> list:
    # '+' also appears in exponents like 1e+3, so split only outside numbers/parens
    terms, depth, cur = [], 0, ""
    for i, ch in enumerate(text):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "+" and depth == 0 and not (i > 0 and text[i - 1] in "eE" and cur[-2:-1].isdigit()):
            terms.append(cur)
            cur = ""
        else:
            cur += ch
    terms.append(cur)
    return terms


def parse_loss(text: str) -> LossSpec:
    """Parse the canonical text form into a LossSpec."""
    compact = re.sub(r"\s+", "", text.lower())
    if not compact:
        raise ConfigError("empty loss spec")
    terms = []
    for raw in _split_terms(compact):
        m = _TERM.match(raw)
        if not m:
            raise ConfigError(f"cannot parse loss term {raw!r}")
        kwargs = {}
        if m.group("args"):
            for kv in m.group("args").split(","):
                key, sep, val = kv.partition("=")
                if not sep:
                    raise ConfigError(f"loss argument {kv!r} is not key=value")
                try:
                    kwargs[key] = float(val)
                except ValueError:
                    raise ConfigError(f"loss argument {key!r} has non-numeric value {val!r}") from None
        name = m.group("name")
        allowed = {"bce": set(), "dice": {"eps"}, "focal": {"alpha", "gamma"}}
        if name not in allowed:
            raise ConfigError(f"unknown loss {name!r}; expected one of bce, dice, focal")
        extra = set(kwargs) - allowed[name]
        if extra:
            raise ConfigError(f"{name} does not accept {sorted(extra)}")
        spec = {"bce": BCE, "dice": Dice, "focal": Focal}[name](**kwargs)
        try:
            weight = float(m.group("w")) if m.group("w") else 1.0
        except ValueError:
            raise ConfigError(f"bad loss weight in {raw!r}") from None
        terms.append((weight, spec))
    if len(terms) == 1 and terms[0][0] == 1.0:
        return terms[0][1]
    return Weighted(tuple(terms))


def _check_pair(p: Tensor, y) -> np.ndarray:
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    if y.shape != p.shape:
        raise ShapeError(f"prediction shape {p.shape} does not match target shape {y.shape}")
    return y.astype(p.dtype, copy=False)


def _clamped(p: Tensor) -> Tensor:
    return T.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def bce(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy over all pixels."""
    y = _check_pair(p, y)
    pc = _clamped(p)
    per_pixel = y * T.log(pc) + (1.0 - y) * T.log(1.0 - pc)
    return -T.mean(per_pixel)


def dice_loss(p: Tensor, y, eps: float = 1e-6) -> Tensor:
    """``1 - (2 sum(p*y) + eps) / (sum(p^2) + sum(y^2) + eps)``.

    A batched ``[N,C,H,W]`` input is N independent pairs: the loss is the mean
    of the per-pair losses, not one Dice over the pooled batch.
    """
    y = _check_pair(p, y)
    if p.data.ndim == 4:
        axes = (1, 2, 3)
        num = 2.0 * T.sum_(p * y, axis=axes) + eps
        den = T.sum_(p * p, axis=axes) + (y * y).sum(axis=axes) + eps
        return 1.0 - T.mean(T.div(num, den))
    num = 2.0 * T.sum_(p * y) + eps
    den = T.sum_(p * p) + float((y * y).sum()) + eps
    return 1.0 - T.div(num, den)


def focal_loss(p: Tensor, y, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean over pixels of ``-alpha_t (1 - p_t)^gamma log(p_t)``."""
    y = _check_pair(p, y)
    pc = _clamped(p)
    p_t = y * pc + (1.0 - y) * (1.0 - pc)
    alpha_t = np.where(y > 0.5, alpha, 1.0 - alpha).astype(p.dtype)
    per_pixel = alpha_t * T.power(1.0 - p_t, gamma) * T.log(p_t)
    return -T.mean(per_pixel)


def combine(spec: Weighted, p: Tensor, y) -> Tensor:
    if not isinstance(spec, Weighted) or not spec.terms:
        raise ConfigError("combine needs a nonempty Weighted spec")
    total = None
    for w, sub in spec.terms:
        term = compute_loss(sub, p, y)
        term = term if w == 1.0 else w * term
        total = term if total is None else total + term
    return total


def compute_loss(spec: LossSpec, p: Tensor, y) -> Tensor:
    if isinstance(spec, BCE):
        return bce(p, y)
    if isinstance(spec, Dice):
        return dice_loss(p, y, spec.eps)
    if isinstance(spec, Focal):
        return focal_loss(p, y, spec.alpha, spec.gamma)
    if isinstance(spec, Weighted):
        return combine(spec, p, y)
    raise ConfigError(f"not a loss spec: {spec!r}")


def dice_score(pred, y, threshold: float = 0.5) -> float:
    """Hard Dice ``2|P&Y| / (|P| + |Y|)`` after binarising ``pred`` at ``threshold``.

    Two empty sets score 1.0.
    """
    pred = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    if pred.shape != y.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target shape {y.shape}")
    P = pred > threshold
    Y = y > 0.5
    denom = int(P.sum()) + int(Y.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((P & Y).sum()) / denom
