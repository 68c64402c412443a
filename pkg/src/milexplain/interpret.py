"""Gradient-based explanations for a trained slide classifier.

The chain runs from the decision head back to tile features:

1. :func:`slide_attribution` sums ``|dP_c/dD|`` over slides predicted in class c
   and keeps the L most attributed slide-descriptor positions.
2. :func:`select_contributing_tiles` finds the tiles behind those positions.
3. :func:`tile_attribution` sums ``|ds/dd|`` over those tiles and keeps the l most
   attributed descriptor features.
4. :func:`compute_heatmap` averages the min-max normalised activations of the
   selected features per tile; :func:`tile_score_heatmap` is the raw-score baseline.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, topk_indices
from .data import SlideBag
from .model import Attention, MinMax, WsiClassifier, decide, encode_tiles, forward_slide, score_tiles

logger = logging.getLogger(__name__)

DEFAULT_TOP_FEATURES = 8
DEFAULT_QUANTILE = 0.9
RANGE_EPS = 1e-12


@dataclass
class SlideAttribution:
    cls: int
    A: np.ndarray  # M, non-negative
    K: list[int]  # selected descriptor positions, most attributed first
    slides: list[str]  # I_c
    signed: np.ndarray | None = None  # sum of dP_c/dD without the absolute value


@dataclass
class TileAttribution:
    cls: int
    a: np.ndarray  # N, non-negative
    k: list[int]  # selected features, most attributed first
    tiles: list[tuple[str, int]]  # J_c


@dataclass
class HeatMap:
    cls: int
    features: list[int]  # features actually used (constant ones dropped)
    stats: dict[int, tuple[float, float]]  # feature -> (min, max)
    values: "OrderedDict[str, np.ndarray]"  # slide id -> per-tile value in [0, 1]
    coords: "OrderedDict[str, np.ndarray]"
    dropped: list[int] = field(default_factory=list)


@dataclass
class TileScoreMap:
    cls: int
    values: "OrderedDict[str, np.ndarray]"
    coords: "OrderedDict[str, np.ndarray]"
    flipped: bool
    metadata: dict = field(default_factory=dict)


@dataclass
class AscentResult:
    feature: int
    X: np.ndarray
    trace: list[float]
    iterations: int


@dataclass(frozen=True)
class TileRef:
    slide_id: str
    tile_index: int
    activation: float


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def top_positions(values: np.ndarray, count: int) -> list[int]:
    """Indices of the ``count`` largest values, ties to the lowest index."""
    count = min(count, len(values))
    return [int(i) for i in topk_indices(np.asarray(values), count, largest=True)]


def predicted_classes(model: WsiClassifier, bags: Sequence[SlideBag], threads: int = 1) -> np.ndarray:
    return np.array(_map(lambda b: int(forward_slide(model, b).prediction.data.argmax()), bags, threads))


def slide_descriptor_gradient(model: WsiClassifier, D: np.ndarray, c: int) -> np.ndarray:
    """``dP_c/dD`` at slide descriptor ``D``, from one backward pass."""
    D_leaf = Tensor(D, requires_grad=True)
    with ad.Tape() as tape:
        P_c = ad.index(decide(model, D_leaf), c)
    ad.backward(P_c, tape, attach=False)
    return tape.grad(D_leaf)


def slide_attribution(
    model: WsiClassifier,
    bags: Sequence[SlideBag],
    c: int,
    L: int | None = None,
    threads: int = 1,
) -> SlideAttribution:
    """Attribution of slide-descriptor positions for class ``c``.

    ``L`` defaults to M/2. Only slides the model predicts as ``c`` contribute.
    """
    if not 0 <= c < model.dims.C:
        raise ValueError(f"class {c} out of range for a {model.dims.C}-class model")
    L = model.dims.M // 2 if L is None else L

    def run(bag):
        fwd = forward_slide(model, bag)
        if int(fwd.prediction.data.argmax()) != c:
            return None
        return bag.slide_id, slide_descriptor_gradient(model, fwd.slide_descriptor.data, c)

    results = [r for r in _map(run, bags, threads) if r is not None]
    if not results:
        raise ValueError(f"no slide is predicted in class {c}; cannot attribute it")
    A = np.zeros(model.dims.M)
    signed = np.zeros(model.dims.M)
    for _, g in results:  # ordered reduction
        A += np.abs(g)
        signed += g
    return SlideAttribution(c, A, top_positions(A, L), [sid for sid, _ in results], signed)


def score_orientation(model: WsiClassifier, attribution: SlideAttribution) -> dict:
    """Which score extreme describes the class, and whether low scores favour it.

    For min-max models the half of the descriptor (max slots or min slots) with
    more attribution mass is the describing side; the sign of the summed raw
    gradient on that side tells whether higher scores raise P_c. Attention logits
    are always read as "higher is more relevant".
    """
    if isinstance(model.aggregator, Attention):
        return {"side": "attention", "flip": False}
    R = model.aggregator.R
    max_mass, min_mass = attribution.A[:R].sum(), attribution.A[R:].sum()
    side = "min" if min_mass > max_mass else "max"
    part = attribution.signed[R:] if side == "min" else attribution.signed[:R]
    return {
        "side": side,
        "flip": bool(part.sum() < 0),
        "max_slot_mass": float(max_mass),
        "min_slot_mass": float(min_mass),
    }


def select_contributing_tiles(
    model: WsiClassifier,
    bags: Sequence[SlideBag],
    K: Iterable[int],
    quantile: float = DEFAULT_QUANTILE,
    slides: Iterable[str] | None = None,
) -> list[tuple[str, int]]:
    """Tiles J_c behind the selected slide-descriptor positions.

    Min-max: the tile in each slot of ``K`` for every slide in ``slides``, kept only
    if its distance to the slide's median score reaches the ``quantile`` of those
    distances over the slide. Attention: the ``ceil((1 - quantile) * T)`` tiles
    with the largest attention weight per slide. Duplicates are removed; order is
    slide order, then slot (or weight) order.
    """
    if not 0 <= quantile <= 1:
        raise ValueError("quantile must be in [0, 1]")
    wanted = None if slides is None else set(slides)
    K = [int(k) for k in K]
    J: list[tuple[str, int]] = []
    seen = set()
    for bag in bags:
        if wanted is not None and bag.slide_id not in wanted:
            continue
        fwd = forward_slide(model, bag)
        if isinstance(model.aggregator, MinMax):
            s = fwd.scores.data
            dist = np.abs(s - np.median(s))
            cut = np.quantile(dist, quantile)
            picks = [int(fwd.selected_tiles[k]) for k in K]
            picks = [j for j in picks if dist[j] >= cut]
        else:
            w = fwd.attention_weights.data
            n_keep = math.ceil((1.0 - quantile) * len(w) - 1e-9)
            picks = top_positions(w, n_keep)
        for j in picks:
            if (bag.slide_id, j) not in seen:
                seen.add((bag.slide_id, j))
                J.append((bag.slide_id, j))
    if not J:
        raise ValueError("no contributing tiles selected; lower the quantile")
    return J


def tile_score_gradients(model: WsiClassifier, descriptors: np.ndarray) -> np.ndarray:
    """Row j is ``ds_j/dd_j`` (T x N); tile scores depend only on their own descriptor."""
    d_leaf = Tensor(descriptors, requires_grad=True)
    with ad.Tape() as tape:
        total = ad.sum_(score_tiles(model, d_leaf))
    ad.backward(total, tape, attach=False)
    return tape.grad(d_leaf)


def tile_attribution(
    model: WsiClassifier,
    bags: Sequence[SlideBag],
    J: Sequence[tuple[str, int]],
    l: int = DEFAULT_TOP_FEATURES,
    c: int = -1,
    threads: int = 1,
) -> TileAttribution:
    """Sum of ``|ds/dd|`` over tiles ``J`` and the ``l`` most attributed features."""
    if not J:
        raise ValueError("empty tile set")
    by_slide: OrderedDict[str, list[int]] = OrderedDict()
    for sid, j in J:
        by_slide.setdefault(sid, []).append(j)
    index = {b.slide_id: b for b in bags}
    missing = [sid for sid in by_slide if sid not in index]
    if missing:
        raise KeyError(f"tiles reference unknown slides: {missing[:3]}")

    def run(sid):
        d = encode_tiles(model, index[sid].tiles).data
        grads = tile_score_gradients(model, d)
        return np.abs(grads[by_slide[sid]]).sum(axis=0)

    a = np.zeros(model.dims.N)
    for part in _map(run, list(by_slide), threads):
        a += part
    return TileAttribution(c, a, top_positions(a, l), list(J))


def explain_class(
    model: WsiClassifier,
    bags: Sequence[SlideBag],
    c: int,
    L: int | None = None,
    l: int = DEFAULT_TOP_FEATURES,
    quantile: float = DEFAULT_QUANTILE,
    threads: int = 1,
) -> tuple[SlideAttribution, TileAttribution]:
    """Slide attribution, tile selection and tile attribution for one class."""
    sa = slide_attribution(model, bags, c, L, threads)
    J = select_contributing_tiles(model, bags, sa.K, quantile, sa.slides)
    ta = tile_attribution(model, bags, J, l, c, threads)
    return sa, ta


def max_activation_ascent(
    model: WsiClassifier,
    feature: int,
    step: float = 0.1,
    max_iters: int = 512,
    tol: float = 1e-6,
    seed: int = 42,
    input_dim: int | None = None,
) -> AscentResult:
    """Gradient ascent on tile content to maximise one extractor output.

    Starts from Uniform(0, 1) content and moves along the raw gradient scaled by
    ``step``. A step is kept only if it does not lower the activation; iteration
    stops once the gain drops below ``tol`` or after ``max_iters`` steps.
    """
    if not model.has_extractor:
        raise ValueError("activation maximisation needs a learned extractor, not the identity")
    P = model.dims.P
    if input_dim is not None and input_dim != P:
        raise ValueError(f"input_dim {input_dim} does not match extractor input size {P}")
    if not 0 <= feature < model.dims.N:
        raise ValueError(f"feature {feature} out of range")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    X = rng.uniform(0.0, 1.0, size=P)

    def value_and_grad(x):
        leaf = Tensor(x, requires_grad=True)
        with ad.Tape() as tape:
            act = ad.index(ad.reshape(encode_tiles(model, leaf), (model.dims.N,)), feature)
        ad.backward(act, tape, attach=False)
        return act.item(), tape.grad(leaf)

    f, g = value_and_grad(X)
    trace = [f]
    it = 0
    while it < max_iters:
        X_new = X + step * g
        if not np.all(np.isfinite(X_new)):
            raise ad.NonFiniteError("ascent produced a non-finite input")
        f_new, g_new = value_and_grad(X_new)
        it += 1
        if f_new < f:
            break
        X, f, g = X_new, f_new, g_new
        trace.append(f)
        if trace[-1] - trace[-2] < tol:
            break
    return AscentResult(feature, X, trace, it)


def _tile_descriptors(model: WsiClassifier, bags: Sequence[SlideBag]) -> list[np.ndarray]:
    return [encode_tiles(model, b.tiles).data for b in bags]


def compute_heatmap(
    model: WsiClassifier, bags: Sequence[SlideBag], features: Sequence[int], c: int = 1
) -> HeatMap:
    """Per-tile mean of min-max normalised activations over ``features``.

    Minimum and maximum of each feature are taken over every tile of ``bags``.
    Features whose range is below 1e-12 are dropped with a warning.
    """
    features = [int(k) for k in features]
    if not features:
        raise ValueError("no features given")
    if not bags:
        raise ValueError("no slides given")
    descs = _tile_descriptors(model, bags)
    allv = np.concatenate(descs)
    stats, used, dropped = {}, [], []
    for k in dict.fromkeys(features):
        if not 0 <= k < allv.shape[1]:
            raise ValueError(f"feature {k} out of range")
        lo, hi = float(allv[:, k].min()), float(allv[:, k].max())
        if hi - lo < RANGE_EPS:
            logger.warning("feature %d is constant over the split; dropped from the heat-map", k)
            dropped.append(k)
            continue
        stats[k] = (lo, hi)
        used.append(k)
    if not used:
        raise ValueError("every selected feature is constant over the split")
    lo = np.array([stats[k][0] for k in used])
    span = np.array([stats[k][1] - stats[k][0] for k in used])
    values, coords = OrderedDict(), OrderedDict()
    for bag, d in zip(bags, descs):
        norm = (d[:, used] - lo) / span
        values[bag.slide_id] = np.clip(norm.mean(axis=1), 0.0, 1.0)
        coords[bag.slide_id] = bag.coords
    return HeatMap(c, used, stats, values, coords, dropped)


def tile_score_heatmap(
    model: WsiClassifier, bags: Sequence[SlideBag], c: int = 1, orientation: dict | None = None
) -> TileScoreMap:
    """Raw tile scores per tile, negated when low scores describe class ``c``."""
    flip = bool(orientation and orientation.get("flip"))
    values, coords = OrderedDict(), OrderedDict()
    for bag in bags:
        s = score_tiles(model, encode_tiles(model, bag.tiles)).data
        values[bag.slide_id] = -s if flip else s
        coords[bag.slide_id] = bag.coords
    return TileScoreMap(c, values, coords, flip, dict(orientation or {}))


def top_activating_tiles(
    model: WsiClassifier, bags: Sequence[SlideBag], feature: int, count: int = 7
) -> list[TileRef]:
    """Tiles with the highest activation of ``feature``; ties by (slide id, tile index)."""
    if not 0 <= feature < model.dims.N:
        raise ValueError(f"feature {feature} out of range")
    refs = []
    for bag, d in zip(bags, _tile_descriptors(model, bags)):
        refs.extend(TileRef(bag.slide_id, j, float(v)) for j, v in enumerate(d[:, feature]))
    refs.sort(key=lambda r: (-r.activation, r.slide_id, r.tile_index))
    return refs[:count]


# -- output helpers ----------------------------------------------------------------


HEATMAP_HEADER = ["slide_id", "tile_index", "x", "y", "value", "method", "class"]


def heatmap_rows(hm, method: str) -> Iterable[list]:
    for sid, vals in hm.values.items():
        xy = hm.coords[sid]
        for j, v in enumerate(vals):
            yield [sid, j, _num(xy[j, 0]), _num(xy[j, 1]), repr(float(v)), method, hm.cls]


def _num(x: float):
    return int(x) if float(x).is_integer() else repr(float(x))


def attribution_document(sa: SlideAttribution, ta: TileAttribution, config: dict) -> dict:
    return {
        "class": sa.cls,
        "K_c": sa.K,
        "A_c": sa.A.tolist(),
        "I_c": sa.slides,
        "k_c": ta.k,
        "a_c": ta.a.tolist(),
        "n_contributing_tiles": len(ta.tiles),
        "config": config,
    }
