"""Four-block slide classifier: tile encoder, tile scorer, aggregator, decision head.

Two aggregators are supported. ``MinMax`` keeps the R highest and R lowest tile
scores (slide descriptor of size 2R). ``Attention`` forms a softmax-weighted sum of
tile descriptors (slide descriptor of size N); for it the "tile score" is the
pre-softmax attention logit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FORMAT_NAME = "milexplain-model"
FORMAT_VERSION = 1

_ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu, "identity": lambda x: x}


@dataclass(frozen=True)
class MinMax:
    R: int = 5


@dataclass(frozen=True)
class Attention:
    hidden: int = 128
    nonlinearity: str = "tanh"


Aggregator = Union[MinMax, Attention]


@dataclass(frozen=True)
class Dims:
    P: int  # tile content length
    N: int  # tile descriptor length
    M: int  # slide descriptor length
    C: int  # number of classes


@dataclass
class WsiClassifier:
    dims: Dims
    aggregator: Aggregator
    params: dict[str, Tensor]
    extractor_hidden: tuple[int, ...] | None = None  # None: identity extractor
    head_hidden: tuple[int, ...] = (200, 100)
    scorer_bias: bool = True

    def __post_init__(self):
        d = self.dims
        if d.C < 2:
            raise ValueError("need at least two classes")
        if isinstance(self.aggregator, MinMax):
            if d.M != 2 * self.aggregator.R:
                raise ValueError(f"min-max aggregator needs M == 2R, got M={d.M}")
        elif isinstance(self.aggregator, Attention):
            if d.M != d.N:
                raise ValueError(f"attention aggregator needs M == N, got M={d.M}, N={d.N}")
            if self.aggregator.nonlinearity not in _ACTIVATIONS:
                raise ValueError(f"unknown attention nonlinearity {self.aggregator.nonlinearity!r}")
        else:
            raise TypeError(f"unknown aggregator {self.aggregator!r}")
        if self.extractor_hidden is None and d.P != d.N:
            raise ValueError("identity extractor needs P == N")
        for name, t in self.params.items():
            if not np.all(np.isfinite(t.data)):
                raise ad.NonFiniteError(f"parameter {name} is not finite")

    @property
    def arch(self) -> str:
        return "minmax" if isinstance(self.aggregator, MinMax) else "attention"

    @property
    def has_extractor(self) -> bool:
        return self.extractor_hidden is not None

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def _layers(self, prefix: str) -> list[tuple[Tensor, Tensor]]:
        out = []
        i = 0
        while f"{prefix}.{i}.weight" in self.params:
            out.append((self.params[f"{prefix}.{i}.weight"], self.params[f"{prefix}.{i}.bias"]))
            i += 1
        return out


@dataclass
class SlideForward:
    content: Tensor  # T x P
    descriptors: Tensor  # T x N
    scores: Tensor  # T
    slide_descriptor: Tensor  # M
    prediction: Tensor  # C probabilities
    # min-max: tile index behind each descriptor slot, max slots first
    selected_tiles: np.ndarray | None = None
    attention_weights: Tensor | None = None
    extras: dict = field(default_factory=dict)


# -- construction ------------------------------------------------------------------


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_classifier(
    arch: str = "minmax",
    P: int = 64,
    N: int | None = None,
    C: int = 2,
    R: int = 5,
    attention_hidden: int = 128,
    attention_nonlinearity: str = "tanh",
    extractor_hidden: tuple[int, ...] | None = None,
    head_hidden: tuple[int, ...] = (200, 100),
    scorer_bias: bool = True,
    seed: int = 42,
) -> WsiClassifier:
    """Randomly initialised classifier (Glorot-uniform weights, zero biases).

    With ``extractor_hidden=None`` tiles are taken to be descriptors already and
    the extractor is the identity (``N`` defaults to ``P``). Otherwise the
    extractor is an MLP ``P -> hidden... -> N`` with relu between layers.
    """
    if N is None:
        N = P
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def add_mlp(prefix: str, sizes: list[int]):
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            params[f"{prefix}.{i}.weight"] = Tensor(_glorot(rng, a, b), requires_grad=True)
            params[f"{prefix}.{i}.bias"] = Tensor(np.zeros(b), requires_grad=True)

    if extractor_hidden is not None:
        add_mlp("extractor", [P, *extractor_hidden, N])

    if arch == "minmax":
        aggregator: Aggregator = MinMax(R)
        M = 2 * R
        params["scorer.weight"] = Tensor(_glorot(rng, N, 1), requires_grad=True)
        if scorer_bias:
            params["scorer.bias"] = Tensor(np.zeros(1), requires_grad=True)
    elif arch == "attention":
        aggregator = Attention(attention_hidden, attention_nonlinearity)
        M = N
        params["attention.V"] = Tensor(_glorot(rng, N, attention_hidden), requires_grad=True)
        params["attention.b_V"] = Tensor(np.zeros(attention_hidden), requires_grad=True)
        params["attention.u"] = Tensor(_glorot(rng, attention_hidden, 1), requires_grad=True)
        params["attention.b_u"] = Tensor(np.zeros(1), requires_grad=True)
    else:
        raise ValueError(f"unknown architecture {arch!r}")

    add_mlp("head", [M, *head_hidden, C])
    return WsiClassifier(
        Dims(P, N, M, C),
        aggregator,
        params,
        extractor_hidden=tuple(extractor_hidden) if extractor_hidden is not None else None,
        head_hidden=tuple(head_hidden),
        scorer_bias=scorer_bias,
    )


# -- blocks --------------------------------------------------------------------------


def _as_matrix(x, width: int, what: str) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim == 1:
        x = ad.reshape(x, (1, -1))
    if x.data.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"{what} must have length {width}, got shape {x.shape}")
    return x


def encode_tiles(model: WsiClassifier, content) -> Tensor:
    """Tile descriptors for a T x P content matrix (T x N)."""
    h = _as_matrix(content, model.dims.P, "tile content")
    layers = model._layers("extractor")
    for i, (w, b) in enumerate(layers):
        h = ad.linear(h, w, b)
        if i < len(layers) - 1:
            h = ad.relu(h)
    return h


def encode_tile(model: WsiClassifier, tile_content) -> Tensor:
    """Descriptor of a single tile (length N)."""
    return ad.reshape(encode_tiles(model, tile_content), (model.dims.N,))


def attention_logits(model: WsiClassifier, descriptors) -> Tensor:
    agg = model.aggregator
    if not isinstance(agg, Attention):
        raise TypeError("attention_logits needs an attention model")
    d = _as_matrix(descriptors, model.dims.N, "descriptor")
    p = model.params
    hidden = _ACTIVATIONS[agg.nonlinearity](ad.linear(d, p["attention.V"], p["attention.b_V"]))
    logits = ad.linear(hidden, p["attention.u"], p["attention.b_u"])
    return ad.reshape(logits, (d.shape[0],))


def score_tiles(model: WsiClassifier, descriptors) -> Tensor:
    """One score per tile: linear scorer for min-max, attention logit for attention."""
    if isinstance(model.aggregator, Attention):
        return attention_logits(model, descriptors)
    d = _as_matrix(descriptors, model.dims.N, "descriptor")
    s = ad.linear(d, model.params["scorer.weight"], model.params.get("scorer.bias"))
    return ad.reshape(s, (d.shape[0],))


def score_tile(model: WsiClassifier, d) -> Tensor:
    """Scalar score of one tile descriptor."""
    return ad.index(score_tiles(model, d), 0)


def aggregate_minmax(scores, descriptors, R: int) -> tuple[Tensor, np.ndarray]:
    """Slide descriptor ``[top-R scores descending | bottom-R scores ascending]``.

    Returns the descriptor and the tile index behind each of its 2R slots. Ties go
    to the lowest tile index, and no tile fills more than one slot. ``descriptors`` is accepted for interface symmetry
    with attention and is not used.
    """
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    T = scores.size
    if T < 2 * R:
        raise ValueError(f"bag has {T} tiles, min-max with R={R} needs at least {2 * R}")
    top = ad.max_k(scores, R)
    bottom = ad.min_k(scores, R, exclude=top.source_index)
    slots = np.concatenate([top.source_index, bottom.source_index])
    return ad.concat([top, bottom]), slots


def aggregate_attention(
    descriptors, params: dict[str, Tensor], nonlinearity: str = "tanh"
) -> tuple[Tensor, Tensor, Tensor]:
    """Attention pooling; returns (slide descriptor, weights, logits)."""
    d = descriptors if isinstance(descriptors, Tensor) else Tensor(descriptors)
    if d.data.ndim != 2 or d.shape[0] < 1:
        raise ValueError("attention pooling needs a non-empty T x N descriptor matrix")
    hidden = _ACTIVATIONS[nonlinearity](ad.linear(d, params["attention.V"], params["attention.b_V"]))
    logits = ad.reshape(ad.linear(hidden, params["attention.u"], params["attention.b_u"]), (d.shape[0],))
    weights = ad.softmax(logits)
    pooled = ad.matmul(ad.reshape(weights, (1, -1)), d)
    return ad.reshape(pooled, (d.shape[1],)), weights, logits


def decide(model: WsiClassifier, D) -> Tensor:
    """Class probabilities from a slide descriptor."""
    h = _as_matrix(D, model.dims.M, "slide descriptor")
    layers = model._layers("head")
    for i, (w, b) in enumerate(layers):
        h = ad.linear(h, w, b)
        if i < len(layers) - 1:
            h = ad.relu(h)
    return ad.softmax(ad.reshape(h, (model.dims.C,)))


def forward_slide(model: WsiClassifier, bag, content_requires_grad: bool = False) -> SlideForward:
    """Run all four blocks on one bag (a SlideBag, a T x P array or a Tensor).

    Run inside a :class:`~milexplain.autodiff.Tape` to make the result
    differentiable; ``content_requires_grad`` also tracks the tile content.
    """
    tiles = getattr(bag, "tiles", bag)
    if isinstance(tiles, Tensor):
        content = tiles
    else:
        content = Tensor(tiles, requires_grad=content_requires_grad)
    if content.data.ndim != 2 or content.shape[1] != model.dims.P:
        raise ValueError(f"bag tiles must be T x {model.dims.P}, got {content.shape}")
    d = encode_tiles(model, content)
    agg = model.aggregator
    if isinstance(agg, MinMax):
        s = score_tiles(model, d)
        D, slots = aggregate_minmax(s, d, agg.R)
        weights = None
    else:
        D, weights, s = aggregate_attention(d, model.params, agg.nonlinearity)
        slots = None
    P = decide(model, D)
    return SlideForward(content, d, s, D, P, selected_tiles=slots, attention_weights=weights)


# -- persistence -----------------------------------------------------------------------


def model_to_dict(model: WsiClassifier) -> dict:
    agg = model.aggregator
    if isinstance(agg, MinMax):
        arch = {"aggregator": "minmax", "R": agg.R}
    else:
        arch = {"aggregator": "attention", "hidden": agg.hidden, "nonlinearity": agg.nonlinearity}
    arch["extractor_hidden"] = list(model.extractor_hidden) if model.has_extractor else None
    arch["head_hidden"] = list(model.head_hidden)
    arch["scorer_bias"] = model.scorer_bias
    d = model.dims
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "architecture": arch,
        "dims": {"P": d.P, "N": d.N, "M": d.M, "C": d.C},
        # json writes floats with repr(), which round-trips float64 exactly
        "parameters": {
            name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
            for name, t in model.params.items()
        },
    }


def model_from_dict(doc: dict) -> WsiClassifier:
    if doc.get("format") != FORMAT_NAME:
        raise ValueError("not a milexplain model document")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')}")
    arch = doc["architecture"]
    if arch["aggregator"] == "minmax":
        agg: Aggregator = MinMax(int(arch["R"]))
    elif arch["aggregator"] == "attention":
        agg = Attention(int(arch["hidden"]), arch.get("nonlinearity", "tanh"))
    else:
        raise ValueError(f"unknown aggregator {arch['aggregator']!r}")
    params = {}
    for name, entry in doc["parameters"].items():
        data = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if data.size != int(np.prod(shape)):
            raise ValueError(f"parameter {name}: {data.size} values for shape {shape}")
        params[name] = Tensor(data.reshape(shape), requires_grad=True)
    hidden = arch.get("extractor_hidden")
    return WsiClassifier(
        Dims(**{k: int(v) for k, v in doc["dims"].items()}),
        agg,
        params,
        extractor_hidden=tuple(hidden) if hidden is not None else None,
        head_hidden=tuple(arch.get("head_hidden", (200, 100))),
        scorer_bias=bool(arch.get("scorer_bias", True)),
    )


def save_model(model: WsiClassifier, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> WsiClassifier:
    return model_from_dict(json.loads(Path(path).read_text()))
