"""Channel-aware transformer encoder for multivariate time series.

A sample x (C channels x T steps) is embedded twice: a time stream of T
step vectors and a channel stream of C channel vectors, both of width D.
A stack of two-tower layers updates the streams; in the default ``cat``
variant each tower cross-attends against the *other* stream's layer input
(both towers read the previous layer's outputs, so the update is parallel,
not sequential). A final aggregate attention folds the time stream into the
channel stream, and the per-channel rows are concatenated into the flat
representation used by every downstream task.

Variants, all selected by ``EncoderConfig.variant``:

* ``cat``            - cross-attending towers + aggregate (the default)
* ``self_aggregate`` - towers self-attend, aggregate unchanged
* ``channel_self``   - single self-attending channel tower, no aggregate
* ``no_aggregate``   - cross-attending towers, channel stream returned as-is
* ``tat``            - aggregate mirrored onto the time axis (T x D rows)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    AttnWeights,
    Tensor,
    add,
    constant,
    dropout,
    ffn,
    layer_norm,
    matmul,
    multi_head_attention,
    reshape,
    transpose,
)

__all__ = [
    "CatParams",
    "CoLayerParams",
    "Encoder",
    "EncoderConfig",
    "FfnWeights",
    "NormWeights",
    "Representation",
    "VARIANTS",
    "aggregate",
    "co_layer",
    "embed",
    "encode",
    "init_cat_params",
    "representation_rows",
    "sinusoid_table",
]

VARIANTS = ("cat", "self_aggregate", "channel_self", "no_aggregate", "tat")


@dataclass(frozen=True)
class EncoderConfig:
    """Dimensions and switches of the encoder."""

    channels: int
    steps: int
    width: int = 512
    depth: int = 8
    heads: int = 8
    dropout: float = 0.2
    variant: str = "cat"

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.steps < 2:
            raise ConfigError(f"steps must be >= 2, got {self.steps}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} is not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown encoder variant '{self.variant}' (expected one of {VARIANTS})")


@dataclass
class NormWeights:
    gain: Tensor
    bias: Tensor


@dataclass
class FfnWeights:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class CoLayerParams:
    """One two-tower layer: attention + FFN blocks for each stream."""

    time_attn: AttnWeights
    time_norm1: NormWeights
    time_ffn: FfnWeights
    time_norm2: NormWeights
    chan_attn: AttnWeights
    chan_norm1: NormWeights
    chan_ffn: FfnWeights
    chan_norm2: NormWeights


@dataclass
class CatParams:
    """Every learnable array of the encoder, plus the fixed positional table."""

    w_time: Tensor  # (C, D) time-embedding matrix
    w_chan: Tensor  # (T, D) channel-embedding matrix
    e_pos: Tensor  # (T, D) sinusoidal table, receives no gradient
    layers: list[CoLayerParams] = field(default_factory=list)
    agg: AttnWeights | None = None  # fresh Q/K/V, no output projection

    def named(self) -> dict[str, Tensor]:
        """Flat path -> tensor view of the whole tree (``e_pos`` included)."""
        out: dict[str, Tensor] = {
            "embed.w_time": self.w_time,
            "embed.w_chan": self.w_chan,
            "embed.e_pos": self.e_pos,
        }
        for i, layer in enumerate(self.layers):
            for tower in ("time", "chan"):
                attn: AttnWeights = getattr(layer, f"{tower}_attn")
                out[f"layers.{i}.{tower}_attn.w_q"] = attn.w_q
                out[f"layers.{i}.{tower}_attn.w_k"] = attn.w_k
                out[f"layers.{i}.{tower}_attn.w_v"] = attn.w_v
                out[f"layers.{i}.{tower}_attn.w_o"] = attn.w_o
                for j in (1, 2):
                    norm: NormWeights = getattr(layer, f"{tower}_norm{j}")
                    out[f"layers.{i}.{tower}_norm{j}.gain"] = norm.gain
                    out[f"layers.{i}.{tower}_norm{j}.bias"] = norm.bias
                f: FfnWeights = getattr(layer, f"{tower}_ffn")
                out[f"layers.{i}.{tower}_ffn.w1"] = f.w1
                out[f"layers.{i}.{tower}_ffn.b1"] = f.b1
                out[f"layers.{i}.{tower}_ffn.w2"] = f.w2
                out[f"layers.{i}.{tower}_ffn.b2"] = f.b2
        out["aggregate.w_q"] = self.agg.w_q
        out["aggregate.w_k"] = self.agg.w_k
        out["aggregate.w_v"] = self.agg.w_v
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named().items() if t.requires_grad}

    def zero_grad(self) -> None:
        for t in self.named().values():
            t.zero_grad()


@dataclass
class Representation:
    """Per-row features and their row-major concatenation.

    ``per_channel`` has one D-wide row per channel (per time step for the
    ``tat`` variant); ``flat`` is the same data reshaped to a single row of
    rows * D values per sample.
    """

    per_channel: Tensor
    flat: Tensor


def representation_rows(config: EncoderConfig) -> int:
    """Row count of the representation: channels, or steps for ``tat``."""
    return config.steps if config.variant == "tat" else config.channels


def sinusoid_table(steps: int, width: int) -> np.ndarray:
    """Fixed positional table: even columns sin, odd columns cos."""
    pos = np.arange(steps, dtype=np.float64)[:, None]
    pair = np.arange(0, width, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, pair / width)
    table = np.zeros((steps, width))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : width // 2])
    return table


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def _attn(rng: np.random.Generator, width: int, with_out: bool) -> AttnWeights:
    return AttnWeights(
        w_q=_glorot(rng, width, width),
        w_k=_glorot(rng, width, width),
        w_v=_glorot(rng, width, width),
        w_o=_glorot(rng, width, width) if with_out else None,
    )


def _norm(width: int) -> NormWeights:
    return NormWeights(
        gain=Tensor(np.ones(width), requires_grad=True),
        bias=Tensor(np.zeros(width), requires_grad=True),
    )


def _ffn(rng: np.random.Generator, width: int) -> FfnWeights:
    hidden = 4 * width
    return FfnWeights(
        w1=_glorot(rng, width, hidden),
        b1=Tensor(np.zeros(hidden), requires_grad=True),
        w2=_glorot(rng, hidden, width),
        b2=Tensor(np.zeros(width), requires_grad=True),
    )


def init_cat_params(config: EncoderConfig, rng: np.random.Generator) -> CatParams:
    """Fresh parameters: Glorot-uniform weights, zero biases, unit norm gains."""
    d = config.width
    layers = [
        CoLayerParams(
            time_attn=_attn(rng, d, with_out=True),
            time_norm1=_norm(d),
            time_ffn=_ffn(rng, d),
            time_norm2=_norm(d),
            chan_attn=_attn(rng, d, with_out=True),
            chan_norm1=_norm(d),
            chan_ffn=_ffn(rng, d),
            chan_norm2=_norm(d),
        )
        for _ in range(config.depth)
    ]
    return CatParams(
        w_time=_glorot(rng, config.channels, d),
        w_chan=_glorot(rng, config.steps, d),
        e_pos=Tensor(sinusoid_table(config.steps, d)),
        layers=layers,
        agg=_attn(rng, d, with_out=False),
    )


def embed(x, params: CatParams) -> tuple[Tensor, Tensor]:
    """Project a sample into the two streams.

    ``x`` is (C, T) or batched (B, C, T). The time stream is x^T W_time plus
    the fixed positional table; the channel stream is x W_chan with no
    positional term.
    """
    x = constant(x)
    c, d = params.w_time.shape
    t = params.w_chan.shape[0]
    if x.shape[-2:] != (c, t):
        raise ShapeError(f"input shape {x.shape} does not match configured (C, T) = ({c}, {t})")
    e_t = add(matmul(transpose(x), params.w_time), params.e_pos)
    e_c = matmul(x, params.w_chan)
    return e_t, e_c


def _tower(
    a_self: Tensor,
    kv: Tensor,
    attn: AttnWeights,
    norm1: NormWeights,
    f: FfnWeights,
    norm2: NormWeights,
    config: EncoderConfig,
    rng,
    train: bool,
    stats: dict | None,
) -> Tensor:
    h = multi_head_attention(a_self, kv, attn, config.heads, stats=stats)
    h = dropout(h, config.dropout, rng, train)
    b = layer_norm(add(h, a_self), norm1.gain, norm1.bias)
    f_out = ffn(b, f.w1, f.b1, f.w2, f.b2, rate=config.dropout, rng=rng, train=train)
    return layer_norm(add(f_out, b), norm2.gain, norm2.bias)


def co_layer(
    a_t: Tensor,
    a_c: Tensor,
    layer: CoLayerParams,
    config: EncoderConfig,
    *,
    rng: np.random.Generator | None = None,
    train: bool = False,
    stats: dict | None = None,
) -> tuple[Tensor, Tensor]:
    """One two-tower layer; both towers read this layer's *inputs*.

    Wiring follows the variant: cross-attention for ``cat``/``no_aggregate``/
    ``tat`` (time queries attend channel keys and vice versa), self-attention
    for ``self_aggregate``, and a lone self-attending channel tower for
    ``channel_self`` (the time stream passes through untouched).
    """
    if config.variant == "channel_self":
        new_c = _tower(a_c, a_c, layer.chan_attn, layer.chan_norm1, layer.chan_ffn, layer.chan_norm2, config, rng, train, stats)
        return a_t, new_c
    cross = config.variant != "self_aggregate"
    time_kv = a_c if cross else a_t
    chan_kv = a_t if cross else a_c
    new_t = _tower(a_t, time_kv, layer.time_attn, layer.time_norm1, layer.time_ffn, layer.time_norm2, config, rng, train, stats)
    new_c = _tower(a_c, chan_kv, layer.chan_attn, layer.chan_norm1, layer.chan_ffn, layer.chan_norm2, config, rng, train, stats)
    return new_t, new_c


def _flatten_rows(per_row: Tensor) -> Tensor:
    if per_row.ndim == 2:
        rows, width = per_row.shape
        return reshape(per_row, (1, rows * width))
    batch, rows, width = per_row.shape
    return reshape(per_row, (batch, rows * width))


def aggregate(a_t: Tensor, a_c: Tensor, agg: AttnWeights, heads: int, stats: dict | None = None) -> Representation:
    """Fold the time stream into the channel stream with one attention pass.

    Channel rows act as queries over time keys/values. No residual, layer
    norm, FFN, or output projection follows; the result rows concatenate
    directly into the flat vector.
    """
    per_channel = multi_head_attention(a_c, a_t, agg, heads, stats=stats)
    return Representation(per_channel=per_channel, flat=_flatten_rows(per_channel))


def encode(
    x,
    params: CatParams,
    config: EncoderConfig,
    *,
    rng: np.random.Generator | None = None,
    train: bool = False,
    stats: dict | None = None,
) -> Representation:
    """Embed, run the layer stack, and reduce to the final representation."""
    if config.variant not in VARIANTS:
        raise ConfigError(f"unknown encoder variant '{config.variant}'")
    a_t, a_c = embed(x, params)
    for layer in params.layers:
        a_t, a_c = co_layer(a_t, a_c, layer, config, rng=rng, train=train, stats=stats)
    if config.variant in ("channel_self", "no_aggregate"):
        return Representation(per_channel=a_c, flat=_flatten_rows(a_c))
    if config.variant == "tat":
        per_time = multi_head_attention(a_t, a_c, params.agg, config.heads, stats=stats)
        return Representation(per_channel=per_time, flat=_flatten_rows(per_time))
    return aggregate(a_t, a_c, params.agg, config.heads, stats=stats)


@dataclass
class Encoder:
    """Bundle of parameters and config with convenience encode calls."""

    params: CatParams
    config: EncoderConfig

    def encode(self, x, *, rng=None, train: bool = False) -> Representation:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError(f"Encoder.encode expects one (C, T) sample, got shape {x.shape}")
        return encode(x, self.params, self.config, rng=rng, train=train)

    def encode_batch(self, xs, *, rng=None, train: bool = False) -> Representation:
        xs = constant(xs)
        if xs.ndim != 3:
            raise ShapeError(f"Encoder.encode_batch expects (B, C, T), got shape {xs.shape}")
        return encode(xs, self.params, self.config, rng=rng, train=train)

    @property
    def flat_dim(self) -> int:
        return representation_rows(self.config) * self.config.width

    def iter_samples(self, xs) -> Iterator[Representation]:
        for x in xs:
            yield self.encode(x)
