"""Miniature hybrid convolution/transformer embedding network.

Topology::

    stem: conv 3x3 stride 2 -> LayerNorm
    S0:   [1x1 projection if stem/S0 widths differ] -> conv blocks
    S1:   LayerNorm -> conv 2x2 stride 2 -> conv blocks
    S2:   LayerNorm -> conv 2x2 stride 2 -> tokens + position table -> transformer blocks
    final LayerNorm -> mean over tokens -> linear head

A conv block is ``x + pw2(gelu(pw1(ln(dwconv3x3(x)))))`` with the LayerNorm
and pointwise layers applied channel-last.  A transformer block is
``h = x + attn(ln1(x)); h + mlp(ln2(h))``.

Every parameter carries a partition tag.  ``partition_parameters`` decides
the tags from a :class:`LayerSet` using names alone: LayerNorm affine
parameters live under a path segment starting with ``ln``; the adaptable
units are the ``stem``, ``s0``, ``s1`` and ``s2`` prefixes.
"""

from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass, field, fields
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import container
from .errors import CorruptCheckpointError, InvalidConfigError, InvalidShapeError
from .tensor import (
    Tensor,
    conv2d,
    gelu,
    layer_norm,
    linear,
    mean,
    multihead_attention,
    permute,
    reshape,
)

LN_EPS = 1e-5
POS_INIT_BOUND = 1.0
UNITS = ("LN", "ST", "S0", "S1", "S2")
_UNIT_PREFIX = {"stem": "ST", "s0": "S0", "s1": "S1", "s2": "S2"}


class Partition(IntEnum):
    LN = 0
    ADAPTED = 1
    FROZEN = 2


class LayerSet:
    """A subset of the adaptable units {LN, ST, S0, S1, S2}."""

    __slots__ = ("units",)

    def __init__(self, units: Iterable[str] = ()):
        units = frozenset(u.strip().upper() for u in units)
        unknown = units - set(UNITS)
        if unknown:
            raise InvalidConfigError(f"unknown layer-set unit(s): {sorted(unknown)}; expected a subset of {list(UNITS)}")
        self.units = units

    @classmethod
    def parse(cls, text: str) -> LayerSet:
        return cls(part for part in text.split(",") if part.strip())

    def __str__(self) -> str:
        return ",".join(u for u in UNITS if u in self.units)

    def __repr__(self) -> str:
        return f"LayerSet('{self}')"

    def __contains__(self, unit: str) -> bool:
        return unit in self.units

    def __iter__(self) -> Iterator[str]:
        return (u for u in UNITS if u in self.units)

    def __len__(self) -> int:
        return len(self.units)

    def __eq__(self, other) -> bool:
        return isinstance(other, LayerSet) and self.units == other.units

    def __hash__(self) -> int:
        return hash(self.units)

    def __le__(self, other: LayerSet) -> bool:
        return self.units <= other.units


# The sixteen rows of the layer ablation grid.
ABLATION_LAYER_SETS = tuple(LayerSet.parse(s) for s in (
    "LN", "ST", "LN,ST", "LN,ST,S0", "LN,ST,S0,S1", "LN,ST,S0,S1,S2",
    "S0", "S1", "S2",
    "LN,S0", "LN,S1", "LN,S2",
    "S1,S2", "S0,S1,S2", "ST,S0,S1,S2", "LN,S0,S1,S2",
))


@dataclass(frozen=True)
class BackboneConfig:
    input_channels: int = 3
    input_size: int = 32
    stem_channels: int = 16
    stage_channels: tuple[int, int, int] = (16, 32, 48)
    stage_depths: tuple[int, int, int] = (1, 1, 1)
    s2_heads: int = 2
    embed_dim: int = 64
    mlp_ratio: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))

    def validate(self) -> None:
        def bad(msg):
            raise InvalidConfigError(f"BackboneConfig: {msg}")

        if len(self.stage_channels) != 3 or len(self.stage_depths) != 3:
            bad("stage_channels and stage_depths need exactly 3 entries (S0, S1, S2)")
        for name in ("input_channels", "input_size", "stem_channels", "s2_heads", "embed_dim", "mlp_ratio"):
            if getattr(self, name) <= 0:
                bad(f"{name} must be positive")
        if any(c <= 0 for c in self.stage_channels):
            bad("stage channels must be positive")
        if any(d < 0 for d in self.stage_depths):
            bad("stage depths must be non-negative")
        if self.input_size % 8:
            bad(f"input_size={self.input_size} must be divisible by 8")
        if self.stage_channels[2] % self.s2_heads:
            bad(f"S2 channels {self.stage_channels[2]} not divisible by s2_heads={self.s2_heads}")
        if self.seed < 0:
            bad("seed must be non-negative")

    def to_items(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> BackboneConfig:
        kwargs = {}
        for f in fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            if f.name in ("stage_channels", "stage_depths"):
                kwargs[f.name] = tuple(int(x) for x in raw.split(","))
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


@dataclass
class Parameter:
    name: str
    value: Tensor
    partition: Partition = Partition.FROZEN

    @property
    def trainable(self) -> bool:
        return self.partition is not Partition.FROZEN


def is_layernorm_param(name: str) -> bool:
    """True iff ``name`` addresses a LayerNorm gamma/beta (a segment starting with ``ln``)."""
    segments = name.split(".")
    return segments[-1] in ("gamma", "beta") and any(s.startswith("ln") for s in segments[:-1])


def unit_of(name: str) -> str | None:
    return _UNIT_PREFIX.get(name.split(".", 1)[0])


@dataclass
class Model:
    config: BackboneConfig
    parameters: list[Parameter]
    layer_set: LayerSet | None = None
    _index: dict[str, Parameter] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {p.name: p for p in self.parameters}
        if len(self._index) != len(self.parameters):
            raise InvalidConfigError("duplicate parameter names")

    def __getitem__(self, name: str) -> Tensor:
        return self._index[name].value

    def param(self, name: str) -> Parameter:
        return self._index[name]

    def names(self) -> list[str]:
        return [p.name for p in self.parameters]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters if p.trainable]

    def num_parameters(self) -> int:
        return sum(p.value.data.size for p in self.parameters)

    def copy(self) -> Model:
        params = [Parameter(p.name, Tensor(p.value.data.copy(), requires_grad=p.value.requires_grad), p.partition)
                  for p in self.parameters]
        return Model(self.config, params, copy.copy(self.layer_set))

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.value.grad = None

    def state_bytes(self) -> dict[str, bytes]:
        return {p.name: p.value.data.tobytes() for p in self.parameters}

    def __call__(self, batch: Tensor) -> Tensor:
        return forward_embed(self, batch)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _shapes(cfg: BackboneConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) for every parameter, in model order."""
    specs: list[tuple[str, tuple[int, ...], str]] = []

    def conv(prefix, cout, cin_g, k):
        specs.append((f"{prefix}.weight", (cout, cin_g, k, k), "kaiming"))
        specs.append((f"{prefix}.bias", (cout,), "zeros"))

    def lin(prefix, dout, din):
        specs.append((f"{prefix}.weight", (dout, din), "kaiming"))
        specs.append((f"{prefix}.bias", (dout,), "zeros"))

    def ln(prefix, d):
        specs.append((f"{prefix}.gamma", (d,), "ones"))
        specs.append((f"{prefix}.beta", (d,), "zeros"))

    c0, c1, c2 = cfg.stage_channels
    r = cfg.mlp_ratio
    conv("stem.conv", cfg.stem_channels, cfg.input_channels, 3)
    ln("stem.ln", cfg.stem_channels)

    if cfg.stem_channels != c0:
        conv("s0.proj", c0, cfg.stem_channels, 1)
    prev = c0
    for stage, (c, depth) in enumerate(zip(cfg.stage_channels, cfg.stage_depths)):
        if stage > 0:
            ln(f"s{stage}.down.ln", prev)
            conv(f"s{stage}.down.conv", c, prev, 2)
        if stage == 2:
            tokens = (cfg.input_size // 8) ** 2
            specs.append(("s2.pos", (tokens, c), "small"))
        for b in range(depth):
            p = f"s{stage}.block{b}"
            if stage < 2:
                conv(f"{p}.dw", c, 1, 3)
                ln(f"{p}.ln", c)
                lin(f"{p}.pw1", r * c, c)
                lin(f"{p}.pw2", c, r * c)
            else:
                ln(f"{p}.ln1", c)
                for w in ("wq", "wk", "wv", "wo"):
                    specs.append((f"{p}.attn.{w}", (c, c), "kaiming"))
                ln(f"{p}.ln2", c)
                lin(f"{p}.mlp.fc1", r * c, c)
                lin(f"{p}.mlp.fc2", c, r * c)
        prev = c
    ln("final.ln", c2)
    lin("head", cfg.embed_dim, c2)
    return specs


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if ".attn." in name:
        return shape[0]
    return int(np.prod(shape[1:]))


def _init_array(cfg: BackboneConfig, name: str, shape: tuple[int, ...], how: str) -> np.ndarray:
    if how == "ones":
        return np.ones(shape, dtype=np.float32)
    if how == "zeros":
        return np.zeros(shape, dtype=np.float32)
    bound = POS_INIT_BOUND if how == "small" else np.sqrt(6.0 / _fan_in(name, shape))
    # Philox is counter-based; one independent stream per (seed, parameter name).
    seq = np.random.SeedSequence([cfg.seed, zlib.crc32(name.encode("utf-8"))])
    rng = np.random.Generator(np.random.Philox(seq))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_backbone(config: BackboneConfig | None = None) -> Model:
    """Build a model with deterministic initial weights; every parameter starts FROZEN."""
    cfg = config or BackboneConfig()
    cfg.validate()
    params = [Parameter(name, Tensor(_init_array(cfg, name, shape, how)))
              for name, shape, how in _shapes(cfg)]
    return Model(cfg, params)


def parameter_count(config: BackboneConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _shapes(config))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _ln_channels(x: Tensor, model: Model, prefix: str) -> Tensor:
    """LayerNorm over channels of an NCHW map."""
    y = permute(x, (0, 2, 3, 1))
    y = layer_norm(y, model[f"{prefix}.gamma"], model[f"{prefix}.beta"], LN_EPS)
    return permute(y, (0, 3, 1, 2))


def _conv_block(x: Tensor, model: Model, p: str) -> Tensor:
    c = x.shape[1]
    y = conv2d(x, model[f"{p}.dw.weight"], model[f"{p}.dw.bias"], stride=1, padding=1, groups=c)
    y = permute(y, (0, 2, 3, 1))
    y = layer_norm(y, model[f"{p}.ln.gamma"], model[f"{p}.ln.beta"], LN_EPS)
    y = gelu(linear(y, model[f"{p}.pw1.weight"], model[f"{p}.pw1.bias"]))
    y = linear(y, model[f"{p}.pw2.weight"], model[f"{p}.pw2.bias"])
    return x + permute(y, (0, 3, 1, 2))


def _transformer_block(x: Tensor, model: Model, p: str, heads: int) -> Tensor:
    h = layer_norm(x, model[f"{p}.ln1.gamma"], model[f"{p}.ln1.beta"], LN_EPS)
    h = multihead_attention(h, model[f"{p}.attn.wq"], model[f"{p}.attn.wk"],
                            model[f"{p}.attn.wv"], model[f"{p}.attn.wo"], heads)
    x = x + h
    h = layer_norm(x, model[f"{p}.ln2.gamma"], model[f"{p}.ln2.beta"], LN_EPS)
    h = gelu(linear(h, model[f"{p}.mlp.fc1.weight"], model[f"{p}.mlp.fc1.bias"]))
    h = linear(h, model[f"{p}.mlp.fc2.weight"], model[f"{p}.mlp.fc2.bias"])
    return x + h


def forward_embed(model: Model, batch: Tensor) -> Tensor:
    """Raw (unnormalized) embeddings ``[N, embed_dim]`` for ``batch[N, C, H, W]``."""
    cfg = model.config
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    want = [cfg.input_channels, cfg.input_size, cfg.input_size]
    if batch.ndim != 4 or batch.dims[1:] != want or batch.shape[0] == 0:
        raise InvalidShapeError(f"forward_embed(): batch dims {batch.dims} != [N, {', '.join(map(str, want))}]")

    x = conv2d(batch, model["stem.conv.weight"], model["stem.conv.bias"], stride=2, padding=1)
    x = _ln_channels(x, model, "stem.ln")
    if cfg.stem_channels != cfg.stage_channels[0]:
        x = conv2d(x, model["s0.proj.weight"], model["s0.proj.bias"])
    for b in range(cfg.stage_depths[0]):
        x = _conv_block(x, model, f"s0.block{b}")

    x = _ln_channels(x, model, "s1.down.ln")
    x = conv2d(x, model["s1.down.conv.weight"], model["s1.down.conv.bias"], stride=2)
    for b in range(cfg.stage_depths[1]):
        x = _conv_block(x, model, f"s1.block{b}")

    x = _ln_channels(x, model, "s2.down.ln")
    x = conv2d(x, model["s2.down.conv.weight"], model["s2.down.conv.bias"], stride=2)
    n, c, h, w = x.shape
    x = permute(reshape(x, (n, c, h * w)), (0, 2, 1)) + model["s2.pos"]
    for b in range(cfg.stage_depths[2]):
        x = _transformer_block(x, model, f"s2.block{b}", cfg.s2_heads)

    x = layer_norm(x, model["final.ln.gamma"], model["final.ln.beta"], LN_EPS)
    x = mean(x, axis=1)
    return linear(x, model["head.weight"], model["head.bias"])


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------

def partition_for(name: str, layer_set: LayerSet) -> Partition:
    if is_layernorm_param(name):
        return Partition.LN if "LN" in layer_set else Partition.FROZEN
    unit = unit_of(name)
    if unit is not None and unit in layer_set:
        return Partition.ADAPTED
    return Partition.FROZEN


def partition_parameters(model: Model, layer_set: LayerSet | str) -> None:
    """Tag every parameter LN / ADAPTED / FROZEN and set ``requires_grad`` to match."""
    if isinstance(layer_set, str):
        layer_set = LayerSet.parse(layer_set)
    for p in model.parameters:
        p.partition = partition_for(p.name, layer_set)
        p.value.requires_grad = p.trainable
        p.value.grad = None
    model.layer_set = layer_set


def clone_teacher(model: Model) -> Model:
    """Deep copy with every parameter FROZEN and gradient-free."""
    teacher = model.copy()
    for p in teacher.parameters:
        p.partition = Partition.FROZEN
        p.value.requires_grad = False
    teacher.layer_set = LayerSet()
    return teacher


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _header(model: Model) -> str:
    items = {"kind": "model", **model.config.to_items()}
    items["layer_set"] = "none" if model.layer_set is None else str(model.layer_set)
    return container.format_header(items)


def checkpoint_bytes(model: Model) -> bytes:
    records = [container.Record(p.name, int(p.partition), p.value.data) for p in model.parameters]
    return container.encode(_header(model), records)


def save_checkpoint(model: Model, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    tmp.replace(path)


def load_checkpoint(path) -> Model:
    header, records = container.read(path)
    items = container.parse_header(header)
    if items.get("kind") != "model":
        raise CorruptCheckpointError("header does not describe a model", 12)
    try:
        cfg = BackboneConfig.from_items(items)
        cfg.validate()
    except (ValueError, TypeError) as exc:
        raise CorruptCheckpointError(f"invalid config in header: {exc}", 12) from exc
    expected = _shapes(cfg)
    if [(r.name, r.array.shape) for r in records] != [(n, s) for n, s, _ in expected]:
        raise CorruptCheckpointError("parameter inventory does not match the stored config", 12)
    params = []
    for r in records:
        tag = Partition(r.tag)
        params.append(Parameter(r.name, Tensor(r.array.copy(), requires_grad=tag is not Partition.FROZEN), tag))
    raw = items.get("layer_set", "none")
    layer_set = None if raw == "none" else LayerSet.parse(raw)
    return Model(cfg, params, layer_set)
