"""Network composition: BCDU-Net sub-nets, chains of them, presets and census.

Layer counting convention (used by :func:`census`): every convolution, every
batchnorm and each ConvLSTM direction's gate bank counts as one layer.
Pooling, upsampling, activations, dropout and concatenation are not layers.
Under this convention a BCDU-Net with ``L`` levels and dense count ``d`` has

    2L (encoder) + 2d + [d > 1] (bottleneck) + 7L (decoder) + 1 (head)

layers, so the presets below total 108 (busu) and 43 (lightbusu).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .engine import functional as F
from .engine.tensor import Tensor, concat, no_grad, relu, sigmoid
from .errors import ConfigError, ShapeError
from .layers import (
    BatchNorm2d,
    BConvLSTMFusion,
    Conv2d,
    ConvBlock,
    ConvLSTMCell,
    DenseBlock,
    Module,
)

JUNCTIONS = ("input+logits",)


@dataclass(frozen=True)
class UNetConfig:
    levels: int
    base_channels: int
    d: int = 1
    in_channels: int = 1
    out_channels: int = 1
    dropout: float = 0.0

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("in_channels and out_channels must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class ChainConfig:
    """Ordered sub-nets; sub-net k+1 reads concat(network input, logits of k)."""

    nets: tuple[UNetConfig, ...]
    junction: str = "input+logits"
    kind: str = "chain"

    def validate(self) -> None:
        if not self.nets:
            raise ConfigError("a chain needs at least one sub-net")
        if self.junction not in JUNCTIONS:
            raise ConfigError(f"unknown junction {self.junction!r}; known: {', '.join(JUNCTIONS)}")
        for cfg in self.nets:
            cfg.validate()
        first = self.nets[0]
        for k in range(1, len(self.nets)):
            want = first.in_channels + self.nets[k - 1].out_channels
            if self.nets[k].in_channels != want:
                raise ConfigError(
                    f"sub-net {k} takes {self.nets[k].in_channels} channels but the junction supplies {want}"
                )
        if self.kind in ("busu", "lightbusu") and not self.nets[0].levels > self.nets[1].levels:
            raise ConfigError("Big-U must be strictly deeper than Small-U")

    @property
    def max_levels(self) -> int:
        return max(c.levels for c in self.nets)

    @property
    def in_channels(self) -> int:
        return self.nets[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.nets[-1].out_channels


def chain_of(*nets: UNetConfig, kind: str = "chain") -> ChainConfig:
    """Build a chain, fixing each downstream sub-net's input width to the junction's."""
    fixed = [nets[0]]
    for cfg in nets[1:]:
        fixed.append(replace(cfg, in_channels=nets[0].in_channels + fixed[-1].out_channels))
    return ChainConfig(tuple(fixed), kind=kind)


def as_chain(cfg: Union[UNetConfig, ChainConfig]) -> ChainConfig:
    return cfg if isinstance(cfg, ChainConfig) else ChainConfig((cfg,))


# ---------------------------------------------------------------------------
# modules


class DecoderLevel(Module):
    """upsample -> 3x3 conv -> batchnorm -> ReLU -> BConvLSTM(skip, up) -> conv block."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, dtype):
        super().__init__()
        self.upconv = self.child("upconv", Conv2d(in_ch, out_ch, 3, rng, dtype))
        self.bn = self.child("bn", BatchNorm2d(out_ch, dtype))
        self.fuse = BConvLSTMFusion(out_ch, rng, dtype)
        self._children.update(self.fuse._children)
        self.block = ConvBlock(out_ch, out_ch, rng, dtype)
        self._children.update(self.block._children)

    def train(self, mode: bool = True):
        super().train(mode)
        self.fuse.train(mode)
        self.block.train(mode)
        return self

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        up = relu(self.bn(self.upconv(F.upsample2x(x))))
        return self.block(self.fuse(skip, up))


class Bottleneck(Module):
    """Dense block whose stage convolutions are registered flat as ``stage<i>_conv<j>``."""

    def __init__(self, in_ch: int, out_ch: int, d: int, rng: np.random.Generator, dtype, dropout: float):
        super().__init__()
        self.dense = DenseBlock(in_ch, out_ch, d, rng, dtype, dropout=dropout)
        for cname, c in self.dense._children.items():
            if isinstance(c, ConvBlock):
                self.child(f"{cname}_conv1", c.conv1)
                self.child(f"{cname}_conv2", c.conv2)
            else:
                self.child(cname, c)

    def train(self, mode: bool = True):
        super().train(mode)
        self.dense.train(mode)
        return self

    def __call__(self, x: Tensor) -> Tensor:
        return self.dense(x)


class Head(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, dtype):
        super().__init__()
        self.conv = self.child("conv", Conv2d(in_ch, out_ch, 1, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(x)


class BCDUNet(Module):
    """One encoder-decoder sub-net returning pre-sigmoid logits."""

    def __init__(self, cfg: UNetConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        L = cfg.levels
        self.encoders = []
        in_ch = cfg.in_channels
        for level in range(L):
            self.encoders.append(self.child(f"enc{level}", ConvBlock(in_ch, cfg.channels(level), rng, dtype)))
            in_ch = cfg.channels(level)
        self.mid = self.child("mid", Bottleneck(cfg.channels(L - 1), cfg.channels(L), cfg.d, rng, dtype, cfg.dropout))
        self.decoders = {}
        for level in reversed(range(L)):
            self.decoders[level] = self.child(
                f"dec{level}", DecoderLevel(cfg.channels(level + 1), cfg.channels(level), rng, dtype)
            )
        self.head = self.child("head", Head(cfg.channels(0), cfg.out_channels, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        skips = []
        h = x
        for enc in self.encoders:
            h = enc(h)
            skips.append(h)
            h = F.maxpool2d(h)
        h = self.mid(h)
        for level in reversed(range(self.cfg.levels)):
            h = self.decoders[level](h, skips[level])
        return self.head(h)


class Network(Module):
    """A chain of BCDU-Net sub-nets with a final sigmoid.

    Parameter names follow ``net.u<k>.<level>.<layer>.<param>``.
    """

    def __init__(self, cfg: Union[UNetConfig, ChainConfig], seed: int = 0, dtype=np.float32):
        super().__init__()
        chain = as_chain(cfg)
        chain.validate()
        self.config = chain
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.subnets = [self.child(f"u{k}", BCDUNet(c, rng, dtype)) for k, c in enumerate(chain.nets)]

    def named_parameters(self, prefix: str = "net."):
        return super().named_parameters(prefix)

    def named_buffers(self, prefix: str = "net."):
        return super().named_buffers(prefix)

    def train(self, mode: bool = True):
        super().train(mode)
        return self

    def check_input(self, shape: Sequence[int]) -> None:
        if len(shape) != 4:
            raise ShapeError(f"network input must be NCHW, got shape {tuple(shape)}")
        if shape[1] != self.config.in_channels:
            raise ShapeError(f"network expects {self.config.in_channels} input channels, got {shape[1]}")
        k = 2**self.config.max_levels
        if shape[2] % k or shape[3] % k:
            raise ShapeError(f"input {shape[2]}x{shape[3]} is not divisible by 2^{self.config.max_levels}")

    def logits(self, x: Tensor) -> Tensor:
        self.check_input(x.shape)
        out = self.subnets[0](x)
        for net in self.subnets[1:]:
            out = net(concat([x, out], axis=1))
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return sigmoid(self.logits(x))

    def predict(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Inference-mode probabilities for an (N, C, H, W) array."""
        was_training = self.training
        self.eval()
        try:
            outs = []
            with no_grad():
                for start in range(0, len(images), batch_size):
                    batch = Tensor(images[start : start + batch_size], dtype=self.dtype)
                    outs.append(self(batch).data)
            return np.concatenate(outs, axis=0)
        finally:
            self.train(was_training)


def build_bcdu(cfg: UNetConfig, seed: int = 0, dtype=np.float32) -> Network:
    return Network(cfg, seed=seed, dtype=dtype)


def build_chain(cfg: ChainConfig, seed: int = 0, dtype=np.float32) -> Network:
    if len(cfg.nets) < 2:
        raise ConfigError("build_chain needs at least two sub-nets")
    return Network(cfg, seed=seed, dtype=dtype)


def build(cfg: Union[UNetConfig, ChainConfig], seed: int = 0, dtype=np.float32) -> Network:
    return Network(cfg, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# census


@dataclass(frozen=True)
class LayerInfo:
    name: str
    kind: str
    kernel: int
    level: int
    params: int


@dataclass
class Census:
    layers: list[LayerInfo] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.layers)

    @property
    def num_parameters(self) -> int:
        return sum(layer.params for layer in self.layers)

    def format(self) -> str:
        lines = [f"{'#':>4}  {'layer':<34} {'kind':<10} {'k':>2} {'lvl':>3} {'params':>10}"]
        for i, layer in enumerate(self.layers, 1):
            lines.append(
                f"{i:>4}  {layer.name:<34} {layer.kind:<10} {layer.kernel:>2} {layer.level:>3} {layer.params:>10d}"
            )
        lines.append(f"total layers: {self.count}")
        return "\n".join(lines)


def _conv(name, cin, cout, k, level):
    return LayerInfo(name, "conv", k, level, cout * cin * k * k + cout)


def _subnet_layers(cfg: UNetConfig, prefix: str) -> list[LayerInfo]:
    out = []
    L = cfg.levels
    in_ch = cfg.in_channels
    for level in range(L):
        c = cfg.channels(level)
        out.append(_conv(f"{prefix}.enc{level}.conv1", in_ch, c, 3, level))
        out.append(_conv(f"{prefix}.enc{level}.conv2", c, c, 3, level))
        in_ch = c
    cin, grow = cfg.channels(L - 1), cfg.channels(L)
    for i in range(cfg.d):
        out.append(_conv(f"{prefix}.mid.stage{i + 1}_conv1", cin + i * grow, grow, 3, L))
        out.append(_conv(f"{prefix}.mid.stage{i + 1}_conv2", grow, grow, 3, L))
    if cfg.d > 1:
        out.append(_conv(f"{prefix}.mid.transition", cin + cfg.d * grow, grow, 1, L))
    for level in reversed(range(L)):
        c = cfg.channels(level)
        p = f"{prefix}.dec{level}"
        out.append(_conv(f"{p}.upconv", cfg.channels(level + 1), c, 3, level))
        out.append(LayerInfo(f"{p}.bn", "batchnorm", 0, level, 2 * c))
        lstm = 4 * c * (c + c) * 9 + 4 * c
        out.append(LayerInfo(f"{p}.lstm_fwd", "convlstm", 3, level, lstm))
        out.append(LayerInfo(f"{p}.lstm_bwd", "convlstm", 3, level, lstm))
        out.append(_conv(f"{p}.proj", 2 * c, c, 3, level))
        out.append(_conv(f"{p}.conv1", c, c, 3, level))
        out.append(_conv(f"{p}.conv2", c, c, 3, level))
    out.append(_conv(f"{prefix}.head.conv", cfg.channels(0), cfg.out_channels, 1, 0))
    return out


def census(target: Union[Network, UNetConfig, ChainConfig]) -> Census:
    """Count layers of a built network or directly from its configuration.

    Works from configuration alone, so it is independent of input size and
    usable on presets too large to instantiate.
    """
    chain = target.config if isinstance(target, Network) else as_chain(target)
    chain.validate()
    result = Census()
    for k, cfg in enumerate(chain.nets):
        result.layers.extend(_subnet_layers(cfg, f"net.u{k}"))
    return result


def module_census(net: Network) -> Census:
    """Census obtained by walking the instantiated module tree."""
    result = Census()

    def walk(mod: Module, prefix: str, level: int):
        for cname, c in mod._children.items():
            name = f"{prefix}.{cname}"
            lvl = level
            if cname.startswith(("enc", "dec")) and cname[3:].isdigit():
                lvl = int(cname[3:])
            if isinstance(c, Conv2d):
                result.layers.append(LayerInfo(name, "conv", c.kernel, lvl, c.weight.size + c.bias.size))
            elif isinstance(c, BatchNorm2d):
                result.layers.append(LayerInfo(name, "batchnorm", 0, lvl, c.gamma.size + c.beta.size))
            elif isinstance(c, ConvLSTMCell):
                result.layers.append(LayerInfo(name, "convlstm", c.kernel, lvl, c.wx.size + c.wh.size + c.b.size))
            else:
                walk(c, name, lvl)

    for k, sub in enumerate(net.subnets):
        walk(sub, f"net.u{k}", sub.cfg.levels)
    return result


def receptive_field(layers: Sequence[LayerInfo], levels: int) -> int:
    """Receptive field (pixels) along the full encoder-bottleneck-decoder path.

    Each spatial layer at pyramid level ``l`` widens the field by
    ``(k - 1) * 2**l`` and each 2x2 pooling step by ``2**l``.
    """
    rf = 1 + sum(2**lvl for lvl in range(levels))
    for layer in layers:
        if layer.kernel > 1:
            rf += (layer.kernel - 1) * 2**layer.level
    return rf


def subnet_receptive_fields(target: Union[Network, ChainConfig, UNetConfig]) -> list[int]:
    chain = target.config if isinstance(target, Network) else as_chain(target)
    layers = census(chain).layers
    return [
        receptive_field([x for x in layers if x.name.startswith(f"net.u{k}.")], cfg.levels)
        for k, cfg in enumerate(chain.nets)
    ]


# ---------------------------------------------------------------------------
# presets

PRESETS: dict[str, Union[UNetConfig, ChainConfig]] = {
    "bcdu_d1": UNetConfig(levels=4, base_channels=8, d=1),
    "bcdu_d3": UNetConfig(levels=4, base_channels=8, d=3),
    "ladderbcdu": chain_of(UNetConfig(4, 8, d=3), UNetConfig(4, 8, d=3), kind="ladder"),
    "busu": chain_of(UNetConfig(6, 8, d=4), UNetConfig(4, 8, d=3), kind="busu"),
    "lightbusu": chain_of(UNetConfig(2, 8, d=4), UNetConfig(1, 8, d=2), kind="lightbusu"),
}


def preset(name: str) -> Union[UNetConfig, ChainConfig]:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}") from None


def with_base_channels(cfg: Union[UNetConfig, ChainConfig], bases: Union[int, Sequence[int]]):
    """Copy of ``cfg`` with new base widths (one value, or one per sub-net)."""
    if isinstance(cfg, UNetConfig):
        return replace(cfg, base_channels=int(bases if isinstance(bases, int) else bases[0]))
    if isinstance(bases, int):
        bases = [bases] * len(cfg.nets)
    return replace(cfg, nets=tuple(replace(c, base_channels=int(b)) for c, b in zip(cfg.nets, bases)))


# ---------------------------------------------------------------------------
# config files

_NET_KEYS = {"levels": int, "base_channels": int, "d": int, "in_channels": int, "out_channels": int, "dropout": float}


def load_config(path: Union[str, Path], base: Union[UNetConfig, ChainConfig, None] = None):
    """Read an INI-style architecture file.

    Sections ``[u0]``, ``[u1]``, ... hold per-sub-net keys (levels,
    base_channels, d, in_channels, out_channels, dropout); an optional
    ``[network]`` section holds ``junction`` and ``kind``. Keys absent from
    the file are taken from ``base`` when given. Other sections (e.g.
    ``[train]``) are ignored here.
    """
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    return config_from_parser(parser, base)


def config_from_parser(parser: configparser.ConfigParser, base=None):
    base_chain = as_chain(base) if base is not None else None
    sections = sorted((s for s in parser.sections() if s.startswith("u") and s[1:].isdigit()), key=lambda s: int(s[1:]))
    n = max(len(sections), len(base_chain.nets) if base_chain else 0)
    if n == 0:
        raise ConfigError("config defines no sub-net sections ([u0], [u1], ...)")
    nets = []
    section_junction = None
    for k in range(n):
        defaults = base_chain.nets[k] if base_chain and k < len(base_chain.nets) else None
        values = dict(defaults.__dict__) if defaults else {}
        sec = f"u{k}"
        if parser.has_section(sec):
            for key, raw in parser.items(sec):
                if key == "junction":
                    section_junction = raw
                    continue
                if key not in _NET_KEYS:
                    raise ConfigError(f"[{sec}] unknown key {key!r}")
                try:
                    values[key] = _NET_KEYS[key](raw)
                except ValueError:
                    raise ConfigError(f"[{sec}] {key} = {raw!r} is not a valid {_NET_KEYS[key].__name__}") from None
        missing = {"levels", "base_channels"} - values.keys()
        if missing:
            raise ConfigError(f"[{sec}] missing keys: {', '.join(sorted(missing))}")
        nets.append(UNetConfig(**values))
    net_sec = parser["network"] if parser.has_section("network") else {}
    junction = net_sec.get("junction", section_junction or (base_chain.junction if base_chain else "input+logits"))
    kind = net_sec.get("kind", base_chain.kind if base_chain else "chain")
    if len(nets) == 1 and not parser.has_section("network") and (base is None or isinstance(base, UNetConfig)):
        return nets[0]
    if len(nets) > 1 and not any(parser.has_option(f"u{k}", "in_channels") for k in range(1, len(nets))):
        chain = chain_of(*nets, kind=kind)
        chain = replace(chain, junction=junction)
    else:
        chain = ChainConfig(tuple(nets), junction=junction, kind=kind)
    chain.validate()
    return chain


def config_to_text(cfg: Union[UNetConfig, ChainConfig]) -> str:
    chain = as_chain(cfg)
    lines = ["[network]", f"junction = {chain.junction}", f"kind = {chain.kind}", ""]
    for k, c in enumerate(chain.nets):
        lines.append(f"[u{k}]")
        for key in _NET_KEYS:
            lines.append(f"{key} = {getattr(c, key)}")
        lines.append("")
    return "\n".join(lines)
