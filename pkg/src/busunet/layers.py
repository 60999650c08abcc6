"""Composite building blocks: conv blocks, dense blocks and ConvLSTM fusion."""

from __future__ import annotations

import copy
from typing import Iterator, Optional

import numpy as np

from .engine import functional as F
from .engine.tensor import Tensor, add, concat, mul, narrow, relu, sigmoid, split, tanh
from .errors import ParameterError, ShapeError


class Module:
    """Minimal parameter container.

    Parameters, buffers (non-trainable arrays such as batchnorm running
    statistics) and child modules are registered explicitly and enumerated in
    registration order, which fixes checkpoint and optimizer ordering.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, dtype=value.dtype, name=name)
        self._params[name] = t
        return t

    def buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        return value

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, c in self._children.items():
            yield from c.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for c in self._children.values():
            c.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def he_normal(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def xavier_uniform(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    receptive = int(np.prod(shape[2:]))
    limit = np.sqrt(6.0 / (shape[1] * receptive + shape[0] * receptive))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.weight = self.param("weight", he_normal(rng, (out_ch, in_ch, kernel, kernel), dtype))
        self.bias = self.param("bias", np.zeros(out_ch, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, padding="same")


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = self.param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.param("beta", np.zeros(channels, dtype=dtype))
        self.running_mean = self.buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = self.buffer("running_var", np.ones(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return F.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class ConvBlock(Module):
    """Two 3x3 same-padded convolutions, each followed by ReLU."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.conv1 = self.child("conv1", Conv2d(in_ch, out_ch, 3, rng, dtype))
        self.conv2 = self.child("conv2", Conv2d(out_ch, out_ch, 3, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"ConvBlock expects {self.in_ch} input channels, got shape {x.shape}")
        return relu(self.conv2(relu(self.conv1(x))))


class DenseBlock(Module):
    """``d`` densely connected conv-block stages.

    Stage ``i`` (1-based) sees the concatenation of the block input and the
    outputs of stages ``1..i-1``, i.e. ``in_ch + (i - 1) * growth`` channels.
    With ``d > 1`` a 1x1 transition conv maps all ``in_ch + d * growth``
    features to ``out_ch``; with ``d == 1`` the single stage is the output.
    """

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        d: int,
        rng: np.random.Generator,
        dtype=np.float32,
        dropout: float = 0.0,
    ):
        super().__init__()
        if d < 1:
            raise ParameterError(f"dense block count d must be >= 1, got {d}")
        if not 0 <= dropout < 1:
            raise ParameterError(f"dropout rate must be in [0, 1), got {dropout}")
        self.in_ch, self.out_ch, self.d, self.growth = in_ch, out_ch, d, out_ch
        self.dropout = dropout
        self._rng = np.random.default_rng(rng.integers(2**32))
        self.stages = [
            self.child(f"stage{i + 1}", ConvBlock(in_ch + i * self.growth, self.growth, rng, dtype))
            for i in range(d)
        ]
        self.transition: Optional[Conv2d] = None
        if d > 1:
            self.transition = self.child("transition", Conv2d(in_ch + d * self.growth, out_ch, 1, rng, dtype))

    def stage_input_channels(self) -> list[int]:
        return [s.in_ch for s in self.stages]

    def __call__(self, x: Tensor) -> Tensor:
        feats = [x]
        y = x
        for stage in self.stages:
            y = stage(feats[0] if len(feats) == 1 else concat(feats, axis=1))
            y = F.dropout(y, self.dropout, self.training, self._rng)
            feats.append(y)
        if self.transition is None:
            return y
        return relu(self.transition(concat(feats, axis=1)))


GATES = ("i", "f", "c", "o")


class ConvLSTMCell(Module):
    """Convolutional LSTM without peephole terms.

    Gate kernels are stored stacked along the output axis in the order
    input, forget, candidate, output: ``wx`` is ``(4*hidden, in_ch, k, k)``,
    ``wh`` is ``(4*hidden, hidden, k, k)`` and ``b`` is ``(4*hidden,)``.
    """

    def __init__(self, in_ch: int, hidden: int, rng: np.random.Generator, dtype=np.float32, kernel: int = 3):
        super().__init__()
        self.in_ch, self.hidden, self.kernel = in_ch, hidden, kernel
        wx = np.concatenate([xavier_uniform(rng, (hidden, in_ch, kernel, kernel), dtype) for _ in GATES])
        wh = np.concatenate([xavier_uniform(rng, (hidden, hidden, kernel, kernel), dtype) for _ in GATES])
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden : 2 * hidden] = 1.0
        self.wx = self.param("wx", wx)
        self.wh = self.param("wh", wh)
        self.b = self.param("b", b)

    def gate_slice(self, gate: str) -> slice:
        k = GATES.index(gate)
        return slice(k * self.hidden, (k + 1) * self.hidden)

    def step(self, x: Tensor, h: Optional[Tensor] = None, c: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
        """One timestep; ``None`` states stand for all-zero states."""
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"ConvLSTMCell expects {self.in_ch} input channels, got shape {x.shape}")
        state_shape = (x.shape[0], self.hidden) + x.shape[2:]
        for label, s in (("hidden", h), ("cell", c)):
            if s is not None and s.shape != state_shape:
                raise ShapeError(f"{label} state shape {s.shape} != {state_shape}")
        if h is None:
            z = F.conv2d(x, self.wx, None)
        else:
            # one conv over [x, h] equals conv(x, wx) + conv(h, wh)
            z = F.conv2d(concat([x, h], axis=1), concat([self.wx, self.wh], axis=1), None)
        z = F.bias_add(z, self.b)
        zi, zf, zc, zo = split(z, [self.hidden] * 4, axis=1)
        i, f, g, o = sigmoid(zi), sigmoid(zf), tanh(zc), sigmoid(zo)
        c_new = mul(i, g) if c is None else add(mul(f, c), mul(i, g))
        h_new = mul(o, tanh(c_new))
        return h_new, c_new

    def run(self, sequence: list[Tensor]) -> Tensor:
        h = c = None
        for x in sequence:
            h, c = self.step(x, h, c)
        return h


class BConvLSTMFusion(Module):
    """Bi-directional ConvLSTM over the two-step sequence (skip, up).

    The forward cell reads ``(skip, up)``, the backward cell ``(up, skip)``;
    their final hidden states are concatenated along channels and projected
    by a 3x3 convolution.
    """

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        dtype=np.float32,
        hidden: Optional[int] = None,
        out_ch: Optional[int] = None,
    ):
        super().__init__()
        self.channels = channels
        self.hidden = hidden or channels
        self.out_ch = out_ch or channels
        self.fwd = self.child("lstm_fwd", ConvLSTMCell(channels, self.hidden, rng, dtype))
        self.bwd = self.child("lstm_bwd", ConvLSTMCell(channels, self.hidden, rng, dtype))
        self.proj = self.child("proj", Conv2d(2 * self.hidden, self.out_ch, 3, rng, dtype))

    def __call__(self, skip: Tensor, up: Tensor) -> Tensor:
        if skip.shape != up.shape:
            raise ShapeError(f"BConvLSTM inputs differ: skip {skip.shape} vs up {up.shape}")
        h_fwd = self.fwd.run([skip, up])
        h_bwd = self.bwd.run([up, skip])
        # conv over concat(h_fwd, h_bwd) split into the two kernel halves; the
        # summation then commutes exactly under a direction swap
        w = self.proj.weight
        a = F.conv2d(h_fwd, narrow(w, 1, 0, self.hidden), None)
        b = F.conv2d(h_bwd, narrow(w, 1, self.hidden, 2 * self.hidden), None)
        return F.bias_add(add(a, b), self.proj.bias)

    def mirrored(self) -> "BConvLSTMFusion":
        """Copy with the two directions exchanged (cells and projection halves)."""
        twin = copy.deepcopy(self)
        twin.fwd, twin.bwd = twin.bwd, twin.fwd
        twin._children["lstm_fwd"], twin._children["lstm_bwd"] = twin.fwd, twin.bwd
        w = twin.proj.weight.data
        twin.proj.weight.data = np.concatenate([w[:, self.hidden :], w[:, : self.hidden]], axis=1)
        return twin
