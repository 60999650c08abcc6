"""Gradient-check suites at operation, layer and network scope.

Every case builds fresh float64 inputs from a seed. Non-scalar outputs are
reduced as ``sum(out * R)`` with a fixed random ``R`` so that every output
element contributes a distinct weight to the checked gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .architectures import Network, preset, with_base_channels
from .engine import functional as F
from .engine import tensor as T
from .engine.gradcheck import GradcheckReport, gradcheck
from .engine.tensor import Tensor
from .layers import BatchNorm2d, BConvLSTMFusion, Conv2d, ConvBlock, ConvLSTMCell, DenseBlock

F64 = np.float64
Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict[str, Tensor]]]


def _leaf(rng, shape, scale=1.0, name="x") -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=F64, name=name)


def _weighted(out: Tensor, rng_or_r) -> Tensor:
    r = rng_or_r if isinstance(rng_or_r, np.ndarray) else rng_or_r.standard_normal(out.shape)
    return T.sum(T.mul(out, Tensor(r, dtype=F64)))


def _projected(build: Callable[..., Tensor], rng, *leaves: Tensor) -> Callable[[], Tensor]:
    probe = build(*leaves)
    r = rng.standard_normal(probe.shape)
    return lambda: _weighted(build(*leaves), r)


def _unary(fn) -> Case:
    def case(rng):
        x = _leaf(rng, (2, 3, 4))
        return _projected(fn, rng, x), {"x": x}

    return case


def _binary(fn) -> Case:
    def case(rng):
        a, b = _leaf(rng, (3, 4), name="a"), _leaf(rng, (3, 4), name="b")
        return _projected(fn, rng, a, b), {"a": a, "b": b}

    return case


def _relu_case(rng):
    # keep samples away from the kink at 0
    x = _leaf(rng, (3, 5))
    x.data += np.sign(x.data) * 0.05
    return _projected(T.relu, rng, x), {"x": x}


def _matmul_case(rng):
    a, b = _leaf(rng, (3, 4), name="a"), _leaf(rng, (4, 2), name="b")
    return _projected(T.matmul, rng, a, b), {"a": a, "b": b}


def _conv_case(padding: str, stride: int, k: int = 3) -> Case:
    def case(rng):
        x = _leaf(rng, (2, 2, 5, 6))
        w = _leaf(rng, (3, 2, k, k), 0.5, "w")
        b = _leaf(rng, (3,), 0.5, "b")
        fn = _projected(lambda x, w, b: F.conv2d(x, w, b, padding=padding, stride=stride), rng, x, w, b)
        return fn, {"x": x, "w": w, "b": b}

    return case


def _bias_add_case(rng):
    x, b = _leaf(rng, (2, 3, 3, 3)), _leaf(rng, (3,), name="b")
    return _projected(F.bias_add, rng, x, b), {"x": x, "b": b}


def _maxpool_case(rng):
    # distinct values per window so the argmax is stable under the probe step
    x = Tensor(rng.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.1, requires_grad=True, dtype=F64)
    return _projected(F.maxpool2d, rng, x), {"x": x}


def _batchnorm_case(training: bool) -> Case:
    def case(rng):
        x = _leaf(rng, (3, 2, 3, 3))
        g, b = _leaf(rng, (2,), name="gamma"), _leaf(rng, (2,), name="beta")
        rm, rv = rng.standard_normal(2), rng.random(2) + 0.5

        def build(x, g, b):
            # copies keep the running statistics fixed across probes
            return F.batchnorm(x, g, b, rm.copy(), rv.copy(), training=training)

        return _projected(build, rng, x, g, b), {"x": x, "gamma": g, "beta": b}

    return case


def _dropout_case(rng):
    x = _leaf(rng, (2, 3, 4, 4))
    seed = int(rng.integers(2**31))
    return _projected(lambda x: F.dropout(x, 0.3, True, np.random.default_rng(seed)), rng, x), {"x": x}


def _bce_case(rng):
    p = Tensor(rng.uniform(0.05, 0.95, (2, 1, 3, 3)), requires_grad=True, dtype=F64)
    t = (rng.random((2, 1, 3, 3)) < 0.5).astype(F64)
    return (lambda: F.bce_loss(p, t)), {"pred": p}


def _bce_logits_case(rng):
    z = _leaf(rng, (2, 1, 3, 3), 2.0)
    t = (rng.random((2, 1, 3, 3)) < 0.5).astype(F64)
    return (lambda: F.bce_with_logits(z, t)), {"logits": z}


def _concat_case(rng):
    a, b = _leaf(rng, (2, 1, 3, 3), name="a"), _leaf(rng, (2, 2, 3, 3), name="b")
    return _projected(lambda a, b: T.concat([a, b], axis=1), rng, a, b), {"a": a, "b": b}


def _split_case(rng):
    x = _leaf(rng, (2, 5, 2, 2))

    def build(x):
        p, q = T.split(x, [2, 3], axis=1)
        return T.concat([T.mul(q, q), p], axis=1)

    return _projected(build, rng, x), {"x": x}


OP_CASES: dict[str, Case] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "neg": _unary(T.neg),
    "relu": _relu_case,
    "sigmoid": _unary(T.sigmoid),
    "tanh": _unary(T.tanh),
    "sum": _unary(lambda x: T.mul(T.sum(x), T.sum(x))),
    "mean": _unary(lambda x: T.mul(T.mean(x), T.mean(x))),
    "reshape": _unary(lambda x: T.reshape(x, (4, 6))),
    "narrow": _unary(lambda x: T.narrow(x, 2, 1, 3)),
    "matmul": _matmul_case,
    "concat": _concat_case,
    "split": _split_case,
    "conv2d_same": _conv_case("same", 1),
    "conv2d_valid": _conv_case("valid", 1),
    "conv2d_stride2": _conv_case("valid", 2),
    "conv2d_1x1": _conv_case("same", 1, 1),
    "bias_add": _bias_add_case,
    "maxpool2d": _maxpool_case,
    "upsample2x": _unary(lambda x: F.upsample2x(T.reshape(x, (1, 2, 3, 4)))),
    "batchnorm_train": _batchnorm_case(True),
    "batchnorm_eval": _batchnorm_case(False),
    "dropout": _dropout_case,
    "bce": _bce_case,
    "bce_logits": _bce_logits_case,
}


def _jitter_offsets(module, rng, scale=0.05) -> None:
    # zero-initialized offsets put dead ReLU regions exactly on the kink
    for name, p in module.named_parameters():
        if name.endswith(("bias", "beta", ".b")) or name in ("b", "beta"):
            p.data += rng.normal(0.0, scale, p.shape)


def _module_case(make, in_shape, call=None) -> Case:
    def case(rng):
        mod = make(np.random.default_rng(int(rng.integers(2**31))))
        _jitter_offsets(mod, rng)
        x = _leaf(rng, in_shape)
        params = {"input": x, **dict(mod.named_parameters())}
        fwd = call or (lambda m, x: m(x))
        return _projected(lambda x: fwd(mod, x), rng, x), params

    return case


def _lstm_call(cell, x):
    # two steps so that both the input and the recurrent kernels matter
    a, b = T.split(x, [cell.in_ch, cell.in_ch], axis=1)
    return cell.run([a, b])


def _fusion_call(fusion, x):
    a, b = T.split(x, [fusion.channels, fusion.channels], axis=1)
    return fusion(a, b)


LAYER_CASES: dict[str, Case] = {
    "Conv2d": _module_case(lambda r: Conv2d(2, 3, 3, r, F64), (2, 2, 4, 4)),
    "BatchNorm2d": _module_case(lambda r: BatchNorm2d(3, F64), (3, 3, 2, 2)),
    "ConvBlock": _module_case(lambda r: ConvBlock(2, 3, r, F64), (2, 2, 4, 4)),
    "DenseBlock_d1": _module_case(lambda r: DenseBlock(2, 2, 1, r, F64), (1, 2, 4, 4)),
    "DenseBlock_d3": _module_case(lambda r: DenseBlock(2, 2, 3, r, F64), (1, 2, 4, 4)),
    "ConvLSTMCell": _module_case(lambda r: ConvLSTMCell(2, 3, r, F64), (2, 4, 4, 4), _lstm_call),
    "BConvLSTM": _module_case(lambda r: BConvLSTMFusion(2, r, F64), (2, 4, 4, 4), _fusion_call),
}


@dataclass
class SuiteResult:
    name: str
    seed: int
    report: GradcheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def run_suite(
    cases: dict[str, Case],
    seeds: Sequence[int] = range(20),
    tolerance: float = 1e-4,
    max_checks: Optional[int] = 40,
) -> list[SuiteResult]:
    out = []
    for name, case in cases.items():
        for seed in seeds:
            fn, params = case(np.random.default_rng(seed))
            out.append(SuiteResult(name, seed, gradcheck(fn, params, tolerance, max_checks=max_checks, seed=seed)))
    return out


def net_check(
    name: str = "lightbusu",
    size: int = 8,
    batch: int = 2,
    seed: int = 0,
    tolerance: float = 1e-3,
    max_checks: Optional[int] = 4,
    base_channels: Optional[int] = None,
) -> SuiteResult:
    """Whole-network check in float64 with a BCE-on-logits loss and training-mode batchnorm."""
    cfg = preset(name) if base_channels is None else with_base_channels(preset(name), base_channels)
    net = Network(cfg, seed=seed, dtype=F64)
    rng = np.random.default_rng(seed)
    _jitter_offsets(net, rng)
    x = Tensor(rng.random((batch, net.config.in_channels, size, size)), dtype=F64)
    y = (rng.random((batch, 1, size, size)) < 0.3).astype(F64)
    report = gradcheck(lambda: F.bce_with_logits(net.logits(x), y), dict(net.named_parameters()),
                       tolerance, max_checks=max_checks, seed=seed)
    return SuiteResult(name, seed, report)


def summary_table(results: Sequence[SuiteResult]) -> str:
    """One row per case: seeds run, worst relative error over all seeds and parameters, status."""
    names = list(dict.fromkeys(r.name for r in results))
    lines = [f"{'case':<20} {'seeds':>5} {'max_rel_err':>12}  status"]
    for n in names:
        rs = [r for r in results if r.name == n]
        worst = max(r.report.max_rel_error for r in rs)
        ok = all(r.passed for r in rs)
        lines.append(f"{n:<20} {len(rs):>5d} {worst:>12.3e}  {'PASS' if ok else 'FAIL'}")
    return "\n".join(lines)
