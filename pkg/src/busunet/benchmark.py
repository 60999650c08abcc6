"""Desk-scale synthetic benchmark and the parameter-matched architecture comparison."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .architectures import build, census, preset, with_base_channels
from .checkpoint import save_checkpoint
from .data import FundusImage, extract_patches, image_rng
from .evaluation import evaluate
from .metrics import MetricsReport, format_report, report_header
from .synthetic import synth_image
from .training import TrainConfig, TrainLog, train


@dataclass
class DeskConfig:
    n_train_images: int = 20
    n_eval_images: int = 5
    image_size: int = 128
    patch_size: int = 64
    n_patches: int = 200
    train_fraction: float = 0.9
    density: float = 1.0
    noise: float = 0.1
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    patience: int = 10
    stride: Optional[int] = None


def synthetic_images(cfg: DeskConfig, seed: int) -> tuple[list[FundusImage], list[FundusImage]]:
    """Training and held-out images; held-out image ``j`` uses stream ``n_train + j``."""
    total = cfg.n_train_images + cfg.n_eval_images
    imgs = [synth_image(cfg.image_size, cfg.density, cfg.noise, image_rng(seed, i), f"{i:02d}") for i in range(total)]
    return imgs[: cfg.n_train_images], imgs[cfg.n_train_images :]


@dataclass
class RunResult:
    name: str
    seed: int
    params: int
    report: MetricsReport
    log: TrainLog
    seconds: float


def run_desk(net_cfg, cfg: DeskConfig, seed: int = 0, name: str = "model", out_dir=None,
             progress=None) -> RunResult:
    """Generate data, train ``net_cfg`` on patches, evaluate on held-out images."""
    start = time.perf_counter()
    train_imgs, eval_imgs = synthetic_images(cfg, seed)
    patches = extract_patches(train_imgs, cfg.patch_size, total=cfg.n_patches, train_fraction=cfg.train_fraction,
                              seed=seed)
    net = build(net_cfg, seed=seed)
    tcfg = TrainConfig(batch_size=cfg.batch_size, epochs=cfg.epochs, lr=cfg.lr, patience=cfg.patience, seed=seed)
    net, log = train(net, patches, tcfg, progress=progress)
    out = Path(out_dir) if out_dir is not None else None
    report, _ = evaluate(net, eval_imgs, out, cfg.patch_size, cfg.stride, method=name)
    if out is not None:
        save_checkpoint(net, out / "checkpoint")
        log.to_csv(out / "trainlog.csv")
    return RunResult(name, seed, net.num_parameters(), report, log, time.perf_counter() - start)


def match_budget(name: str, budget: int, bases: Sequence[int] = range(1, 33)):
    """Preset ``name`` with the uniform base width whose parameter count is closest to ``budget``."""
    best = None
    for b in bases:
        cfg = with_base_channels(preset(name), b)
        n = census(cfg).num_parameters
        key = abs(math.log(n / budget))
        if best is None or key < best[0]:
            best = (key, cfg, n)
    return best[1], best[2]


COMPARE_PRESETS = ("busu", "ladderbcdu", "bcdu_d3")
METRICS = ("accuracy", "sensitivity", "specificity", "auc", "f1")


@dataclass
class Comparison:
    runs: list[RunResult] = field(default_factory=list)
    configs: dict = field(default_factory=dict)

    def means(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for name in dict.fromkeys(r.name for r in self.runs):
            rs = [r for r in self.runs if r.name == name]
            out[name] = {m: float(np.mean([getattr(r.report, m) or 0.0 for r in rs])) for m in METRICS}
        return out

    def ordering(self) -> dict[str, list[str]]:
        """Per metric, method names from best to worst by seed-mean."""
        means = self.means()
        return {m: sorted(means, key=lambda n: -means[n][m]) for m in METRICS}

    def format(self) -> str:
        lines = [report_header(20) + "   params  seed"]
        for r in self.runs:
            lines.append(f"{format_report(r.report, r.name, 20)} {r.params:>8d} {r.seed:>5d}")
        lines.append("")
        lines.append("seed means")
        for name, m in self.means().items():
            lines.append(f"{name:<20} " + " ".join(f"{m[k]:.4f}" for k in METRICS))
        lines.append("")
        lines.append("ordering (best first)")
        for metric, names in self.ordering().items():
            lines.append(f"{metric:<12} " + " > ".join(names))
        return "\n".join(lines) + "\n"


def compare(
    cfg: DeskConfig,
    seeds: Sequence[int] = (0, 1, 2),
    presets: Sequence[str] = COMPARE_PRESETS,
    reference: str = "busu",
    reference_base: int = 2,
    progress=None,
) -> Comparison:
    """Train every preset at a parameter budget matched to ``reference`` and report the ordering."""
    budget = census(with_base_channels(preset(reference), reference_base)).num_parameters
    result = Comparison()
    for name in presets:
        net_cfg, n = match_budget(name, budget)
        result.configs[name] = {"params": n, "base_channels": [c.base_channels for c in _nets(net_cfg)]}
        for seed in seeds:
            r = run_desk(net_cfg, cfg, seed=seed, name=name)
            result.runs.append(r)
            if progress:
                progress(r)
    return result


def _nets(cfg):
    return cfg.nets if hasattr(cfg, "nets") else (cfg,)
