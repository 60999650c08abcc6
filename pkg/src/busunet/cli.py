"""Command-line entry point: ``busu <command> [flags]``."""

from __future__ import annotations

import argparse
import configparser
import contextlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Optional

from . import __version__
from .architectures import PRESETS, census, config_from_parser, config_to_text, preset, with_base_channels
from .errors import BusuError, ConfigError, UsageError

TRAIN_KEYS = {
    "batch_size": int, "epochs": int, "lr": float, "patience": int, "max_steps": int,
    "patch_size": int, "patches": int, "train_fraction": float, "n_train": int, "n_val": int,
}


def _thread_limit(deterministic: bool):
    """Cap BLAS threads: 1 under ``--deterministic``, else ``BUSU_THREADS`` when set."""
    from threadpoolctl import threadpool_limits

    env = os.environ.get("BUSU_THREADS")
    if deterministic:
        return threadpool_limits(1)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"BUSU_THREADS must be a positive integer, got {env!r}") from None
        if n < 1:
            raise UsageError(f"BUSU_THREADS must be a positive integer, got {env!r}")
        return threadpool_limits(n)
    return contextlib.nullcontext()


def write_manifest(out: Path, command: str, args: dict, artifacts: list[str], **extra) -> Path:
    manifest = {
        "tool": "busunet",
        "version": __version__,
        "command": command,
        "args": args,
        "artifacts": sorted(artifacts),
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _args_dict(ns: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(ns).items() if k not in ("func",)}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(ns) -> int:
    from .synthetic import gen_synthetic

    out = Path(ns.out)
    gen_synthetic(out, ns.count, ns.size, ns.density, ns.noise, ns.seed)
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*.png"))
    write_manifest(out, "synth", _args_dict(ns), files, seed=ns.seed)
    print(f"wrote {ns.count} synthetic images to {out}")
    return 0


def _resolve_architecture(ns):
    base = preset(ns.preset) if ns.preset else None
    parser = None
    if ns.config:
        parser = configparser.ConfigParser()
        if not parser.read(ns.config):
            raise ConfigError(f"cannot read config file {ns.config}")
        has_arch = any(s.startswith("u") and s[1:].isdigit() for s in parser.sections()) or parser.has_section(
            "network")
        if has_arch:
            base = config_from_parser(parser, base)
    if base is None:
        raise UsageError("give --preset or a --config with [u0] sections")
    if getattr(ns, "base_channels", None):
        base = with_base_channels(base, ns.base_channels)
    return base, parser


def _train_settings(ns, parser) -> dict:
    """Training settings: defaults, then the config file's [train] section, then explicit flags."""
    settings = {"batch_size": 32, "epochs": 20, "lr": 1e-3, "patience": 10, "max_steps": None,
                "patch_size": 48, "patches": None, "train_fraction": None, "n_train": None, "n_val": None}
    if parser is not None and parser.has_section("train"):
        for key, raw in parser.items("train"):
            if key not in TRAIN_KEYS:
                raise ConfigError(f"[train] unknown key {key!r}")
            try:
                settings[key] = TRAIN_KEYS[key](raw)
            except ValueError:
                raise ConfigError(f"[train] {key} = {raw!r} is not a valid {TRAIN_KEYS[key].__name__}") from None
    for key in TRAIN_KEYS:
        value = getattr(ns, key, None)
        if value is not None:
            settings[key] = value
    return settings


def cmd_train(ns) -> int:
    from .architectures import build
    from .checkpoint import save_checkpoint
    from .data import extract_patches, load_dataset
    from .training import TrainConfig, check_divisible, train

    arch, parser = _resolve_architecture(ns)
    s = _train_settings(ns, parser)
    net = build(arch, seed=ns.seed)
    check_divisible(net, s["patch_size"])
    images = load_dataset(ns.data)
    if s["patches"] is not None:
        patches = extract_patches(images, s["patch_size"], total=s["patches"],
                                  train_fraction=0.9 if s["train_fraction"] is None else s["train_fraction"],
                                  seed=ns.seed)
    else:
        patches = extract_patches(images, s["patch_size"], seed=ns.seed, n_train=s["n_train"], n_val=s["n_val"])
    cfg = TrainConfig(batch_size=s["batch_size"], epochs=s["epochs"], lr=s["lr"], patience=s["patience"],
                      seed=ns.seed, max_steps=s["max_steps"], deterministic=ns.deterministic)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        if not ns.quiet:
            print(f"epoch {rec.epoch:3d}  train {rec.train_loss:.4f}  val {rec.val_loss:.4f}  "
                  f"f1 {rec.val_f1:.4f}  auc {rec.val_auc:.4f}", file=sys.stderr)

    start = time.perf_counter()
    net, log = train(net, patches, cfg, progress=progress)
    save_checkpoint(net, out / "checkpoint", extra={"best_epoch": log.best_epoch})
    log.to_csv(out / "trainlog.csv", timings=not ns.deterministic)
    extra = {"seed": ns.seed, "preset": ns.preset, "architecture": config_to_text(arch), "train": asdict(cfg),
             "patches": {"patch_size": s["patch_size"], "n_train": patches.n_train, "n_val": patches.n_val},
             "best_epoch": log.best_epoch, "steps": log.steps}
    if not ns.deterministic:
        extra["seconds"] = round(time.perf_counter() - start, 3)
    write_manifest(out, "train", _args_dict(ns), ["checkpoint", "trainlog.csv"], **extra)
    print(f"trained {len(log.records)} epochs; best epoch {log.best_epoch}; checkpoint at {out / 'checkpoint'}")
    return 0


def cmd_eval(ns) -> int:
    from .checkpoint import load_checkpoint, read_manifest
    from .data import load_dataset
    from .evaluation import evaluate
    from .metrics import format_report, report_header

    # read everything before creating any output
    net = load_checkpoint(ns.checkpoint)
    images = load_dataset(ns.data)
    if not 0 < ns.threshold < 1:
        raise UsageError(f"threshold must lie in (0, 1), got {ns.threshold}")
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    report, _ = evaluate(net, images, out, ns.patch_size, ns.stride, ns.threshold, ns.fov == "on", ns.method)
    artifacts = ["report.csv", "report.txt"] + [f for f in ("roc.csv", "pr.csv") if (out / f).exists()]
    artifacts += [f"probs/{img.id}.bten" for img in images]
    write_manifest(out, "eval", _args_dict(ns), artifacts, checkpoint_seed=read_manifest(ns.checkpoint).get("seed"))
    print(report_header())
    print(format_report(report, ns.method))
    if report.degenerate:
        print(f"degenerate ratios reported as 0: {', '.join(report.degenerate)}", file=sys.stderr)
    return 0


def cmd_gradcheck(ns) -> int:
    from .checks import LAYER_CASES, OP_CASES, net_check, run_suite, summary_table

    if ns.scope == "net":
        tol = 1e-3 if ns.tolerance is None else ns.tolerance
        result = net_check(ns.preset, ns.size, seed=ns.seed, tolerance=tol, max_checks=ns.max_checks or 4)
        print(result.report.format())
        passed = result.passed
        print(f"{'PASS' if passed else 'FAIL'}: {ns.preset} at {ns.size}x{ns.size}, "
              f"max relative error {result.report.max_rel_error:.3e} (tolerance {tol:g})")
    else:
        tol = 1e-4 if ns.tolerance is None else ns.tolerance
        cases = OP_CASES if ns.scope == "op" else LAYER_CASES
        results = run_suite(cases, range(ns.seed, ns.seed + ns.seeds), tol, max_checks=ns.max_checks or 40)
        print(summary_table(results))
        passed = all(r.passed for r in results)
        print(f"{'PASS' if passed else 'FAIL'}: {sum(r.passed for r in results)}/{len(results)} checks "
              f"within tolerance {tol:g}")
    return 0 if passed else 1


def cmd_census(ns) -> int:
    ns.base_channels = None
    arch, _ = _resolve_architecture(ns)
    c = census(arch)
    if ns.list:
        print(c.format())
    label = ns.preset or ns.config
    print(f"{label}: {c.count} layers, {c.num_parameters} parameters")
    return 0


def cmd_compare(ns) -> int:
    from .benchmark import DeskConfig, compare

    cfg = DeskConfig(epochs=ns.epochs, n_patches=ns.patches, image_size=ns.size, n_train_images=ns.images)
    seeds = list(range(ns.seed, ns.seed + ns.seeds))

    def progress(r):
        print(f"{r.name} seed {r.seed}: f1 {r.report.f1:.4f} auc {r.report.auc:.4f} ({r.seconds:.0f}s)",
              file=sys.stderr)

    result = compare(cfg, seeds, reference_base=ns.reference_base, progress=progress)
    text = result.format()
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.txt").write_text(text)
    write_manifest(out, "compare", _args_dict(ns), ["compare.txt"], desk=asdict(cfg), budgets=result.configs)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="busu", description="BUSU-Net family: synthesis, training, evaluation, checks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic vessel dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--density", type=float, default=1.0)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a network on patches from a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--preset", help=f"one of: {', '.join(PRESETS)}")
    t.add_argument("--config", help="INI file with [u0]/[u1]/[network] architecture and [train] sections")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--deterministic", action="store_true", help="single thread; seconds column written as 0")
    t.add_argument("--base-channels", type=int, dest="base_channels")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--lr", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--max-steps", type=int, dest="max_steps")
    t.add_argument("--patch-size", type=int, dest="patch_size")
    t.add_argument("--patches", type=int, help="total patch count (fraction mode)")
    t.add_argument("--train-fraction", type=float, dest="train_fraction")
    t.add_argument("--n-train", type=int, dest="n_train", help="exact training patch count (default 170000)")
    t.add_argument("--n-val", type=int, dest="n_val", help="exact validation patch count (default 19000)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="stitched full-image evaluation of a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--fov", choices=("on", "off"), default="on")
    e.add_argument("--patch-size", type=int, default=48, dest="patch_size")
    e.add_argument("--stride", type=int)
    e.add_argument("--method", default="model", help="row label in the report")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--scope", choices=("op", "layer", "net"), default="op")
    g.add_argument("--tolerance", type=float)
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--preset", default="lightbusu")
    g.add_argument("--size", type=int, default=8)
    g.add_argument("--max-checks", type=int, dest="max_checks")
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("census", help="count layers under the documented convention")
    grp = c.add_mutually_exclusive_group(required=True)
    grp.add_argument("--preset")
    grp.add_argument("--config")
    c.add_argument("--list", action="store_true", help="print the per-layer listing")
    c.set_defaults(func=cmd_census)

    k = sub.add_parser("compare", help="parameter-matched preset comparison on synthetic data")
    k.add_argument("--out", required=True)
    k.add_argument("--seeds", type=int, default=3)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--epochs", type=int, default=40)
    k.add_argument("--patches", type=int, default=200)
    k.add_argument("--images", type=int, default=20)
    k.add_argument("--size", type=int, default=128)
    k.add_argument("--reference-base", type=int, default=2, dest="reference_base")
    k.set_defaults(func=cmd_compare)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    deterministic = getattr(ns, "deterministic", False)
    try:
        with _thread_limit(deterministic):
            return ns.func(ns)
    except (BusuError, OSError) as exc:
        print(f"busu {ns.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
