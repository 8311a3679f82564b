"""Command-line surface: train, eval, ablate, probe, cka, memory.

Every command reads an optional flat TOML config, applies flag overrides,
writes the fully-resolved config plus its artifacts into the output
directory, and nothing anywhere else. Exit codes: 0 success, 2 bad
usage/config/inputs, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import ProbeConfig, cka_report, probe_blocks, write_cka_csv, write_probe_csv
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_file, parse_layer_string, resolve, write_resolved
from .data import DataError, Dataset, gen_blobs, gen_spirals, load_csv, load_idx, standardize
from .memory import measure_peak_memory
from .network import AblationFlags, build_partitioned
from .training import NumericalError, SgdConfig, evaluate, fit, write_metrics_csv

# ablation arms in table order: adapter variants against the plain-local
# baseline, then the raw-copy/EMA-copy pair
ABLATION_ARMS = [
    ("none", "local", dict(use_adapter=False)),
    ("ema-only", "man", dict(use_bias=False)),
    ("bias-only", "man", dict(use_ema=False)),
    ("ema+bias", "man", dict()),
    ("raw-copy", "man", dict(use_bias=False, raw_copy_no_ema=True)),
    ("ema-copy", "man", dict(use_bias=False)),
]


def build_dataset(cfg: RunConfig, seed: int) -> Dataset:
    if cfg.dataset == "spirals":
        ds = gen_spirals(cfg.n_per_class, cfg.classes, cfg.noise, seed,
                         turns=cfg.turns, radius=cfg.radius)
        return standardize(ds) if cfg.standardize else ds
    if cfg.dataset == "blobs":
        ds = gen_blobs(cfg.n_per_class, cfg.classes, cfg.separation, seed)
        return standardize(ds) if cfg.standardize else ds
    if cfg.dataset == "csv":
        return load_csv(cfg.csv_path, cfg.classes,
                        standardize_features=cfg.standardize, seed=seed)
    return load_idx(cfg.idx_images, cfg.idx_labels,
                    standardize_features=cfg.standardize, seed=seed)


def flags_for(mode: str, cfg: RunConfig, arm_flags: dict | None = None) -> AblationFlags:
    if arm_flags is not None:
        if arm_flags.get("use_adapter", True) is False:
            return AblationFlags(use_adapter=False)
        return AblationFlags(**{"use_adapter": True, **arm_flags})
    if mode in ("local", "e2e"):
        return AblationFlags(use_adapter=False)
    return AblationFlags(use_adapter=True, use_ema=cfg.use_ema,
                         use_bias=cfg.use_bias, raw_copy_no_ema=cfg.raw_copy)


def build_network(cfg: RunConfig, input_shape, seed: int, mode: str | None = None,
                  arm_flags: dict | None = None):
    mode = mode or cfg.mode
    specs = [parse_layer_string(s) for s in cfg.arch]
    return build_partitioned(specs, cfg.k, n_classes=cfg.classes,
                             input_shape=input_shape,
                             flags=flags_for(mode, cfg, arm_flags),
                             momentum=cfg.man_momentum, seed=seed)


def sgd_config(cfg: RunConfig, seed: int, mode: str | None = None) -> SgdConfig:
    return SgdConfig(lr=cfg.lr, momentum=cfg.momentum,
                     weight_decay=cfg.weight_decay, epochs=cfg.epochs,
                     batch_size=cfg.batch_size, lr_schedule=cfg.lr_schedule,
                     man_momentum=cfg.man_momentum, seed=seed,
                     mode=mode or cfg.mode,
                     aux_lr=cfg.aux_lr if cfg.aux_lr > 0 else None)


def _worker_count() -> int:
    raw = os.environ.get("LOCALGRAD_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"LOCALGRAD_THREADS: expected an integer, got {raw!r}")


def _run_seeds(cfg: RunConfig, mode: str | None = None,
               arm_flags: dict | None = None):
    """Fit one model per seed, possibly in parallel; results in seed order."""

    def one(seed: int):
        ds = build_dataset(cfg, seed)
        net = build_network(cfg, ds.input_shape, seed, mode, arm_flags)
        state = fit(net, ds, sgd_config(cfg, seed, mode))
        return seed, net, state

    workers = _worker_count()
    if workers == 1 or len(cfg.seeds) == 1:
        return [one(s) for s in cfg.seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, cfg.seeds))


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "resolved.toml")
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def cmd_train(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    results = _run_seeds(cfg)
    errors, best_errors = [], []
    for seed, net, state in results:
        write_metrics_csv(out / f"metrics_seed{seed}.csv", state.history)
        save_checkpoint(net, out / f"model_seed{seed}.ckpt")
        errors.append(state.final_test_error)
        best_errors.append(state.best_test_error)
    _write_json(out / "summary.json", {
        "command": "train",
        "mode": cfg.mode,
        "seeds": cfg.seeds,
        "test_errors": errors,
        "mean_test_error": float(np.mean(errors)),
        "std_test_error": float(np.std(errors)),
        "best_test_errors": best_errors,
        "version": __version__,
    })
    print(f"train: mode={cfg.mode} mean test error "
          f"{float(np.mean(errors)):.4f} over {len(cfg.seeds)} seed(s) -> {out}")
    return 0


def cmd_eval(cfg: RunConfig, ckpt: str) -> int:
    out = _prepare_out(cfg)
    net = load_checkpoint(ckpt)
    ds = build_dataset(cfg, net.seed)
    acc = evaluate(net, ds.test_inputs, ds.test_labels)
    doc = {"command": "eval", "checkpoint": str(ckpt),
           "test_accuracy": acc, "test_error": 1.0 - acc,
           "version": __version__}
    _write_json(out / "eval.json", doc)
    print(f"eval: {ckpt}: test error {1.0 - acc:.4f}")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    rows = []
    for arm, mode, arm_flags in ABLATION_ARMS:
        results = _run_seeds(cfg, mode=mode, arm_flags=arm_flags)
        errs = [state.final_test_error for _, _, state in results]
        rows.append((arm, float(np.mean(errs)), float(np.std(errs)), errs))
        print(f"ablate: {arm:9s} mean test error {np.mean(errs):.4f} "
              f"+- {np.std(errs):.4f}")
    with open(out / "ablation.csv", "w", encoding="utf-8") as fh:
        seed_cols = ",".join(f"err_seed{s}" for s in cfg.seeds)
        fh.write(f"arm,mean_test_error,std_test_error,{seed_cols}\n")
        for arm, mean, std, errs in rows:
            fh.write(f"{arm},{mean!r},{std!r},"
                     + ",".join(repr(e) for e in errs) + "\n")
    return 0


def cmd_probe(cfg: RunConfig, ckpt: str, epochs: int, lr: float) -> int:
    out = _prepare_out(cfg)
    net = load_checkpoint(ckpt)
    ds = build_dataset(cfg, net.seed)
    report = probe_blocks(net, ds.test_inputs, ds.test_labels,
                          ProbeConfig(epochs=epochs, lr=lr, seed=net.seed))
    write_probe_csv(report, out / "probe.csv")
    accs = " ".join(f"{a:.4f}" for a in report.accuracies)
    print(f"probe: {ckpt}: per-block accuracy {accs}")
    return 0


def cmd_cka(cfg: RunConfig, ckpt_a: str, ckpt_b: str, samples: int) -> int:
    out = _prepare_out(cfg)
    net_a = load_checkpoint(ckpt_a)
    net_b = load_checkpoint(ckpt_b)
    ds = build_dataset(cfg, net_a.seed)
    inputs = ds.test_inputs[:samples]
    matrix = cka_report(net_a, net_b, inputs,
                        ids=(Path(ckpt_a).stem, Path(ckpt_b).stem))
    write_cka_csv(matrix, out / "cka.csv")
    diag = " ".join(f"{v:.4f}" for v in np.diag(matrix.values))
    print(f"cka: diagonal {diag}")
    return 0


def cmd_memory(cfg: RunConfig, ks: list[int]) -> int:
    out = _prepare_out(cfg)
    specs = [parse_layer_string(s) for s in cfg.arch]
    ds = build_dataset(cfg, cfg.seeds[0])
    reports = []
    for k in ks:
        for mode in ("e2e", "local", "man"):
            report = measure_peak_memory(specs, k, mode, cfg.batch_size,
                                         input_shape=ds.input_shape,
                                         n_classes=cfg.classes)
            reports.append(json.loads(report.to_json()))
    _write_json(out / "memory.json", reports)
    for r in reports:
        print(f"memory: K={r['K']} mode={r['mode']}: {r['peak_scalars']} scalars")
    return 0


def _add_override_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat TOML config file")
    p.add_argument("--mode", choices=["e2e", "local", "man"])
    p.add_argument("--k", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--aux-lr", type=float, dest="aux_lr")
    p.add_argument("--dataset", choices=["spirals", "blobs", "csv", "idx"])
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--num-seeds", type=int,
                   help="use seeds 0..N-1 (overrides --seeds)")
    p.add_argument("--out", dest="out_dir")


def _overrides_from(args: argparse.Namespace) -> dict:
    keys = ("mode", "k", "epochs", "batch_size", "lr", "aux_lr", "dataset",
            "seeds", "out_dir")
    over = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "num_seeds", None):
        over["seeds"] = list(range(args.num_seeds))
    return over


def _resolved(args: argparse.Namespace) -> RunConfig:
    file_values = load_file(args.config) if args.config else {}
    return resolve(file_values, _overrides_from(args))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="localgrad",
        description="Block-local training with momentum-coupled auxiliary "
                    "adapters: train, evaluate, ablate, probe, compare, "
                    "and account memory.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("train", "ablate"):
        p = sub.add_parser(name)
        _add_override_args(p)

    p = sub.add_parser("eval")
    _add_override_args(p)
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("probe")
    _add_override_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--probe-epochs", type=int, default=100)
    p.add_argument("--probe-lr", type=float, default=0.1)

    p = sub.add_parser("cka")
    _add_override_args(p)
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b", required=True)
    p.add_argument("--samples", type=int, default=512)

    p = sub.add_parser("memory")
    _add_override_args(p)
    p.add_argument("--ks", type=int, nargs="+",
                   help="partition counts to report (default: config k)")

    args = parser.parse_args(argv)
    try:
        cfg = _resolved(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.ckpt)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "probe":
            return cmd_probe(cfg, args.ckpt, args.probe_epochs, args.probe_lr)
        if args.command == "cka":
            return cmd_cka(cfg, args.ckpt_a, args.ckpt_b, args.samples)
        return cmd_memory(cfg, args.ks or [cfg.k])
    except (ConfigError, CheckpointError, DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())
