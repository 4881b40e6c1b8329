"""Command-line front end.

Exit codes are stable: 0 success, 2 configuration or data error, 3 numeric
abort during training, 4 verification failure. Every run echoes its fully
resolved configuration as a replayable flag line before doing work.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Tensor
from .datasets import DatasetError, load_synth
from .gradcheck import finite_diff_check
from .losses import cc_loss, pairwise_sq_dist_gram, pairwise_sq_dist_naive
from .nn import CheckpointError, load_checkpoint, save_checkpoint
from .rng import stream_gen
from .training import (
    ConfigError,
    DegenerateSampleError,
    RunSummary,
    TrainConfig,
    TrainingAborted,
    build_model,
    cosine_lr,
    evaluate,
    export_embeddings,
    load_datasets,
    one_sample_ttest,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4

LOSS_FLAG_TO_MODE = {"ce": "ce_plain", "ce_cam": "ce_cam", "cc": "cc"}
MODE_TO_LOSS_FLAG = {v: k for k, v in LOSS_FLAG_TO_MODE.items()}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", choices=["mnist", "cifar100", "synth"], default="synth")
    p.add_argument("--data-dir", default="data")
    p.add_argument("--loss", choices=sorted(LOSS_FLAG_TO_MODE), default="cc")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--mlp-width", type=int, default=64)
    p.add_argument("--backbone", choices=["auto", "tinycnn", "mlp"], default="auto")
    p.add_argument("--lr-init", type=float, default=0.1)
    p.add_argument("--lr-final", type=float, default=1e-5)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--flip", choices=["auto", "on", "off"], default="auto")
    p.add_argument("--crop", action="store_true")
    p.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    p.add_argument("--train-limit", type=int, default=0)
    p.add_argument("--test-limit", type=int, default=0)
    p.add_argument("--synth-classes", type=int, default=4)
    p.add_argument("--synth-dim", type=int, default=8)
    p.add_argument("--synth-separation", type=float, default=8.0)
    p.add_argument("--synth-per-class", type=int, default=250)
    p.add_argument("--print-config", action="store_true",
                   help="echo the replayable flag line and exit")


def _config_from_args(args) -> TrainConfig:
    return TrainConfig(
        dataset=args.dataset,
        data_dir=args.data_dir,
        backbone=args.backbone,
        loss_mode=LOSS_FLAG_TO_MODE[args.loss],
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr_init=args.lr_init,
        lr_final=args.lr_final,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        lam=args.lam,
        eps=args.epsilon,
        seed=args.seed,
        hidden_dim=args.hidden_dim,
        mlp_width=args.mlp_width,
        flip=None if args.flip == "auto" else args.flip == "on",
        crop=args.crop,
        dtype=args.dtype,
        train_limit=args.train_limit,
        test_limit=args.test_limit,
        synth_classes=args.synth_classes,
        synth_dim=args.synth_dim,
        synth_separation=args.synth_separation,
        synth_per_class=args.synth_per_class,
    ).resolved()


def _replay_line(command: str, cfg: TrainConfig, extra: str = "") -> str:
    parts = [
        f"ccloss {command}",
        f"--dataset {cfg.dataset}",
        f"--data-dir {cfg.data_dir}",
        f"--loss {MODE_TO_LOSS_FLAG[cfg.loss_mode]}",
        f"--lambda {cfg.lam}",
        f"--epsilon {cfg.eps}",
        f"--epochs {cfg.epochs}",
        f"--batch-size {cfg.batch_size}",
        f"--seed {cfg.seed}",
        f"--hidden-dim {cfg.hidden_dim}",
        f"--mlp-width {cfg.mlp_width}",
        f"--backbone {cfg.backbone}",
        f"--lr-init {cfg.lr_init}",
        f"--lr-final {cfg.lr_final}",
        f"--momentum {cfg.momentum}",
        f"--weight-decay {cfg.weight_decay}",
        f"--flip {'on' if cfg.flip else 'off'}",
        f"--dtype {cfg.dtype}",
    ]
    if cfg.crop:
        parts.append("--crop")
    if cfg.train_limit:
        parts.append(f"--train-limit {cfg.train_limit}")
    if cfg.test_limit:
        parts.append(f"--test-limit {cfg.test_limit}")
    if cfg.dataset == "synth":
        parts.append(
            f"--synth-classes {cfg.synth_classes} --synth-dim {cfg.synth_dim} "
            f"--synth-separation {cfg.synth_separation} --synth-per-class {cfg.synth_per_class}"
        )
    if extra:
        parts.append(extra)
    return " ".join(parts)


def _print_epoch(rec) -> None:
    def fmt(v, spec=".4f"):
        return "-" if v is None else format(v, spec)

    print(
        f"epoch {rec.epoch:3d} | lr {fmt(rec.lr, '.5f')} | loss {fmt(rec.loss_total)} "
        f"| ce {fmt(rec.loss_ce)} | ratio {fmt(rec.loss_ratio)} "
        f"| train {fmt(rec.train_acc)} | test {fmt(rec.test_acc)} "
        f"| eval-ratio {fmt(rec.eval_ratio)}"
    )


def _write_table(rows: list[dict], out_dir, stem: str) -> None:
    if not rows:
        return
    headers = list(rows[0])
    widths = [max(len(h), max(len(str(r[h])) for r in rows)) for h in headers]
    line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    print(line)
    print("-" * len(line))
    for r in rows:
        print("  ".join(str(r[h]).ljust(w) for h, w in zip(headers, widths)))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=headers)
            writer.writeheader()
            writer.writerows(rows)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    cfg.validate()
    line = _replay_line("train", cfg, extra=f"--out {args.out}" if args.out else "")
    print(f"config: {line}")
    if args.print_config:
        return EXIT_OK
    accuracies = []
    for run in range(args.runs):
        run_cfg = cfg if args.runs == 1 else TrainConfig(**{**vars(cfg), "seed": cfg.seed + run})
        if args.runs > 1:
            print(f"-- run {run + 1}/{args.runs} (seed {run_cfg.seed})")
        result = train(run_cfg, log_fn=_print_epoch)
        last = result.log.records[-1]
        print(
            f"final: train_acc {last.train_acc:.4f} test_acc {last.test_acc:.4f} "
            f"| best test_acc {result.best_test_acc:.4f} (epoch {result.best_epoch})"
        )
        print(
            f"loss breakdown: total {_opt(last.loss_total)} ce {_opt(last.loss_ce)} "
            f"intra {_opt(last.loss_intra)} inter {_opt(last.loss_inter)} ratio {_opt(last.loss_ratio)}"
        )
        accuracies.append(result.best_test_acc)
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            suffix = f"-run{run}" if args.runs > 1 else ""
            save_checkpoint(out / f"checkpoint{suffix}.ccl", result.model)
            result.log.to_csv(out / f"metrics{suffix}.csv")
            result.log.to_jsonl(out / f"metrics{suffix}.jsonl")
            print(f"artifacts written to {out}/")
    if args.runs > 1:
        summary = RunSummary.from_accuracies(accuracies)
        print(f"runs: mean acc {summary.mean:.4f} +- {summary.margin:.4f} over {args.runs} runs")
        if args.ttest_mu is not None:
            try:
                tt = one_sample_ttest(accuracies, args.ttest_mu)
                print(f"one-sample t-test vs {args.ttest_mu}: t={tt.t:.3f} p={tt.p:.2e} dof={tt.dof}")
            except DegenerateSampleError as exc:
                print(f"t-test not applicable: {exc}")
    return EXIT_OK


def _opt(v):
    return "-" if v is None else f"{v:.4f}"


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    print(f"config: {_replay_line('eval', cfg, extra=f'--checkpoint {args.checkpoint}')}")
    train_ds, test_ds = load_datasets(cfg)
    model = build_model(cfg, train_ds)
    model.load_state(load_checkpoint(args.checkpoint))
    stats = evaluate(model, test_ds, cfg.loss_mode, cfg.eval_batch_size, cfg.np_dtype)
    print(
        f"test accuracy {stats.accuracy:.4f} | mean intra {_opt(stats.mean_intra)} "
        f"| mean inter {_opt(stats.mean_inter)} | ratio {_opt(stats.ratio)}"
    )
    return EXIT_OK


def cmd_export_embed(args) -> int:
    cfg = _config_from_args(args)
    print(f"config: {_replay_line('export-embed', cfg, extra=f'--checkpoint {args.checkpoint}')}")
    train_ds, test_ds = load_datasets(cfg)
    model = build_model(cfg, train_ds)
    model.load_state(load_checkpoint(args.checkpoint))
    ds = test_ds if args.split == "test" else train_ds
    count = export_embeddings(model, ds, args.out, mode=cfg.loss_mode)
    print(f"wrote {count} embedding rows to {args.out}")
    return EXIT_OK


def cmd_ablate_lambda(args) -> int:
    lams = _parse_floats(args.lambdas)
    if len(lams) < 2:
        raise ConfigError("need at least 2 lambda values")
    if any(l < 0 for l in lams):
        raise ConfigError("lambda must be nonnegative")
    cfg = _config_from_args(args)
    print(f"config: {_replay_line('ablate-lambda', cfg, extra=f'--lambdas {args.lambdas} --runs {args.runs}')}")
    rows = []
    for lam in lams:
        accs = []
        for run in range(args.runs):
            run_cfg = TrainConfig(**{**vars(cfg), "lam": lam, "seed": cfg.seed + run})
            run_cfg.validate()
            accs.append(train(run_cfg).best_test_acc)
        mean = statistics.fmean(accs)
        margin = max(abs(a - mean) for a in accs)
        rows.append({"lambda": lam, "mean_acc": f"{mean:.4f}", "margin": f"{margin:.4f}",
                     "runs": args.runs})
    _write_table(rows, args.out, "ablate_lambda")
    return EXIT_OK


def cmd_ablate_batch(args) -> int:
    sizes = [int(v) for v in _parse_floats(args.batch_sizes)]
    deduped = list(dict.fromkeys(sizes))
    if len(deduped) < len(sizes):
        print("warning: duplicate batch sizes removed", file=sys.stderr)
    if any(s < 2 for s in deduped):
        raise ConfigError("batch sizes must be >= 2")
    cfg = _config_from_args(args)
    print(f"config: {_replay_line('ablate-batch', cfg, extra=f'--batch-sizes {args.batch_sizes} --runs {args.runs}')}")
    train_ds, test_ds = load_datasets(cfg)
    if any(s > len(train_ds) for s in deduped):
        raise ConfigError(f"batch size exceeds dataset size {len(train_ds)}")
    rows = []
    for size in deduped:
        accs = []
        for run in range(args.runs):
            run_cfg = TrainConfig(**{**vars(cfg), "batch_size": size, "seed": cfg.seed + run})
            run_cfg.validate()
            accs.append(train(run_cfg, train_ds, test_ds).best_test_acc)
        mean = statistics.fmean(accs)
        margin = max(abs(a - mean) for a in accs)
        rows.append({"batch_size": size, "mean_acc": f"{mean:.4f}", "margin": f"{margin:.4f}",
                     "runs": args.runs})
    _write_table(rows, args.out, "ablate_batch")
    return EXIT_OK


def cmd_bench_dist(args) -> int:
    if args.reps < 3:
        raise ConfigError("need reps >= 3")
    sizes = [int(v) for v in _parse_floats(args.sizes)]
    dims = [int(v) for v in _parse_floats(args.dims)]
    if any(n < 2 for n in sizes) or any(d < 1 for d in dims):
        raise ConfigError("sizes must be >= 2 and dims >= 1")
    print(f"config: ccloss bench-dist --sizes {args.sizes} --dims {args.dims} --reps {args.reps}")
    rng = stream_gen(args.seed, "bench")
    rows = []
    for n in sizes:
        for d in dims:
            c = rng.random((n, d)).astype(np.float32)
            reference = pairwise_sq_dist_naive(c)
            candidate = pairwise_sq_dist_gram(c)
            if args.inject_fault:
                candidate = candidate + 1e-3
            max_diff = float(np.max(np.abs(candidate - reference)))
            if max_diff > 1e-5:
                print(
                    f"verification failed at N={n} D={d}: max |gram - naive| = {max_diff:.3e} "
                    "> 1e-5; refusing to time incorrect kernels",
                    file=sys.stderr,
                )
                return EXIT_VERIFY
            t_naive = _median_time(lambda: pairwise_sq_dist_naive(c), args.reps)
            t_gram = _median_time(lambda: pairwise_sq_dist_gram(c), args.reps)
            rows.append(
                {
                    "N": n,
                    "D": d,
                    "naive_ms": f"{t_naive * 1e3:.3f}",
                    "gram_ms": f"{t_gram * 1e3:.3f}",
                    "speedup": f"{t_naive / t_gram:.2f}x" if t_gram > 0 else "inf",
                    "max_diff": f"{max_diff:.2e}",
                }
            )
    _write_table(rows, args.out, "bench_dist")
    return EXIT_OK


def _median_time(fn, reps: int) -> float:
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def cmd_selftest(args) -> int:
    failures = 0

    def check(name, ok, detail=""):
        nonlocal failures
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] {name}" + (f" ({detail})" if detail else ""))
        failures += 0 if ok else 1

    rng = stream_gen(0, "bench")
    worst32 = worst64 = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 33))
        d = int(rng.integers(1, 129))
        c = rng.random((n, d))
        worst64 = max(worst64, float(np.max(np.abs(
            pairwise_sq_dist_gram(c) - pairwise_sq_dist_naive(c)))))
        c32 = c.astype(np.float32)
        worst32 = max(worst32, float(np.max(np.abs(
            pairwise_sq_dist_gram(c32).astype(np.float64)
            - pairwise_sq_dist_naive(c32).astype(np.float64)))))
    check("distance kernels agree (f64)", worst64 <= 1e-10, f"max diff {worst64:.2e}")
    check("distance kernels agree (f32)", worst32 <= 1e-5, f"max diff {worst32:.2e}")

    from .nn import MLPBackbone, Model

    init = stream_gen(1, "init")
    backbone = MLPBackbone.init(5, [6], init, np.float64)
    model = Model.init(backbone, 8, 3, init, np.float64)
    x = Tensor(stream_gen(1, "bench").standard_normal((4, 5)))
    labels = np.array([0, 1, 2, 0])

    def loss_fn():
        logits, att = model.forward_cam(x)
        return cc_loss(logits, att, labels, lam=1.0, eps=1e-6).total

    report = finite_diff_check(loss_fn, model.params(), h=1e-5)
    check(
        "full-loss gradient matches finite differences",
        not report.skipped and report.max_rel_error <= 1e-4,
        f"max rel err {report.max_rel_error:.2e}",
    )

    check("schedule endpoints", cosine_lr(0, 100) == 0.1 and cosine_lr(100, 100) == 1e-5)

    tt = one_sample_ttest([2.1, 2.2, 1.9, 2.0, 1.8], 0.0)
    check("t statistic", abs(tt.t - 28.2843) < 1e-2, f"t={tt.t:.4f} p={tt.p:.2e}")

    return EXIT_OK if failures == 0 else EXIT_VERIFY


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse number list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccloss",
        description="Train and analyze the channel-correlation classifier.",
    )
    parser.add_argument("--version", action="version", version=f"ccloss {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + metrics")
    _add_train_flags(p)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--out", default=None)
    p.add_argument("--ttest-mu", type=float, default=None,
                   help="reference mean accuracy for a one-sample t-test over --runs")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate-lambda", help="sweep the loss weight")
    _add_train_flags(p)
    p.add_argument("--lambdas", default="0,0.5,1.0,1.5,2.0")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_ablate_lambda)

    p = sub.add_parser("ablate-batch", help="sweep the batch size")
    _add_train_flags(p)
    p.add_argument("--batch-sizes", default="8,16,32,64,128")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_ablate_batch)

    p = sub.add_parser("bench-dist", help="time the naive vs batched distance kernels")
    p.add_argument("--sizes", default="8,32,64")
    p.add_argument("--dims", default="16,64,256")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--inject-fault", action="store_true",
                   help="perturb the batched kernel to exercise the verification gate")
    p.set_defaults(fn=cmd_bench_dist)

    p = sub.add_parser("export-embed", help="write 2-D hidden embeddings as CSV")
    _add_train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.set_defaults(fn=cmd_export_embed)

    p = sub.add_parser("selftest", help="run the built-in verification suite")
    p.set_defaults(fn=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DatasetError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
