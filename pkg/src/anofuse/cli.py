"""Command-line interface: gen | train | eval | ablate | export-maps | selftest.

Any RunConfig key can be overridden on the command line as ``--key value``
on top of an optional ``--config`` key=value file. Unknown keys fail with
the list of valid keys. Exit status is 0 on success, 1 with a diagnostic
on any failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .ablation import ablate
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_overrides, load_config
from .data import export_dataset, gen_synthetic, get_corpora, write_pgm
from .errors import (ConfigurationError, DatasetError, ShapeError, TrainingError,
                     UndefinedMetricError)
from .losses import cls_probs, image_score
from .metrics import MetricsReport
from .tensor import no_grad
from .train import EVAL_BATCH, evaluate, train


def _collect_overrides(extra):
    overrides = {}
    it = iter(extra)
    for token in it:
        if not token.startswith("--"):
            raise ConfigurationError(f"expected --key value pairs, got {token!r}")
        key = token[2:].replace("-", "_")
        try:
            value = next(it)
        except StopIteration:
            raise ConfigurationError(f"missing value for override {token}")
        overrides[key] = value
    return overrides


def _resolve_config(args, extra):
    overrides = _collect_overrides(extra)
    if args.config:
        return load_config(args.config, overrides)
    return apply_overrides(RunConfig(), overrides).validate()


def _write_lines(path, lines):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def _write_report(out_dir, report: MetricsReport):
    _write_lines(Path(out_dir) / "metrics.csv", report.csv_lines())
    _write_lines(Path(out_dir) / "config.txt", report.config_echo)


def cmd_gen(args, extra):
    cfg = _resolve_config(args, extra)
    train_s = gen_synthetic(cfg, cfg.data_seed, cfg.n_train, prefix="train")
    test_s = gen_synthetic(cfg, cfg.data_seed + 1, cfg.n_test, prefix="test")
    export_dataset(args.out, {"train": train_s, "test": test_s})
    n_def = sum(s.label for s in train_s) + sum(s.label for s in test_s)
    print(f"wrote {len(train_s)} train / {len(test_s)} test samples "
          f"({n_def} defective) to {args.out}")
    return 0


def cmd_train(args, extra):
    cfg = _resolve_config(args, extra)
    result = train(cfg)
    out = Path(args.out)
    save_checkpoint(result.model, out / "checkpoint.bin", step=cfg.steps)
    trace_lines = ["step,total,seg,cls"]
    trace_lines += [f"{s},{t:.9g},{sg:.9g},{cl:.9g}" for s, t, sg, cl in result.trace]
    _write_lines(out / "trace.csv", trace_lines)
    report = evaluate(result.model, result.test_samples)
    _write_report(out, report)
    if result.trace:
        print(f"trained {cfg.steps} steps; loss {result.trace[0][1]:.4f} -> "
              f"{result.trace[-1][1]:.4f}")
    print("\n".join(report.csv_lines()))
    return 0


def cmd_eval(args, extra):
    model, _ = load_checkpoint(args.checkpoint)
    cfg = model.config
    overrides = _collect_overrides(extra)
    if overrides:
        cfg = apply_overrides(cfg, overrides).validate()
    _, test_s = get_corpora(cfg)
    report = evaluate(model, test_s)
    if args.out:
        _write_report(args.out, report)
    print("\n".join(report.csv_lines()))
    return 0


def cmd_ablate(args, extra):
    cfg = _resolve_config(args, extra)
    result = ablate(cfg)
    lines = result.csv_lines()
    _write_lines(Path(args.out) / "ablation.csv", lines)
    print("\n".join(lines))
    return 0


def cmd_export_maps(args, extra):
    model, _ = load_checkpoint(args.checkpoint)
    cfg = model.config
    overrides = _collect_overrides(extra)
    if overrides:
        cfg = apply_overrides(cfg, overrides).validate()
    _, test_s = get_corpora(cfg)
    out = Path(args.out)
    index = []
    with no_grad():
        for start in range(0, len(test_s), EVAL_BATCH):
            chunk = test_s[start:start + EVAL_BATCH]
            images = np.stack([s.image for s in chunk])[:, None, :, :]
            outs = model.forward(images)
            up = outs.amap.upsampled.data
            p_abn = cls_probs(outs.v_cls, outs.anchor, cfg.temperature).data[:, 1]
            scores = image_score(p_abn, up)
            for s, m, sc in zip(chunk, up, scores):
                write_pgm(out / f"{s.id}.pgm",
                          np.round(m * 65535.0).astype(np.uint16), maxval=65535)
                index.append(f"{s.id} {sc:.9g}")
    _write_lines(out / "index.txt", index)
    print(f"wrote {len(index)} maps to {out}")
    return 0


def cmd_selftest(args, extra):
    from .verify import run_selftest
    return 0 if run_selftest() else 1


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="anofuse",
        description="grouped vision/text anomaly segmentation with convolutional "
                    "low-rank adapters and dynamic text fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        for flag, required in flags.items():
            p.add_argument(f"--{flag}", required=required)
        p.set_defaults(fn=fn)
        return p

    add("gen", cmd_gen, out=True)
    add("train", cmd_train, out=True)
    add("eval", cmd_eval, checkpoint=True, out=False)
    add("ablate", cmd_ablate, out=True)
    p = add("export-maps", cmd_export_maps, checkpoint=True, out=True)
    p.prog = "anofuse export-maps"
    add("selftest", cmd_selftest)

    args, extra = parser.parse_known_args(argv)
    try:
        return args.fn(args, extra)
    except (ConfigurationError, DatasetError, ShapeError, TrainingError,
            UndefinedMetricError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
