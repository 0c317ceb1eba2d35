"""Experiment harness: lookup table -> fault map -> error mask -> FAQ -> evaluation.

Every subcommand is deterministic given its flags; all randomness is
derived from explicit seeds.  A sweep seed feeds three independent
substreams (fault map, data synthesis, training init) via
``SeedSequence(seed, spawn_key=(stream,))`` so varying one factor holds
the others fixed.  On failure, partially written output files are removed
and the exit code is non-zero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io as fio
from .errors import FaqsimError
from .faq import faq_convert, inject, weight_error_metrics
from .faultmodel import fault_statistics, generate_fault_map
from .lut import build_lut
from .mapper import DataflowConfig, build_error_mask, iter_mapping_trace
from .model import QuantizedModel
from .nn import evaluate, retrain_with_faq, train_fixture
from .numfmt import QuantSpec

MODES = ("none", "inject", "faq", "faq-pfll")

STREAM_FAULTMAP = 0
STREAM_DATA = 1
STREAM_INIT = 2


class UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


def derive_substream_seed(seed: int, stream: int) -> int:
    """Independent 64-bit seed for one of the three named substreams."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(stream,))
    return int(ss.generate_state(1, np.uint64)[0])


def worker_count() -> int:
    env = os.environ.get("FAQSIM_THREADS")
    if env:
        try:
            count = int(env)
        except ValueError as exc:
            raise UsageError(f"FAQSIM_THREADS must be an integer, got {env!r}") from exc
        if count < 1:
            raise UsageError("FAQSIM_THREADS must be at least 1")
        return count
    return min(4, os.cpu_count() or 1)


class _OutputGuard:
    """Tracks output files so failures do not leave partial artifacts."""

    def __init__(self) -> None:
        self.paths: list[Path] = []

    def declare(self, path) -> Path:
        p = Path(path)
        self.paths.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.paths:
            try:
                p.unlink(missing_ok=True)
            except OSError:
                pass


def _load_dataset_arg(path: str, format: str | None) -> fio.Dataset:
    return fio.load_dataset(path, format or fio.guess_dataset_format(path))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_lut(args) -> int:
    guard = _OutputGuard()
    try:
        spec = QuantSpec(bitwidth=args.bitwidth)
        start = time.perf_counter()
        lut = build_lut(spec)
        elapsed = time.perf_counter() - start
        fio.save_lut(guard.declare(args.out), lut)
    except BaseException:
        guard.cleanup()
        raise
    print(f"lookup table bitwidth={args.bitwidth} "
          f"({lut.n_patterns}x{lut.n_values} entries) generated in {elapsed:.3f} s")
    print(f"wrote {args.out}")
    return 0


def cmd_gen_faultmap(args) -> int:
    guard = _OutputGuard()
    try:
        fmap = generate_fault_map(args.rows, args.cols, args.bitwidth,
                                  args.rate, args.seed)
        fio.save_fault_map(guard.declare(args.out), fmap)
    except BaseException:
        guard.cleanup()
        raise
    stats = fault_statistics(fmap)
    split = ("n/a" if stats.faulty_bits == 0
             else f"{stats.sa0_fraction:.4f}/{stats.sa1_fraction:.4f}")
    print(f"fault map {args.rows}x{args.cols}x{args.bitwidth} rate={args.rate} "
          f"seed={args.seed}: empirical rate {stats.empirical_rate:.6f}, "
          f"sa0/sa1 split {split}")
    print(f"wrote {args.out}")
    return 0


def cmd_convert(args) -> int:
    guard = _OutputGuard()
    try:
        model = fio.load_model(args.model)
        fmap = fio.load_fault_map(args.faultmap)
        lut = fio.load_lut(args.lut)
        config = DataflowConfig(buffer_rows=fmap.rows, buffer_cols=fmap.cols,
                                bitwidth=fmap.bitwidth, pfll=args.pfll)
        start = time.perf_counter()
        mask = build_error_mask(model, fmap, config)
        mask_s = time.perf_counter() - start
        start = time.perf_counter()
        converted = faq_convert(model, mask, lut)
        convert_s = time.perf_counter() - start
        fio.save_model(guard.declare(args.out), converted)
        if args.save_mask:
            fio.save_error_mask(guard.declare(args.save_mask), mask)
        if args.trace:
            with open(guard.declare(args.trace), "w") as f:
                for line in iter_mapping_trace(model, config):
                    f.write(line + "\n")
    except BaseException:
        guard.cleanup()
        raise
    n = model.weight_count
    rate = n / convert_s if convert_s > 0 else float("inf")
    print(f"error mask for {n} weights generated in {mask_s * 1e3:.1f} ms")
    print(f"converted {n} weights in {convert_s * 1e3:.1f} ms ({rate:,.0f} weights/s)")
    print(f"wrote {args.out}")
    return 0


def _eval_variant(model: QuantizedModel, mode: str, fmap, lut,
                  pfll: bool):
    """(variant model, mask) for one mitigation mode."""
    if mode == "none":
        return model, None
    config = DataflowConfig(buffer_rows=fmap.rows, buffer_cols=fmap.cols,
                            bitwidth=fmap.bitwidth,
                            pfll=pfll or mode == "faq-pfll")
    mask = build_error_mask(model, fmap, config)
    if mode == "inject":
        return inject(model, mask), mask
    return faq_convert(model, mask, lut), mask


def cmd_eval(args) -> int:
    if args.mode != "none" and not args.faultmap:
        raise UsageError(f"--mode {args.mode} requires --faultmap")
    if args.mode in ("faq", "faq-pfll") and not args.lut:
        raise UsageError(f"--mode {args.mode} requires --lut")
    model = fio.load_model(args.model)
    dataset = _load_dataset_arg(args.dataset, args.dataset_format)
    fmap = fio.load_fault_map(args.faultmap) if args.faultmap else None
    lut = fio.load_lut(args.lut) if args.lut else None
    variant, _ = _eval_variant(model, args.mode, fmap, lut, pfll=False)
    accuracy = evaluate(variant, dataset)
    print(f"accuracy {accuracy:.6f}")
    return 0


def cmd_train_fixture(args) -> int:
    guard = _OutputGuard()
    try:
        dataset = _load_dataset_arg(args.dataset, args.dataset_format)
        model = train_fixture(dataset, args.arch, args.epochs,
                              args.learning_rate,
                              derive_substream_seed(args.seed, STREAM_INIT),
                              spec=QuantSpec(bitwidth=args.bitwidth))
        fio.save_model(guard.declare(args.out), model)
    except BaseException:
        guard.cleanup()
        raise
    accuracy = evaluate(model, dataset)
    print(f"trained {args.arch} for {args.epochs} epochs; "
          f"training-set accuracy {accuracy:.6f}")
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _require(config: dict, field: str, kind, what: str):
    if field not in config:
        raise UsageError(f"sweep config: missing required field '{field}'")
    value = config[field]
    if not isinstance(value, kind):
        raise UsageError(f"sweep config: '{field}' must be {what}")
    return value


def _parse_sweep_config(path: str) -> dict:
    try:
        with open(path) as f:
            config = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read sweep config {path}: {exc}") from exc
    if not isinstance(config, dict):
        raise UsageError("sweep config: top level must be a JSON object")

    rates = _require(config, "fault_rates", list, "a list")
    if not rates or not all(
        isinstance(r, (int, float)) and 0.0 <= r <= 1.0 for r in rates
    ):
        raise UsageError("sweep config: 'fault_rates' must be a non-empty list "
                         "of probabilities in [0, 1]")
    seeds = _require(config, "seeds", list, "a list")
    if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise UsageError("sweep config: 'seeds' must be a non-empty list of "
                         "non-negative integers")
    modes = config.get("modes", list(MODES))
    if not isinstance(modes, list) or not modes or not set(modes) <= set(MODES):
        raise UsageError(f"sweep config: 'modes' must be a non-empty subset of {MODES}")
    _require(config, "model", str, "a path string")
    _require(config, "dataset", str, "a path string")
    _require(config, "out", str, "a path string")
    for field in ("buffer_rows", "buffer_cols"):
        if field in config and (not isinstance(config[field], int) or config[field] < 1):
            raise UsageError(f"sweep config: '{field}' must be a positive integer")
    return config


def _sweep_cell(model, dataset, lut, rows, cols, rate, seed, mode):
    if mode == "none":
        return {
            "rate": rate, "seed": seed, "mode": mode,
            "accuracy": evaluate(model, dataset),
            "weight_mse": 0.0, "convert_ms": 0.0,
        }
    fmap = generate_fault_map(rows, cols, model.bitwidth, rate,
                              derive_substream_seed(seed, STREAM_FAULTMAP))
    config = DataflowConfig(buffer_rows=rows, buffer_cols=cols,
                            bitwidth=model.bitwidth, pfll=mode == "faq-pfll")
    mask = build_error_mask(model, fmap, config)
    convert_ms = 0.0
    if mode == "inject":
        variant = inject(model, mask)
    else:
        start = time.perf_counter()
        variant = faq_convert(model, mask, lut)
        convert_ms = (time.perf_counter() - start) * 1e3
    return {
        "rate": rate, "seed": seed, "mode": mode,
        "accuracy": evaluate(variant, dataset),
        "weight_mse": weight_error_metrics(model, variant).mse,
        "convert_ms": convert_ms,
    }


def _summarize(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        groups.setdefault((row["rate"], row["mode"]), []).append(row["accuracy"])
    summary = []
    for (rate, mode), accs in sorted(groups.items()):
        summary.append({
            "rate": rate, "mode": mode,
            "mean_accuracy": sum(accs) / len(accs),
            "min_accuracy": min(accs), "max_accuracy": max(accs),
        })
    return summary


def cmd_sweep(args) -> int:
    config = _parse_sweep_config(args.config)
    model = fio.load_model(config["model"])
    dataset = _load_dataset_arg(config["dataset"], config.get("dataset_format"))
    needs_lut = any(m in ("faq", "faq-pfll") for m in config.get("modes", MODES))
    lut = None
    if needs_lut:
        lut = (fio.load_lut(config["lut"]) if "lut" in config
               else build_lut(model.spec))
    rows_dim = config.get("buffer_rows", 256)
    cols_dim = config.get("buffer_cols", 256)
    modes = config.get("modes", list(MODES))

    cells = [(rate, seed, mode) for rate in config["fault_rates"]
             for seed in config["seeds"] for mode in modes]
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(
            lambda cell: _sweep_cell(model, dataset, lut, rows_dim, cols_dim, *cell),
            cells,
        ))
    results.sort(key=lambda r: (r["rate"], r["seed"], r["mode"]))
    summary = _summarize(results)

    out = Path(config["out"])
    summary_path = out.with_name(out.stem + "_summary.csv")
    figure_path = out.with_suffix(".png")
    guard = _OutputGuard()
    try:
        with open(guard.declare(out), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["rate", "seed", "mode", "accuracy", "weight_mse",
                             "convert_ms"])
            for r in results:
                writer.writerow([repr(float(r["rate"])), r["seed"], r["mode"],
                                 repr(r["accuracy"]), repr(r["weight_mse"]),
                                 f"{r['convert_ms']:.3f}"])
        with open(guard.declare(summary_path), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["rate", "mode", "mean_accuracy", "min_accuracy",
                             "max_accuracy"])
            for r in summary:
                writer.writerow([repr(float(r["rate"])), r["mode"],
                                 repr(r["mean_accuracy"]), repr(r["min_accuracy"]),
                                 repr(r["max_accuracy"])])
        from .plotting import plot_sweep_summary

        plot_sweep_summary(summary, guard.declare(figure_path))
    except BaseException:
        guard.cleanup()
        raise
    print(f"wrote {out}, {summary_path}, {figure_path} "
          f"({len(results)} rows, {len(summary)} summary rows)")
    return 0


# ---------------------------------------------------------------------------
# retraining
# ---------------------------------------------------------------------------


def _parse_retrain_config(path: str) -> dict:
    try:
        with open(path) as f:
            config = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read retrain config {path}: {exc}") from exc
    if not isinstance(config, dict):
        raise UsageError("retrain config: top level must be a JSON object")
    _require(config, "model", str, "a path string")
    _require(config, "dataset", str, "a path string")
    _require(config, "out", str, "a path string")
    rate = config.get("fault_rate")
    if not isinstance(rate, (int, float)) or not 0.0 <= rate <= 1.0:
        raise UsageError("retrain config: 'fault_rate' must be a probability in [0, 1]")
    seeds = config.get("seeds", [config.get("seed", 0)])
    if not isinstance(seeds, list) or not seeds or not all(
        isinstance(s, int) and s >= 0 for s in seeds
    ):
        raise UsageError("retrain config: 'seeds' must be a non-empty list of "
                         "non-negative integers")
    config["seeds"] = seeds
    epochs = config.get("epochs", 5)
    if not isinstance(epochs, int) or epochs < 0:
        raise UsageError("retrain config: 'epochs' must be a non-negative integer")
    config["epochs"] = epochs
    lr = config.get("learning_rate", 0.05)
    if not isinstance(lr, (int, float)) or lr < 0:
        raise UsageError("retrain config: 'learning_rate' must be non-negative")
    config["learning_rate"] = float(lr)
    return config


def cmd_retrain(args) -> int:
    config = _parse_retrain_config(args.config)
    use_faq = args.with_faq
    model = fio.load_model(config["model"])
    dataset = _load_dataset_arg(config["dataset"], config.get("dataset_format"))
    lut = (fio.load_lut(config["lut"]) if "lut" in config
           else build_lut(model.spec)) if use_faq else None
    rows_dim = config.get("buffer_rows", 256)
    cols_dim = config.get("buffer_cols", 256)

    traces: dict[int, list[float]] = {}
    for seed in config["seeds"]:
        fmap = generate_fault_map(rows_dim, cols_dim, model.bitwidth,
                                  config["fault_rate"],
                                  derive_substream_seed(seed, STREAM_FAULTMAP))
        mask = build_error_mask(model, fmap, DataflowConfig(
            buffer_rows=rows_dim, buffer_cols=cols_dim, bitwidth=model.bitwidth))
        _, trace = retrain_with_faq(
            model, mask, lut, dataset, config["epochs"],
            config["learning_rate"], use_faq,
            seed=derive_substream_seed(seed, STREAM_INIT),
        )
        traces[seed] = trace

    out = Path(config["out"])
    figure_path = out.with_suffix(".png")
    guard = _OutputGuard()
    try:
        with open(guard.declare(out), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["seed", "epoch", "accuracy"])
            for seed in config["seeds"]:
                for epoch, acc in enumerate(traces[seed]):
                    writer.writerow([seed, epoch, repr(acc)])
        from .plotting import plot_retrain_traces

        plot_retrain_traces(traces, use_faq, guard.declare(figure_path))
    except BaseException:
        guard.cleanup()
        raise
    label = "with" if use_faq else "without"
    final = sum(t[-1] for t in traces.values()) / len(traces)
    print(f"retraining {label} FAQ: mean final accuracy {final:.6f} "
          f"over {len(traces)} seed(s)")
    print(f"wrote {out}, {figure_path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faqsim",
        description="Stuck-at fault simulation and fault-aware quantization "
                    "for DNN accelerator weight memories",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-lut", help="generate the nearest-valid-value lookup table")
    p.add_argument("--bitwidth", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_lut)

    p = sub.add_parser("gen-faultmap", help="generate a random stuck-at fault map")
    p.add_argument("--rows", type=int, default=256)
    p.add_argument("--cols", type=int, default=256)
    p.add_argument("--bitwidth", type=int, default=8)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_faultmap)

    p = sub.add_parser("convert", help="fault-aware conversion of a quantized model")
    p.add_argument("--model", required=True)
    p.add_argument("--faultmap", required=True)
    p.add_argument("--lut", required=True)
    p.add_argument("--pfll", action="store_true",
                   help="protect the first and last weighted layers")
    p.add_argument("--out", required=True)
    p.add_argument("--save-mask", help="also write the error mask file")
    p.add_argument("--trace", help="write the weight-to-cell mapping trace")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="evaluate a model, optionally through faults")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--dataset-format", choices=fio.DATASET_FORMATS)
    p.add_argument("--faultmap")
    p.add_argument("--lut")
    p.add_argument("--mode", choices=MODES, default="none")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-fixture", help="train a small fixture model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--dataset-format", choices=fio.DATASET_FORMATS)
    p.add_argument("--arch", choices=("mlp2", "smallcnn"), required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bitwidth", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_fixture)

    p = sub.add_parser("sweep", help="accuracy-vs-fault-rate experiment grid")
    p.add_argument("--config", required=True, help="JSON sweep configuration")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("retrain", help="fault-aware retraining experiment")
    p.add_argument("--config", required=True, help="JSON retrain configuration")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--with-faq", action="store_true", dest="with_faq")
    group.add_argument("--without-faq", action="store_false", dest="with_faq")
    p.set_defaults(func=cmd_retrain)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (FaqsimError, ValueError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
