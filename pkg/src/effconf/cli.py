"""Command line: ``effconf profile | equiv | gradcheck | bench | train-toy``.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .autodiff import DTensor
from .checks import equivalence_suite, gradcheck_suite
from .config import load_config
from .encoder import EncoderConfig, build, get_preset
from .errors import ConfigError, DivergenceError, EffConfError
from .profiler import CSV_FIELDS, TEN_SECONDS, count_madds, memory_estimate
from .toy import ToyTask, TrainConfig, toy_model_config, train_toy

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2
BENCH_FIELDS = ("preset", "frames", "median_ms", "p10_ms", "p90_ms")
MEMORY_FIELDS = ("config", "frames", "attention_elements", "hidden_elements", "peak_elements", "dominated_by")
TRAIN_FIELDS = ("step", "loss", "accuracy")


class UsageError(EffConfError):
    pass


# ---------------------------------------------------------------------------
# Argument helpers
# ---------------------------------------------------------------------------


def int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def window_list(text: str) -> list[int | None]:
    """``175,-,-``: a dash leaves that stage with full attention."""
    out: list[int | None] = []
    for v in text.split(","):
        v = v.strip()
        if v in ("-", "none", ""):
            out.append(None)
            continue
        try:
            out.append(int(v))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad window {v!r} in {text!r}") from None
    return out


def base_configs(args) -> list[EncoderConfig]:
    if args.preset and args.config:
        raise UsageError("give either --preset or --config, not both")
    if args.config:
        return [load_config(args.config)]
    names = [n.strip() for n in (args.preset or args.default_preset).split(",") if n.strip()]
    return [get_preset(n) for n in names]


def expand_variants(configs: Sequence[EncoderConfig], args) -> list[EncoderConfig]:
    """Apply --group-sizes / --windows / --attention / --downsample to every base config."""
    out = []
    for cfg in configs:
        if getattr(args, "attention", None):
            cfg = cfg.with_attention(args.attention)
        if getattr(args, "downsample", None):
            cfg = cfg.with_downsampling(args.downsample)
        variants = []
        for sizes in getattr(args, "group_sizes", None) or []:
            variants.append(cfg.with_group_sizes(sizes))
        for windows in getattr(args, "windows", None) or []:
            variants.append(cfg.with_windows(windows))
        out.extend(variants or [cfg])
    return out


def write_rows(rows: list[dict], fields: Sequence[str], fmt: str, out: str | None) -> None:
    if fmt == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        text = buf.getvalue()
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def info(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_profile(args) -> int:
    configs = expand_variants(base_configs(args), args)
    frames = args.frames or [TEN_SECONDS]
    if args.memory:
        rows = []
        for cfg in configs:
            for n in frames:
                m = memory_estimate(cfg, n)
                rows.append({"config": cfg.name, "frames": n, "attention_elements": m.attention_elements,
                             "hidden_elements": m.hidden_elements, "peak_elements": m.peak_elements,
                             "dominated_by": m.dominated_by})
        write_rows(rows, MEMORY_FIELDS, args.format, args.out)
        return EXIT_OK
    reports = [count_madds(cfg, n) for cfg in configs for n in frames]
    if args.format == "json":
        write_rows([r.to_dict() for r in reports], CSV_FIELDS, "json", args.out)
    else:
        write_rows([r.to_row() for r in reports], CSV_FIELDS, "csv", args.out)
    if len(configs) > 1:
        for n in frames:
            ref = next(r for r in reports if r.input_frames == n)
            for r in reports:
                if r.input_frames == n and r is not ref:
                    info(f"ratio {r.config} / {ref.config} @ {n} frames: {r.total / ref.total:.3f}")
    return EXIT_OK


def _report_checks(results, fmt: str, out: str | None) -> int:
    for r in results:
        print(r.line())
    if out:
        write_rows([{"check": r.name, "worst": r.worst, "tol": r.tol, "passed": r.passed} for r in results],
                   ("check", "worst", "tol", "passed"), fmt, out)
    failed = [r.name for r in results if not r.passed]
    if failed:
        info(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_CHECK_FAILED
    info(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_equiv(args) -> int:
    max_n = max(args.sizes) if args.sizes else 16
    return _report_checks(equivalence_suite(args.seed, args.cases, max_n), args.format, args.out)


def cmd_gradcheck(args) -> int:
    return _report_checks(gradcheck_suite(args.seed), args.format, args.out)


def bench_config(cfg: EncoderConfig, frames: int, repeats: int = 5, seed: int = 0) -> dict:
    """Warm up once, then time ``repeats`` no-grad forwards of one random utterance."""
    model = build(cfg, seed)
    x = DTensor(np.random.default_rng(seed).normal(size=(frames, cfg.input_features)))
    times = []
    with threadpool_limits(limits=1), ad.no_grad():
        model(x)
        for _ in range(repeats):
            t0 = time.perf_counter()
            model(x)
            times.append((time.perf_counter() - t0) * 1000.0)
    return {"preset": cfg.name, "frames": frames, "median_ms": float(np.median(times)),
            "p10_ms": float(np.percentile(times, 10)), "p90_ms": float(np.percentile(times, 90))}


def cmd_bench(args) -> int:
    configs = expand_variants(base_configs(args), args)
    frames = args.frames or [256, 512, 1024, 2048]
    rows = [bench_config(cfg, n, args.repeats, args.seed) for cfg in configs for n in frames]
    write_rows(rows, BENCH_FIELDS, args.format, args.out)
    return EXIT_OK


def cmd_train_toy(args) -> int:
    task = ToyTask(seed=args.seed, noise=args.noise)
    model_cfg = load_config(args.config) if args.config else toy_model_config(task)
    if model_cfg.input_features != task.n_features or model_cfg.output_vocab != task.n_classes:
        raise ConfigError(f"toy model needs input_features={task.n_features} and "
                          f"output_vocab={task.n_classes}")
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, clip_norm=args.clip,
                      log_every=args.log_every, seed=args.seed, target_accuracy=args.target_accuracy)

    def log(entry):
        loss = "-" if entry["loss"] is None else f"{entry['loss']:.4f}"
        info(f"step {entry['step']:5d}  loss {loss:>8s}  accuracy {entry['accuracy']:.3f}")

    try:
        result = train_toy(task, cfg, model_cfg, log)
    except DivergenceError as exc:
        info(f"training diverged: {exc}")
        return EXIT_CHECK_FAILED
    write_rows(result.history, TRAIN_FIELDS, args.format, args.out)
    info(f"final held-out accuracy {result.final_accuracy:.3f} after {result.steps_run} steps "
         f"({result.seconds:.1f} s)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="effconf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, default_preset="effconf-ctc-s"):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="write the report here instead of stdout")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.set_defaults(default_preset=default_preset)

    def model_flags(p):
        p.add_argument("--preset", help="preset name, or several separated by commas")
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--frames", type=int_list, help="input lengths, e.g. 1000 or 256,512")
        p.add_argument("--group-sizes", type=int_list, action="append",
                       help="per-stage attention group sizes, e.g. 3,1,1 (repeatable)")
        p.add_argument("--windows", type=window_list, action="append",
                       help="per-stage local attention windows, e.g. 175,-,- (repeatable)")
        p.add_argument("--attention", choices=("relative", "linear"))
        p.add_argument("--downsample", choices=("conv", "attention"))

    p = sub.add_parser("profile", help="analytic MAdds / parameter report")
    common(p)
    model_flags(p)
    p.add_argument("--memory", action="store_true", help="report activation memory instead of MAdds")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("equiv", help="identity-collapse and oracle equivalence suite")
    common(p)
    p.add_argument("--sizes", type=int_list, help="sequence lengths to cover (largest is used as max n)")
    p.add_argument("--cases", type=int, default=50)
    p.set_defaults(func=cmd_equiv)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="wall-clock forward timing")
    common(p)
    model_flags(p)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train-toy", help="train a small encoder on synthetic CTC data")
    common(p)
    p.add_argument("--config", help="YAML config for the model (defaults to the toy architecture)")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--clip", type=float, default=TrainConfig.clip_norm)
    p.add_argument("--noise", type=float, default=ToyTask.noise)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--target-accuracy", type=float, help="stop at the first evaluation reaching this accuracy")
    p.set_defaults(func=cmd_train_toy)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
