"""Command-line entry point: ``cift <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import checkpoint
from .bench import bench_mem
from .checks import run_gradcheck
from .config import RunConfig, load_config, merge
from .data import SynthConfig, generate, read_jsonl, write_jsonl
from .errors import CiftError, ConfigError, DataError, NumericalError
from .evaluate import decode_dataset, evaluate, reinit_probe, write_hypotheses
from .train import train

log = logging.getLogger("cift")


def _emit(obj, out: Optional[str]):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _load_data(path) -> list:
    if path is None:
        raise ConfigError("a dataset path is required")
    if not Path(path).exists():
        raise DataError(f"dataset {path} does not exist")
    return read_jsonl(path)


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    synth = SynthConfig(vocab_size=args.vocab_size, feat_dim=args.feat_dim, dwell=(args.dwell_min, args.dwell_max),
                        length=(args.min_len, args.max_len), noise=args.noise, allow_repeats=args.allow_repeats,
                        task_seed=args.task_seed)
    data = generate(synth, args.count, args.seed, prefix=args.prefix)
    write_jsonl(args.out, data)
    print(f"wrote {len(data)} utterances to {args.out}")
    return 0


_TRAIN_FLAGS = ("seed", "mode", "steps", "batch_size", "lr", "warmup_steps", "grad_clip", "eps", "train_data",
                "dev_data", "checkpoint", "metrics", "vocab_size", "feat_dim", "d_model", "d_embed", "heads",
                "ffn_dim", "encoder_layers", "context_layers", "bilinear_rank", "joint_dim")


def build_run_config(args) -> RunConfig:
    base = load_config(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in _TRAIN_FLAGS}
    overrides["lambdas"] = args.lambdas
    overrides["betas"] = args.betas
    return RunConfig.from_dict(merge(base, overrides))


def cmd_train(args) -> int:
    config = build_run_config(args)
    data = _load_data(config.train_data)
    ckpt = config.checkpoint or "model.ckpt"
    timing = args.timing or (config.metrics + ".timing" if config.metrics else None)
    result = train(config, data, checkpoint_path=ckpt, metrics_path=config.metrics, timing_path=timing)
    summary = {"steps": config.steps, "checkpoint": ckpt, "skipped_ctc": result.skipped_ctc,
               "skipped_degenerate": result.skipped_degenerate}
    if result.history:
        summary["final"] = result.history[-1]
    if config.dev_data:
        summary["dev"] = evaluate(result.params, _load_data(config.dev_data)).as_dict()
    _emit(summary, None)
    return 0


def cmd_eval(args) -> int:
    params = checkpoint.load_params(args.checkpoint)
    report = evaluate(params, _load_data(args.data), args.batch_size)
    _emit({"mode": params.mode, **report.as_dict()}, args.out)
    return 0


def cmd_decode(args) -> int:
    params = checkpoint.load_params(args.checkpoint)
    if args.mode and {"rnnt-baseline": "rnnt"}.get(args.mode, args.mode) != params.mode:
        raise ConfigError(f"checkpoint holds a {params.mode} model but --mode {args.mode} was requested")
    data = _load_data(args.data)
    results = decode_dataset(params, data, args.batch_size, args.max_symbols_per_frame)
    write_hypotheses(args.out, data, results)
    print(f"wrote {len(results)} hypotheses to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    modes = ["cift", "rnnt"] if args.mode == "both" else [{"rnnt-baseline": "rnnt"}.get(args.mode, args.mode)]
    ok = True
    for mode in modes:
        res = run_gradcheck(mode, args.seed, args.step, args.tolerance, args.max_coords)
        for g in res.groups:
            flag = "ok" if g.max_rel_err <= args.tolerance else "FAIL"
            print(f"{mode:5s} {g.name:12s} coords={g.coords:5d} max_rel_err={g.max_rel_err:.3e} {flag}")
        print(f"{mode}: {'PASS' if res.passed else 'FAIL'} (max rel err {res.max_rel_err:.3e}, "
              f"tolerance {args.tolerance:g})")
        ok = ok and res.passed
    if not ok:
        raise NumericalError("gradient check failed")
    return 0


def cmd_bench_mem(args) -> int:
    report = bench_mem(args.T, args.U, args.V, args.d, args.batch, args.cap_mb, seed=args.seed,
                       search=not args.no_search)
    for line in report.table():
        print(line)
    if args.out:
        Path(args.out).write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def cmd_reinit_probe(args) -> int:
    data = _load_data(args.data)
    rows = []
    for path in (args.cift, args.rnnt):
        if not Path(path).exists():
            raise DataError(f"checkpoint {path} does not exist")
        rows += reinit_probe(checkpoint.load_params(path), data, args.seeds)
    print(f"{'mode':6s}{'seed':>6s}{'CER before':>12s}{'CER after':>12s}{'delta':>10s}")
    for r in rows:
        print(f"{r.mode:6s}{r.seed:6d}{r.cer_before:12.4f}{r.cer_after:12.4f}{r.delta:10.4f}")
    out = [{"mode": r.mode, "seed": r.seed, "cer_before": r.cer_before, "cer_after": r.cer_after,
            "delta": r.delta} for r in rows]
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2) + "\n", encoding="utf-8")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cift", description="CIF-Transducer toolkit on a synthetic alignment task")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic JSONL corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=2000)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--task-seed", type=int, default=0, help="seed of the token prototypes (share across splits)")
    g.add_argument("--prefix", default="utt")
    g.add_argument("--vocab-size", type=int, default=16)
    g.add_argument("--feat-dim", type=int, default=16)
    g.add_argument("--dwell-min", type=int, default=8)
    g.add_argument("--dwell-max", type=int, default=16)
    g.add_argument("--min-len", type=int, default=2)
    g.add_argument("--max-len", type=int, default=8)
    g.add_argument("--noise", type=float, default=0.3)
    g.add_argument("--allow-repeats", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model (flags override --config)")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=["cift", "rnnt", "rnnt-baseline"])
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup-steps", type=int)
    t.add_argument("--betas", type=float, nargs=2)
    t.add_argument("--eps", type=float)
    t.add_argument("--grad-clip", type=float)
    t.add_argument("--lambdas", type=float, nargs=3, metavar=("L1", "L2", "L3"))
    t.add_argument("--train-data")
    t.add_argument("--dev-data")
    t.add_argument("--checkpoint")
    t.add_argument("--metrics")
    t.add_argument("--timing", help="wall-clock sidecar (default: <metrics>.timing)")
    for name in ("vocab-size", "feat-dim", "d-model", "d-embed", "heads", "ffn-dim", "encoder-layers",
                 "context-layers", "bilinear-rank", "joint-dim"):
        t.add_argument(f"--{name}", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="CER of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--batch-size", type=int, default=32)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("decode", help="greedy hypotheses as JSONL")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--mode", choices=["cift", "rnnt", "rnnt-baseline"])
    d.add_argument("--batch-size", type=int, default=32)
    d.add_argument("--max-symbols-per-frame", type=int, default=3)
    d.set_defaults(func=cmd_decode)

    c = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    c.add_argument("--mode", choices=["both", "cift", "rnnt", "rnnt-baseline"], default="both")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--tolerance", type=float, default=1e-3)
    c.add_argument("--max-coords", type=int, help="probe at most this many coordinates per tensor")
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench-mem", help="activation counts, peak memory and feasible batch per joint")
    b.add_argument("--T", type=int, default=400)
    b.add_argument("--U", type=int, default=30)
    b.add_argument("--V", type=int, default=500)
    b.add_argument("--d", type=int, default=64)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--cap-mb", type=float, default=256.0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--no-search", action="store_true", help="skip the feasible-batch search")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench_mem)

    r = sub.add_parser("reinit-probe", help="CER change after re-drawing predictor parameters")
    r.add_argument("--cift", required=True, help="trained CIF-T checkpoint")
    r.add_argument("--rnnt", required=True, help="trained RNN-T checkpoint")
    r.add_argument("--data", required=True)
    r.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    r.add_argument("--out")
    r.set_defaults(func=cmd_reinit_probe)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
