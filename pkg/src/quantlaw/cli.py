"""Command-line entry point: ``quantlaw <subcommand> ...``.

Exit codes: 0 ok, 2 usage, 3 input, 4 infeasible ratio, 5 numeric.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import os
import sys
import time
import uuid

import numpy as np

from . import laws, oracle, store
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import InvalidInput, QuantLawError
from .formats import BlockFormat
from .model import (LAYER, MATMUL, PRESETS, LossEvaluator, ModelConfig, enumerate_sites,
                    init_random, non_embedding_params)
from .search import DEFAULT_TOLERANCE, SearchSpec, estimate, run_search

log = logging.getLogger("quantlaw")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 2, 3, 4, 5


# ---------------------------------------------------------------------------
# Input helpers


def load_config(spec: str) -> ModelConfig:
    if spec in PRESETS:
        return PRESETS[spec]
    with open(spec, "r", encoding="utf-8") as f:
        return ModelConfig.from_dict(json.load(f))


def read_tokens(path) -> np.ndarray:
    """Whitespace-separated decimal token ids."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        return np.array([int(t) for t in text.split()], dtype=np.int64)
    except ValueError as exc:
        raise InvalidInput(f"{path}: {exc}") from None


def write_tokens(path, tokens) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(str(int(t)) for t in tokens) + "\n")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def parse_qr_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid ratio list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty ratio list")
    return values


def parse_format(text: str) -> BlockFormat:
    try:
        return BlockFormat.parse(text)
    except QuantLawError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def read_law_params(path) -> laws.LawParams:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if "params" in doc:
        doc = doc["params"]
    try:
        return laws.LawParams.from_dict(doc)
    except TypeError as exc:
        raise InvalidInput(f"{path}: {exc}") from None


def read_grid(path) -> list[laws.ExperimentPoint]:
    """Grid file: ``{"n_params": [...], "q_r": [...], "q_b": [...]}`` (product) or ``{"points": [...]}``."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    try:
        if "points" in doc:
            return [laws.ExperimentPoint(p["n_params"], p["q_r"], p.get("q_b", 32)) for p in doc["points"]]
        qbs = doc.get("q_b", [32])
        return [laws.ExperimentPoint(n, q, b)
                for n, q, b in itertools.product(doc["n_params"], doc["q_r"], qbs)]
    except (KeyError, TypeError) as exc:
        raise InvalidInput(f"{path}: malformed grid ({exc})") from None


# ---------------------------------------------------------------------------
# Subcommands


def cmd_search(args) -> int:
    if args.method.block_size != args.qb:
        raise InvalidInput(f"--method block size {args.method.block_size} != --qb {args.qb}")
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        if args.model and load_config(args.model) != ckpt.config:
            raise InvalidInput("--model does not match the checkpoint's config")
        ckpt_ref = {"ckpt_digest": file_digest(args.ckpt)}
    else:
        ckpt = init_random(load_config(args.model or "clm-micro"), args.init_seed)
        ckpt_ref = {"init_seed": args.init_seed}
    tokens = read_tokens(args.tokens)
    evaluator = LossEvaluator(ckpt, tokens)
    sites = enumerate_sites(ckpt.config, args.granularity)
    model_digest = ckpt.digest()
    tokens_digest = file_digest(args.tokens)
    n_eff = non_embedding_params(ckpt.config)

    baseline = evaluator(None)
    print(f"baseline loss: {baseline:.9g}")
    for qr in args.qr:
        spec = SearchSpec(qr_target=qr, qb=args.qb, granularity=args.granularity, method=args.method,
                          trials=args.trials, seed=args.seed, ratio_tolerance=args.tolerance,
                          weight_and_activation=not args.weight_only)
        if args.deterministic:
            ident = json.dumps({"spec": spec.to_dict(), "model": model_digest, "tokens": tokens_digest,
                                **ckpt_ref}, sort_keys=True)
            run_id = "run-" + hashlib.sha256(ident.encode()).hexdigest()[:16]
        else:
            run_id = f"run-{time.strftime('%Y%m%dT%H%M%S')}-{uuid.uuid4().hex[:8]}"
        ts = run_search(evaluator, sites, spec, baseline, model_id=model_digest, n_effective=n_eff,
                        tokens_digest=tokens_digest, run_id=run_id, jobs=args.jobs)
        ts.extra.update(ckpt_ref)
        store.append_run(args.out, ts)
        est = estimate(ts)
        print(f"qr={qr:g}: delta_opt={est.delta_opt:.9g} delta_mu={est.delta_mu:.9g} "
              f"n={est.n} failed={ts.n_failed}")
    return EXIT_OK


def _fit_from_logs(paths, law: str, target: str) -> laws.FitResult:
    runs = [ts for p in paths for ts in store.read_runs(p)]
    table = store.build_contour(runs)
    return laws.fit_law(store.contour_points(table, target), law, target)


def cmd_fit(args) -> int:
    fit = _fit_from_logs(args.inputs, args.law, args.target)
    store.write_fit(fit, args.out)
    p = fit.params
    print(f"{p.law}/{p.target}: C={p.c:.6g} A={p.a_ratio:.6g} gamma_N={p.gamma_n:.6g}"
          + (f" d={p.d_shift:.6g} gamma_c={p.gamma_c:.6g}" if p.law == laws.STRONG else "")
          + f" R2_log={fit.r2_log:.4f} R2_lin={fit.r2_linear:.4f}"
          + f" points={fit.n_points} dropped={fit.n_dropped_nonpositive}")
    return EXIT_OK


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, sort_keys=True) if args.json else text)


def cmd_predict(args) -> int:
    fit = store.read_fit(args.fit)
    point = laws.ExperimentPoint(args.n, args.qr, args.qb)
    delta = laws.eval_law(fit.params, point)
    _emit(args, {"n_params": args.n, "q_r": args.qr, "q_b": args.qb, "delta": delta}, f"{delta:.9g}")
    return EXIT_OK


def cmd_plan(args) -> int:
    fit = store.read_fit(args.fit)
    if args.n is not None:
        qr = laws.max_ratio(fit.params, args.n, args.qb, args.budget)
        _emit(args, {"budget": args.budget, "n_params": args.n, "q_b": args.qb, "max_q_r": qr}, f"{qr:.9g}")
    else:
        if not 0.0 <= args.qr <= 1.0:
            raise InvalidInput("--qr must be in [0, 1]")
        n = laws.min_params(fit.params, args.qr, args.qb, args.budget)
        _emit(args, {"budget": args.budget, "q_r": args.qr, "q_b": args.qb, "min_n_params": n}, f"{n:.9g}")
    return EXIT_OK


def cmd_synth(args) -> int:
    params = read_law_params(args.params)
    grid = read_grid(args.grid)
    data = oracle.gen_dataset(params, grid, args.sigma, args.seed)
    for ts in oracle.synthetic_runs(data, args.seed):
        store.append_run(args.out, ts)
    print(f"wrote {len(data)} synthetic points to {args.out}")
    return EXIT_OK


def cmd_export_contour(args) -> int:
    runs = [ts for p in args.inputs for ts in store.read_runs(p)]
    table = store.build_contour(runs)
    store.export_csv(table, args.out)
    print(f"wrote {len(table)} rows to {args.out}")
    return EXIT_OK


def cmd_init_model(args) -> int:
    ckpt = init_random(load_config(args.model), args.seed)
    save_checkpoint(ckpt, args.out)
    print(ckpt.digest())
    return EXIT_OK


def cmd_make_tokens(args) -> int:
    if args.vocab < 2 or args.n < 1:
        raise InvalidInput("--vocab must be >= 2 and --n >= 1")
    tokens = np.random.default_rng(args.seed).integers(0, args.vocab, args.n)
    write_tokens(args.out, tokens)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default=argparse.SUPPRESS,
                        help="logging level (default: $QUANTLAW_LOG or WARNING)")

    parser = argparse.ArgumentParser(prog="quantlaw", parents=[common],
                                     description="Mixed-precision PTQ search and degeneration scaling laws.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", parents=[common], help="random search over quantization plans")
    p.add_argument("--model", default=None, help="preset name (clm-micro, ...) or JSON config file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", help="checkpoint file")
    src.add_argument("--init-seed", type=int, help="randomly initialize the model with this seed")
    p.add_argument("--tokens", required=True, help="token file (whitespace-separated ids)")
    p.add_argument("--method", type=parse_format, default=BlockFormat("mxint", 4, 32),
                   help="low-precision format, e.g. mxint4:32 or affine4:64")
    prec = p.add_mutually_exclusive_group()
    prec.add_argument("--wa", dest="weight_only", action="store_false",
                      help="quantize weights and activations (default)")
    prec.add_argument("--weight-only", dest="weight_only", action="store_true", help="quantize weights only")
    p.add_argument("--granularity", choices=[LAYER, MATMUL], default=MATMUL)
    p.add_argument("--qr", type=parse_qr_list, required=True, help="comma-separated target ratios")
    p.add_argument("--qb", type=int, required=True, help="block size (must match --method)")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE, help="allowed |ratio - target|")
    p.add_argument("--jobs", type=int, default=1, help="parallel trial evaluation (results are identical)")
    p.add_argument("--deterministic", action="store_true", help="derive run ids from the inputs, not the clock")
    p.add_argument("--out", required=True, help="JSONL log to append to")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("fit", parents=[common], help="fit a weak or strong law to logged runs")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="JSONL logs")
    p.add_argument("--law", choices=[laws.WEAK, laws.STRONG], default=laws.WEAK)
    p.add_argument("--target", choices=[laws.OPT, laws.MEAN], default=laws.OPT)
    p.add_argument("--out", required=True, help="fit JSON document")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", parents=[common], help="evaluate a fitted law")
    p.add_argument("--fit", required=True)
    p.add_argument("--n", type=float, required=True, help="model size, billions of non-embedding params")
    p.add_argument("--qr", type=float, required=True)
    p.add_argument("--qb", type=int, default=32)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("plan", parents=[common], help="invert a fitted law under a degeneration budget")
    p.add_argument("--fit", required=True)
    p.add_argument("--budget", type=float, required=True)
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--n", type=float, help="model size -> largest ratio")
    which.add_argument("--qr", type=float, help="ratio -> smallest model size")
    p.add_argument("--qb", type=int, default=32)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic runs from law parameters")
    p.add_argument("--params", required=True, help="law params JSON (or a fit document)")
    p.add_argument("--grid", required=True, help="grid JSON")
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-contour", parents=[common], help="write the contour table as CSV")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_contour)

    p = sub.add_parser("init-model", parents=[common], help="write a randomly initialized checkpoint")
    p.add_argument("--model", default="clm-micro")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("make-tokens", parents=[common], help="write uniformly random token ids")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--vocab", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_tokens)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (getattr(args, "log_level", None) or os.environ.get("QUANTLAW_LOG") or "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except QuantLawError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (OverflowError, ZeroDivisionError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
