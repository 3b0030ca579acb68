"""Random-search sweep over clm-micro widths, ratios and block sizes, then a law fit.

    python scripts/micro_sweep.py --out runs/micro.jsonl --trials 20

Writes the JSONL log, a contour CSV next to it, and prints weak/strong fits.
Random-init weights give small (sometimes negative) degenerations, so the fit
is a plumbing exercise, not a reproduction of published constants.
"""

from __future__ import annotations

import argparse
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from quantlaw.errors import QuantLawError
from quantlaw.formats import BlockFormat
from quantlaw.laws import STRONG, WEAK, fit_law
from quantlaw.model import CLM_MICRO, LossEvaluator, enumerate_sites, init_random, non_embedding_params
from quantlaw.search import SearchSpec, estimate, run_search
from quantlaw.store import append_run, build_contour, contour_points, export_csv, read_runs



@dataclass
class SweepConfig:
    model_seed: int = 1
    token_seed: int = 2
    n_tokens: int = 4096
    bits: int = 2
    granularity: str = "matmul"
    model_dims: list[int] = field(default_factory=lambda: [32, 64, 96])
    ratios: list[float] = field(default_factory=lambda: [0.5, 0.7, 0.8, 0.9, 0.975])
    block_sizes: list[int] = field(default_factory=lambda: [16, 32, 64])
    trials: int = 20
    seed: int = 0


def sweep(cfg: SweepConfig, out: Path) -> None:
    tokens = np.random.default_rng(cfg.token_seed).integers(0, CLM_MICRO.vocab_size, cfg.n_tokens)
    for dim in cfg.model_dims:
        model = replace(CLM_MICRO, model_dim=dim, ffn_dim=3 * dim)
        sweep_model(cfg, model, tokens, out)

    table = build_contour(read_runs(out))
    export_csv(table, out.with_suffix(".csv"))
    for law in (WEAK, STRONG):
        for target in ("opt", "mean"):
            try:
                fit = fit_law(contour_points(table, target), law, target)
            except QuantLawError as exc:
                print(f"{law}/{target}: {exc}")
                continue
            p = fit.params
            print(f"{law}/{target}: A={p.a_ratio:.3f} gamma_N={p.gamma_n:.3f} gamma_c={p.gamma_c:.3f} "
                  f"r2_log={fit.r2_log:.3f} dropped={fit.n_dropped_nonpositive}")


def sweep_model(cfg: SweepConfig, model, tokens, out: Path) -> None:
    ckpt = init_random(model, cfg.model_seed)
    ev = LossEvaluator(ckpt, tokens)
    sites = enumerate_sites(model, cfg.granularity)
    base = ev(None)
    n_eff = non_embedding_params(model)
    print(f"dim={model.model_dim} N={n_eff} baseline {base:.6f}")
    for qb in cfg.block_sizes:
        for qr in cfg.ratios:
            spec = SearchSpec(qr_target=qr, qb=qb, granularity=cfg.granularity,
                              method=BlockFormat("mxint", cfg.bits, qb), trials=cfg.trials, seed=cfg.seed)
            ts = run_search(ev, sites, spec, base, model_id=ckpt.digest(),
                            n_effective=n_eff, tokens_digest=ev.tokens_digest(),
                            run_id=f"micro-{model.model_dim}-{qb}-{qr}-{cfg.seed}")
            append_run(out, ts)
            est = estimate(ts)
            print(f"  qb={qb:4d} qr={qr:.3f} opt={est.delta_opt:+.5f} mu={est.delta_mu:+.5f}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/micro.jsonl"))
    ap.add_argument("--trials", type=int, default=SweepConfig.trials)
    ap.add_argument("--bits", type=int, default=SweepConfig.bits)
    ap.add_argument("--seed", type=int, default=SweepConfig.seed)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    if args.out.exists():
        args.out.unlink()
    sweep(SweepConfig(trials=args.trials, bits=args.bits, seed=args.seed), args.out)


if __name__ == "__main__":
    main()
