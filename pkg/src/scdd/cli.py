"""Command-line entry point: verify | train | sample | eval | ablate.

Exit codes: 0 success, 1 failed verification check, 2 usage or validation
error. All commands are deterministic under a fixed seed.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig, parse_config
from .denoiser import Denoiser, TrainConfig, train
from .forward import Vocab
from .objective import validation_perplexity
from .oracle import exact_oracle_ppl, generate_corpus
from .sampler import (correction_rate, correction_rate_per_step,
                      cumulative_correction_curve, sample_batch, write_trace)
from .schedule import discretize
from .verify import format_results, run_all_checks, write_report

USAGE_ERROR = 2
CHECK_FAILURE = 1


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = parse_config(args.config)
    else:
        cfg = RunConfig()
        cfg.validate()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_verify(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    results = run_all_checks(cfg.schedule(), seed=cfg.seed)
    print(format_results(results))
    write_report(results, out / "verification.csv")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED checks: {', '.join(failed)}", file=sys.stderr)
        return CHECK_FAILURE
    print(f"all {len(results)} checks passed")
    return 0


def _write_metrics(history, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "reconstruction", "diffusion", "total",
                         "ppl"])
        for step, rec, diff, total, ppl in history:
            writer.writerow([step, f"{rec:.10g}", f"{diff:.10g}",
                             f"{total:.10g}", f"{ppl:.10g}"])


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    rng = np.random.default_rng(cfg.seed)
    source = cfg.source()
    dataset = generate_corpus(source, cfg.L, max(4096, cfg.batch), rng)
    tcfg = TrainConfig(schedule=cfg.schedule(), T=cfg.T, K=cfg.K, L=cfg.L,
                       d=cfg.d, h=cfg.h, steps=cfg.steps,
                       batch_size=cfg.batch, lr=cfg.lr, warmup=cfg.warmup,
                       log_every=cfg.log_every)
    params, state, history = train(tcfg, dataset, rng)
    ckpt = Checkpoint.from_training(cfg.schedule(), cfg.T, params, state)
    ckpt_path = out / "model.ckpt"
    ckpt_io.save(ckpt, ckpt_path)
    _write_metrics(history, out / "train_metrics.csv")
    if history:
        print(f"final per-token loss {history[-1][3]:.4f} nats "
              f"(ppl {history[-1][4]:.3f})")
    print(f"checkpoint written to {ckpt_path}")
    return 0


def _load_checkpoint(args) -> Checkpoint:
    if not args.checkpoint:
        raise ConfigError("this command requires --checkpoint")
    path = Path(args.checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    return ckpt_io.load(path)


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    ckpt = _load_checkpoint(args)
    vocab = Vocab(ckpt.params.dims[0])
    # Raw final weights: the 0.9999-decay parameter average needs far more
    # steps than a desk-scale run to become representative.
    denoiser = Denoiser(ckpt.params, vocab)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for N in cfg.sample_steps:
        grid = discretize(ckpt.schedule, N)
        traces = sample_batch(denoiser, grid, cfg.L, cfg.sample_count, rng,
                              nucleus_p=cfg.nucleus_p)
        for k, trace in enumerate(traces):
            write_trace(trace, out / f"trace_N{N}_{k:03d}.txt")
        mean_cr = float(np.mean([correction_rate(t) for t in traces]))
        mean_crps = float(np.mean([correction_rate_per_step(t, N)
                                   for t in traces]))
        rows.append((N, ckpt.schedule.p_u, mean_cr, mean_crps))
        print(f"N={N}: correction rate {mean_cr:.4f}, "
              f"per step {mean_crps:.6f}")
    _write_sweep_csv(rows, out / "corrections.csv")
    return 0


def _write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["N", "p_u", "correction_rate",
                         "correction_rate_per_step"])
        for N, p_u, cr, crps in rows:
            writer.writerow([N, f"{p_u:.10g}", f"{cr:.10g}", f"{crps:.10g}"])


def _write_curve_csv(curve, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "cumulative_fraction"])
        for step, frac in curve:
            writer.writerow([step, f"{frac:.10g}"])


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    ckpt = _load_checkpoint(args)
    vocab = Vocab(ckpt.params.dims[0])
    if vocab.K != cfg.K:
        raise ConfigError("checkpoint vocabulary does not match config K")
    denoiser = Denoiser(ckpt.params, vocab)
    rng = np.random.default_rng(cfg.seed)
    source = cfg.source()
    grid = discretize(ckpt.schedule, ckpt.T)
    val_corpus = generate_corpus(source, cfg.L, cfg.eval_count, rng)
    val_ppl = validation_perplexity(denoiser, grid, val_corpus,
                                    cfg.mc_passes, rng)
    N = max(cfg.sample_steps)
    sample_grid = discretize(ckpt.schedule, N)
    traces = sample_batch(denoiser, sample_grid, cfg.L, cfg.eval_count, rng,
                          nucleus_p=cfg.nucleus_p)
    generated = [t.final_seq for t in traces]
    gen_ppl = exact_oracle_ppl(source, generated)
    tokens = np.concatenate(generated)
    counts = np.bincount(tokens, minlength=vocab.K)[:vocab.K]
    freqs = counts / counts.sum()
    entropy = float(-(freqs[freqs > 0] * np.log(freqs[freqs > 0])).sum())
    with open(out / "eval.csv", "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["val_ppl", "gen_ppl", "unigram_entropy"])
        writer.writerow([f"{val_ppl:.10g}", f"{gen_ppl:.10g}",
                         f"{entropy:.10g}"])
    print(f"val ppl {val_ppl:.3f}  gen ppl {gen_ppl:.3f}  "
          f"unigram entropy {entropy:.3f}")
    return 0


def _train_toy(cfg: RunConfig, schedule, rng) -> Denoiser:
    source = cfg.source()
    dataset = generate_corpus(source, cfg.L, max(1024, cfg.batch), rng)
    tcfg = TrainConfig(schedule=schedule, T=cfg.T, K=cfg.K, L=cfg.L, d=cfg.d,
                       h=cfg.h, steps=cfg.ablate_steps, batch_size=cfg.batch,
                       lr=cfg.lr, warmup=min(cfg.warmup, cfg.ablate_steps // 5),
                       log_every=0)
    params, _, _ = train(tcfg, dataset, rng)
    return Denoiser(params, Vocab(cfg.K))


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    rng = np.random.default_rng(cfg.seed)

    sweep_rows = []
    for p_u in (0.05, 0.1, 0.2):
        schedule = cfg.schedule(kind="gidd_aligned", p_u=p_u, t_peak=0.5)
        denoiser = _train_toy(cfg, schedule, rng)
        for N in cfg.sample_steps:
            grid = discretize(schedule, N)
            traces = sample_batch(denoiser, grid, cfg.L, cfg.ablate_traces,
                                  rng)
            mean_cr = float(np.mean([correction_rate(t) for t in traces]))
            mean_crps = float(np.mean([correction_rate_per_step(t, N)
                                       for t in traces]))
            sweep_rows.append((N, p_u, mean_cr, mean_crps))
            print(f"p_u={p_u} N={N}: rate {mean_cr:.4f} "
                  f"per-step {mean_crps:.6f}")
    _write_sweep_csv(sweep_rows, out / "ablate_sweep.csv")

    N = max(cfg.sample_steps)
    for t_peak in (0.25, 0.75):
        schedule = cfg.schedule(kind="peak_shifted", t_peak=t_peak)
        denoiser = _train_toy(cfg, schedule, rng)
        grid = discretize(schedule, N)
        traces = sample_batch(denoiser, grid, cfg.L, cfg.ablate_traces, rng)
        curves = np.array([[f for _, f in cumulative_correction_curve(t)]
                           for t in traces])
        mean_curve = list(zip(range(1, N + 1), curves.mean(axis=0)))
        tag = f"{int(round(t_peak * 100)):02d}"
        _write_curve_csv(mean_curve, out / f"ablate_curve_tpeak{tag}.csv")
        print(f"t_peak={t_peak}: curve written "
              f"(half-way fraction {mean_curve[N // 2 - 1][1]:.3f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scdd",
        description="Self-correcting discrete diffusion at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("verify", cmd_verify), ("train", cmd_train),
                     ("sample", cmd_sample), ("eval", cmd_eval),
                     ("ablate", cmd_ablate)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--out", default="out")
        p.add_argument("--seed", type=int, default=None)
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


def run() -> None:
    sys.exit(main())
