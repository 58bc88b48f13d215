"""Command-line driver: ``echokv {ratio,train,eval,bench,needle,export}``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint
from .cache import EchoConfig, OraclePredictor, compute_ratio, count_params, init_bank
from .corpus import load_corpus, split_heldout
from .errors import ConfigError, EchoKVError
from .harness import (
    FEATURES,
    MODES,
    RunConfig,
    evaluate,
    load_run_config,
    needle_task,
    run_bench,
    with_seed,
    write_jsonl,
)
from .hybrid import calibrate_key_channels
from .model import init_model
from .train import TrainReport, TraceCache, stage1_train, stage2_train, stage2_train_qkkl

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="TOML run configuration with dotted keys")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--out", help="output directory (overrides run.out)")
    return p


def _predictor_flags(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--checkpoint", help="ECKV predictor checkpoint")
    g.add_argument("--oracle", action="store_true", help="use the exact (oracle) predictor")
    g.add_argument("--zero", action="store_true", help="use an all-zero predictor bank")
    p.add_argument("--features", choices=FEATURES)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="echokv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common()

    p = sub.add_parser("ratio", parents=[common], help="compression ratio, predictor dims and parameter count")
    p.add_argument("--dkv", type=int, default=1024)
    p.add_argument("--layers", type=int, default=32)
    p.add_argument("--s", type=int, required=True, dest="group_size")
    p.add_argument("--local", type=int, default=0, dest="local_dim")

    p = sub.add_parser("train", parents=[common], help="train a predictor bank")
    p.add_argument("--corpus")
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p.add_argument("--steps", type=int, help="override the step count of the selected stage(s)")
    p.add_argument("--loss", choices=["o_mse", "qk_kl"], help="stage-2 objective")
    p.add_argument("--init", help="warm-start from this checkpoint instead of a random bank")
    p.add_argument("--features", choices=FEATURES)

    p = sub.add_parser("eval", parents=[common], help="fidelity against the full cache on held-out text")
    p.add_argument("--corpus")
    p.add_argument("--mode", choices=[m for m in MODES if m != "full"])
    p.add_argument("--scores", help="ECKS key-channel scores for hybrid mode")
    _predictor_flags(p)

    p = sub.add_parser("bench", parents=[common], help="memory/throughput under a simulated cap")
    p.add_argument("--lengths", default="256,1024,4096")
    p.add_argument("--decode", type=int, default=8, help="tokens decoded per length")
    p.add_argument("--cap", type=int, help="simulated cache memory cap in bytes")
    _predictor_flags(p)

    p = sub.add_parser("needle", parents=[common], help="needle-in-a-haystack agreement")
    p.add_argument("--context", type=int, default=512)
    p.add_argument("--trials", type=int, default=4)
    _predictor_flags(p)

    p = sub.add_parser("export", parents=[common], help="write calibrated key-channel scores (ECKS)")
    p.add_argument("--corpus")
    p.add_argument("--checkpoint", help="also summarize this checkpoint as JSON")
    return parser


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    cfg = with_seed(cfg, args.seed)
    updates = {}
    if args.out:
        updates["out"] = args.out
    if getattr(args, "corpus", None):
        updates["corpus"] = args.corpus
    if getattr(args, "features", None):
        updates["features"] = args.features
    if getattr(args, "mode", None):
        updates["mode"] = args.mode
    return replace(cfg, **updates) if updates else cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _corpus(cfg: RunConfig):
    if not cfg.corpus:
        raise ConfigError("no corpus given (use --corpus or run.corpus)")
    return load_corpus(cfg.corpus, cfg.train.max_len)


def _predictor(args, cfg: RunConfig, model):
    if args.oracle:
        return OraclePredictor(cfg.echo)
    if args.zero:
        return init_bank(model.config.n_layers, model.geometry, cfg.echo, features=cfg.features, zero=True)
    if not args.checkpoint:
        raise ConfigError("choose a predictor: --checkpoint PATH, --oracle or --zero")
    g = model.geometry
    expect = (model.config.n_layers, cfg.echo.group_size, cfg.echo.local_dim, g.d_kv, g.n_kv_heads, g.d_head)
    bank = checkpoint.load_bank(args.checkpoint, expect, cfg.echo.sink_tokens, cfg.echo.window)
    if bank.features != cfg.features:
        raise ConfigError(f"checkpoint was trained with {bank.features} features, run asks for {cfg.features}")
    return bank


def cmd_ratio(args):
    cfg = EchoConfig(args.group_size, args.local_dim, args.dkv)
    params = count_params(args.layers, args.group_size, args.local_dim, args.dkv)
    print(f"ratio: {compute_ratio(cfg):.6g}")
    print(f"input_dim: {cfg.feature_dim()}")
    print(f"output_dim: {cfg.drop_dim}")
    print(f"params: {params}")


def cmd_train(args):
    cfg = _run_config(args)
    if args.loss:
        cfg = replace(cfg, train=replace(cfg.train, loss_stage2=args.loss))
    out = _out_dir(cfg)
    docs, _ = split_heldout(_corpus(cfg))
    model = init_model(cfg.model)
    n = cfg.model.n_layers
    if args.init:
        g = model.geometry
        expect = (n, cfg.echo.group_size, cfg.echo.local_dim, g.d_kv, g.n_kv_heads, g.d_head)
        bank = checkpoint.load_bank(args.init, expect, cfg.echo.sink_tokens, cfg.echo.window)
    else:
        bank = init_bank(n, model.geometry, cfg.echo, seed=cfg.train.seed, features=cfg.features)
    traces = TraceCache(model, docs, cfg.echo, bank.features, cfg.train.max_len)
    report = TrainReport()
    if args.stage in ("1", "both"):
        bank, r = stage1_train(model, docs, bank, cfg.train, traces, steps=args.steps)
        report.extend(r)
    if args.stage in ("2", "both"):
        second = stage2_train_qkkl if cfg.train.loss_stage2 == "qk_kl" else stage2_train
        bank, r = second(model, docs, bank, cfg.train, traces, steps=args.steps)
        report.extend(r)
    checkpoint.save_bank(bank, out / "bank.eckv")
    (out / "train_report.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
    print(f"wrote {out / 'bank.eckv'} ({bank.param_count()} params, {len(report.rows)} steps)")


def cmd_eval(args):
    cfg = _run_config(args)
    out = _out_dir(cfg)
    _, held = split_heldout(_corpus(cfg))
    model = init_model(cfg.model)
    pred = _predictor(args, cfg, model)
    hyb = None
    if cfg.mode == "hybrid":
        g = model.geometry
        if not args.scores:
            raise ConfigError("hybrid mode needs --scores (see `echokv export`)")
        scores = checkpoint.load_scores(args.scores, (cfg.model.n_layers, g.d_kv, g.n_kv_heads, g.d_head))
        hyb = cfg.hybrid(scores)
    res = evaluate(model, held, pred, cfg.echo, cfg.mode, cfg.features, hyb, cfg.train.max_len)
    rows = [{"layer": i, "omse": v} for i, v in enumerate(res.pop("per_layer_omse"))]
    rows.append(dict(res, summary=True))
    write_jsonl(out / "eval_report.jsonl", rows)
    print(json.dumps(res, sort_keys=True))


def cmd_bench(args):
    cfg = _run_config(args)
    out = _out_dir(cfg)
    try:
        lengths = [int(x) for x in args.lengths.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--lengths must be comma-separated integers, got {args.lengths!r}") from None
    model = init_model(cfg.model)
    pred = _predictor(args, cfg, model)
    rows = run_bench(model, pred, cfg.echo, lengths, args.decode, args.cap, cfg.train.seed, cfg.features)
    write_jsonl(out / "bench_report.jsonl", rows)
    for r in rows:
        note = "" if r["fits_cap"] else " (echo footprint still exceeds cap)"
        print(f"{r['tokens']:>6} tokens  mode={r['mode']:<4}  ratio={r['achieved_ratio']:.4f}  "
              f"agree={r['logit_argmax_agreement']:.3f}{note}")


def cmd_needle(args):
    cfg = _run_config(args)
    out = _out_dir(cfg)
    model = init_model(cfg.model)
    pred = _predictor(args, cfg, model)
    res = needle_task(model, pred, cfg.echo, args.context, trials=args.trials, seed=cfg.train.seed,
                      features=cfg.features)
    write_jsonl(out / "needle_report.jsonl", res["per_depth"] + [{"mean_agreement": res["mean_agreement"]}])
    print(f"mean agreement {res['mean_agreement']:.3f}")


def cmd_export(args):
    cfg = _run_config(args)
    out = _out_dir(cfg)
    docs, _ = split_heldout(_corpus(cfg))
    model = init_model(cfg.model)
    g = model.geometry
    scores = calibrate_key_channels(model, docs, cfg.train.max_len)
    checkpoint.save_scores(scores, g.n_kv_heads, g.d_head, out / "key_scores.ecks")
    print(f"wrote {out / 'key_scores.ecks'}")
    if args.checkpoint:
        bank = checkpoint.load_bank(args.checkpoint)
        summary = {
            "fingerprint": list(bank.fingerprint),
            "features": bank.features,
            "params": bank.param_count(),
            "ratio": compute_ratio(bank.config),
            "checksum": bank.checksum(),
        }
        (out / "bank_summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n", encoding="utf-8")


COMMANDS = {
    "ratio": cmd_ratio, "train": cmd_train, "eval": cmd_eval,
    "bench": cmd_bench, "needle": cmd_needle, "export": cmd_export,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except EchoKVError as e:
        print(f"echokv {args.command}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"echokv {args.command}: {e}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as e:
        print(f"echokv {args.command}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
