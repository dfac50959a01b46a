"""Command-line surface: verify, pretrain, finetune, sweep, decode, cost.

Exit codes: 0 success, 1 verification or metric failure, 2 usage/config
error. Every command honors --seed and writes enough state to replay a
run exactly.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import pooling
from .cost_model import analytic_cost, sweep, write_csv, write_json
from .data import (
    ManifestDataset,
    SineFeatureDataset,
    SymbolFeatureDataset,
    read_wav,
)
from .encoder import EncoderModel, load_checkpoint, preset, save_checkpoint
from .errors import ConfigError, InputError, StochpoolError
from .runconfig import RunConfig, apply_overrides, echo_effective_config, load_config
from .stochastic import FactorSets, fixed_config, parse_triplet
from .tensor import Tensor, add, matmul
from .training import TrainPlan, finetune, make_head, pretrain_toy, write_train_log
from .verify import run_checks


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochpool",
                                     description="Stochastically compressed speech encoder")
    sub = parser.add_subparsers(dest="command", required=True)

    p_verify = sub.add_parser("verify", help="run the verification suite")
    p_verify.add_argument("--filter", default=None, help="substring of group or check name")
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--inject-fault", choices=["upsample-truncation"], default=None,
                          help="test hook: break an operator to prove checks catch it")

    for name in ("pretrain", "finetune"):
        p = sub.add_parser(name, help=f"{name} a model from a run config file")
        p.add_argument("config_file", help="plain-text run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--mode", choices=["stochastic", "deterministic"], default=None)
        p.add_argument("--config", default=None, metavar="TRIPLET",
                       help="fixed S_f-S_k-S_q for deterministic mode")
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--output-dir", default=None)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any run-config key")

    p_sweep = sub.add_parser("sweep", help="cost/accuracy table over configurations")
    p_sweep.add_argument("config_file")
    p_sweep.add_argument("--configs", default=None,
                         help="extra comma-separated triplets beyond the standard four")
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--no-measure", action="store_true",
                         help="analytic columns only, skip wall-time measurement")
    p_sweep.add_argument("--output-dir", default=None)
    p_sweep.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p_cost = sub.add_parser("cost", help="analytic MAC model only")
    p_cost.add_argument("--preset", default="tiny")
    p_cost.add_argument("--frames", type=int, default=50)
    p_cost.add_argument("--config", default="1-1-1,2-1-1,2-2-1,2-2-2",
                        help="comma-separated triplets")
    p_cost.add_argument("--from-audio", action="store_true",
                        help="include the wave feature extractor")
    p_cost.add_argument("--seed", type=int, default=0)

    p_decode = sub.add_parser("decode", help="greedy-decode audio files")
    p_decode.add_argument("checkpoint")
    p_decode.add_argument("audio", nargs="+")
    p_decode.add_argument("--config", default="1-1-1", metavar="TRIPLET")
    p_decode.add_argument("--seed", type=int, default=0)
    return parser


def _overrides_from_args(args) -> dict:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    if getattr(args, "config", None) is not None:
        overrides["fixed_config"] = args.config
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    if getattr(args, "output_dir", None) is not None:
        overrides["output_dir"] = args.output_dir
    return overrides


def _load_run_config(args) -> RunConfig:
    path = Path(args.config_file)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    config = load_config(path)
    return apply_overrides(config, _overrides_from_args(args))


def _factor_sets(rc: RunConfig) -> FactorSets:
    return FactorSets(rc.factor_list("squeeze_set"), rc.factor_list("kv_set"),
                      rc.factor_list("q_set"))


def _fixed_from(rc: RunConfig, depth: int):
    if not rc.fixed_config:
        raise ConfigError("deterministic mode requires fixed_config (e.g. 2-1-1)")
    s_f, s_k, s_q = parse_triplet(rc.fixed_config)
    return fixed_config(s_f, s_k, s_q, depth)


def _plan(rc: RunConfig, loss: str, depth: int) -> TrainPlan:
    return TrainPlan(
        mode=rc.mode,
        steps=rc.steps,
        batch_size=rc.batch_size,
        learning_rate=rc.learning_rate,
        seed=rc.seed,
        loss=loss,
        sets=_factor_sets(rc) if rc.mode == "stochastic" else None,
        fixed=_fixed_from(rc, depth) if rc.mode == "deterministic" else None,
        eval_interval=rc.eval_interval,
        randomize_validation=rc.randomize_validation,
        freeze_extractor=rc.freeze_extractor,
    )


def _model_from(rc: RunConfig):
    """(model, extras, meta) from the checkpoint key or a fresh preset."""
    if rc.checkpoint:
        ck = load_checkpoint(rc.checkpoint)
        model, extras = ck.build_model()
        return model, extras, ck.meta
    return EncoderModel(preset(rc.preset), seed=rc.seed), {}, {}


def _labeled_datasets(rc: RunConfig, model_dim: int):
    if rc.dataset == "synthetic-symbols":
        train = SymbolFeatureDataset(rc.dataset_size, model_dim, vocab=rc.vocab_size,
                                     seed=rc.seed, split="train")
        val = SymbolFeatureDataset(rc.val_size, model_dim, vocab=rc.vocab_size,
                                   seed=rc.seed, split="val")
        return train, val, rc.vocab_size, None
    if rc.dataset == "synthetic-sines":
        raise ConfigError("finetune needs a labeled dataset (synthetic-symbols or manifest)")
    train = ManifestDataset(rc.dataset)
    return train, None, len(train.vocab), train.vocab


def cmd_verify(args) -> int:
    if args.inject_fault == "upsample-truncation":
        pooling._FAULT_DISABLE_TRUNCATION = True
    try:
        results = run_checks(args.filter, seed=args.seed)
    finally:
        pooling._FAULT_DISABLE_TRUNCATION = False
    if not results:
        print(f"no checks match filter {args.filter!r}", file=sys.stderr)
        return 2
    width = max(len(f"{r.group}/{r.name}") for r in results)
    for r in results:
        label = f"{r.group}/{r.name}"
        status = "PASS" if r.ok else "FAIL"
        print(f"{label:<{width}}  {status}  {r.seconds:7.3f}s  {'' if r.ok else r.detail}")
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 0 if not failed else 1


def cmd_pretrain(args) -> int:
    rc = _load_run_config(args)
    out = Path(rc.output_dir)
    echo_effective_config(rc, out)
    model, extras, _ = _model_from(rc)
    if rc.dataset == "synthetic-sines":
        dataset = SineFeatureDataset(rc.dataset_size, model.config.model_dim, seed=rc.seed)
    else:
        raise ConfigError(f"pretrain supports dataset=synthetic-sines, got {rc.dataset!r}")
    plan = _plan(rc, "masked_regression", model.config.depth)
    emb = extras.get("pretrain.mask_embedding")
    result = pretrain_toy(model, plan, dataset, mask_embedding=emb)
    write_train_log(out / "train_log.jsonl", result.log)
    meta = {"phase": "pretrain", "preset": rc.preset, "seed": rc.seed, "mode": rc.mode}
    save_checkpoint(out / "checkpoint.stpl", model.config, result.params, meta)
    if result.log:
        print(f"pretrain: {len(result.log)} steps, loss {result.initial_loss:.4f} -> "
              f"{result.final_loss:.4f}")
    else:
        print("pretrain: 0 steps (checkpoint written unchanged)")
    print(f"checkpoint: {out / 'checkpoint.stpl'}")
    return 0


def cmd_finetune(args) -> int:
    rc = _load_run_config(args)
    out = Path(rc.output_dir)
    echo_effective_config(rc, out)
    model, extras, _ = _model_from(rc)
    train, val, vocab, token_vocab = _labeled_datasets(rc, model.config.model_dim)
    plan = _plan(rc, "ctc", model.config.depth)
    head = None
    if "head.weight" in extras and "head.bias" in extras:
        head = {"head.weight": extras["head.weight"], "head.bias": extras["head.bias"]}
    result = finetune(model, plan, train, vocab, val_dataset=val, head=head)
    write_train_log(out / "train_log.jsonl", result.log)
    meta = {"phase": "finetune", "preset": rc.preset, "seed": rc.seed, "mode": rc.mode,
            "vocab_size": vocab}
    if token_vocab:
        meta["token_vocab"] = token_vocab
    save_checkpoint(out / "checkpoint.stpl", model.config, result.params, meta)
    if result.log:
        print(f"finetune: {len(result.log)} steps, loss {result.initial_loss:.4f} -> "
              f"{result.final_loss:.4f}, skipped {result.infeasible_skipped} infeasible")
    else:
        print("finetune: 0 steps (checkpoint written with fresh head)")
    print(f"checkpoint: {out / 'checkpoint.stpl'}")
    return 0


STANDARD_SWEEP = ("1-1-1", "2-1-1", "2-2-1", "2-2-2")


def cmd_sweep(args) -> int:
    rc = _load_run_config(args)
    out = Path(rc.output_dir)
    echo_effective_config(rc, out)
    if rc.checkpoint:
        ck = load_checkpoint(rc.checkpoint)
        model, extras = ck.build_model()
        head = None
        if "head.weight" in extras:
            head = {"head.weight": extras["head.weight"], "head.bias": extras["head.bias"]}
        vocab = ck.meta.get("vocab_size", rc.vocab_size)
    else:
        model = EncoderModel(preset(rc.preset), seed=rc.seed)
        head, vocab = None, rc.vocab_size
    triplets = list(STANDARD_SWEEP)
    if args.configs:
        triplets.extend(t for t in args.configs.split(",") if t.strip())
    if rc.sweep_configs:
        triplets.extend(t for t in rc.sweep_configs.split(",") if t.strip())
    configs = [fixed_config(*parse_triplet(t), model.config.depth) for t in triplets]
    if head is not None:
        dataset = SymbolFeatureDataset(rc.utterances, model.config.model_dim,
                                       vocab=vocab, seed=rc.seed)
    else:
        dataset = SineFeatureDataset(rc.utterances, model.config.model_dim, seed=rc.seed,
                                     min_frames=rc.frames, max_frames=rc.frames)
    reports = sweep(model, configs, dataset, preset=rc.preset, repeats=rc.repeats,
                    head=head, measure_time=rc.measure and not args.no_measure)
    write_csv(out / "sweep.csv", reports)
    write_json(out / "sweep.json", reports)
    for r in reports:
        wall = f"{r.wall_ms_median:10.2f} ms" if r.wall_ms_median is not None else "   (skipped)"
        err = f"  SER {r.symbol_error:.3f}" if r.symbol_error is not None else ""
        print(f"{r.config:>10}  {r.macs_total:>14,} MACs  {wall}{err}")
    print(f"wrote {out / 'sweep.csv'} and {out / 'sweep.json'}")
    return 0


def cmd_cost(args) -> int:
    enc = preset(args.preset)
    triplets = [t for t in args.config.split(",") if t.strip()]
    if not triplets:
        raise ConfigError("cost requires at least one config triplet")
    print("config      macs_total  attn_scores    attn_proj          ffn"
          "           fe     upsample")
    for t in triplets:
        s_f, s_k, s_q = parse_triplet(t)
        report = analytic_cost(fixed_config(s_f, s_k, s_q, enc.depth), enc, args.frames,
                               preset=args.preset, from_audio=args.from_audio)
        print(f"{report.config:>6}  {report.macs_total:>12,}  {report.macs_attn_scores:>11,}"
              f"  {report.macs_attn_proj:>11,}  {report.macs_ffn:>11,}"
              f"  {report.macs_fe:>11,}  {report.macs_upsample:>11,}")
    return 0


def cmd_decode(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    model, extras = ck.build_model()
    if "head.weight" not in extras:
        raise InputError(f"{args.checkpoint}: no output head; fine-tune before decoding")
    head = {"head.weight": extras["head.weight"], "head.bias": extras["head.bias"]}
    s_f, s_k, s_q = parse_triplet(args.config)
    config = fixed_config(s_f, s_k, s_q, model.config.depth)
    inverse = {int(i): tok for tok, i in ck.meta.get("token_vocab", {}).items()}
    from .ctc import greedy_decode

    for path in args.audio:
        audio = read_wav(path)
        feats = model.extract_features(audio)
        logits = add(matmul(model.forward(feats, config), head["head.weight"]),
                     head["head.bias"])
        ids = greedy_decode(logits)
        rendered = " ".join(inverse.get(i, str(i)) for i in ids)
        print(f"{path}\t{rendered}")
    return 0


_COMMANDS = {
    "verify": cmd_verify,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "sweep": cmd_sweep,
    "cost": cmd_cost,
    "decode": cmd_decode,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StochpoolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
