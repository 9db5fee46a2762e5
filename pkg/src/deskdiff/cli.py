"""Command-line entry points.

Every command writes into its own run directory, named
<command>-<timestamp>-<seed> unless --out overrides it.  A finished run
gets a DONE marker and is never written again; rerunning into it is a
config error.  The fully resolved configuration is snapshotted next to the
outputs so a run can be reproduced from its directory alone.

Exit codes: 2 config, 3 data, 4 checkpoint, 5 numeric, 1 other engine
errors.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time

import numpy as np

from . import config as cfgmod
from .autodiff import finite_difference_check
from .checkpoint import load_checkpoint
from .conditioning import KnowledgePolicy, Vocabulary, tokenize
from .denoiser import ModelDims
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DeskdiffError,
    InternalNumericError,
)
from .evalsynth import evaluate, pareto_sweep
from .formats import write_csv, write_json, write_jsonl_line, write_pgm, write_ppm
from .sampling import capture_attention, entropy_series, sample
from .schedule import build_linear
from .synthdata import generate_dataset, load_dataset, save_dataset
from .training import TrainConfig, train, training_loss_graph


def _exit_code(exc: DeskdiffError) -> int:
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, DataError):
        return 3
    if isinstance(exc, CheckpointError):
        return 4
    if isinstance(exc, InternalNumericError):
        return 5
    return 1


def _make_run_dir(command: str, seed: int, out: str | None) -> str:
    if out is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = f"{command}-{stamp}-{seed}"
    if os.path.exists(os.path.join(out, "DONE")):
        raise ConfigError(f"run directory {out} is finished and immutable")
    os.makedirs(out, exist_ok=True)
    return out


def _finish_run(out: str) -> None:
    with open(os.path.join(out, "DONE"), "w", encoding="utf-8") as fh:
        fh.write(time.strftime("%Y-%m-%dT%H:%M:%S") + "\n")


def _snapshot(out: str, command: str, seed: int, cfg: dict) -> None:
    write_json(os.path.join(out, "config.json"),
               {"command": command, "seed": seed, "config": cfg})


def _dims(cfg: dict, vocab_size: int) -> ModelDims:
    return ModelDims(height=cfg["model.size"], width=cfg["model.size"],
                     channels=3, patch=cfg["model.patch"], d=cfg["model.d"],
                     d_y=cfg["model.d_y"], depth=cfg["model.depth"],
                     text_depth=cfg["model.text_depth"], vocab_size=vocab_size,
                     max_text_len=cfg["model.max_text_len"])


def _policy(cfg: dict) -> KnowledgePolicy:
    return KnowledgePolicy(
        w_a=cfg["policy.w_a"], w_l=cfg["policy.w_l"],
        p_know=cfg["policy.p_know"], p_cap=cfg["policy.p_cap"],
        insert_tokens=cfg["policy.insert_tokens"],
        scale_attention=cfg["policy.scale_attention"],
        weight_loss=cfg["policy.weight_loss"],
        append_labels=cfg["policy.append_labels"],
        attention_mode=cfg["policy.attention_mode"])


def _train_config(cfg: dict, seed: int, dims: ModelDims,
                  n_experts: int | None = None,
                  policy: KnowledgePolicy | None = None) -> TrainConfig:
    return TrainConfig(
        T=cfg["schedule.T"], beta_start=cfg["schedule.beta_start"],
        beta_end=cfg["schedule.beta_end"],
        n_experts=cfg["experts.n"] if n_experts is None else n_experts,
        steps=cfg["train.steps"], warm_steps=cfg["train.warm_steps"],
        batch_size=cfg["train.batch_size"], lr=cfg["train.lr"],
        beta1=cfg["train.beta1"], beta2=cfg["train.beta2"],
        weight_decay=cfg["train.weight_decay"], p_uncond=cfg["train.p_uncond"],
        seed=seed, log_every=cfg["train.log_every"],
        checkpoint_every=cfg["train.checkpoint_every"],
        storage=cfg["train.storage"], dims=dims,
        policy=_policy(cfg) if policy is None else policy)


def _load_bank(path):
    ck = load_checkpoint(path)
    sched = build_linear(ck.bank.T, ck.beta_start, ck.beta_end)
    vocab = Vocabulary(ck.vocab_words) if ck.vocab_words else None
    return ck.bank, sched, vocab


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _check_steps(steps: int) -> int:
    if steps < 1:
        raise ConfigError(f"sample.steps must be >= 1, got {steps}")
    return steps


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = cfgmod.resolve(args.config, args.overrides)
    out = _make_run_dir("gen-data", args.seed, args.out)
    samples, vocab = generate_dataset(
        cfg["data.count"], seed=args.seed, size=cfg["model.size"],
        max_objects=cfg["data.max_objects"], p_omit=cfg["data.p_omit"])
    save_dataset(out, samples, vocab)
    _snapshot(out, "gen-data", args.seed, cfg)
    _finish_run(out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = cfgmod.resolve(args.config, args.overrides)
    samples, vocab = load_dataset(args.data)
    out = _make_run_dir("train", args.seed, args.out)
    tc = _train_config(cfg, args.seed, _dims(cfg, len(vocab)))
    _snapshot(out, "train", args.seed, cfg)
    result = train(tc, samples, vocab_words=vocab.words, out_dir=out,
                   resume_from=args.resume)
    _finish_run(out)
    print(f"trained {result.final_step} steps, final loss "
          f"{result.losses[-1]:.6f}, checkpoint at {result.checkpoint_path}")
    return 0


def cmd_sample(args) -> int:
    cfg = cfgmod.resolve(args.config, args.overrides)
    bank, sched, vocab = _load_bank(args.checkpoint)
    cond = None
    if args.prompt:
        if vocab is None:
            raise ConfigError("checkpoint carries no vocabulary; "
                              "cannot tokenize a prompt")
        cond = tokenize(vocab, args.prompt.split())
    steps = _check_steps(cfg["sample.steps"])
    out = _make_run_dir("sample", args.seed, args.out)
    _snapshot(out, "sample", args.seed, cfg)
    guidance = cfg["sample.guidance"] if cond is not None else None
    records = []
    for i in range(cfg["sample.count"]):
        res = sample(bank, sched, method=cfg["sample.method"],
                     steps=steps, cond=cond,
                     guidance_scale=guidance, seed=args.seed, index=i)
        name = f"sample-{i:03d}.ppm"
        write_ppm(os.path.join(out, name), res.image)
        records.append({"file": name, "evals_cond": res.evals_cond,
                        "evals_uncond": res.evals_uncond,
                        "expert_evals_cond": res.expert_evals_cond.tolist(),
                        "expert_evals_uncond": res.expert_evals_uncond.tolist()})
    write_json(os.path.join(out, "samples.json"),
               {"prompt": args.prompt, "guidance": guidance,
                "method": cfg["sample.method"], "steps": steps,
                "seed": args.seed,
                "checkpoint_sha256": _sha256(args.checkpoint),
                "samples": records})
    _finish_run(out)
    print(f"wrote {len(records)} samples to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = cfgmod.resolve(args.config, args.overrides)
    bank, sched, vocab = _load_bank(args.checkpoint)
    if vocab is None:
        raise ConfigError("checkpoint carries no vocabulary; cannot evaluate")
    steps = _check_steps(cfg["eval.steps"])
    out = _make_run_dir("eval", args.seed, args.out)
    _snapshot(out, "eval", args.seed, cfg)
    report = evaluate(bank, sched, vocab, count=cfg["eval.count"],
                      steps=steps,
                      guidance_scale=cfg["sample.guidance"], seed=args.seed,
                      max_objects=cfg["data.max_objects"],
                      min_objects=cfg["eval.min_objects"],
                      method=cfg["sample.method"])
    with open(os.path.join(out, "eval.jsonl"), "w", encoding="utf-8") as fh:
        for row in report.rows:
            write_jsonl_line(fh, row)
    write_json(os.path.join(out, "eval.json"),
               {"fid": report.fid, "binding": report.binding,
                "count": report.count, "guidance": report.guidance_scale,
                "steps": report.steps, "seed": args.seed,
                "checkpoint_sha256": _sha256(args.checkpoint)})
    _finish_run(out)
    print(f"fid {report.fid:.6f}  binding {report.binding:.4f}")
    return 0


def _sweep_scales(args, cfg, out) -> list[list]:
    bank, sched, vocab = _load_bank(args.checkpoint)
    if vocab is None:
        raise ConfigError("checkpoint carries no vocabulary; cannot evaluate")
    scales = _float_list(args.scales)
    points = pareto_sweep(bank, sched, vocab, scales,
                          count=cfg["eval.count"],
                          steps=_check_steps(cfg["eval.steps"]),
                          seed=args.seed,
                          max_objects=cfg["data.max_objects"],
                          min_objects=cfg["eval.min_objects"],
                          method=cfg["sample.method"])
    return [["scale", "fid", "binding"]] + [
        [float(s), fid, binding] for s, fid, binding in points]


def _sweep_experts(args, cfg, out) -> list[list]:
    samples, vocab = load_dataset(args.data)
    rows = [["n_experts", "fid", "binding", "final_loss"]]
    for n in _int_list(args.experts):
        tc = _train_config(cfg, args.seed, _dims(cfg, len(vocab)), n_experts=n)
        result = train(tc, samples, vocab_words=vocab.words,
                       out_dir=os.path.join(out, f"n{n}"))
        report = evaluate(result.bank, result.sched, vocab,
                          count=cfg["eval.count"], steps=cfg["eval.steps"],
                          guidance_scale=cfg["sample.guidance"], seed=args.seed,
                          max_objects=cfg["data.max_objects"],
                          min_objects=cfg["eval.min_objects"],
                          method=cfg["sample.method"])
        rows.append([n, report.fid, report.binding, result.losses[-1]])
    return rows


def _sweep_knowledge(args, cfg, out) -> list[list]:
    samples, vocab = load_dataset(args.data)
    rows = [["seed", "knowledge", "fid", "binding", "final_loss"]]
    for seed in _int_list(args.seeds):
        for enabled in (0, 1):
            policy = _policy(cfg)
            if not enabled:
                policy = KnowledgePolicy(
                    w_a=0.0, w_l=0.0, p_know=0.0, p_cap=policy.p_cap,
                    insert_tokens=False, scale_attention=False,
                    weight_loss=False, append_labels=policy.append_labels,
                    attention_mode=policy.attention_mode)
            tc = _train_config(cfg, seed, _dims(cfg, len(vocab)), policy=policy)
            result = train(tc, samples, vocab_words=vocab.words,
                           out_dir=os.path.join(out, f"seed{seed}-k{enabled}"))
            report = evaluate(result.bank, result.sched, vocab,
                              count=cfg["eval.count"], steps=cfg["eval.steps"],
                              guidance_scale=cfg["sample.guidance"], seed=seed,
                              max_objects=2, min_objects=2,
                              method=cfg["sample.method"])
            rows.append([seed, enabled, report.fid, report.binding,
                         result.losses[-1]])
    return rows


def cmd_sweep(args) -> int:
    cfg = cfgmod.resolve(args.config, args.overrides)
    out = _make_run_dir(f"sweep-{args.mode}", args.seed, args.out)
    _snapshot(out, f"sweep-{args.mode}", args.seed, cfg)
    if args.mode == "scales":
        if not args.checkpoint:
            raise ConfigError("sweep --mode scales needs --checkpoint")
        rows = _sweep_scales(args, cfg, out)
    elif args.mode == "experts":
        if not args.data:
            raise ConfigError("sweep --mode experts needs --data")
        rows = _sweep_experts(args, cfg, out)
    elif args.mode == "knowledge":
        if not args.data:
            raise ConfigError("sweep --mode knowledge needs --data")
        rows = _sweep_knowledge(args, cfg, out)
    else:
        raise ConfigError(f"unknown sweep mode {args.mode!r}")
    write_csv(os.path.join(out, "sweep.csv"), rows[0], rows[1:])
    _finish_run(out)
    print(f"wrote {len(rows) - 1} rows to {os.path.join(out, 'sweep.csv')}")
    return 0


def cmd_inspect_attn(args) -> int:
    cfg = cfgmod.resolve(args.config, args.overrides)
    bank, sched, vocab = _load_bank(args.checkpoint)
    if vocab is None:
        raise ConfigError("checkpoint carries no vocabulary; "
                          "cannot tokenize a prompt")
    if not args.prompt:
        raise ConfigError("inspect-attn needs --prompt")
    cond = tokenize(vocab, args.prompt.split())
    steps = _check_steps(cfg["sample.steps"])
    out = _make_run_dir("inspect-attn", args.seed, args.out)
    _snapshot(out, "inspect-attn", args.seed, cfg)
    res = sample(bank, sched, method=cfg["sample.method"],
                 steps=steps, cond=cond,
                 guidance_scale=cfg["sample.guidance"], seed=args.seed,
                 capture=True)
    series = entropy_series(res, bank.dims)
    rows = [[i, t, float(h)] for i, (t, h) in enumerate(series)]
    write_csv(os.path.join(out, "entropy.csv"), ["index", "step", "entropy"],
              rows)
    for i, (t, amap) in enumerate(capture_attention(res, bank.dims)):
        stem = os.path.join(out, f"attn-{i:03d}-t{t:04d}")
        write_pgm(stem + ".pgm", amap)
        write_csv(stem + ".csv", [f"c{j}" for j in range(amap.shape[1])],
                  [[float(v) for v in row] for row in amap])
    tail = max(1, len(series) // 10)
    first = float(np.mean([h for _, h in series[:tail]]))
    last = float(np.mean([h for _, h in series[-tail:]]))
    write_json(os.path.join(out, "summary.json"),
               {"evals": len(series), "first_decile_mean_entropy": first,
                "last_decile_mean_entropy": last,
                "concentrates": last < first, "seed": args.seed,
                "checkpoint_sha256": _sha256(args.checkpoint)})
    _finish_run(out)
    print(f"entropy first decile {first:.4f}, last decile {last:.4f}")
    return 0


def cmd_check_grad(args) -> int:
    cfg = cfgmod.resolve(args.config, args.overrides)
    rng_seed = args.seed
    samples, vocab = generate_dataset(4, seed=rng_seed, size=8)
    dims = ModelDims(height=8, width=8, channels=3, patch=4, d=8, d_y=6,
                     depth=1, text_depth=1, vocab_size=len(vocab),
                     max_text_len=cfg["model.max_text_len"])
    from .experts import init_bank
    bank = init_bank(dims, 2, 10, rng_seed)
    sched = build_linear(10, cfg["schedule.beta_start"], cfg["schedule.beta_end"])
    graph = training_loss_graph(bank, sched, samples[:2], _policy(cfg),
                                seed=rng_seed, step=0)
    report = finite_difference_check(graph, h=args.h, tolerance=args.tolerance)
    print(report.summary())
    if not report.passed:
        raise InternalNumericError(
            f"gradient check failed: max relative error "
            f"{report.max_relative_error:.3e} > {args.tolerance:.1e}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _add_common(sp) -> None:
    sp.add_argument("--config", help="key=value config file")
    sp.add_argument("--set", action="append", dest="overrides", default=[],
                    metavar="KEY=VALUE", help="override one config key")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="run directory (default: auto-named)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deskdiff",
        description="text-conditioned diffusion on a synthetic shapes corpus")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset")
    _add_common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model on a dataset")
    _add_common(sp)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="draw images from a checkpoint")
    _add_common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prompt", help="caption words, space separated")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("eval", help="score a checkpoint on fixed scenes")
    _add_common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="scan guidance scales, expert counts, "
                                      "or the knowledge policy")
    _add_common(sp)
    sp.add_argument("--mode", required=True,
                    choices=("scales", "experts", "knowledge"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--scales", default="2,3,4,5,6,7,8,9")
    sp.add_argument("--experts", default="1,2,5")
    sp.add_argument("--seeds", default="0,1,2")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("inspect-attn", help="dump attention maps and their "
                                             "entropy along a sampling run")
    _add_common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prompt")
    sp.set_defaults(func=cmd_inspect_attn)

    sp = sub.add_parser("check-grad", help="finite-difference audit of a "
                                           "small training loss graph")
    _add_common(sp)
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--tolerance", type=float, default=1e-5)
    sp.set_defaults(func=cmd_check_grad)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DeskdiffError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
