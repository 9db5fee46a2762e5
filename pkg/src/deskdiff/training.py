"""Noise-prediction training: loss graphs, AdamW, and the run loop.

Every random draw is derived from (seed, stream, step, item), never from a
shared mutable generator.  That makes training order-independent across
restarts: resuming from a checkpoint at step k replays exactly the draws an
uninterrupted run would have made.  Augmentation coins live on their own
stream so switching knowledge policies on or off cannot shift the noise
draws of other samples.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .conditioning import (
    KnowledgePolicy,
    augment_sample,
    build_attention_scale,
    build_loss_weight,
    encode_text,
)
from .denoiser import ModelDims, predict_noise
from .errors import ConfigError, EmptyBatchError
from .experts import ExpertBank, init_bank
from .schedule import NoiseSchedule, build_linear, q_sample
from .seeding import STREAM_AUGMENT, STREAM_DATA, STREAM_NOISE, derive_rng
from .trees import flatten_tree, tree_like


@dataclass
class TrainConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    n_experts: int = 1
    steps: int = 1000
    warm_steps: int = 0
    batch_size: int = 8
    lr: float = 0.9e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    p_uncond: float = 0.1
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0      # 0 means final checkpoint only
    storage: str = "f64"
    dims: ModelDims = field(default_factory=ModelDims)
    policy: KnowledgePolicy = field(default_factory=KnowledgePolicy)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ConfigError(f"p_uncond must be in [0, 1], got {self.p_uncond}")
        if self.n_experts == 1:
            # A single expert has nothing to warm into; fold the warm budget
            # into the main phase so total step counts stay comparable.
            self.steps += self.warm_steps
            self.warm_steps = 0


def bank_flat_params(bank: ExpertBank) -> dict:
    return flatten_tree({"experts": [e.weights for e in bank.experts],
                         "text": bank.text_encoder.weights})


@dataclass
class _Prepared:
    """Everything random about one batch item, drawn up front."""

    sample: object
    t: int
    eps: np.ndarray
    x_t: np.ndarray
    uncond: bool
    expert: int
    scale: object
    weight_map: np.ndarray | None


def _prepare_item(bank: ExpertBank, sched: NoiseSchedule, sample,
                  policy: KnowledgePolicy, p_uncond: float,
                  seed: int, step: int) -> _Prepared:
    # Draws key on the sample's dataset index, so neither batch order nor
    # who loads the item can change what it contributes.
    rng = derive_rng(seed, STREAM_NOISE, step, sample.index)
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.standard_normal(sample.image.shape)
    uncond = bool(rng.random() < p_uncond)

    arng = derive_rng(seed, STREAM_AUGMENT, step, sample.index)
    sample = augment_sample(sample, policy, arng)
    cond = sample.conditioning
    applied = cond.augmentation_applied

    scale = None
    if not uncond and applied["attention_scaled"]:
        scale = build_attention_scale(bank.dims.n_x, cond.keyword_flags,
                                      policy.w_a, mode=policy.attention_mode)
    weight_map = None
    if applied["loss_weighted"] and cond.region_masks:
        h, w = sample.image.shape[:2]
        weight_map = build_loss_weight(cond.region_masks, policy.w_l, h, w).matrix

    return _Prepared(sample=sample, t=t, eps=eps,
                     x_t=q_sample(sched, sample.image, t, eps),
                     uncond=uncond, expert=bank.expert_for(t) - 1,
                     scale=scale, weight_map=weight_map)


def training_loss_graph(bank: ExpertBank, sched: NoiseSchedule, batch: list,
                        policy: KnowledgePolicy, *, seed: int, step: int,
                        p_uncond: float = 0.1) -> ad.Graph:
    """Scalar loss over one batch as a differentiable graph.

    All randomness (timesteps, noise, conditioning dropout, augmentation
    coins) is drawn here and frozen into the graph, so repeated forward
    passes are pure functions of the leaf parameters.  Items are summed in
    dataset-index order, which together with index-keyed draws makes the
    loss bitwise invariant to batch-item order.  The prepared per-item
    records stay reachable on the returned graph as `.prepared`.
    """
    if not batch:
        raise EmptyBatchError("training batch is empty")
    prepared = [_prepare_item(bank, sched, s, policy, p_uncond, seed, step)
                for s in batch]
    prepared.sort(key=lambda p: p.sample.index)

    def build(leaves: dict[str, ad.Tensor], rng) -> ad.Tensor:
        text_tree = tree_like(bank.text_encoder.weights, leaves, "text.")
        total = None
        for prep in prepared:
            expert_tree = tree_like(bank.experts[prep.expert].weights, leaves,
                                    f"experts.{prep.expert}.")
            text = None
            if not prep.uncond and prep.sample.conditioning.n_y > 0:
                text = encode_text(prep.sample.conditioning, bank.text_encoder,
                                   weights=text_tree)
            eps_hat = predict_noise(bank.experts[prep.expert], prep.x_t, prep.t,
                                    text=text, scale=prep.scale,
                                    weights=expert_tree)
            sq = ad.square(eps_hat - ad.as_tensor(prep.eps))
            if prep.weight_map is not None:
                sq = sq * ad.as_tensor(prep.weight_map[:, :, None])
            item_loss = ad.reduce_mean(sq)
            total = item_loss if total is None else total + item_loss
        return ad.scalar_scale(total, 1.0 / len(prepared))

    graph = ad.Graph(leaves=bank_flat_params(bank), build=build, seed=seed)
    graph.prepared = prepared
    return graph


def training_loss(bank: ExpertBank, sched: NoiseSchedule, batch: list,
                  policy: KnowledgePolicy, *, seed: int, step: int,
                  p_uncond: float = 0.1):
    """Loss value and parameter gradients for one batch."""
    graph = training_loss_graph(bank, sched, batch, policy,
                                seed=seed, step=step, p_uncond=p_uncond)
    value = ad.forward_eval(graph).item()
    grads = ad.backward(graph)
    return value, grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def init_opt_state(flat_params: dict) -> dict:
    return {"step": 0,
            "m": {k: np.zeros_like(v) for k, v in flat_params.items()},
            "v": {k: np.zeros_like(v) for k, v in flat_params.items()}}


def adamw_step(flat_params: dict, grads: dict, state: dict, *, lr: float,
               beta1: float = 0.9, beta2: float = 0.999,
               weight_decay: float = 0.01, eps: float = 1e-8) -> None:
    """One decoupled-decay Adam update, applied to the arrays in place."""
    state["step"] += 1
    k = state["step"]
    bc1 = 1.0 - beta1 ** k
    bc2 = 1.0 - beta2 ** k
    for name in sorted(flat_params):
        p = flat_params[name]
        g = grads[name]
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + eps) + weight_decay * p)


# ---------------------------------------------------------------------------
# run loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    bank: ExpertBank
    sched: NoiseSchedule
    losses: list[float]
    config: TrainConfig
    final_step: int
    checkpoint_path: str | None = None
    metrics_path: str | None = None


def _draw_batch(dataset: list, batch_size: int, seed: int, step: int) -> list:
    rng = derive_rng(seed, STREAM_DATA, step)
    idx = rng.integers(0, len(dataset), size=batch_size)
    return [dataset[int(i)] for i in idx]


def _save(path, bank, cfg: TrainConfig, step: int, phase: str, opt, vocab_words):
    save_checkpoint(path, bank, step=step, beta_start=cfg.beta_start,
                    beta_end=cfg.beta_end, phase=phase, opt_state=opt,
                    vocab_words=vocab_words, storage=cfg.storage,
                    extra={"w_a": cfg.policy.w_a, "w_l": cfg.policy.w_l,
                           "train_seed": cfg.seed,
                           "partition": [list(b) for b in bank.partition]})


def train(cfg: TrainConfig, dataset: list, vocab_words: list[str] | None = None,
          out_dir=None, resume_from=None) -> TrainResult:
    """Run the full schedule: optional single-model warm phase, then experts.

    Global steps 0..warm_steps-1 train one shared model; at the boundary
    every expert is cloned from it and the optimizer restarts.  Stream
    derivation keys on the global step, so a resumed run retraces the
    original draw for draw.
    """
    if not dataset:
        raise EmptyBatchError("dataset is empty")
    sched = build_linear(cfg.T, cfg.beta_start, cfg.beta_end)
    total_steps = cfg.warm_steps + cfg.steps

    start = 0
    phase = "warm" if cfg.warm_steps > 0 else "experts"
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck.bank.T != cfg.T or ck.bank.dims != cfg.dims:
            raise ConfigError("checkpoint does not match the training config")
        bank = ck.bank
        start = ck.step
        phase = ck.phase
        opt = ck.opt_state if ck.opt_state is not None else init_opt_state(
            bank_flat_params(bank))
        if vocab_words is None:
            vocab_words = ck.vocab_words
    elif phase == "warm":
        bank = init_bank(cfg.dims, 1, cfg.T, cfg.seed)
        opt = init_opt_state(bank_flat_params(bank))
    else:
        bank = init_bank(cfg.dims, cfg.n_experts, cfg.T, cfg.seed)
        opt = init_opt_state(bank_flat_params(bank))

    metrics_path = None
    metrics_fh = None
    ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        metrics_fh = open(metrics_path, "a")
        ckpt_path = os.path.join(out_dir, "checkpoint.bin")

    losses: list[float] = []
    try:
        for step in range(start, total_steps):
            if phase == "warm" and step >= cfg.warm_steps:
                bank = init_bank(cfg.dims, cfg.n_experts, cfg.T, cfg.seed,
                                 warm_start=bank.experts[0],
                                 text_encoder=bank.text_encoder)
                opt = init_opt_state(bank_flat_params(bank))
                phase = "experts"

            t0 = time.perf_counter()
            batch = _draw_batch(dataset, cfg.batch_size, cfg.seed, step)
            graph = training_loss_graph(bank, sched, batch, cfg.policy,
                                        seed=cfg.seed, step=step,
                                        p_uncond=cfg.p_uncond)
            loss = ad.forward_eval(graph).item()
            grads = ad.backward(graph)
            flat = bank_flat_params(bank)
            adamw_step(flat, grads, opt, lr=cfg.lr, beta1=cfg.beta1,
                       beta2=cfg.beta2, weight_decay=cfg.weight_decay)
            losses.append(loss)

            if metrics_fh is not None and (
                    (step + 1) % cfg.log_every == 0 or step + 1 == total_steps):
                counts = [0] * bank.n
                for prep in graph.prepared:
                    counts[prep.expert] += 1
                record = {"step": step + 1, "phase": phase, "loss": loss,
                          "expert_counts": counts,
                          "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
                metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
                metrics_fh.flush()
            if ckpt_path is not None and cfg.checkpoint_every > 0 and (
                    (step + 1) % cfg.checkpoint_every == 0):
                _save(ckpt_path, bank, cfg, step + 1, phase, opt, vocab_words)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if ckpt_path is not None:
        _save(ckpt_path, bank, cfg, total_steps, phase, opt, vocab_words)

    return TrainResult(bank=bank, sched=sched, losses=losses, config=cfg,
                       final_step=total_steps, checkpoint_path=ckpt_path,
                       metrics_path=metrics_path)
