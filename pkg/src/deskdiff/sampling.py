"""Reverse-process sampling: ancestral and deterministic-grid variants.

The low-level loops take a bare eps_fn(x, t) callable so tests can plant
exact noise predictors.  The high-level entry point wires in the expert
bank, classifier-free guidance (two branches per step whenever a scale is
given), and optional attention capture on the conditional branch.  The
knowledge attention upweight is a training-time device and is never applied
here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conditioning import ConditioningInput, encode_text
from .denoiser import AttentionCapture, ModelDims, predict_noise
from .errors import (
    CaptureDisabledError,
    ConfigError,
    DataError,
    InvalidRangeError,
    ShapeMismatchError,
    StepOrderError,
    StepsExceedTError,
)
from .experts import ExpertBank
from .schedule import NoiseSchedule, ddim_step, ddpm_step, predict_x0
from .seeding import STREAM_SAMPLE, derive_rng

Array = np.ndarray


def cfg_combine(eps_cond: Array, eps_uncond: Array, scale: float) -> Array:
    """Guided prediction e_u + s*(e_c - e_u); s of exactly 1 or 0 returns
    the corresponding branch untouched."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeMismatchError(
            f"branch shapes differ: {eps_cond.shape} vs {eps_uncond.shape}")
    if scale == 1.0:
        return np.array(eps_cond, copy=True)
    if scale == 0.0:
        return np.array(eps_uncond, copy=True)
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_grid(T: int, steps: int) -> list[int]:
    """Evaluation steps T = t_0 > t_1 > ... > t_steps = 0, evenly spaced
    up to rounding."""
    if steps < 1:
        raise InvalidRangeError(f"steps must be >= 1, got {steps}")
    if steps > T:
        raise StepsExceedTError(f"{steps} sampling steps exceed T={T}")
    grid = [int(round(T * (1.0 - k / steps))) for k in range(steps + 1)]
    for a, b in zip(grid, grid[1:]):
        if b >= a:
            raise StepOrderError(f"grid not strictly decreasing at {a} -> {b}")
    return grid


def ddpm_trajectory(sched: NoiseSchedule, x_start: Array, eps_fn,
                    rng: np.random.Generator, keep: bool = False):
    """Full ancestral chain from t=T down to 0; the final step adds no noise.

    Returns (final, x_t snapshots, predicted-x0 snapshots); the snapshot
    lists are None unless keep is set.
    """
    x = np.array(x_start, dtype=np.float64)
    xs = [x.copy()] if keep else None
    x0s = [] if keep else None
    for t in range(sched.T, 0, -1):
        eps_hat = eps_fn(x, t)
        x0_hat = predict_x0(sched, x, t, eps_hat)
        noise = rng.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
        x = ddpm_step(sched, x, t, x0_hat, noise)
        if keep:
            xs.append(x.copy())
            x0s.append(x0_hat)
    return x, xs, x0s


def ddim_trajectory(sched: NoiseSchedule, x_start: Array, eps_fn,
                    steps: int, keep: bool = False):
    """Deterministic reverse walk along the rounded step grid."""
    x = np.array(x_start, dtype=np.float64)
    xs = [x.copy()] if keep else None
    x0s = [] if keep else None
    grid = ddim_grid(sched.T, steps)
    for t, t_prev in zip(grid, grid[1:]):
        eps_hat = eps_fn(x, t)
        if keep:
            x0s.append(predict_x0(sched, x, t, eps_hat))
        x = ddim_step(sched, x, t, t_prev, eps_hat)
        if keep:
            xs.append(x.copy())
    return x, xs, x0s


@dataclass
class SampleResult:
    image: Array
    grid: list[int]
    evals_cond: int = 0
    evals_uncond: int = 0
    expert_evals_cond: Array = field(default_factory=lambda: np.zeros(0, np.int64))
    expert_evals_uncond: Array = field(default_factory=lambda: np.zeros(0, np.int64))
    trajectory: list[Array] | None = None
    x0_predictions: list[Array] | None = None
    captures: list[AttentionCapture] | None = None
    capture_steps: list[int] | None = None


def sample(bank: ExpertBank, sched: NoiseSchedule, *, method: str = "ddim",
           steps: int = 50, cond: ConditioningInput | None = None,
           guidance_scale: float | None = None, seed: int = 0, index: int = 0,
           keep_trajectory: bool = False, capture: bool = False) -> SampleResult:
    """Draw one image.  `index` separates parallel samples under one seed.

    With `cond` and a guidance scale the model runs once per branch per
    step; with `cond` alone it runs conditioned only.  `capture` records
    the conditional branch's attention at every evaluation.
    """
    if bank.T != sched.T:
        raise ConfigError(f"bank T={bank.T} but schedule T={sched.T}")
    dims = bank.dims
    rng = derive_rng(seed, STREAM_SAMPLE, index)
    x = rng.standard_normal((dims.height, dims.width, dims.channels))

    text = None
    if cond is not None and cond.n_y > 0:
        text = encode_text(cond, bank.text_encoder).data
    if capture and text is None:
        raise CaptureDisabledError("attention capture needs a conditioning prompt")

    result = SampleResult(image=x, grid=[],
                          expert_evals_cond=np.zeros(bank.n, np.int64),
                          expert_evals_uncond=np.zeros(bank.n, np.int64),
                          captures=[] if capture else None,
                          capture_steps=[] if capture else None)

    def eval_branch(xv, t, branch_text, conditional):
        cap = AttentionCapture() if (capture and conditional) else None
        eps = predict_noise(bank.select(t), xv, t, text=branch_text, capture=cap)
        if conditional:
            result.evals_cond += 1
            result.expert_evals_cond[bank.expert_for(t) - 1] += 1
            if cap is not None:
                result.captures.append(cap)
                result.capture_steps.append(t)
        else:
            result.evals_uncond += 1
            result.expert_evals_uncond[bank.expert_for(t) - 1] += 1
        return eps.data

    if text is None:
        def eps_fn(xv, t):
            return eval_branch(xv, t, None, False)
    elif guidance_scale is None:
        def eps_fn(xv, t):
            return eval_branch(xv, t, text, True)
    else:
        def eps_fn(xv, t):
            eps_u = eval_branch(xv, t, None, False)
            eps_c = eval_branch(xv, t, text, True)
            return cfg_combine(eps_c, eps_u, guidance_scale)

    if method == "ddim":
        result.grid = ddim_grid(sched.T, steps)
        final, xs, x0s = ddim_trajectory(sched, x, eps_fn, steps,
                                         keep=keep_trajectory)
    elif method == "ddpm":
        result.grid = list(range(sched.T, -1, -1))
        final, xs, x0s = ddpm_trajectory(sched, x, eps_fn, rng,
                                         keep=keep_trajectory)
    else:
        raise ConfigError(f"unknown sampling method {method!r}")
    result.image = final
    result.trajectory = xs
    result.x0_predictions = x0s
    return result


def sample_ddpm(bank: ExpertBank, sched: NoiseSchedule,
                cond: ConditioningInput | None = None,
                guidance_scale: float | None = None, seed: int = 0,
                capture: bool = False, **kwargs) -> SampleResult:
    return sample(bank, sched, method="ddpm", cond=cond,
                  guidance_scale=guidance_scale, seed=seed, capture=capture,
                  **kwargs)


def sample_ddim(bank: ExpertBank, sched: NoiseSchedule,
                cond: ConditioningInput | None = None,
                guidance_scale: float | None = None, steps: int = 50,
                seed: int = 0, capture: bool = False, **kwargs) -> SampleResult:
    return sample(bank, sched, method="ddim", steps=steps, cond=cond,
                  guidance_scale=guidance_scale, seed=seed, capture=capture,
                  **kwargs)


# ---------------------------------------------------------------------------
# attention inspection
# ---------------------------------------------------------------------------

def attention_map(cap: AttentionCapture, dims: ModelDims) -> Array:
    """Per-patch text attention averaged over blocks, shape (n_h, n_w)."""
    if not cap.matrices:
        raise CaptureDisabledError("capture holds no attention matrices")
    if not cap.n_y:
        raise DataError("captured pass had no text columns")
    acc = np.zeros(cap.n_x, dtype=np.float64)
    for mat in cap.matrices:
        acc += mat[:, cap.n_x:].mean(axis=1)
    acc /= len(cap.matrices)
    return acc.reshape(dims.n_h, dims.n_w)


def spatial_entropy(map2d: Array) -> float:
    """Shannon entropy in nats of the map normalized to a distribution."""
    flat = np.asarray(map2d, dtype=np.float64).ravel()
    total = flat.sum()
    p = flat / total
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def capture_attention(result: SampleResult, dims: ModelDims):
    """(step, per-patch map) for every captured evaluation, in order."""
    if result.captures is None or not result.captures:
        raise CaptureDisabledError("sample was drawn without attention capture")
    return [(t, attention_map(cap, dims))
            for t, cap in zip(result.capture_steps, result.captures)]


def entropy_series(result: SampleResult, dims: ModelDims):
    """(step, entropy) per captured evaluation, in evaluation order."""
    return [(t, spatial_entropy(m)) for t, m in capture_attention(result, dims)]
