"""Denoising experts assigned to contiguous timestep blocks.

With n experts over T steps, step t belongs to expert ceil(t*n/T); the
blocks tile 1..T exactly, expert 1 taking the low-noise end.  All experts
share one text encoder.  Routing is a lookup, never a learned gate.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .conditioning import TextEncoderParams, init_text_encoder
from .denoiser import DenoiserParams, ModelDims, init_denoiser
from .errors import InvalidExpertCountError, StepOutOfRangeError
from .seeding import STREAM_INIT, derive_rng


def expert_index(t: int, T: int, n: int) -> int:
    """1-based expert owning step t."""
    if not 1 <= t <= T:
        raise StepOutOfRangeError(f"t={t} outside 1..{T}")
    return math.ceil(t * n / T)


def partition_timesteps(T: int, n: int) -> list[tuple[int, int]]:
    """Inclusive (start, end) step block per expert; index i is expert i+1."""
    if n < 1 or n > T:
        raise InvalidExpertCountError(f"need 1 <= n <= T, got n={n}, T={T}")
    owner = [expert_index(t, T, n) for t in range(1, T + 1)]
    blocks = []
    start = 1
    for i in range(1, n + 1):
        end = start
        while end <= T and owner[end - 1] == i:
            end += 1
        blocks.append((start, end - 1))
        start = end
    return blocks


@dataclass
class ExpertBank:
    dims: ModelDims
    n: int
    T: int
    experts: list[DenoiserParams]
    text_encoder: TextEncoderParams

    def select(self, t: int) -> DenoiserParams:
        return self.experts[expert_index(t, self.T, self.n) - 1]

    def expert_for(self, t: int) -> int:
        return expert_index(t, self.T, self.n)

    @property
    def partition(self) -> list[tuple[int, int]]:
        return partition_timesteps(self.T, self.n)


def route(bank: "ExpertBank", t: int) -> int:
    """1-based expert index owning step t."""
    return bank.expert_for(t)


def init_bank(dims: ModelDims, n: int, T: int, seed: int,
              warm_start: DenoiserParams | None = None,
              text_encoder: TextEncoderParams | None = None) -> ExpertBank:
    """Fresh bank of n experts plus the shared text encoder.

    With warm_start every expert begins as a deep copy of the given single
    model (pass its text encoder too so both halves carry over); otherwise
    each expert draws its own init stream.
    """
    if n < 1 or n > T:
        raise InvalidExpertCountError(f"need 1 <= n <= T, got n={n}, T={T}")
    if warm_start is not None and warm_start.dims != dims:
        raise InvalidExpertCountError("warm-start model dims do not match bank dims")
    experts = []
    for i in range(n):
        if warm_start is not None:
            experts.append(copy.deepcopy(warm_start))
        else:
            experts.append(init_denoiser(dims, derive_rng(seed, STREAM_INIT, i)))
    if text_encoder is not None:
        text_encoder = copy.deepcopy(text_encoder)
    else:
        text_encoder = init_text_encoder(
            dims.vocab_size, dims.d_y, dims.max_text_len, dims.text_depth,
            rng=derive_rng(seed, STREAM_INIT, n))
    return ExpertBank(dims=dims, n=n, T=T, experts=experts, text_encoder=text_encoder)


def expert_histogram(bank: ExpertBank, steps: list[int]) -> np.ndarray:
    """Counts of evaluated steps per expert, length bank.n."""
    hist = np.zeros(bank.n, dtype=np.int64)
    for t in steps:
        hist[bank.expert_for(t) - 1] += 1
    return hist
