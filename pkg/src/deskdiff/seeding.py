"""Deterministic RNG stream derivation.

Every random draw in the engine comes from a generator derived from
(seed, stream, *indices).  Nothing holds a long-lived generator whose state
depends on call order, which is what makes checkpoint-resume runs and
parallel data loading bit-reproducible: the draw for (step, item) is the
same no matter who asks for it or when.
"""

import numpy as np

# Stream ids.  Keep these stable: they are part of the reproducibility
# contract baked into checkpoints and metrics.
STREAM_INIT = 0     # parameter initialization
STREAM_DATA = 1     # batch index selection
STREAM_AUGMENT = 2  # knowledge-policy coin flips
STREAM_NOISE = 3    # per-item t, eps, cond-dropout draws
STREAM_SAMPLE = 4   # sampler init noise and ancestral noise
STREAM_EVAL = 5     # evaluation prompts / per-index sample seeds
STREAM_GEN = 6      # synthetic scene generation, keyed per dataset index


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Return a fresh PCG64 generator for (seed, *key)."""
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in key]])
    return np.random.Generator(np.random.PCG64(ss))
