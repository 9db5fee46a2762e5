"""Single-model DDPM reference, written straight-line for the equivalence tests.

No expert bank, no augmentation policy, no attention or loss weighting:
per-item draws, the forward-noising identity, a mean-squared noise loss,
and both reverse walks are spelled out here directly against the schedule
tables.  The engine with every knowledge feature switched off and one
expert must agree with this path bitwise.
"""

import numpy as np

from deskdiff import autodiff as ad
from deskdiff.conditioning import encode_text, tokenize
from deskdiff.denoiser import predict_noise
from deskdiff.seeding import STREAM_NOISE, STREAM_SAMPLE, derive_rng


def plain_loss(model, text_encoder, sched, batch, *, seed, step,
               p_uncond=0.1) -> float:
    items = []
    for sample in batch:
        rng = derive_rng(seed, STREAM_NOISE, step, sample.index)
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(sample.image.shape)
        uncond = bool(rng.random() < p_uncond)
        ab = sched.alpha_bar[t]
        x_t = np.sqrt(ab) * sample.image + np.sqrt(1.0 - ab) * eps
        items.append((sample, t, eps, x_t, uncond))
    items.sort(key=lambda it: it[0].index)

    total = None
    for sample, t, eps, x_t, uncond in items:
        text = None
        if not uncond and len(sample.caption) > 0:
            cond = tokenize(sample.vocab, list(sample.caption))
            text = encode_text(cond, text_encoder)
        eps_hat = predict_noise(model, x_t, t, text=text)
        item = ad.reduce_mean(ad.square(eps_hat - ad.as_tensor(eps)))
        total = item if total is None else total + item
    return ad.scalar_scale(total, 1.0 / len(items)).data.item()


def _eps_fn(model, text_encoder, words, vocab, guidance):
    text = None
    if words:
        text = encode_text(tokenize(vocab, list(words)), text_encoder).data

    def eps_fn(x, t):
        if text is None:
            return predict_noise(model, x, t).data
        if guidance is None:
            return predict_noise(model, x, t, text=text).data
        eps_u = predict_noise(model, x, t).data
        eps_c = predict_noise(model, x, t, text=text).data
        if guidance == 1.0:
            return np.array(eps_c, copy=True)
        if guidance == 0.0:
            return np.array(eps_u, copy=True)
        return eps_u + guidance * (eps_c - eps_u)

    return eps_fn


def plain_sample_ddim(model, text_encoder, sched, *, steps, words=None,
                      vocab=None, guidance=None, seed=0, index=0):
    dims = model.dims
    rng = derive_rng(seed, STREAM_SAMPLE, index)
    x = rng.standard_normal((dims.height, dims.width, dims.channels))
    eps_fn = _eps_fn(model, text_encoder, words, vocab, guidance)
    grid = [int(round(sched.T * (1.0 - k / steps))) for k in range(steps + 1)]
    for t, t_prev in zip(grid, grid[1:]):
        eps_hat = eps_fn(x, t)
        ab = sched.alpha_bar[t]
        x0_hat = (x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
        ab_prev = sched.alpha_bar[t_prev]
        x = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat
    return x


def plain_sample_ddpm(model, text_encoder, sched, *, words=None, vocab=None,
                      guidance=None, seed=0, index=0):
    dims = model.dims
    rng = derive_rng(seed, STREAM_SAMPLE, index)
    x = rng.standard_normal((dims.height, dims.width, dims.channels))
    eps_fn = _eps_fn(model, text_encoder, words, vocab, guidance)
    for t in range(sched.T, 0, -1):
        eps_hat = eps_fn(x, t)
        a = sched.alpha[t - 1]
        ab = sched.alpha_bar[t]
        ab_prev = sched.alpha_bar[t - 1]
        x0_hat = (x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
        noise = rng.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
        coef_xt = (1.0 - ab_prev) / (1.0 - ab) * np.sqrt(a)
        coef_x0 = (1.0 - a) / (1.0 - ab) * np.sqrt(ab_prev)
        coef_noise = np.sqrt((1.0 - ab_prev) * (1.0 - a) / (1.0 - ab))
        x = coef_xt * x + coef_x0 * x0_hat + coef_noise * noise
    return x
