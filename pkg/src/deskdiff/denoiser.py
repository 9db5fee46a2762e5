"""Noise-prediction network: patch tokens through joint-attention blocks.

Each block runs one attention in which image-patch queries attend over the
concatenation of image keys and text keys, so self- and cross-attention
happen in a single softmax.  An optional entrywise scale on the logits
carries the knowledge upweight.  The output head is zero-initialized, so a
fresh model predicts zero noise everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .conditioning import AttentionScale
from .errors import ConfigError, IndivisibleShapeError, ShapeMismatchError

Array = np.ndarray


@dataclass(frozen=True)
class ModelDims:
    height: int = 32
    width: int = 32
    channels: int = 3
    patch: int = 4
    d: int = 128
    d_y: int = 64
    depth: int = 4
    text_depth: int = 1
    vocab_size: int = 64
    max_text_len: int = 64

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise IndivisibleShapeError(
                f"patch {self.patch} does not divide {self.height}x{self.width}")

    @property
    def n_h(self) -> int:
        return self.height // self.patch

    @property
    def n_w(self) -> int:
        return self.width // self.patch

    @property
    def n_x(self) -> int:
        return self.n_h * self.n_w

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass
class DenoiserParams:
    dims: ModelDims
    weights: dict


# Attention and residual projections start at std 0.02 so a fresh model's
# softmax rows are close to uniform; the output head starts at zero so a
# fresh model predicts zero noise.
INIT_STD = 0.02


def init_denoiser(dims: ModelDims, rng: np.random.Generator) -> DenoiserParams:
    d, pd = dims.d, dims.patch_dim
    w = {
        "patch_w": (1.0 / math.sqrt(pd)) * rng.standard_normal((pd, d)),
        "patch_b": np.zeros(d),
        "pos": INIT_STD * rng.standard_normal((dims.n_x, d)),
        "time_w1": INIT_STD * rng.standard_normal((d, d)),
        "time_b1": np.zeros(d),
        "time_w2": INIT_STD * rng.standard_normal((d, d)),
        "time_b2": np.zeros(d),
        "blocks": [],
        "ln_f_g": np.ones(d),
        "ln_f_b": np.zeros(d),
        "head_w": np.zeros((d, pd)),
        "head_b": np.zeros(pd),
    }
    for _ in range(dims.depth):
        w["blocks"].append({
            "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
            "wq": INIT_STD * rng.standard_normal((d, d)),
            "wkx": INIT_STD * rng.standard_normal((d, d)),
            "wky": INIT_STD * rng.standard_normal((dims.d_y, d)),
            "wvx": INIT_STD * rng.standard_normal((d, d)),
            "wvy": INIT_STD * rng.standard_normal((dims.d_y, d)),
            "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
            "ff_w1": INIT_STD * rng.standard_normal((d, 4 * d)),
            "ff_b1": np.zeros(4 * d),
            "ff_w2": INIT_STD * rng.standard_normal((4 * d, d)),
            "ff_b2": np.zeros(d),
        })
    return DenoiserParams(dims=dims, weights=w)


def patchify(x, dims: ModelDims) -> ad.Tensor:
    """(H, W, C) image to (n_x, patch*patch*C) row-major patch tokens."""
    x = ad.as_tensor(x)
    if x.shape != (dims.height, dims.width, dims.channels):
        raise ShapeMismatchError(
            f"image shape {x.shape} does not match dims "
            f"({dims.height}, {dims.width}, {dims.channels})")
    p = dims.patch
    x = ad.reshape(x, (dims.n_h, p, dims.n_w, p, dims.channels))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (dims.n_x, dims.patch_dim))


def unpatchify(tokens, dims: ModelDims) -> ad.Tensor:
    """Inverse of patchify, back to (H, W, C)."""
    tokens = ad.as_tensor(tokens)
    if tokens.shape != (dims.n_x, dims.patch_dim):
        raise ShapeMismatchError(
            f"token shape {tokens.shape} does not match ({dims.n_x}, {dims.patch_dim})")
    p = dims.patch
    x = ad.reshape(tokens, (dims.n_h, dims.n_w, p, p, dims.channels))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (dims.height, dims.width, dims.channels))


def timestep_features(t: int, d: int) -> Array:
    """Sinusoidal features of the raw step index, standard log-spaced bands."""
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = float(t) * freqs
    feat = np.concatenate([np.sin(ang), np.cos(ang)])
    if feat.size < d:
        feat = np.concatenate([feat, np.zeros(d - feat.size)])
    return feat


class AttentionCapture:
    """Collects the post-softmax attention of every block for one forward pass.

    Each stored matrix is row-stochastic with shape (n_x, n_x + n_y); text
    columns are absent when the pass ran unconditioned.
    """

    def __init__(self):
        self.matrices: list[Array] = []
        self.n_x: int | None = None
        self.n_y: int | None = None

    def record(self, probs: Array, n_x: int, n_y: int) -> None:
        self.matrices.append(np.array(probs, dtype=np.float64))
        self.n_x, self.n_y = n_x, n_y


def _resolve_scale(scale, n_x: int, n_y: int):
    if scale is None:
        return None, "multiplicative"
    mode = "multiplicative"
    if isinstance(scale, AttentionScale):
        mode = getattr(scale, "mode", "multiplicative")
        scale = scale.matrix
    scale = np.asarray(scale, dtype=np.float64)
    if scale.shape != (n_x, n_x + n_y):
        raise ShapeMismatchError(
            f"attention scale shape {scale.shape} does not match ({n_x}, {n_x + n_y})")
    if mode not in ("multiplicative", "additive"):
        raise ConfigError(f"unknown attention scale mode {mode!r}")
    return scale, mode


def predict_noise(params: DenoiserParams, x_t, t: int, text=None, scale=None,
                  capture: AttentionCapture | None = None,
                  weights: dict | None = None) -> ad.Tensor:
    """Predicted noise for one image at step t, shape (H, W, C).

    `text` is an optional (n_y, d_y) array or tensor of encoded caption
    tokens; `scale` an optional attention upweight over the joint key axis.
    `weights` overrides the stored arrays with live graph tensors.
    """
    dims = params.dims
    w = params.weights if weights is None else weights
    text_t = None if text is None else ad.as_tensor(text)
    n_y = 0 if text_t is None else text_t.shape[0]
    scale_mat, scale_mode = _resolve_scale(scale, dims.n_x, n_y)

    tokens = patchify(x_t, dims)
    h = tokens @ ad.as_tensor(w["patch_w"]) + ad.as_tensor(w["patch_b"])
    h = h + ad.as_tensor(w["pos"])
    feat = ad.as_tensor(timestep_features(t, dims.d).reshape(1, dims.d))
    temb = ad.silu(feat @ ad.as_tensor(w["time_w1"]) + ad.as_tensor(w["time_b1"]))
    temb = temb @ ad.as_tensor(w["time_w2"]) + ad.as_tensor(w["time_b2"])
    h = h + temb

    inv_sqrt_d = 1.0 / math.sqrt(dims.d)
    for blk in w["blocks"]:
        hn = ad.layernorm(h) * ad.as_tensor(blk["ln1_g"]) + ad.as_tensor(blk["ln1_b"])
        q = hn @ ad.as_tensor(blk["wq"])
        k = hn @ ad.as_tensor(blk["wkx"])
        v = hn @ ad.as_tensor(blk["wvx"])
        if text_t is not None:
            k = ad.concat([k, text_t @ ad.as_tensor(blk["wky"])], axis=0)
            v = ad.concat([v, text_t @ ad.as_tensor(blk["wvy"])], axis=0)
        logits = q @ ad.transpose(k)
        if scale_mat is not None:
            if scale_mode == "multiplicative":
                logits = logits * ad.as_tensor(scale_mat)
            else:
                logits = logits + ad.as_tensor(scale_mat - 1.0)
        probs = ad.softmax_last(ad.scalar_scale(logits, inv_sqrt_d))
        if capture is not None:
            capture.record(probs.data, dims.n_x, n_y)
        h = h + probs @ v
        hn = ad.layernorm(h) * ad.as_tensor(blk["ln2_g"]) + ad.as_tensor(blk["ln2_b"])
        ff = ad.silu(hn @ ad.as_tensor(blk["ff_w1"]) + ad.as_tensor(blk["ff_b1"]))
        h = h + ff @ ad.as_tensor(blk["ff_w2"]) + ad.as_tensor(blk["ff_b2"])

    h = ad.layernorm(h) * ad.as_tensor(w["ln_f_g"]) + ad.as_tensor(w["ln_f_b"])
    out = h @ ad.as_tensor(w["head_w"]) + ad.as_tensor(w["head_b"])
    return unpatchify(out, dims)
