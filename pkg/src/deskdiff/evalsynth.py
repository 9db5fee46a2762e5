"""Sample-quality evaluation against the synthetic corpus.

Two numbers summarize a model: a Frechet distance between Gaussian fits of
projected real and generated images (small and cheap, same algebra as the
usual frontier metric but over a seeded random projection instead of a
pretrained embedding), and binding accuracy, the fraction of prompted
objects whose cell actually holds the prompted color.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .conditioning import tokenize
from .errors import AlignmentMismatchError, DataError, DimensionMismatchError
from .sampling import sample
from .seeding import STREAM_EVAL, derive_rng
from .synthdata import (
    BACKGROUND,
    COLOR_ANCHORS,
    GRID,
    SceneSpec,
    canonical_caption,
    render_scene,
    sample_scene,
    shape_mask,
)

Array = np.ndarray


# ---------------------------------------------------------------------------
# distribution distance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianStats:
    mean: Array
    cov: Array


def fit_gaussian(features: Array) -> GaussianStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise DataError(
            f"need a (N>=2, d) feature matrix, got shape {features.shape}")
    cov = np.cov(features, rowvar=False)
    cov = np.atleast_2d(cov)
    return GaussianStats(mean=features.mean(axis=0), cov=(cov + cov.T) / 2.0)


def projection_matrix(input_dim: int, out_dim: int, seed: int) -> Array:
    rng = derive_rng(seed, STREAM_EVAL, input_dim, out_dim)
    return rng.standard_normal((input_dim, out_dim)) / np.sqrt(input_dim)


def project_images(images: list[Array] | Array, out_dim: int = 64,
                   seed: int = 0) -> Array:
    flat = np.stack([np.asarray(im, dtype=np.float64).ravel() for im in images])
    return flat @ projection_matrix(flat.shape[1], out_dim, seed)


def _psd_sqrt(mat: Array) -> Array:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    floor = -1e-6 * max(float(np.trace(mat)), 1.0)
    if vals.min() < floor:
        warnings.warn(f"covariance eigenvalue {vals.min():.3e} clamped to zero",
                      RuntimeWarning, stacklevel=3)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_gaussian_distance(a: GaussianStats, b: GaussianStats) -> float:
    """|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise DimensionMismatchError(
            f"stat shapes differ: {a.mean.shape}/{a.cov.shape} vs "
            f"{b.mean.shape}/{b.cov.shape}")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.cov)
    inner = _psd_sqrt(root_a @ b.cov @ root_a)
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov)
                 - 2.0 * np.trace(inner))


def toy_fid(images_a, images_b, out_dim: int = 64, seed: int = 0) -> float:
    """Frechet distance between projected image sets, one shared projection."""
    feats_a = project_images(images_a, out_dim, seed)
    feats_b = project_images(images_b, out_dim, seed)
    if feats_a.shape[1] != feats_b.shape[1]:
        raise DimensionMismatchError(
            f"projected dims differ: {feats_a.shape[1]} vs {feats_b.shape[1]}")
    return frechet_gaussian_distance(fit_gaussian(feats_a), fit_gaussian(feats_b))


# ---------------------------------------------------------------------------
# binding accuracy
# ---------------------------------------------------------------------------

# A requested object's fill fraction may deviate from the exact render's
# fill by this relative amount before the object counts as missing.
FILL_TOLERANCE = 0.5

_CLASSES = ["background"] + list(COLOR_ANCHORS)
_ANCHORS = np.array([[BACKGROUND] * 3] + [COLOR_ANCHORS[c] for c in COLOR_ANCHORS])


def classify_pixels(pixels: Array) -> Array:
    """Index into background+colors of the nearest anchor per pixel."""
    flat = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    d2 = ((flat[:, None, :] - _ANCHORS[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def check_object(image: Array, obj) -> bool:
    """Dominant cell color matches and its coverage is near the exact fill."""
    size = np.asarray(image).shape[0]
    cell = size // GRID
    row, col = divmod(obj.cell, GRID)
    patch = np.asarray(image)[row * cell:(row + 1) * cell,
                              col * cell:(col + 1) * cell]
    labels = classify_pixels(patch)
    counts = np.bincount(labels, minlength=len(_CLASSES))
    color_counts = counts[1:]
    if color_counts.max() == 0:
        return False
    dominant = _CLASSES[1 + int(color_counts.argmax())]
    if dominant != obj.color:
        return False
    fill = color_counts.max() / labels.size
    nominal = float(shape_mask(obj.shape, cell).mean())
    return abs(fill - nominal) <= FILL_TOLERANCE * nominal


def binding_accuracy(images: list[Array], scenes: list[SceneSpec]) -> float:
    """Fraction of images whose every requested object checks out.

    An image scores 1 only if, for each object, the dominant color in its
    cell is the requested one and covers about as much of the cell as the
    exact render would.  Pixels outside the requested cells never matter.
    """
    if len(images) != len(scenes):
        raise AlignmentMismatchError(
            f"{len(images)} images but {len(scenes)} scenes")
    if not images:
        raise DataError("binding accuracy over zero scenes")
    score = 0
    for image, scene in zip(images, scenes):
        score += all(check_object(image, obj) for obj in scene.objects)
    return score / len(images)


# ---------------------------------------------------------------------------
# model evaluation harness
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    fid: float
    binding: float
    count: int
    guidance_scale: float | None
    steps: int
    rows: list[dict]


def eval_scenes(count: int, seed: int, size: int, max_objects: int = 3,
                min_objects: int = 1) -> list[SceneSpec]:
    return [sample_scene(derive_rng(seed, STREAM_EVAL, i), max_objects,
                         min_objects)
            for i in range(count)]


def evaluate(bank, sched, vocab, *, count: int = 32, steps: int = 50,
             guidance_scale: float | None = 2.1, seed: int = 0,
             max_objects: int = 3, min_objects: int = 1,
             method: str = "ddim") -> EvalReport:
    """Sample against fixed eval scenes and score both metrics.

    Real references are exact renders of the same scenes; prompts are their
    fixed descriptions, tokenized the plain inference way.  Per-scene rows
    record the prompt and its binding outcome.
    """
    scenes = eval_scenes(count, seed, bank.dims.height, max_objects, min_objects)
    real = [render_scene(s, bank.dims.height)[0] for s in scenes]
    generated = []
    rows = []
    for i, scene in enumerate(scenes):
        words, _ = canonical_caption(scene)
        cond = tokenize(vocab, words)
        out = sample(bank, sched, method=method, steps=steps, cond=cond,
                     guidance_scale=guidance_scale, seed=seed, index=i)
        generated.append(out.image)
        bound = all(check_object(out.image, obj) for obj in scene.objects)
        rows.append({"index": i, "prompt": " ".join(words),
                     "objects": len(scene.objects), "bound": bool(bound)})
    return EvalReport(fid=toy_fid(generated, real, seed=seed),
                      binding=binding_accuracy(generated, scenes),
                      count=count, guidance_scale=guidance_scale, steps=steps,
                      rows=rows)


def pareto_sweep(bank, sched, vocab, scales, **kwargs):
    """(scale, toy-FID, binding) per guidance scale, shared scenes and
    per-index sample streams."""
    if not scales:
        raise DataError("pareto sweep needs at least one scale")
    out = []
    for s in scales:
        report = evaluate(bank, sched, vocab, guidance_scale=float(s), **kwargs)
        out.append((float(s), report.fid, report.binding))
    return out
