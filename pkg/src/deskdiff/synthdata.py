"""Colored-shapes corpus: scenes, exact renders, captions, annotations.

A scene places one to three shapes on a 2x2 cell grid, at most one per
cell.  Rendering is exact (anchor colors on a black background, geometry in
normalized cell coordinates), so the per-object region masks are the true
object supports and scale with image size.  Captions come from a small
template grammar whose every word carries a part-of-speech tag; object
mentions are sometimes dropped so the label-append strategy has work to do.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .conditioning import ConditioningInput, Vocabulary
from .errors import DataError
from .seeding import STREAM_GEN, derive_rng

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
COLOR_ANCHORS = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
}
BACKGROUND = -1.0
GRID = 2
CELL_WORDS = {0: ("top", "left"), 1: ("top", "right"),
              2: ("bottom", "left"), 3: ("bottom", "right")}

# word -> tag for the whole closed vocabulary
WORD_TAGS = {
    "a": "function", "an": "function", "the": "function", "and": "function",
    "at": "function", "in": "function", "on": "function",
    "it": "pronoun", "this": "pronoun", "that": "pronoun",
    "is": "verb", "shows": "verb", "has": "verb", "contains": "verb",
    "one": "numeral", "two": "numeral", "three": "numeral",
    "some": "quantifier", "every": "quantifier", "all": "quantifier",
    "scene": "noun", "image": "noun", "picture": "noun",
    "square": "noun", "circle": "noun", "triangle": "noun",
    "top": "noun", "bottom": "noun", "left": "noun", "right": "noun",
    "red": "adjective", "green": "adjective", "blue": "adjective",
    "yellow": "adjective",
}
NUMERAL_WORDS = {1: "one", 2: "two", 3: "three"}


def build_vocab() -> Vocabulary:
    return Vocabulary(sorted(WORD_TAGS))


def tags_for(words: list[str]) -> list[str]:
    return [WORD_TAGS[w] for w in words]


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: int          # row-major over the 2x2 grid


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]


@dataclass
class TrainSample:
    image: np.ndarray
    caption: list[str]
    tags: list[str]
    synthetic_caption: list[str]
    synthetic_tags: list[str]
    object_labels: list[str]
    region_masks: list[np.ndarray]
    scene: SceneSpec
    vocab: Vocabulary
    index: int = 0
    conditioning: ConditioningInput | None = None


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def shape_mask(shape: str, cell_size: int) -> np.ndarray:
    """Boolean support of the shape inside one cell, by pixel centers."""
    idx = (np.arange(cell_size) + 0.5) / cell_size
    u = idx[:, None]   # vertical, 0 at the top
    v = idx[None, :]
    if shape == "square":
        return (u >= 0.1875) & (u <= 0.8125) & (v >= 0.1875) & (v <= 0.8125)
    if shape == "circle":
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.375 ** 2
    if shape == "triangle":
        height = (u - 0.1875) / 0.625
        return (u >= 0.1875) & (u <= 0.8125) & (np.abs(v - 0.5) <= 0.375 * height)
    raise DataError(f"unknown shape {shape!r}")


def render_scene(scene: SceneSpec, size: int):
    """Image (size, size, 3) plus one boolean mask per object."""
    if size % GRID:
        raise DataError(f"image size {size} not divisible by grid {GRID}")
    cell = size // GRID
    image = np.full((size, size, 3), BACKGROUND, dtype=np.float64)
    masks = []
    for obj in scene.objects:
        row, col = divmod(obj.cell, GRID)
        local = shape_mask(obj.shape, cell)
        mask = np.zeros((size, size), dtype=bool)
        mask[row * cell:(row + 1) * cell, col * cell:(col + 1) * cell] = local
        image[mask] = COLOR_ANCHORS[obj.color]
        masks.append(mask)
    return image, masks


# ---------------------------------------------------------------------------
# scenes and captions
# ---------------------------------------------------------------------------

def sample_scene(rng: np.random.Generator, max_objects: int = 3,
                 min_objects: int = 1) -> SceneSpec:
    count = int(rng.integers(min_objects, max_objects + 1))
    cells = rng.permutation(GRID * GRID)[:count]
    objects = tuple(
        SceneObject(shape=SHAPES[int(rng.integers(len(SHAPES)))],
                    color=COLORS[int(rng.integers(len(COLORS)))],
                    cell=int(c))
        for c in cells)
    return SceneSpec(objects=objects)


def _object_phrase(obj: SceneObject, variant: int) -> list[str]:
    words = CELL_WORDS[obj.cell]
    if variant == 0:
        return ["a", obj.color, obj.shape, words[0], words[1]]
    return ["one", obj.color, obj.shape, "at", words[0], words[1]]


_PREFIXES = ([], ["the", "scene", "shows"], ["it", "has"],
             ["this", "picture", "contains"])


def canonical_caption(scene: SceneSpec) -> tuple[list[str], list[str]]:
    """The fixed description used for conditioning at evaluation time."""
    words: list[str] = []
    for i, obj in enumerate(scene.objects):
        if i:
            words.append("and")
        words.extend(_object_phrase(obj, 0))
    return words, tags_for(words)


def caption_scene(scene: SceneSpec, rng: np.random.Generator,
                  p_omit: float = 0.2) -> tuple[list[str], list[str]]:
    """A varied caption; each object after the first may go unmentioned."""
    keep = [True] + [bool(rng.random() >= p_omit) for _ in scene.objects[1:]]
    prefix = _PREFIXES[int(rng.integers(len(_PREFIXES)))]
    variant = int(rng.integers(2))
    words = list(prefix)
    first = True
    for obj, kept in zip(scene.objects, keep):
        if not kept:
            continue
        if not first:
            words.append("and")
        words.extend(_object_phrase(obj, variant))
        first = False
    return words, tags_for(words)


def make_sample(index: int, seed: int, size: int = 32, max_objects: int = 3,
                p_omit: float = 0.2, vocab: Vocabulary | None = None) -> TrainSample:
    rng = derive_rng(seed, STREAM_GEN, index)
    scene = sample_scene(rng, max_objects)
    image, masks = render_scene(scene, size)
    caption, tags = caption_scene(scene, rng, p_omit)
    syn_caption, syn_tags = canonical_caption(scene)
    return TrainSample(image=image, caption=caption, tags=tags,
                       synthetic_caption=syn_caption, synthetic_tags=syn_tags,
                       object_labels=[o.shape for o in scene.objects],
                       region_masks=masks, scene=scene,
                       vocab=vocab if vocab is not None else build_vocab(),
                       index=index)


def generate_dataset(count: int, *, seed: int, size: int = 32,
                     max_objects: int = 3, p_omit: float = 0.2):
    """Samples indexed 0..count-1, each drawn from its own derived stream."""
    if count < 1:
        raise DataError(f"dataset size must be >= 1, got {count}")
    vocab = build_vocab()
    samples = [make_sample(i, seed, size, max_objects, p_omit, vocab)
               for i in range(count)]
    return samples, vocab


# ---------------------------------------------------------------------------
# on-disk form: manifest json, one float32 image blob, run-length masks
# ---------------------------------------------------------------------------

def _rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).ravel()
    runs = []
    value = False
    length = 0
    for bit in flat:
        if bit == value:
            length += 1
        else:
            runs.append(length)
            value = not value
            length = 1
    runs.append(length)
    return runs


def _rle_decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos = 0
    value = False
    for length in runs:
        if value:
            flat[pos:pos + length] = True
        pos += length
        value = not value
    if pos != flat.size:
        raise DataError(f"mask run lengths cover {pos} of {flat.size} pixels")
    return flat.reshape(shape)


def save_dataset(out_dir, samples: list[TrainSample], vocab: Vocabulary) -> None:
    os.makedirs(out_dir, exist_ok=True)
    size = samples[0].image.shape[0]
    records = []
    with open(os.path.join(out_dir, "images.bin"), "wb") as fh:
        for s in samples:
            fh.write(s.image.astype("<f4").tobytes())
            records.append({
                "scene": [{"shape": o.shape, "color": o.color, "cell": o.cell}
                          for o in s.scene.objects],
                "caption": s.caption,
                "tags": s.tags,
                "synthetic_caption": s.synthetic_caption,
                "synthetic_tags": s.synthetic_tags,
                "object_labels": s.object_labels,
                "masks": [_rle_encode(m) for m in s.region_masks],
            })
    manifest = {"count": len(samples), "size": size, "samples": records}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    vocab.save(os.path.join(out_dir, "vocab.txt"))


def load_dataset(in_dir):
    path = os.path.join(in_dir, "manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no manifest at {path}") from None
    except ValueError as exc:
        raise DataError(f"unreadable manifest {path}: {exc}") from None
    vocab = Vocabulary.load(os.path.join(in_dir, "vocab.txt"))
    size = int(manifest["size"])
    count = int(manifest["count"])
    frame = size * size * 3 * 4
    samples = []
    with open(os.path.join(in_dir, "images.bin"), "rb") as fh:
        blob = fh.read()
    if len(blob) != frame * count:
        raise DataError(
            f"image blob holds {len(blob)} bytes, manifest wants {frame * count}")
    for i, rec in enumerate(manifest["samples"]):
        image = np.frombuffer(blob[i * frame:(i + 1) * frame],
                              dtype="<f4").astype(np.float64)
        image = image.reshape(size, size, 3)
        scene = SceneSpec(objects=tuple(
            SceneObject(shape=o["shape"], color=o["color"], cell=int(o["cell"]))
            for o in rec["scene"]))
        masks = [_rle_decode(runs, (size, size)) for runs in rec["masks"]]
        samples.append(TrainSample(
            image=image, caption=list(rec["caption"]), tags=list(rec["tags"]),
            synthetic_caption=list(rec["synthetic_caption"]),
            synthetic_tags=list(rec["synthetic_tags"]),
            object_labels=list(rec["object_labels"]),
            region_masks=masks, scene=scene, vocab=vocab, index=i))
    return samples, vocab
