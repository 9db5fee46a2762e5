"""Caption tokenization, the shared text encoder, and knowledge weights.

Knowledge arrives as dataset annotations: per-word part-of-speech tags and
per-object region masks.  During training a coin flip marks a sample as
knowledge-enhanced; for those samples each word is preceded by its tag's
special token, keyword text tokens get an attention upweight (the W_a
matrix consumed by the denoiser), and key image regions get a loss
upweight (the W_l map consumed by the trainer).  Inference uses none of
this: raw captions tokenize without tags and attention runs unscaled.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    ConfigError,
    NegativeScaleError,
    ShapeMismatchError,
    TagMismatchError,
    UnknownWordError,
    VocabularyOverflowError,
)
from .seeding import derive_rng

# Fixed tag set.  Everything except 'function' counts as a keyword tag.
TAGS = ("noun", "verb", "adjective", "numeral", "quantifier", "pronoun", "function")
KEYWORD_TAGS = frozenset(TAGS) - {"function"}
TAG_TOKENS = {
    "noun": "[n]",
    "verb": "[v]",
    "adjective": "[a]",
    "numeral": "[num]",
    "quantifier": "[q]",
    "pronoun": "[pron]",
    "function": "[f]",
}
NULL_TOKEN = "[null]"


class Vocabulary:
    """Closed word list with stable ids: specials first, then words in order."""

    def __init__(self, words: list[str]):
        specials = [TAG_TOKENS[t] for t in TAGS] + [NULL_TOKEN]
        self.tokens = specials + list(words)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}
        self.special_ids = frozenset(self.ids[s] for s in specials)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> list[str]:
        """The open part of the token list, without the leading specials."""
        return self.tokens[len(TAGS) + 1:]

    def id_of(self, word: str) -> int:
        try:
            return self.ids[word]
        except KeyError:
            raise UnknownWordError(f"word {word!r} not in vocabulary") from None

    def tag_id(self, tag: str) -> int:
        if tag not in TAG_TOKENS:
            raise TagMismatchError(f"unknown tag {tag!r}")
        return self.ids[TAG_TOKENS[tag]]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line for line in fh.read().splitlines() if line]
        n_special = len(TAGS) + 1
        vocab = cls(tokens[n_special:])
        if vocab.tokens != tokens:
            raise ValueError(f"vocabulary file {path} does not match the special-token layout")
        return vocab


@dataclass
class ConditioningInput:
    """Token ids plus the annotations the knowledge weights are built from."""

    tokens: np.ndarray                       # int64 ids, length n_y
    pos_tags: list[str]                      # one tag per original word
    keyword_flags: np.ndarray                # bool per token, False on specials
    region_masks: list[np.ndarray] = field(default_factory=list)
    augmentation_applied: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.keyword_flags = np.asarray(self.keyword_flags, dtype=bool)
        if len(self.keyword_flags) != len(self.tokens):
            raise ShapeMismatchError("keyword_flags must align with tokens")

    @property
    def n_y(self) -> int:
        return len(self.tokens)


def tokenize(vocab: Vocabulary, words: list[str], tags: list[str] | None = None,
             insert_tag_tokens: bool = False) -> ConditioningInput:
    """Map words to ids; optionally prefix each word with its tag token.

    With no tags every word defaults to 'function' (nothing is a keyword),
    which is the inference-time path for raw captions.
    """
    if tags is None:
        tags = ["function"] * len(words)
    if len(tags) != len(words):
        raise TagMismatchError(f"{len(words)} words but {len(tags)} tags")
    ids: list[int] = []
    flags: list[bool] = []
    for word, tag in zip(words, tags):
        if tag not in TAG_TOKENS:
            raise TagMismatchError(f"unknown tag {tag!r}")
        if insert_tag_tokens:
            ids.append(vocab.tag_id(tag))
            flags.append(False)
        ids.append(vocab.id_of(word))
        flags.append(tag in KEYWORD_TAGS)
    return ConditioningInput(tokens=np.array(ids, dtype=np.int64),
                             pos_tags=list(tags),
                             keyword_flags=np.array(flags, dtype=bool))


def tokenize_with_tags(vocab: Vocabulary, words: list[str],
                       tags: list[str]) -> ConditioningInput:
    """Tag-token insertion form used for knowledge-enhanced training samples."""
    return tokenize(vocab, words, tags, insert_tag_tokens=True)


def strip_tag_tokens(vocab: Vocabulary, cond: ConditioningInput) -> np.ndarray:
    """Drop special tokens, recovering the plain word-id sequence."""
    keep = [tid for tid in cond.tokens.tolist() if tid not in vocab.special_ids]
    return np.array(keep, dtype=np.int64)


# ---------------------------------------------------------------------------
# knowledge weight structures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttentionScale:
    """Entrywise upweight for image-query attention logits.

    Shape (n_x, n_x + n_y): every column over image tokens and over keyword
    text tokens holds 1 + w_a, all other columns hold 1.  Mode selects how
    the denoiser applies it: multiplied into the raw logits, or (additive)
    the excess over 1 added to the scaled logits as a bias.
    """

    matrix: np.ndarray
    w_a: float
    mode: str = "multiplicative"


@dataclass(frozen=True)
class LossWeightMap:
    """Per-pixel loss weights: 1 + w_l inside key regions, 1 elsewhere."""

    matrix: np.ndarray
    w_l: float


def build_attention_scale(n_x: int, keyword_flags: np.ndarray, w_a: float,
                          enabled: bool = True,
                          mode: str = "multiplicative") -> AttentionScale:
    if w_a < 0:
        raise NegativeScaleError(f"w_a must be >= 0, got {w_a}")
    if mode not in ("multiplicative", "additive"):
        raise ConfigError(f"unknown attention scale mode {mode!r}")
    keyword_flags = np.asarray(keyword_flags, dtype=bool)
    n_y = len(keyword_flags)
    matrix = np.ones((n_x, n_x + n_y), dtype=np.float64)
    if enabled:
        matrix[:, :n_x] = 1.0 + w_a
        matrix[:, n_x:][:, keyword_flags] = 1.0 + w_a
    return AttentionScale(matrix=matrix, w_a=float(w_a), mode=mode)


def build_loss_weight(region_masks: list[np.ndarray], w_l: float,
                      n_h: int, n_w: int) -> LossWeightMap:
    if w_l < 0:
        raise NegativeScaleError(f"w_l must be >= 0, got {w_l}")
    matrix = np.ones((n_h, n_w), dtype=np.float64)
    union = np.zeros((n_h, n_w), dtype=bool)
    for mask in region_masks:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n_h, n_w):
            raise ShapeMismatchError(
                f"region mask shape {mask.shape} does not match grid ({n_h}, {n_w})")
        union |= mask
    # Overlaps do not stack: membership is binary.
    matrix[union] = 1.0 + w_l
    return LossWeightMap(matrix=matrix, w_l=float(w_l))


# ---------------------------------------------------------------------------
# training-time augmentation policy
# ---------------------------------------------------------------------------

@dataclass
class KnowledgePolicy:
    """Switches and rates for the training-time enhancement strategies."""

    w_a: float = 0.01
    w_l: float = 0.1
    p_know: float = 0.5
    p_cap: float = 0.1
    insert_tokens: bool = True
    scale_attention: bool = True
    weight_loss: bool = True
    append_labels: bool = True
    attention_mode: str = "multiplicative"  # or "additive"

    def disabled(self) -> bool:
        return self.p_know == 0.0 and self.p_cap == 0.0 and not self.append_labels


def augment_sample(sample, policy: KnowledgePolicy, rng: np.random.Generator):
    """Apply the per-sample training transforms; decisions land in the record.

    One coin decides knowledge enhancement for the sample (token insertion,
    attention scaling, loss weighting toggle together, each gated by its
    policy switch); a second coin swaps in the synthetic caption; object
    labels missing from the resulting caption are appended.
    """
    sample = copy.copy(sample)
    know = bool(rng.random() < policy.p_know)
    replace = bool(rng.random() < policy.p_cap)

    words = list(sample.synthetic_caption if replace else sample.caption)
    tags = list(sample.synthetic_tags if replace else sample.tags)

    appended: list[str] = []
    if policy.append_labels:
        present = set(words)
        for label in sample.object_labels:
            if label not in present:
                words.append(label)
                tags.append("noun")
                appended.append(label)

    insert = know and policy.insert_tokens
    cond = tokenize(sample.vocab, words, tags, insert_tag_tokens=insert)
    cond.region_masks = list(sample.region_masks)
    cond.augmentation_applied = {
        "knowledge_enhanced": know,
        "caption_replaced": replace,
        "appended_labels": appended,
        "tag_tokens_inserted": insert,
        "attention_scaled": know and policy.scale_attention,
        "loss_weighted": know and policy.weight_loss,
    }
    sample.conditioning = cond
    return sample


def sample_augment_rng(seed: int, step: int, item: int) -> np.random.Generator:
    """Augmentation stream, isolated so policy coins never shift model draws."""
    from .seeding import STREAM_AUGMENT
    return derive_rng(seed, STREAM_AUGMENT, step, item)


# ---------------------------------------------------------------------------
# tiny text encoder
# ---------------------------------------------------------------------------

@dataclass
class TextEncoderParams:
    """Embedding + transformer blocks; weights are a nested dict of arrays."""

    d_y: int
    vocab_size: int
    max_len: int
    depth: int
    weights: dict


def init_text_encoder(vocab_size: int, d_y: int, max_len: int = 64, depth: int = 1,
                      rng: np.random.Generator | None = None) -> TextEncoderParams:
    rng = rng if rng is not None else derive_rng(0, 0)
    d = d_y
    std = 0.02
    w = {
        "embed": std * rng.standard_normal((vocab_size, d)),
        "pos": std * rng.standard_normal((max_len, d)),
        "blocks": [],
        "ln_f_g": np.ones(d),
        "ln_f_b": np.zeros(d),
    }
    for _ in range(depth):
        w["blocks"].append({
            "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
            "wq": std * rng.standard_normal((d, d)),
            "wk": std * rng.standard_normal((d, d)),
            "wv": std * rng.standard_normal((d, d)),
            "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
            "ff_w1": std * rng.standard_normal((d, 4 * d)),
            "ff_b1": np.zeros(4 * d),
            "ff_w2": std * rng.standard_normal((4 * d, d)),
            "ff_b2": np.zeros(d),
        })
    return TextEncoderParams(d_y=d_y, vocab_size=vocab_size, max_len=max_len,
                             depth=depth, weights=w)


def encode_text(cond: ConditioningInput, params: TextEncoderParams,
                weights: dict | None = None) -> ad.Tensor:
    """Per-token representations, shape (n_y, d_y).

    `weights` may override the stored arrays with graph tensors so the
    encoder trains inside a loss graph; by default it runs gradient-free.
    """
    w = params.weights if weights is None else weights
    ids = cond.tokens
    if ids.size and int(ids.max()) >= params.vocab_size:
        raise VocabularyOverflowError(
            f"token id {int(ids.max())} outside vocabulary of {params.vocab_size}")
    if ids.size > params.max_len:
        raise VocabularyOverflowError(
            f"sequence length {ids.size} exceeds max_len {params.max_len}")
    if ids.size == 0:
        return ad.Tensor(np.zeros((0, params.d_y)))

    embed = ad.as_tensor(w["embed"])
    pos = ad.as_tensor(w["pos"])
    h = ad.gather_rows(embed, ids) + ad.gather_rows(pos, np.arange(ids.size))
    inv_sqrt_d = 1.0 / np.sqrt(params.d_y)
    for blk in w["blocks"]:
        hn = ad.layernorm(h) * ad.as_tensor(blk["ln1_g"]) + ad.as_tensor(blk["ln1_b"])
        q = hn @ ad.as_tensor(blk["wq"])
        k = hn @ ad.as_tensor(blk["wk"])
        v = hn @ ad.as_tensor(blk["wv"])
        att = ad.softmax_last(ad.scalar_scale(q @ ad.transpose(k), inv_sqrt_d))
        h = h + att @ v
        hn = ad.layernorm(h) * ad.as_tensor(blk["ln2_g"]) + ad.as_tensor(blk["ln2_b"])
        ff = ad.silu(hn @ ad.as_tensor(blk["ff_w1"]) + ad.as_tensor(blk["ff_b1"]))
        h = h + ff @ ad.as_tensor(blk["ff_w2"]) + ad.as_tensor(blk["ff_b2"])
    h = ad.layernorm(h) * ad.as_tensor(w["ln_f_g"]) + ad.as_tensor(w["ln_f_b"])
    return h
