"""Patch embedding, joint attention, capture, and the knowledge scale hook."""

import numpy as np
import pytest

from deskdiff import autodiff as ad
from deskdiff.conditioning import AttentionScale, build_attention_scale
from deskdiff.denoiser import (
    AttentionCapture,
    ModelDims,
    init_denoiser,
    patchify,
    predict_noise,
    timestep_features,
    unpatchify,
)
from deskdiff.errors import ConfigError, IndivisibleShapeError, ShapeMismatchError
from deskdiff.seeding import derive_rng
from deskdiff.trees import flatten_tree, tree_like


@pytest.fixture(scope="module")
def params(tiny_dims):
    return init_denoiser(tiny_dims, derive_rng(123, 0))


def _text(d_y, n=3, seed=0):
    return np.random.default_rng(seed).standard_normal((n, d_y))


# ---------------------------------------------------------------------------
# patch embedding
# ---------------------------------------------------------------------------

def test_patchify_explicit_layout():
    dims = ModelDims(height=4, width=4, channels=1, patch=2, d=8, d_y=4,
                     depth=1, vocab_size=4, max_text_len=4)
    x = np.arange(16.0).reshape(4, 4, 1)
    tok = patchify(x, dims).data
    assert tok.shape == (4, 4)
    # grid row-major, row-major inside each patch
    np.testing.assert_array_equal(tok[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(tok[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(tok[2], [8, 9, 12, 13])
    np.testing.assert_array_equal(tok[3], [10, 11, 14, 15])


@pytest.mark.parametrize("patch", [1, 2, 4, 8])
def test_patchify_roundtrip_is_bitwise(patch):
    dims = ModelDims(height=8, width=8, channels=3, patch=patch, d=8, d_y=4,
                     depth=1, vocab_size=4, max_text_len=4)
    x = np.random.default_rng(patch).standard_normal((8, 8, 3))
    back = unpatchify(patchify(x, dims), dims).data
    np.testing.assert_array_equal(back, x)


def test_patchify_shape_errors(tiny_dims):
    with pytest.raises(ShapeMismatchError):
        patchify(np.zeros((4, 8, 3)), tiny_dims)
    with pytest.raises(ShapeMismatchError):
        unpatchify(np.zeros((3, tiny_dims.patch_dim)), tiny_dims)


def test_indivisible_patch_rejected():
    with pytest.raises(IndivisibleShapeError):
        ModelDims(height=10, width=8, patch=4)


def test_dims_derived_quantities(tiny_dims):
    assert (tiny_dims.n_h, tiny_dims.n_w, tiny_dims.n_x) == (2, 2, 4)
    assert tiny_dims.patch_dim == 4 * 4 * 3


# ---------------------------------------------------------------------------
# timestep features
# ---------------------------------------------------------------------------

def test_timestep_features_basics():
    f0 = timestep_features(0, 8)
    np.testing.assert_array_equal(f0[:4], 0.0)
    np.testing.assert_array_equal(f0[4:], 1.0)
    f1, f2 = timestep_features(1, 8), timestep_features(2, 8)
    assert f1.shape == (8,)
    assert np.abs(f1).max() <= 1.0
    assert np.abs(f1 - f2).max() > 1e-3
    assert timestep_features(5, 9).shape == (9,)  # odd width zero-padded
    assert timestep_features(5, 9)[-1] == 0.0


# ---------------------------------------------------------------------------
# fresh model behaviour
# ---------------------------------------------------------------------------

def test_fresh_model_predicts_exactly_zero(params, tiny_dims):
    x = np.random.default_rng(1).standard_normal((8, 8, 3))
    out = predict_noise(params, x, 5).data
    assert out.shape == (8, 8, 3)
    np.testing.assert_array_equal(out, 0.0)
    out_text = predict_noise(params, x, 5, text=_text(tiny_dims.d_y)).data
    np.testing.assert_array_equal(out_text, 0.0)


def test_init_is_seed_deterministic(tiny_dims):
    a = init_denoiser(tiny_dims, derive_rng(7, 0))
    b = init_denoiser(tiny_dims, derive_rng(7, 0))
    for name, arr in flatten_tree(a.weights).items():
        np.testing.assert_array_equal(arr, flatten_tree(b.weights)[name])
    c = init_denoiser(tiny_dims, derive_rng(8, 0))
    assert np.abs(c.weights["patch_w"] - a.weights["patch_w"]).max() > 0


# ---------------------------------------------------------------------------
# attention capture
# ---------------------------------------------------------------------------

def test_capture_rows_are_stochastic(params, tiny_dims):
    x = np.random.default_rng(2).standard_normal((8, 8, 3))
    cap = AttentionCapture()
    predict_noise(params, x, 3, text=_text(tiny_dims.d_y), capture=cap)
    assert len(cap.matrices) == tiny_dims.depth
    assert (cap.n_x, cap.n_y) == (4, 3)
    for m in cap.matrices:
        assert m.shape == (4, 7)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)
        assert (m >= 0).all()


def test_capture_without_text_has_no_text_columns(params):
    x = np.random.default_rng(3).standard_normal((8, 8, 3))
    cap = AttentionCapture()
    predict_noise(params, x, 3, capture=cap)
    assert cap.n_y == 0
    assert all(m.shape == (4, 4) for m in cap.matrices)


def test_untrained_attention_is_near_uniform(params, tiny_dims):
    x = np.random.default_rng(4).standard_normal((8, 8, 3))
    cap = AttentionCapture()
    predict_noise(params, x, 3, text=_text(tiny_dims.d_y), capture=cap)
    for m in cap.matrices:
        uniform = 1.0 / m.shape[1]
        assert np.abs(m / uniform - 1.0).max() < 0.10


# ---------------------------------------------------------------------------
# knowledge scale hook
# ---------------------------------------------------------------------------

def _probs(params, x, scale, text):
    cap = AttentionCapture()
    predict_noise(params, x, 3, text=text, scale=scale, capture=cap)
    return cap.matrices


def test_all_ones_scale_is_bitwise_neutral(params, tiny_dims):
    x = np.random.default_rng(5).standard_normal((8, 8, 3))
    text = _text(tiny_dims.d_y)
    flags = np.array([True, False, True])
    base = _probs(params, x, None, text)
    for mode in ("multiplicative", "additive"):
        ones = build_attention_scale(4, flags, 0.0, mode=mode)
        scaled = _probs(params, x, ones, text)
        for a, b in zip(base, scaled):
            np.testing.assert_array_equal(a, b)


def test_scale_moves_mass_toward_keyword_columns(params, tiny_dims):
    x = np.random.default_rng(6).standard_normal((8, 8, 3))
    text = _text(tiny_dims.d_y)
    flags = np.array([False, True, False])
    base = _probs(params, x, None, text)
    up = _probs(params, x, build_attention_scale(4, flags, 0.5, mode="additive"), text)
    # additive mode adds w_a to scaled logits of upweighted columns, so the
    # keyword column gains mass in every row of every block
    for a, b in zip(base, up):
        assert (b[:, 5] > a[:, 5]).all()


def test_multiplicative_and_additive_differ(params, tiny_dims):
    x = np.random.default_rng(7).standard_normal((8, 8, 3))
    text = _text(tiny_dims.d_y)
    flags = np.array([False, True, False])
    mul = _probs(params, x, build_attention_scale(4, flags, 0.5), text)
    add = _probs(params, x, build_attention_scale(4, flags, 0.5, mode="additive"), text)
    assert max(np.abs(a - b).max() for a, b in zip(mul, add)) > 1e-6


def test_raw_matrix_equals_wrapped_scale(params, tiny_dims):
    x = np.random.default_rng(8).standard_normal((8, 8, 3))
    text = _text(tiny_dims.d_y)
    wrapped = build_attention_scale(4, np.array([True, False, True]), 0.3)
    a = _probs(params, x, wrapped, text)
    b = _probs(params, x, wrapped.matrix, text)
    for am, bm in zip(a, b):
        np.testing.assert_array_equal(am, bm)


def test_scale_shape_and_mode_errors(params, tiny_dims):
    x = np.zeros((8, 8, 3))
    text = _text(tiny_dims.d_y)
    with pytest.raises(ShapeMismatchError):
        predict_noise(params, x, 3, text=text, scale=np.ones((4, 5)))
    bad = AttentionScale(matrix=np.ones((4, 7)), w_a=0.1, mode="divisive")
    with pytest.raises(ConfigError):
        predict_noise(params, x, 3, text=text, scale=bad)


# ---------------------------------------------------------------------------
# gradient plumbing through the weights override
# ---------------------------------------------------------------------------

def test_weights_override_carries_gradients(params, tiny_dims):
    x = np.random.default_rng(9).standard_normal((8, 8, 3))
    flat = flatten_tree(params.weights)

    def build(lv, _):
        nested = tree_like(params.weights, lv)
        return ad.reduce_sum(predict_noise(params, x, 4, weights=nested))

    graph = ad.Graph(leaves=flat, build=build)
    ad.forward_eval(graph)
    grads = ad.backward(graph)
    # the bias feeds every one of the n_x patch rows once
    np.testing.assert_allclose(grads["head_b"], float(tiny_dims.n_x), rtol=1e-12)
    assert np.abs(grads["head_w"]).max() > 0
    assert np.abs(grads["patch_w"]).max() == 0  # zero head blocks upstream flow
