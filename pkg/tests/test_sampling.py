"""Guidance arithmetic, sampling loops with planted predictors, capture."""

import numpy as np
import pytest

from deskdiff.conditioning import tokenize
from deskdiff.denoiser import AttentionCapture
from deskdiff.errors import (
    CaptureDisabledError,
    ConfigError,
    DataError,
    InvalidRangeError,
    ShapeMismatchError,
    StepsExceedTError,
)
from deskdiff.sampling import (
    attention_map,
    capture_attention,
    cfg_combine,
    ddim_grid,
    ddim_trajectory,
    ddpm_trajectory,
    entropy_series,
    sample,
    sample_ddim,
    sample_ddpm,
    spatial_entropy,
)
from deskdiff.schedule import build_linear, q_sample


# ---------------------------------------------------------------------------
# guidance
# ---------------------------------------------------------------------------

def test_cfg_combine_elementwise_oracle():
    rng = np.random.default_rng(0)
    c, u = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    np.testing.assert_array_equal(cfg_combine(c, u, 2.1), u + 2.1 * (c - u))
    np.testing.assert_array_equal(cfg_combine(c, u, -0.5), u - 0.5 * (c - u))


def test_cfg_combine_unit_and_zero_scales_pass_through():
    rng = np.random.default_rng(1)
    c, u = rng.standard_normal(4), rng.standard_normal(4)
    out1 = cfg_combine(c, u, 1.0)
    np.testing.assert_array_equal(out1, c)
    out1[0] = 99.0    # a copy, not a view of the input
    assert c[0] != 99.0
    np.testing.assert_array_equal(cfg_combine(c, u, 0.0), u)


def test_cfg_combine_shape_error():
    with pytest.raises(ShapeMismatchError):
        cfg_combine(np.zeros(3), np.zeros(4), 2.0)


# ---------------------------------------------------------------------------
# step grid
# ---------------------------------------------------------------------------

def test_grid_fifty_of_thousand():
    grid = ddim_grid(1000, 50)
    assert len(grid) == 51
    assert grid[0] == 1000 and grid[-1] == 0
    assert all(a - b == 20 for a, b in zip(grid, grid[1:]))


def test_grid_full_resolution():
    assert ddim_grid(10, 10) == list(range(10, -1, -1))


def test_grid_uneven_rounding():
    assert ddim_grid(10, 3) == [10, 7, 3, 0]
    grid = ddim_grid(1000, 7)
    assert grid[0] == 1000 and grid[-1] == 0
    assert all(a > b for a, b in zip(grid, grid[1:]))


def test_grid_bounds():
    with pytest.raises(InvalidRangeError):
        ddim_grid(10, 0)
    with pytest.raises(StepsExceedTError):
        ddim_grid(10, 11)


# ---------------------------------------------------------------------------
# planted predictors through the raw loops
# ---------------------------------------------------------------------------

def test_ddpm_oracle_predictor_recovers_the_plant():
    # a predictor that reads the true implied noise off the state keeps
    # every clean prediction at x0 and the final step lands exactly there
    sched = build_linear(100, 1e-3, 0.15)
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((2, 2))
    eps = rng.standard_normal((2, 2))

    def oracle(x, t):
        ab = sched.alpha_bar[t]
        return (x - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)

    start = q_sample(sched, x0, sched.T, eps)
    final, xs, x0s = ddpm_trajectory(sched, start, oracle,
                                     np.random.default_rng(3), keep=True)
    assert len(xs) == sched.T + 1 and len(x0s) == sched.T
    for pred in x0s:
        np.testing.assert_allclose(pred, x0, atol=1e-8)
    np.testing.assert_array_equal(final, x0s[-1])


def test_ddim_constant_noise_walks_the_closed_form():
    sched = build_linear(1000)
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((2, 3))
    eps = rng.standard_normal((2, 3))
    start = q_sample(sched, x0, sched.T, eps)
    final, xs, x0s = ddim_trajectory(sched, start, lambda x, t: eps, 50,
                                     keep=True)
    grid = ddim_grid(1000, 50)
    for state, t in zip(xs, grid):
        want = x0 if t == 0 else q_sample(sched, x0, t, eps)
        np.testing.assert_allclose(state, want, atol=1e-10)
    for pred in x0s:
        np.testing.assert_allclose(pred, x0, atol=1e-8)
    np.testing.assert_allclose(final, x0, atol=1e-8)


# ---------------------------------------------------------------------------
# the high-level entry point
# ---------------------------------------------------------------------------

def test_sample_is_deterministic_per_seed_and_index(tiny_bank, sched10):
    a = sample(tiny_bank, sched10, steps=5, seed=3, index=0)
    b = sample(tiny_bank, sched10, steps=5, seed=3, index=0)
    np.testing.assert_array_equal(a.image, b.image)
    c = sample(tiny_bank, sched10, steps=5, seed=3, index=1)
    assert np.abs(a.image - c.image).max() > 0
    d = sample(tiny_bank, sched10, steps=5, seed=4, index=0)
    assert np.abs(a.image - d.image).max() > 0


def test_unconditioned_sample_counts(tiny_bank, sched10):
    res = sample(tiny_bank, sched10, steps=5, seed=0)
    assert res.grid == [10, 8, 6, 4, 2, 0]
    assert res.evals_cond == 0 and res.evals_uncond == 5
    np.testing.assert_array_equal(res.expert_evals_uncond, [2, 3])


def test_guided_sample_runs_each_branch_once_per_step(tiny_bank, sched10, vocab):
    cond = tokenize(vocab, ["red", "square"])
    res = sample(tiny_bank, sched10, steps=5, cond=cond, guidance_scale=2.1,
                 seed=0)
    assert res.evals_cond == 5 and res.evals_uncond == 5
    np.testing.assert_array_equal(res.expert_evals_cond, [2, 3])
    np.testing.assert_array_equal(res.expert_evals_uncond, [2, 3])


def test_conditioned_unguided_runs_one_branch(tiny_bank, sched10, vocab):
    cond = tokenize(vocab, ["red", "square"])
    res = sample(tiny_bank, sched10, steps=5, cond=cond, seed=0)
    assert res.evals_cond == 5 and res.evals_uncond == 0


def test_ddpm_method_walks_every_step(tiny_bank, sched10):
    res = sample(tiny_bank, sched10, method="ddpm", seed=1)
    assert res.grid == list(range(10, -1, -1))
    assert res.evals_uncond == 10


def test_wrappers_match_the_entry_point(tiny_bank, sched10, vocab):
    cond = tokenize(vocab, ["blue", "circle"])
    a = sample_ddim(tiny_bank, sched10, cond=cond, guidance_scale=1.5,
                    steps=5, seed=2)
    b = sample(tiny_bank, sched10, method="ddim", steps=5, cond=cond,
               guidance_scale=1.5, seed=2)
    np.testing.assert_array_equal(a.image, b.image)
    c = sample_ddpm(tiny_bank, sched10, seed=2)
    d = sample(tiny_bank, sched10, method="ddpm", seed=2)
    np.testing.assert_array_equal(c.image, d.image)


def test_trajectory_keeping(tiny_bank, sched10):
    res = sample(tiny_bank, sched10, steps=5, seed=0, keep_trajectory=True)
    assert len(res.trajectory) == 6 and len(res.x0_predictions) == 5
    np.testing.assert_array_equal(res.trajectory[-1], res.image)
    off = sample(tiny_bank, sched10, steps=5, seed=0)
    assert off.trajectory is None and off.x0_predictions is None


def test_sample_config_errors(tiny_bank, sched10, vocab):
    with pytest.raises(ConfigError):
        sample(tiny_bank, build_linear(11, 1e-3, 0.2), steps=5)
    with pytest.raises(ConfigError):
        sample(tiny_bank, sched10, method="euler")
    with pytest.raises(CaptureDisabledError):
        sample(tiny_bank, sched10, steps=5, capture=True)
    with pytest.raises(CaptureDisabledError):
        sample(tiny_bank, sched10, steps=5, cond=tokenize(vocab, []),
               capture=True)


# ---------------------------------------------------------------------------
# attention capture and maps
# ---------------------------------------------------------------------------

def test_capture_collected_per_conditional_evaluation(tiny_bank, sched10, vocab):
    cond = tokenize(vocab, ["red", "square"])
    res = sample(tiny_bank, sched10, steps=5, cond=cond, guidance_scale=2.0,
                 seed=0, capture=True)
    assert len(res.captures) == 5
    assert res.capture_steps == [10, 8, 6, 4, 2]
    for cap in res.captures:
        assert len(cap.matrices) == tiny_bank.dims.depth
        assert cap.n_y == 2


def test_single_text_column_is_returned_verbatim(tiny_dims):
    # with one text token the map is exactly that column, block-averaged
    cap = AttentionCapture()
    rng = np.random.default_rng(5)
    a = rng.dirichlet(np.ones(5), size=4)
    b = rng.dirichlet(np.ones(5), size=4)
    cap.record(a, 4, 1)
    cap.record(b, 4, 1)
    out = attention_map(cap, tiny_dims)
    np.testing.assert_array_equal(out, ((a[:, 4] + b[:, 4]) / 2).reshape(2, 2))


def test_attention_map_errors(tiny_dims):
    with pytest.raises(CaptureDisabledError):
        attention_map(AttentionCapture(), tiny_dims)
    no_text = AttentionCapture()
    no_text.record(np.full((4, 4), 0.25), 4, 0)
    with pytest.raises(DataError):
        attention_map(no_text, tiny_dims)


def test_spatial_entropy_reference_points():
    assert abs(spatial_entropy(np.ones((2, 2))) - np.log(4.0)) < 1e-12
    peaked = np.zeros((2, 2))
    peaked[0, 0] = 1.0
    assert spatial_entropy(peaked) == 0.0
    mild = np.array([[0.7, 0.1], [0.1, 0.1]])
    assert 0.0 < spatial_entropy(mild) < spatial_entropy(np.ones((2, 2)))


def test_entropy_series_matches_recomputation(tiny_bank, sched10, vocab):
    cond = tokenize(vocab, ["red", "square"])
    res = sample(tiny_bank, sched10, steps=5, cond=cond, guidance_scale=2.0,
                 seed=1, capture=True)
    series = entropy_series(res, tiny_bank.dims)
    maps = capture_attention(res, tiny_bank.dims)
    assert [t for t, _ in series] == [10, 8, 6, 4, 2]
    for (t, ent), (_, m) in zip(series, maps):
        assert ent == spatial_entropy(m)
        assert m.shape == (2, 2)


def test_capture_helpers_reject_uncaptured_results(tiny_bank, sched10):
    res = sample(tiny_bank, sched10, steps=5, seed=0)
    with pytest.raises(CaptureDisabledError):
        capture_attention(res, tiny_bank.dims)
