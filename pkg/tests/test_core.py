"""Model configuration, parameter counting, step schedule, single NCA step."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3dnca import core
from m3dnca.autodiff.tensor import Tape
from m3dnca.errors import ConfigError, ShapeError


def test_param_count_standard_two_level():
    assert core.param_count(core.ModelConfig()) == 12480


def test_param_count_three_level():
    cfg = core.ModelConfig(levels=3, scale_factor=2, kernel_sizes=(7, 3, 3))
    assert core.param_count(cfg) == 16192


def test_param_count_formula_breakdown():
    # One level: depthwise kernels + dense over [perceived, state] + BN affine
    # + update head. Dense input is 2c channels (perception concat state).
    cfg = core.ModelConfig(levels=1, kernel_sizes=(5,), channels=4, hidden=8)
    expect = 4 * 125 + (8 * 2 * 4 + 8) + 2 * 8 + (4 * 8 + 4)
    assert core.param_count(cfg) == expect


def test_param_count_matches_live_model():
    for cfg in (
        core.ModelConfig(),
        core.ModelConfig(levels=3, scale_factor=2, kernel_sizes=(7, 3, 3)),
        core.ModelConfig(channels=4, hidden=8, kernel_sizes=(3, 3), scale_factor=2),
    ):
        model = core.Model.initial(cfg, seed=0)
        live = sum(int(np.prod(t.data.shape)) for t in model.parameters())
        assert live == core.param_count(cfg)


@given(st.integers(min_value=2, max_value=128), st.sampled_from([3, 5, 7, 9]))
@settings(max_examples=60, deadline=None)
def test_step_count_covers_grid(extent, k):
    # Information travels (k-1)/2 voxels per step; s steps must cover the
    # longest axis, and s-1 must not.
    s = core.step_count((extent, 2, 2), k)
    r = (k - 1) // 2
    assert s * r >= extent
    assert (s - 1) * r < extent


def test_step_count_known_values():
    assert core.step_count((64, 64, 64), 3) == 64
    assert core.step_count((16, 16, 16), 7) == 6
    assert core.step_count((10, 4, 4), 3) == 10


def test_level_extents_two_level():
    cfg = core.ModelConfig()
    assert core.level_extents((64, 64, 64), cfg, 1) == (16, 16, 16)
    assert core.level_extents((64, 64, 64), cfg, 2) == (64, 64, 64)


def test_level_extents_rejects_nondivisible():
    cfg = core.ModelConfig()
    with pytest.raises(ShapeError):
        core.level_extents((62, 64, 64), cfg, 1)


def test_level_extents_legacy_extra_downscale():
    cfg = core.ModelConfig(legacy_extra_downscale=True)
    assert core.level_extents((128, 128, 128), cfg, 1) == (8, 8, 8)
    assert core.level_extents((128, 128, 128), cfg, 2) == (128, 128, 128)


def test_step_schedule_runtime_policy():
    cfg = core.ModelConfig()
    sched = core.step_schedule((64, 64, 64), cfg)
    assert sched == (core.step_count((16,) * 3, 7), core.step_count((64,) * 3, 3))


def test_step_schedule_frozen_policy_replays_recorded():
    cfg = core.ModelConfig(step_policy=core.STEP_POLICY_FROZEN)
    assert core.step_schedule((64, 64, 64), cfg, frozen=(6, 16)) == (6, 16)
    with pytest.raises(ConfigError):
        core.step_schedule((64, 64, 64), cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        core.ModelConfig(levels=0)
    with pytest.raises(ConfigError):
        core.ModelConfig(kernel_sizes=(7,))  # wrong arity for levels=2
    with pytest.raises(ConfigError):
        core.ModelConfig(kernel_sizes=(7, 4))  # even kernel
    with pytest.raises(ConfigError):
        core.ModelConfig(fire_rate=0.0)
    with pytest.raises(ConfigError):
        core.ModelConfig(scale_factor=1)
    with pytest.raises(ConfigError):
        core.ModelConfig(channels=1)  # needs image + logit channels
    with pytest.raises(ConfigError):
        core.ModelConfig(state_upscale="cubic")


def test_config_with_override():
    cfg = core.ModelConfig().with_(channels=8, hidden=16)
    assert cfg.channels == 8
    assert cfg.hidden == 16
    assert cfg.levels == 2


def test_initial_model_deterministic():
    a = core.Model.initial(core.ModelConfig(), seed=3)
    b = core.Model.initial(core.ModelConfig(), seed=3)
    c = core.Model.initial(core.ModelConfig(), seed=4)
    assert np.array_equal(a.levels[0].perception.data, b.levels[0].perception.data)
    assert not np.array_equal(a.levels[0].perception.data, c.levels[0].perception.data)


def test_initial_update_head_is_zero():
    # Zero-initialized output head: the automaton starts as the identity map.
    model = core.Model.initial(core.ModelConfig(), seed=1)
    for lp in model.levels:
        np.testing.assert_array_equal(lp.w2.data, 0.0)
        np.testing.assert_array_equal(lp.b2.data, 0.0)


def test_seed_state_layout():
    cfg = core.ModelConfig(channels=4, kernel_sizes=(3, 3), scale_factor=2)
    img = np.random.default_rng(0).uniform(size=(2, 6, 6, 6)).astype(np.float32)
    state = core.seed_state(img, cfg)
    assert state.grid.data.shape == (2, 4, 6, 6, 6)
    np.testing.assert_array_equal(state.grid.data[:, core.IMAGE_CHANNEL], img)
    np.testing.assert_array_equal(state.grid.data[:, 1:], 0.0)
    np.testing.assert_array_equal(state.origins, 0)


def test_nca_step_identity_at_init():
    # With a zero update head the state is unchanged by a step.
    cfg = core.ModelConfig(channels=4, hidden=8, kernel_sizes=(3, 3), scale_factor=2)
    model = core.Model.initial(cfg, seed=2)
    img = np.random.default_rng(1).uniform(size=(1, 6, 6, 6)).astype(np.float32)
    state = core.seed_state(img, cfg)
    out = core.nca_step(state, model.levels[0], cfg, level=1, step=0,
                        seeds=np.array([7]), bn_training=False)
    np.testing.assert_array_equal(out.grid.data, state.grid.data)


def randomized_model(cfg, seed):
    model = core.Model.initial(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for lp in model.levels:
        lp.w2.data[:] = rng.normal(0.0, 0.5, lp.w2.data.shape).astype(np.float32)
        lp.b2.data[:] = rng.normal(0.0, 0.5, lp.b2.data.shape).astype(np.float32)
    return model


def test_nca_step_respects_fire_mask():
    # Voxels that fire change their hidden state; others keep it exactly.
    cfg = core.ModelConfig(channels=4, hidden=8, kernel_sizes=(3, 3), scale_factor=2)
    model = randomized_model(cfg, 5)
    rng = np.random.default_rng(6)
    img = rng.uniform(size=(1, 8, 8, 8)).astype(np.float32)
    state = core.seed_state(img, cfg)
    seeds = np.array([11])
    mask = core.fire_mask(seeds, 1, 0, state.origins, (8, 8, 8), cfg.fire_rate)
    out = core.nca_step(state, model.levels[0], cfg, level=1, step=0,
                        seeds=seeds, bn_training=False)
    quiet = mask[0] == 0.0
    hidden = slice(2, None)
    np.testing.assert_array_equal(
        out.grid.data[0, hidden][:, quiet], state.grid.data[0, hidden][:, quiet]
    )
    assert not np.array_equal(out.grid.data[0, hidden][:, ~quiet],
                              state.grid.data[0, hidden][:, ~quiet])


def test_nca_step_reimposes_image_channel():
    cfg = core.ModelConfig(channels=4, hidden=8, kernel_sizes=(3, 3), scale_factor=2)
    model = randomized_model(cfg, 5)
    img = np.random.default_rng(2).uniform(size=(1, 6, 6, 6)).astype(np.float32)
    state = core.seed_state(img, cfg)
    out = core.nca_step(state, model.levels[0], cfg, level=1, step=0,
                        seeds=np.array([3]), bn_training=False)
    np.testing.assert_array_equal(out.grid.data[:, core.IMAGE_CHANNEL], img)


def test_nca_step_window_matches_full_grid():
    # Evolving a window whose state was cropped with matching origins gives
    # the same interior as evolving the full grid, away from the halo.
    cfg = core.ModelConfig(channels=4, hidden=8, kernel_sizes=(3, 3), scale_factor=2)
    model = randomized_model(cfg, 8)
    rng = np.random.default_rng(9)
    img = rng.uniform(size=(1, 12, 12, 12)).astype(np.float32)
    full = core.seed_state(img, cfg)
    full_out = core.nca_step(full, model.levels[0], cfg, level=1, step=4,
                             seeds=np.array([21]), bn_training=False)
    lo, hi = 3, 9
    win = core.seed_state(
        np.ascontiguousarray(img[:, lo:hi, lo:hi, lo:hi]),
        cfg,
        origins=np.array([[lo, lo, lo]], dtype=np.int64),
    )
    win.grid.data[:] = full.grid.data[:, :, lo:hi, lo:hi, lo:hi]
    win_out = core.nca_step(win, model.levels[0], cfg, level=1, step=4,
                            seeds=np.array([21]), bn_training=False)
    r = 1  # halo consumed by one conv
    np.testing.assert_array_equal(
        win_out.grid.data[:, :, r:-r, r:-r, r:-r],
        full_out.grid.data[:, :, lo + r : hi - r, lo + r : hi - r, lo + r : hi - r],
    )


def test_nca_run_steps_and_tape():
    cfg = core.ModelConfig(channels=4, hidden=8, kernel_sizes=(3, 3), scale_factor=2)
    model = core.Model.initial(cfg, seed=12)
    img = np.random.default_rng(13).uniform(size=(1, 6, 6, 6)).astype(np.float32)
    tape = Tape()
    state = core.seed_state(img, cfg)
    out = core.nca_run(state, model.levels[0], cfg, level=1, steps=3,
                       seeds=np.array([5]), bn_training=True, tape=tape)
    assert out.grid.data.shape == state.grid.data.shape
    assert len(tape) > 0


def test_probability_and_mask():
    cfg = core.ModelConfig(channels=4, hidden=8, kernel_sizes=(3, 3), scale_factor=2)
    img = np.zeros((1, 3, 1, 1), dtype=np.float32)
    state = core.seed_state(img, cfg)
    state.grid.data[0, core.LOGIT_CHANNEL, :, 0, 0] = [-50.0, 0.0, 50.0]
    prob = core.logit_probability(state).data
    assert prob[0, 0, 0, 0] == pytest.approx(0.0, abs=1e-6)
    assert prob[0, 1, 0, 0] == pytest.approx(0.5)
    assert prob[0, 2, 0, 0] == pytest.approx(1.0, abs=1e-6)
    mask = core.probability_to_mask(prob)
    assert mask.dtype == np.uint8
    np.testing.assert_array_equal(mask[0, :, 0, 0], [0, 0, 1])


def test_fire_mask_full_rate_is_all_ones():
    m = core.fire_mask(np.array([1]), 1, 0, np.zeros((1, 3), dtype=np.int64),
                       (4, 4, 4), 1.0)
    np.testing.assert_array_equal(m, 1.0)


def test_trained_steps_roundtrip():
    model = core.Model.initial(core.ModelConfig(), seed=1)
    assert model.trained_steps() is None
    model.meta["train_step_counts"] = [6, 64]
    assert model.trained_steps() == (6, 64)
