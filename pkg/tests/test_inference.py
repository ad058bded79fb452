"""Full-volume segmentation, tiling equivalence, memory planning, ensembles."""

import numpy as np
import pytest

from m3dnca import core, inference, quality, synth
from m3dnca.errors import ConfigError, GeometryError, MemoryPlanError, ShapeError

CFG = core.ModelConfig(channels=4, hidden=8, kernel_sizes=(7, 3), scale_factor=4)


@pytest.fixture(scope="module")
def image24():
    return synth.make_volume(31, (24, 24, 24))[0]


@pytest.fixture(scope="module")
def live_model():
    # Fresh models have a zero update head, so perturb it: tiling and
    # seeding claims are only meaningful when cells actually change.
    model = core.Model.initial(CFG, seed=2)
    rng = np.random.default_rng(3)
    for lp in model.levels:
        lp.w2.data[:] = rng.normal(0, 0.15, lp.w2.data.shape)
        lp.b2.data[:] = rng.normal(0, 0.05, lp.b2.data.shape)
    return model


# ---------------------------------------------------------------------------
# segment basics


def test_zero_update_model_gives_half_probability(image24):
    model = core.Model.initial(CFG, seed=0)
    res = inference.segment(model, image24, seed=4)
    assert np.all(res.prob == np.float32(0.5))
    assert not res.mask.any()


def test_same_seed_reproduces_bitwise(image24, live_model):
    a = inference.segment(live_model, image24, seed=9)
    b = inference.segment(live_model, image24, seed=9)
    assert np.array_equal(a.prob, b.prob)
    assert np.array_equal(a.mask, b.mask)


def test_different_seed_changes_output(image24, live_model):
    a = inference.segment(live_model, image24, seed=9)
    b = inference.segment(live_model, image24, seed=10)
    assert not np.array_equal(a.prob, b.prob)


def test_step_schedule_from_runtime_extents(image24, live_model):
    res = inference.segment(live_model, image24, seed=0)
    assert res.steps == (2, 24)


def test_frozen_policy_replays_recorded_steps(image24):
    model = core.Model.initial(
        CFG.with_(step_policy=core.STEP_POLICY_FROZEN), seed=0
    )
    model.meta["train_step_counts"] = [2, 6]
    res = inference.segment(model, image24, seed=0)
    assert res.steps == (2, 6)
    model.meta.pop("train_step_counts")
    with pytest.raises(ConfigError):
        inference.segment(model, image24, seed=0)


def test_segment_validations(image24, live_model):
    with pytest.raises(ShapeError):
        inference.segment(live_model, image24[0], seed=0)
    with pytest.raises(ConfigError):
        inference.segment(live_model, image24, tile=8, budget_bytes=1 << 20)
    with pytest.raises(ConfigError):
        inference.segment(live_model, image24, chunk=0)
    with pytest.raises(GeometryError):
        inference.segment(live_model, np.zeros((2, 24, 24), dtype=np.float32))


# ---------------------------------------------------------------------------
# tiling equivalence


@pytest.mark.parametrize("tile", [8, 16, (16, 8, 12), (24, 24, 24)])
def test_tiled_equals_untiled_bitwise(image24, live_model, tile):
    whole = inference.segment(live_model, image24, seed=5)
    tiled = inference.segment(live_model, image24, seed=5, tile=tile)
    assert np.array_equal(whole.prob, tiled.prob)
    assert np.array_equal(whole.mask, tiled.mask)


def test_chunk_size_does_not_change_results(image24, live_model):
    a = inference.segment(live_model, image24, seed=5)
    b = inference.segment(live_model, image24, seed=5, chunk=7)
    assert np.array_equal(a.prob, b.prob)


def test_budget_driven_plan_matches_untiled(image24, live_model):
    whole = inference.segment(live_model, image24, seed=5)
    generous = inference.segment(
        live_model, image24, seed=5, budget_bytes=1 << 30
    )
    assert generous.plan is not None
    assert generous.plan.tile == (24, 24, 24)
    assert np.array_equal(whole.prob, generous.prob)
    tight_plan = inference.memory_plan((24, 24, 24), CFG, 1 << 30)
    tight = inference.segment(
        live_model, image24, seed=5,
        budget_bytes=tight_plan.resident_bytes
        + inference.plan_tile_bytes((8, 8, 8), CFG, inference.DEFAULT_CHUNK),
    )
    assert tight.plan is not None
    assert max(tight.plan.tile) <= 8
    assert np.array_equal(whole.prob, tight.prob)


# ---------------------------------------------------------------------------
# memory planning


def test_plan_exact_budget_is_single_tile():
    cfg = core.ModelConfig()
    ext = (64, 64, 64)
    full = inference.plan_resident_bytes(ext, cfg) + inference.plan_tile_bytes(
        (64, 64, 64), cfg, inference.DEFAULT_CHUNK
    )
    plan = inference.memory_plan(ext, cfg, full)
    assert plan.tile == (64, 64, 64)
    assert plan.expected_peak_bytes == full
    assert plan.budget_bytes == full


def test_plan_halved_budget_halves_tile_voxels():
    cfg = core.ModelConfig()
    ext = (320, 320, 24)
    full = inference.plan_resident_bytes(ext, cfg) + inference.plan_tile_bytes(
        core.level_extents(ext, cfg, cfg.levels), cfg, inference.DEFAULT_CHUNK
    )
    plan_full = inference.memory_plan(ext, cfg, full)
    plan_half = inference.memory_plan(ext, cfg, full // 2)
    vox = lambda t: t[0] * t[1] * t[2]
    assert vox(plan_half.tile) <= vox(plan_full.tile) // 2
    assert plan_half.expected_peak_bytes <= full // 2


def test_plan_infeasible_budget_names_floor():
    cfg = core.ModelConfig()
    with pytest.raises(MemoryPlanError, match="resident"):
        inference.memory_plan((64, 64, 64), cfg, 1024)


def test_plan_estimate_near_actual_peak():
    # The planner's expected peak must land within 1.5x of the metered
    # allocations of a real run on a 64 cubed volume.
    img = synth.make_volume(8, (64, 64, 64))[0]
    model = core.Model.initial(CFG, seed=1)
    budget = 1 << 30
    res = inference.segment(model, img, seed=0, budget_bytes=budget)
    expected = res.plan.expected_peak_bytes
    actual = res.peak_bytes
    assert expected <= actual * 1.5
    assert actual <= expected * 1.5


def test_memory_meter_accounting():
    m = inference.MemoryMeter()
    m.alloc(100)
    m.alloc(50)
    m.free(100)
    m.alloc(25)
    assert m.current == 75
    assert m.peak == 150


def test_image_pyramid_shapes_and_averaging(image24):
    pyr = inference.image_pyramid(image24, CFG)
    assert [p.shape for p in pyr] == [(6, 6, 6), (24, 24, 24)]
    block = image24[:4, :4, :4].mean()
    assert pyr[0][0, 0, 0] == pytest.approx(block, abs=1e-6)


# ---------------------------------------------------------------------------
# ensembles


def test_member_seeds_distinct():
    seeds = [inference.member_seed(7, i) for i in range(10)]
    assert len(set(seeds)) == 10
    assert inference.member_seed(7, 0) != inference.member_seed(8, 0)


def test_ensemble_pools_member_statistics(image24, live_model):
    res = inference.ensemble(
        live_model, image24, seed=3, members=4, keep_members=True
    )
    stack = np.stack(res.member_probs).astype(np.float64)
    assert np.allclose(res.mean_prob, stack.mean(axis=0), atol=1e-6)
    assert np.allclose(res.sd, stack.std(axis=0), atol=1e-6)
    assert np.array_equal(res.mask, (res.mean_prob > 0.5).astype(np.uint8))
    assert res.nqm == pytest.approx(
        quality.nqm_score(res.mean_prob, res.sd), rel=1e-9
    )
    assert res.seeds == tuple(inference.member_seed(3, i) for i in range(4))


def test_ensemble_members_match_single_runs(image24, live_model):
    res = inference.ensemble(
        live_model, image24, seed=3, members=2, keep_members=True
    )
    for i in range(2):
        single = inference.segment(
            live_model, image24, seed=inference.member_seed(3, i)
        )
        assert np.array_equal(res.member_probs[i], single.prob)


def test_ensemble_single_member_has_zero_spread(image24, live_model):
    res = inference.ensemble(live_model, image24, seed=3, members=1)
    assert not res.sd.any()
    assert res.nqm == 0.0


def test_ensemble_validates_members(image24, live_model):
    with pytest.raises(ConfigError):
        inference.ensemble(live_model, image24, members=0)
