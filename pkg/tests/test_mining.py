import copy

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from multiminer import autodiff as ad
from multiminer.autodiff import Tensor
from multiminer.errors import ConfigError, DimensionError, InsufficientDataError, MergeError
from multiminer.mining import Miner, MiningConfig, RegionMap, RegionMapPool, accumulated_mask, \
    erasure_probe, frobenius_regularizer, is_empty_map, load_pools, mask_features, merge_final, \
    merge_maps, mined_fraction, normalize_map, run_mining, save_pools, scale_for_step

unit = st.floats(0, 1, allow_nan=False)


def pool_with(*maps, category=0):
    pool = RegionMapPool("img", category)
    for t, m in enumerate(maps, start=1):
        pool.append(RegionMap(np.asarray(m, dtype=np.float64), category, t, 32))
    return pool


# -- schedule -------------------------------------------------------------------

def test_scale_schedule_reference_values():
    s = [256, 321, 417]
    assert scale_for_step(1, s) == 256
    assert scale_for_step(2, s) == 321
    assert scale_for_step(3, s) == 417
    assert scale_for_step(7, s) == 417
    with pytest.raises(ValueError):
        scale_for_step(0, s)


# -- accumulated mask and feature masking ----------------------------------------

def test_accumulated_mask_empty_is_ones():
    np.testing.assert_array_equal(accumulated_mask({}, 3, 4), np.ones((3, 4)))


def test_accumulated_mask_takes_min_across_categories():
    pools = {0: pool_with([[0.2]], category=0), 1: pool_with([[0.6]], category=1)}
    assert accumulated_mask(pools, 1, 1).item() == pytest.approx(0.2)


@given(maps=st.lists(arrays(np.float64, (2, 2), elements=unit), min_size=1, max_size=4))
def test_accumulated_mask_never_increases(maps):
    pool = RegionMapPool("img", 0)
    prev = accumulated_mask({0: pool}, 4, 4)
    for t, m in enumerate(maps, start=1):
        pool.append(RegionMap(m, 0, t, 32))
        cur = accumulated_mask({0: pool}, 4, 4)
        assert np.all(cur <= prev + 1e-12)
        prev = cur


def test_mask_features_examples(rng):
    f = Tensor(rng.standard_normal((2, 3, 4, 4)))
    np.testing.assert_array_equal(mask_features(f, np.ones((2, 1, 4, 4))).data, f.data)
    m = np.ones((2, 1, 4, 4))
    m[0, 0, 1, 2] = 0
    out = mask_features(f, m).data
    assert not out[0, :, 1, 2].any()
    np.testing.assert_allclose(mask_features(f, np.full((2, 1, 4, 4), 0.5)).data, 0.5 * f.data)
    with pytest.raises(DimensionError):
        mask_features(f, np.ones((2, 1, 3, 4)))


def test_mask_gets_no_gradient(rng):
    f = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    mask = Tensor(rng.random((1, 1, 3, 3)), requires_grad=True)
    ad.sum(mask_features(f, mask)).backward()
    assert mask.grad is None and f.grad is not None


# -- normalization and regularizer ------------------------------------------------

def test_normalize_hand_example():
    out = normalize_map(Tensor([[0.0, 2.0], [4.0, 8.0]]), 1e-5).data
    np.testing.assert_allclose(out, [[1, 0.75], [0.5, 0]], atol=1e-4)


def test_normalize_constant_is_all_ones():
    np.testing.assert_array_equal(normalize_map(Tensor(np.full((3, 3), 2.5)), 1e-5).data, 1.0)


@given(h=arrays(np.float64, (1, 2, 3, 4), elements=st.floats(0, 1e3)))
def test_normalize_range_and_argmin(h):
    out = normalize_map(Tensor(h), 1e-5).data
    assert out.min() >= 0 and out.max() <= 1
    for c in range(2):
        assert np.all(out[0, c][h[0, c] == h[0, c].min()] == 1.0)


def test_normalize_rejects_bad_eps():
    with pytest.raises(ConfigError):
        normalize_map(Tensor(np.ones((2, 2))), 0.0)


def test_frobenius_all_ones_single_category():
    maps = Tensor(np.ones((1, 2, 2, 2)))
    assert frobenius_regularizer(maps, np.array([[True, False]])).item() == pytest.approx(-2.0)


# -- stop test --------------------------------------------------------------------

@given(theta=st.floats(0.01, 1.0), rho=st.floats(1e-4, 1.0), score=unit)
def test_all_ones_map_is_empty(theta, rho, score):
    cfg = MiningConfig(theta_mask=theta, rho_stop=rho)
    assert is_empty_map(np.ones((8, 8)), score, cfg)


def test_thirty_percent_mined_is_stored():
    values = np.ones(100)
    values[:30] = 0.1
    cfg = MiningConfig(theta_mask=0.5, rho_stop=0.01)
    assert not is_empty_map(values.reshape(10, 10), 0.9, cfg)
    assert is_empty_map(values.reshape(10, 10), 0.05, cfg)  # classifier no longer sees it


def test_already_mined_area_does_not_count():
    values = np.ones((10, 10))
    values[:3] = 0.1
    prior = np.ones((10, 10))
    prior[:3] = 0.0
    assert mined_fraction(values, 0.5) == pytest.approx(0.3)
    assert mined_fraction(values, 0.5, prior) == 0.0
    assert is_empty_map(values, 0.9, MiningConfig(), prior)


# -- pools and merging ------------------------------------------------------------

def test_pool_invariants():
    pool = pool_with([[0.5]])
    with pytest.raises(ValueError):
        pool.append(RegionMap(np.ones((1, 1)), 0, 1, 32))
    pool.stop(1)
    assert pool.stopped and pool.stop_step == 1 and not pool.failed
    with pytest.raises(ValueError):
        pool.append(RegionMap(np.ones((1, 1)), 0, 2, 32))
    empty = RegionMapPool("x", 1)
    empty.stop(0)
    assert empty.failed


def test_merge_final_examples():
    single = pool_with([[0.0, 1.0]])
    np.testing.assert_allclose(merge_final(single, 1), ad.resize_np(np.array([[0.0, 1.0]]), 1, 1))
    np.testing.assert_allclose(merge_final(pool_with([[0.5, 0.25], [1.0, 0.0]]), 2),
                               [[0.5, 0.25], [1.0, 0.0]])
    two = pool_with(np.array([[1.0, 0.2]]).reshape(1, 2), np.array([[0.3, 1.0]]).reshape(1, 2))
    np.testing.assert_allclose(merge_maps(two.maps, 1, 2), [[0.3, 0.2]])
    with pytest.raises(MergeError):
        merge_final(RegionMapPool("x", 0), 4)


@given(maps=st.lists(arrays(np.float64, (3, 3), elements=unit), min_size=2, max_size=5))
def test_merge_monotone_in_horizon(maps):
    pool = RegionMapPool("img", 0)
    for t, m in enumerate(maps, start=1):
        pool.append(RegionMap(m, 0, t, 32))
    merged = [merge_maps(pool.maps[:T], 6, 6) for T in range(1, len(maps) + 1)]
    for a, b in zip(merged, merged[1:]):
        assert np.all(b <= a + 1e-12)
    assert merged[-1].min() >= 0 and merged[-1].max() <= 1


@given(a=arrays(np.float64, (4, 4), elements=unit), b=arrays(np.float64, (4, 4), elements=unit))
def test_merge_commutative_and_idempotent(a, b):
    ab = merge_maps(pool_with(a, b).maps, 4, 4)
    ba = merge_maps(pool_with(b, a).maps, 4, 4)
    np.testing.assert_array_equal(ab, ba)
    np.testing.assert_array_equal(merge_maps(pool_with(a, a).maps, 4, 4), a)


# -- configuration ----------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"scales": [32]}, {"scales": [48, 32, 64]}, {"batch_sizes": [1, 2]}, {"lam": -1.0},
    {"eps": 0.0}, {"max_steps": 0}, {"generator_targets": "some"},
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        MiningConfig(**kwargs)


def test_fixed_scale_copy():
    base = MiningConfig()
    single = MiningConfig.fixed_scale(base, 48)
    assert single.scales == [48] and single.batch_sizes == [16] and single.single_scale
    assert base.scales == [32, 48, 64]


# -- the loop on random networks --------------------------------------------------

def _scenes(small_dataset, n=8):
    return small_dataset.subset("train")[:n]


def test_extractor_frozen_required(tiny_nets, small_dataset):
    tiny_nets.freeze("extractor", False)
    with pytest.raises(ConfigError):
        Miner(tiny_nets, _scenes(small_dataset), MiningConfig())


def test_single_step_bound(tiny_nets, small_dataset):
    tiny_nets.init_generator_from_modulator()
    ext = {k: p.data.copy() for k, p in tiny_nets.extractor.items()}
    miner = run_mining(tiny_nets, _scenes(small_dataset), MiningConfig(max_steps=1, n_m=1))
    for pools in miner.pools:
        for pool in pools.values():
            assert pool.stopped
            assert pool.num_steps == (0 if pool.failed else 1)
            assert pool.forced == (not pool.failed)
    assert all(np.array_equal(ext[k], p.data) for k, p in tiny_nets.extractor.items())
    assert any(e["event"] == "emit" for e in miner.events)


def test_stopped_pools_never_grow(tiny_nets, small_dataset):
    tiny_nets.init_generator_from_modulator()
    miner = run_mining(tiny_nets, _scenes(small_dataset), MiningConfig(max_steps=4, n_m=1))
    for pools in miner.pools:
        for pool in pools.values():
            assert pool.stopped
            if not pool.forced:
                assert pool.num_steps == pool.stop_step
            assert [m.step for m in pool.maps] == list(range(1, pool.num_steps + 1))


def test_modulator_untouched_when_n_m_zero(tiny_nets, small_dataset):
    tiny_nets.init_generator_from_modulator()
    before = {k: p.data.copy() for k, p in tiny_nets.modulator.items()}
    miner = Miner(tiny_nets, _scenes(small_dataset), MiningConfig(n_m=0))
    assert miner.modulator_phase(1) == []
    assert all(np.array_equal(before[k], p.data) for k, p in tiny_nets.modulator.items())


def test_step_snapshots_and_pool_round_trip(tiny_nets, small_dataset, tmp_path):
    tiny_nets.init_generator_from_modulator()
    miner = run_mining(tiny_nets, _scenes(small_dataset), MiningConfig(max_steps=2, n_m=1),
                       run_dir=tmp_path)
    step1 = tmp_path / "steps" / "step_01"
    assert (step1 / "step.json").exists() and (step1 / "nets" / "nets.json").exists()
    save_pools(miner.pools, tmp_path / "pools")
    back = load_pools(tmp_path / "pools")
    for a, b in zip(miner.pools, back):
        assert a.keys() == b.keys()
        for j in a:
            assert (a[j].stop_step, a[j].forced, a[j].failed) == \
                (b[j].stop_step, b[j].forced, b[j].failed)
            for ma, mb in zip(a[j].maps, b[j].maps):
                assert ma.values.tobytes() == mb.values.tobytes() and ma.step == mb.step


def test_deleting_one_category_leaves_other_maps_untouched(tiny_nets, small_dataset):
    tiny_nets.init_generator_from_modulator()
    miner = run_mining(tiny_nets, _scenes(small_dataset), MiningConfig(max_steps=3, n_m=1))
    pools = next(p for p in miner.pools if len(p) >= 2 and all(q.maps for q in p.values()))
    j, *others = sorted(pools)
    snap = {k: [m.values.tobytes() for m in pools[k].maps] for k in others}
    reduced = {k: v for k, v in copy.deepcopy(pools).items() if k != j}
    accumulated_mask(reduced, 8, 8)
    for k in others:
        assert [m.values.tobytes() for m in reduced[k].maps] == snap[k]
        assert [m.values.tobytes() for m in pools[k].maps] == snap[k]


def test_probe_needs_enough_images(tiny_nets, small_dataset):
    with pytest.raises(InsufficientDataError):
        erasure_probe(tiny_nets, _scenes(small_dataset, 3), 0, MiningConfig(), n_images=5)
