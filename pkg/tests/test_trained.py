"""Examples that need a pretrained checkpoint; they reuse the first default run."""
import numpy as np
import pytest

from multiminer.mining import Miner, MiningConfig, modulator_eval_f1, run_mining
from multiminer.pipeline import _fresh_miner_nets, _mining_scenes
from multiminer.scenes import DatasetSpec, generate_dataset, load_dataset

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def trained(default_runs):
    root = default_runs[0]["dir"]
    return root / "ckpt", load_dataset(root / "dataset")


def _positive_means(miner, ft):
    maps = miner.generator_maps(ft)
    return maps.mean(axis=(2, 3))[miner.positives]


def test_heavy_regularizer_drives_maps_to_ones(trained):
    ckpt, ds = trained
    miner = Miner(_fresh_miner_nets(ckpt), _mining_scenes(ds)[:5], MiningConfig(lam=1e3, n_g=5))
    ft = miner.masked_features(1)
    miner.generator_phase(1, ft)
    assert _positive_means(miner, ft).min() >= 0.95


def test_no_regularizer_mines_harder(trained):
    ckpt, ds = trained
    miner = Miner(_fresh_miner_nets(ckpt), _mining_scenes(ds)[:5], MiningConfig(lam=0.0))
    ft = miner.masked_features(1)
    before = _positive_means(miner, ft).mean()
    miner.generator_phase(1, ft)
    assert _positive_means(miner, ft).mean() < before


def test_first_modulator_phase_keeps_classifier(trained):
    # same protocol as the pretraining gate: eval split at native resolution
    ckpt, ds = trained
    miner = Miner(_fresh_miner_nets(ckpt), _mining_scenes(ds), MiningConfig())
    native = ds.spec.image_size
    assert modulator_eval_f1(miner.nets, ds.subset("eval"), native) >= 0.95
    miner.modulator_phase(1)
    assert modulator_eval_f1(miner.nets, ds.subset("eval"), native) >= 0.95


@pytest.fixture(scope="module")
def size_medians(trained):
    ckpt, _ = trained
    out = {}
    # two 0.3-area objects rarely fit in one 64x64 scene, so large scenes hold one object
    for name, size_range, max_objects in (("tiny", (0.02, 0.04), 2), ("large", (0.25, 0.30), 1)):
        ds = generate_dataset(DatasetSpec(num_scenes=40, size_range=size_range,
                                          max_objects=max_objects, seed=2024))
        miner = run_mining(_fresh_miner_nets(ckpt), ds.scenes, MiningConfig())
        out[name] = float(np.median([p.num_steps for pools in miner.pools
                                     for p in pools.values()]))
    return out


def test_tiny_objects_stop_early(size_medians):
    assert size_medians["tiny"] <= 2


def test_large_objects_take_more_steps(size_medians):
    assert size_medians["large"] > size_medians["tiny"]
