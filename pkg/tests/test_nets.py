import numpy as np
import pytest

from multiminer import autodiff as ad
from multiminer.autodiff import Tensor, no_grad
from multiminer.errors import DimensionError, MissingArtifactError, PretrainingFailure
from multiminer.nets import HeadConfig, MinerNetworks, NetworkConfig, PretrainConfig, \
    macro_f1, pretrain_classifier


def test_extractor_stride_four(tiny_nets, rng):
    with no_grad():
        assert tiny_nets.forward_extractor(Tensor(rng.random((1, 3, 64, 64)))).shape == \
            (1, 64, 16, 16)
        assert tiny_nets.forward_extractor(Tensor(rng.random((1, 3, 80, 80)))).shape == \
            (1, 64, 20, 20)


def test_extractor_rejects_bad_shapes(tiny_nets, rng):
    with pytest.raises(DimensionError):
        tiny_nets.forward_extractor(Tensor(rng.random((1, 3, 30, 30))))
    with pytest.raises(DimensionError):
        tiny_nets.forward_extractor(Tensor(rng.random((1, 1, 32, 32))))
    with pytest.raises(DimensionError):
        tiny_nets.forward_modulator(Tensor(rng.random((1, 5, 8, 8))))


def test_forward_passes_are_pure(tiny_nets, rng):
    x = Tensor(rng.random((2, 3, 32, 32)))
    with no_grad():
        f1, f2 = tiny_nets.forward_extractor(x), tiny_nets.forward_extractor(x)
        assert np.array_equal(f1.data, f2.data)
        assert np.array_equal(tiny_nets.forward_modulator(f1).data,
                              tiny_nets.forward_modulator(f2).data)
        assert np.array_equal(tiny_nets.forward_generator(f1).data,
                              tiny_nets.forward_generator(f2).data)


def test_zero_features_give_content_free_scores(tiny_nets):
    with no_grad():
        a = tiny_nets.forward_modulator(Tensor(np.zeros((1, 64, 8, 8)))).data
        b = tiny_nets.forward_modulator(Tensor(np.zeros((1, 64, 5, 11)))).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_modulator_passes_gradient_to_features(tiny_nets, rng):
    feats = Tensor(rng.random((2, 64, 6, 6)), requires_grad=True)
    ad.sum(tiny_nets.forward_modulator(feats)).backward()
    assert np.abs(feats.grad).sum() > 0
    idx = (0, 3, 2, 2)
    base = rng.random((2, 64, 6, 6))

    def score(arr):
        with no_grad():
            return tiny_nets.forward_modulator(Tensor(arr)).data.sum()

    feats = Tensor(base, requires_grad=True)
    ad.sum(tiny_nets.forward_modulator(feats)).backward()
    hi, lo = base.copy(), base.copy()
    hi[idx] += 1e-5
    lo[idx] -= 1e-5
    assert feats.grad[idx] == pytest.approx((score(hi) - score(lo)) / 2e-5, rel=1e-4, abs=1e-9)


def test_generator_output_nonnegative_with_feature_shape(tiny_nets, rng):
    with no_grad():
        h = tiny_nets.forward_generator(Tensor(rng.standard_normal((3, 64, 7, 9)))).data
    assert h.shape == (3, 4, 7, 9) and h.min() >= 0


def test_generator_init_transfer(tiny_nets, rng):
    tiny_nets.init_generator_from_modulator()
    feats = Tensor(rng.standard_normal((2, 64, 6, 6)))
    with no_grad():
        np.testing.assert_allclose(tiny_nets.generator_premaps(feats).data,
                                   tiny_nets.modulator_maps(feats).data, atol=1e-12)
    snapshot = {k: p.data.copy() for k, p in tiny_nets.modulator.items()}
    gen_before = {k: p.data.copy() for k, p in tiny_nets.generator.items()}
    tiny_nets.init_generator_from_modulator()
    assert all(np.array_equal(gen_before[k], p.data) for k, p in tiny_nets.generator.items())
    for p in tiny_nets.generator.values():
        p.data += 1.0
    assert all(np.array_equal(snapshot[k], p.data) for k, p in tiny_nets.modulator.items())


def test_freeze_flags(tiny_nets):
    assert tiny_nets.frozen_flags() == {"extractor": True, "modulator": False, "generator": False}
    tiny_nets.freeze("generator")
    assert all(p.frozen for p in tiny_nets.generator.values())


def test_checkpoint_round_trip(tiny_nets, tmp_path, rng):
    tiny_nets.save(tmp_path)
    back = MinerNetworks.load(tmp_path)
    assert back.frozen_flags() == tiny_nets.frozen_flags()
    for k, p in tiny_nets.all_params().items():
        assert np.array_equal(back.all_params()[k].data, p.data)
    with pytest.raises(MissingArtifactError):
        MinerNetworks.load(tmp_path / "none")


def test_macro_f1_hand_values():
    labels = np.array([[1, 0], [0, 1], [1, 1]])
    assert macro_f1(np.where(labels > 0, 1.0, -1.0), labels) == 1.0
    scores = np.array([[1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
    # class 0: tp 1 fp 1 fn 1 -> 0.5; class 1: tp 1 fp 0 fn 1 -> 2/3
    assert macro_f1(scores, labels) == pytest.approx((0.5 + 2 / 3) / 2)


def _small_nets():
    return MinerNetworks(NetworkConfig(head=HeadConfig(hidden=8)))


def test_pretrain_lr_zero_changes_nothing(small_dataset):
    nets = _small_nets()
    before = {k: p.data.copy() for k, p in nets.all_params().items()}
    cfg = PretrainConfig(epochs=1, lr_extractor=0.0, lr_modulator=0.0, min_macro_f1=0.0)
    pretrain_classifier(nets, small_dataset, cfg)
    assert all(np.array_equal(before[k], p.data) for k, p in nets.all_params().items())
    assert nets.frozen_flags()["extractor"]


def test_pretrain_loss_trend_decreases(small_dataset):
    metrics = pretrain_classifier(_small_nets(), small_dataset,
                                  PretrainConfig(epochs=6, min_macro_f1=0.0))
    curve = np.convolve(metrics["loss_curve"], np.ones(2) / 2, mode="valid")
    assert curve[-1] < curve[0]


def test_pretrain_gate_failure_carries_metrics(small_dataset):
    with pytest.raises(PretrainingFailure) as info:
        pretrain_classifier(_small_nets(), small_dataset,
                            PretrainConfig(epochs=1, min_macro_f1=1.01))
    assert "eval_macro_f1" in info.value.metrics and info.value.exit_code == 4
