import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from multiminer import autodiff as ad
from multiminer.autodiff import Parameter, Tensor, check_gradients, no_grad, sgd_step
from multiminer.errors import ChecksumError, ConfigError, DimensionError, FormatVersionError, \
    MissingArtifactError, NumericError

import gradsuite

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def small_array(shape):
    return arrays(np.float64, shape, elements=finite)


# -- conv2d -----------------------------------------------------------------

def test_conv_one_by_one_scales():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)),
                    Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_hand_sum_and_kernel_gradient():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    w = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    out = ad.conv2d(x, w)
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 10.0
    ad.sum(out).backward()
    np.testing.assert_allclose(w.grad[0, 0], [[1, 2], [3, 4]])
    numeric = ad.numerical_grad(lambda x, w: ad.conv2d(x, w), [x.data, w.data], 1,
                                np.ones((1, 1, 1, 1)))
    np.testing.assert_allclose(numeric[0, 0], [[1, 2], [3, 4]], rtol=1e-6)


def test_conv_rejects_fractional_output_and_bad_shapes():
    with pytest.raises(ConfigError):
        ad.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=2)
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((2, 1, 1, 1))),
                  Tensor(np.ones(3)))


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for i in range(6):
        for j in range(5):
            ref[:, :, i, j] = np.einsum("bchw,ochw->bo", xp[:, :, i:i + 3, j:j + 3], w) + b
    np.testing.assert_allclose(out, ref, atol=1e-12)


# -- relu -------------------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_relu_all_negative_has_zero_gradient():
    x = Tensor(-np.ones((2, 3)) * 0.5, requires_grad=True)
    y = ad.relu(x)
    assert not y.data.any()
    ad.sum(y).backward()
    assert not x.grad.any()


# -- max_pool ---------------------------------------------------------------

def test_max_pool_picks_max():
    out = ad.max_pool(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
    assert out.data.item() == 4.0


def test_max_pool_constant_routes_to_first_element():
    x = Tensor(np.full((1, 1, 2, 2), 3.0), requires_grad=True)
    out = ad.max_pool(x, 2, 2)
    assert out.data.item() == 3.0
    ad.sum(out).backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_max_pool_halves_eight(rng):
    x = Tensor(gradsuite.distinct(rng, (1, 1, 8, 8)))
    assert ad.max_pool(x, 3, 2, 1).shape == (1, 1, 4, 4)
    err = check_gradients(lambda t: ad.max_pool(t, 3, 2, 1), [x.data], rng)
    assert err < gradsuite.TOL


# -- pooling / resizing -------------------------------------------------------

def test_global_avg_pool():
    x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]], requires_grad=True)
    out = ad.global_avg_pool(x)
    assert out.data.item() == 2.5
    ad.sum(out * 2.0).backward()
    np.testing.assert_allclose(x.grad, np.full((1, 1, 2, 2), 0.5))


def test_global_avg_pool_constant():
    assert ad.global_avg_pool(Tensor(np.full((1, 1, 3, 5), 1.7))).data.item() == pytest.approx(1.7)


def test_bilinear_identity_and_hand_example():
    x = np.arange(6.0).reshape(1, 1, 2, 3)
    np.testing.assert_array_equal(ad.bilinear_resize(Tensor(x), 2, 3).data, x)
    up = ad.bilinear_resize(Tensor([[[[0.0, 1.0]]]]), 1, 4).data
    np.testing.assert_allclose(up[0, 0, 0], [0, 0.25, 0.75, 1])


@given(c=st.floats(-5, 5), h=st.integers(1, 6), w=st.integers(1, 6),
       oh=st.integers(1, 12), ow=st.integers(1, 12))
def test_bilinear_preserves_constants(c, h, w, oh, ow):
    out = ad.bilinear_resize(Tensor(np.full((1, 1, h, w), c)), oh, ow).data
    np.testing.assert_allclose(out, c, atol=1e-12)


@given(x=small_array((1, 2, 4, 3)), oh=st.integers(1, 9), ow=st.integers(1, 9))
def test_bilinear_stays_in_input_range(x, oh, ow):
    out = ad.bilinear_resize(Tensor(x), oh, ow).data
    assert out.min() >= x.min() - 1e-9 and out.max() <= x.max() + 1e-9


def test_resize_np_matches_tensor_op(rng):
    x = rng.standard_normal((2, 3, 5, 4))
    np.testing.assert_allclose(ad.resize_np(x, 7, 9), ad.bilinear_resize(Tensor(x), 7, 9).data)


# -- elementwise_min --------------------------------------------------------

def test_elementwise_min_examples():
    a, b = Tensor([1.0, 0.3]), Tensor([0.5, 1.0])
    np.testing.assert_array_equal(ad.elementwise_min([a, b]).data, [0.5, 0.3])
    np.testing.assert_array_equal(ad.elementwise_min([a]).data, a.data)
    with pytest.raises(DimensionError):
        ad.elementwise_min([a, Tensor([1.0])])
    with pytest.raises(DimensionError):
        ad.elementwise_min([])


def test_elementwise_min_tie_goes_to_first():
    a = Tensor([2.0, 1.0], requires_grad=True)
    b = Tensor([2.0, 3.0], requires_grad=True)
    ad.sum(ad.elementwise_min([a, b])).backward()
    np.testing.assert_array_equal(a.grad, [1, 1])
    np.testing.assert_array_equal(b.grad, [0, 0])


@given(a=small_array((3, 4)), b=small_array((3, 4)), c=small_array((3, 4)))
def test_elementwise_min_algebra(a, b, c):
    m = lambda *xs: ad.elementwise_min([Tensor(x) for x in xs]).data  # noqa: E731
    np.testing.assert_array_equal(m(a, b), m(b, a))
    np.testing.assert_array_equal(m(a, m(b, c)), m(m(a, b), c))
    np.testing.assert_array_equal(m(a, m(a, b)), m(a, b))
    np.testing.assert_array_equal(m(a, a), a)
    assert np.all(m(a, b, c) <= m(a, b))


# -- multiply / bce / sgd ---------------------------------------------------

def test_multiply_identity_and_zero_masks(rng):
    f = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(ad.multiply(Tensor(f), Tensor(np.ones((2, 1, 4, 4)))).data, f)
    assert not ad.multiply(Tensor(f), Tensor(np.zeros((2, 1, 4, 4)))).data.any()
    with pytest.raises(DimensionError):
        ad.multiply(Tensor(f), Tensor(np.ones((2, 2, 4, 4))))


def test_bce_values():
    assert ad.multilabel_bce(Tensor(np.zeros((2, 3))), np.ones((2, 3))).item() == \
        pytest.approx(np.log(2), abs=1e-12)
    sat = ad.multilabel_bce(Tensor([[30.0]]), [[1.0]]).item()
    assert 0 <= sat < 1e-9
    with pytest.raises(ValueError):
        ad.multilabel_bce(Tensor([[0.0]]), [[0.5]])


def test_bce_weights_zero_out_entries():
    s = Tensor([[1.0, -2.0]], requires_grad=True)
    loss = ad.multilabel_bce(s, [[1.0, 0.0]], [[1.0, 0.0]])
    assert loss.item() == pytest.approx(np.log1p(np.exp(-1.0)) / 2)
    loss.backward()
    assert s.grad[0, 1] == 0.0


def test_sgd_examples():
    p = Parameter([1.0])
    p.grad = np.array([1.0])
    sgd_step([p], 0.1, 0.0)
    assert p.data[0] == pytest.approx(0.9) and p.grad is None
    q = Parameter([1.0])
    q.grad = np.array([0.0])
    sgd_step([q], 0.1, 0.1)
    assert q.data[0] == pytest.approx(0.99)
    f = Parameter([1.0], frozen=True)
    f.grad = np.array([123.0])
    sgd_step([f], 0.1, 0.1)
    assert f.data[0] == 1.0
    with pytest.raises(ValueError):
        sgd_step([Parameter([1.0])], 0.1)


# -- graph mechanics ----------------------------------------------------------

def test_gradients_accumulate_over_shared_inputs():
    x = Tensor([3.0], requires_grad=True)
    (x * x + x).sum().backward()
    assert x.grad[0] == pytest.approx(7.0)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_non_finite_inputs_raise():
    with pytest.raises(NumericError):
        Tensor([np.nan])


# -- finite-difference suite (every op, random cases) -------------------------

@pytest.mark.parametrize("name", sorted(gradsuite.BUILDERS))
def test_gradient_matches_finite_differences(name):
    rng = np.random.default_rng([42, sorted(gradsuite.BUILDERS).index(name)])
    build = gradsuite.BUILDERS[name]
    for _ in range(20):
        fn, arrs = build(rng)
        assert check_gradients(fn, arrs, rng, eps=gradsuite.STEP) < gradsuite.TOL


# -- fuzz: finite in, finite out ------------------------------------------------

@pytest.mark.parametrize("name", sorted(gradsuite.BUILDERS))
def test_fuzz_no_nan_or_inf(name):
    rng = np.random.default_rng(7)
    build = gradsuite.BUILDERS[name]
    for scale in (1.0, 30.0, 1e3):
        fn, arrs = build(rng)
        if name in ("sqrt", "divide", "normalize_map", "frobenius_regularizer"):
            arrs = [np.abs(a) * scale + 0.1 for a in arrs]
        else:
            arrs = [a * scale for a in arrs]
        inputs = [Tensor(a, requires_grad=True) for a in arrs]
        out = fn(*inputs)
        assert np.isfinite(out.data).all()
        out.backward(np.ones(out.shape))
        assert all(t.grad is None or np.isfinite(t.grad).all() for t in inputs)


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(tmp_path, rng):
    params = {"a.w": rng.standard_normal((3, 2, 3, 3)), "a.b": rng.standard_normal(3),
              "s": np.array(2.5)}
    ad.save_params(params, tmp_path, extra={"note": "x"})
    loaded, extra = ad.load_params(tmp_path)
    assert extra == {"note": "x"} and list(loaded) == list(params)
    for k in params:
        assert loaded[k].tobytes() == np.asarray(params[k], dtype="<f8").tobytes()


def test_checkpoint_corruption_and_version(tmp_path):
    ad.save_params({"w": np.arange(4.0)}, tmp_path)
    blob = tmp_path / "params.f64"
    raw = bytearray(blob.read_bytes())
    raw[3] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        ad.load_params(tmp_path)
    ad.save_params({"w": np.arange(4.0)}, tmp_path)
    man = tmp_path / "manifest.json"
    man.write_text(man.read_text().replace('"format_version": 1', '"format_version": 99'))
    with pytest.raises(FormatVersionError):
        ad.load_params(tmp_path)
    with pytest.raises(MissingArtifactError):
        ad.load_params(tmp_path / "nowhere")
