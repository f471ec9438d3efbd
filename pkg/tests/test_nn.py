import numpy as np
import pytest

from avatarforge.nn import (
    AdamError, BatchNormState, ParamStore, Tensor, adam_step, batchnorm,
    bilinear_upsample, concat, conv2d, finite_diff_check, grid_sample, l1,
    linear, mean_over_set, relu, resize_bilinear, sobel_gradients, softmax,
)

FD_TOL = 1e-4


def rand_t(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def test_softmax_uniform_and_rows():
    y = softmax(Tensor(np.zeros((1, 4))))
    assert np.allclose(y.data, 0.25)
    rng = np.random.default_rng(0)
    y = softmax(rand_t(rng, 5, 7))
    assert np.allclose(y.data.sum(axis=1), 1.0)


def test_conv2d_delta_kernel_identity():
    rng = np.random.default_rng(1)
    x = rand_t(rng, 2, 3, 8, 8)
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = conv2d(x, Tensor(w), stride=1, padding="same")
    assert np.allclose(out.data, x.data)


def test_conv2d_stride_shapes():
    rng = np.random.default_rng(2)
    x = rand_t(rng, 1, 4, 12, 12)
    w = rand_t(rng, 6, 4, 3, 3)
    out = conv2d(x, w, stride=3, padding=1)
    assert out.shape == (1, 6, 4, 4)
    from avatarforge.nn import AutodiffError
    with pytest.raises(AutodiffError, match="conv2d"):
        conv2d(x, rand_t(rng, 6, 5, 3, 3))


def test_grid_sample_pixel_centers_and_clamp():
    rng = np.random.default_rng(3)
    plane = rand_t(rng, 4, 6, 5)
    coords = Tensor(np.array([[2.0, 3.0], [0.0, 0.0], [4.0, 5.0]]))
    out = grid_sample(plane, coords)
    assert np.allclose(out.data[0], plane.data[:, 3, 2])
    assert np.allclose(out.data[1], plane.data[:, 0, 0])
    assert np.allclose(out.data[2], plane.data[:, 5, 4])
    # out-of-range clamps to the border pixel
    far = grid_sample(plane, Tensor(np.array([[-3.0, 2.0], [99.0, -99.0]])))
    assert np.allclose(far.data[0], plane.data[:, 2, 0])
    assert np.allclose(far.data[1], plane.data[:, 0, 4])
    # coordinate gradient vanishes in clamped directions
    coords = Tensor(np.array([[-3.0, 2.5]]), requires_grad=True)
    out = grid_sample(plane, coords).sum()
    out.backward()
    assert coords.grad[0, 0] == 0.0
    assert coords.grad[0, 1] != 0.0


def test_bilinear_upsample_constant_is_constant():
    x = Tensor(np.full((1, 2, 3, 3), 2.5))
    up = bilinear_upsample(x, 2)
    assert up.shape == (1, 2, 6, 6)
    assert np.allclose(up.data, 2.5)


def test_batchnorm_training_statistics():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((512, 6)) * 3.0 + 1.5)
    state = BatchNormState(6)
    out = batchnorm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)), state, training=True)
    assert np.abs(out.data.mean(axis=0)).max() <= 1e-6
    assert np.abs(out.data.var(axis=0) - 1.0).max() <= 1e-4
    # eval mode uses running averages
    x2 = Tensor(rng.standard_normal((64, 6)))
    out2 = batchnorm(x2, Tensor(np.ones(6)), Tensor(np.zeros(6)), state, training=False)
    expect = (x2.data - state.mean) / np.sqrt(state.var + 1e-5)
    assert np.allclose(out2.data, expect)


def test_concat_gradient_splits_and_mean_over_set():
    rng = np.random.default_rng(5)
    a = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    out = concat([a, b], axis=1)
    out.backward(np.arange(18.0).reshape(3, 6))
    assert np.array_equal(a.grad, np.arange(18.0).reshape(3, 6)[:, :2])
    assert np.array_equal(b.grad, np.arange(18.0).reshape(3, 6)[:, 2:])

    ts = [Tensor(rng.standard_normal((2, 2)), requires_grad=True) for _ in range(4)]
    m = mean_over_set(ts)
    assert np.allclose(m.data, sum(t.data for t in ts) / 4)
    m.sum().backward()
    for t in ts:
        assert np.allclose(t.grad, 0.25)
    # duplicating one frame k times equals the single frame
    same = [Tensor(ts[0].data) for _ in range(3)]
    assert np.array_equal(mean_over_set(same).data, ts[0].data)


def test_backward_visits_nodes_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * 3.0
    z = y + y  # diamond: y contributes twice
    z.backward(np.array([1.0]))
    assert np.allclose(x.grad, [6.0])


@pytest.mark.parametrize("case", [
    "linear", "conv", "conv_stride", "relu", "batchnorm", "softmax",
    "upsample", "resize", "grid_sample_plane", "grid_sample_coords",
    "concat", "mean_set", "sobel", "stack",
])
def test_fd_check_every_op(case):
    rng = np.random.default_rng(hash(case) % 2**31)

    if case == "linear":
        fn = lambda x, w, b: linear(x, w, b).sum()
        inputs = [rand_t(rng, 5, 4), rand_t(rng, 4, 3), rand_t(rng, 3)]
    elif case == "conv":
        fn = lambda x, w, b: (conv2d(x, w, b, 1, "same") * 0.3).sum()
        inputs = [rand_t(rng, 2, 3, 5, 5), rand_t(rng, 4, 3, 3, 3), rand_t(rng, 4)]
    elif case == "conv_stride":
        fn = lambda x, w: conv2d(x, w, None, 2, 1).abs().sum()
        inputs = [rand_t(rng, 1, 2, 7, 7), rand_t(rng, 3, 2, 3, 3)]
    elif case == "relu":
        fn = lambda x: relu(x).sum()
        inputs = [rand_t(rng, 6, 6)]
    elif case == "batchnorm":
        state = BatchNormState(3)
        fn = lambda x, g, b: (batchnorm(x, g, b, state, True) * rng_w).sum()
        rng_w = rng.standard_normal((8, 3))
        inputs = [rand_t(rng, 8, 3), rand_t(rng, 3), rand_t(rng, 3)]
    elif case == "softmax":
        w = rng.standard_normal((4, 5))
        fn = lambda x: (softmax(x) * w).sum()
        inputs = [rand_t(rng, 4, 5)]
    elif case == "upsample":
        w = rng.standard_normal((1, 2, 6, 6))
        fn = lambda x: (bilinear_upsample(x) * w).sum()
        inputs = [rand_t(rng, 1, 2, 3, 3)]
    elif case == "resize":
        w = rng.standard_normal((1, 1, 5, 7))
        fn = lambda x: (resize_bilinear(x, 5, 7) * w).sum()
        inputs = [rand_t(rng, 1, 1, 4, 3)]
    elif case == "grid_sample_plane":
        coords = Tensor(rng.uniform(0.5, 3.5, size=(6, 2)))
        fn = lambda p: grid_sample(p, coords).sum()
        inputs = [rand_t(rng, 2, 5, 5)]
    elif case == "grid_sample_coords":
        plane = Tensor(rng.standard_normal((2, 5, 5)))
        fn = lambda c: grid_sample(plane, c).abs().sum()
        inputs = [Tensor(rng.uniform(0.6, 3.4, size=(6, 2)))]
    elif case == "concat":
        fn = lambda a, b: concat([a, b], axis=1).abs().sum()
        inputs = [rand_t(rng, 3, 2), rand_t(rng, 3, 3)]
    elif case == "mean_set":
        fn = lambda a, b, c: mean_over_set([a, b, c]).abs().sum()
        inputs = [rand_t(rng, 3, 3) for _ in range(3)]
    elif case == "sobel":
        w = rng.standard_normal((1, 4, 6, 6))
        fn = lambda x: (sobel_gradients(x) * w).sum()
        inputs = [rand_t(rng, 1, 2, 6, 6)]
    else:  # composite stack: conv -> relu -> softmax
        w1 = Tensor(rng.standard_normal((2, 1, 3, 3)))
        tgt = rng.standard_normal((1, 2, 4, 4))
        fn = lambda x: (softmax(relu(conv2d(x, w1, None, 1, "same")), axis=1) * tgt).sum()
        inputs = [rand_t(rng, 1, 1, 4, 4)]

    report = finite_diff_check(fn, inputs)
    assert report["__max__"] <= FD_TOL, report


def test_fd_check_utility_simple_cases():
    rng = np.random.default_rng(77)
    report = finite_diff_check(lambda x: (x * x).sum(), [rand_t(rng, 4)])
    assert report["__max__"] <= 1e-10
    # dead ReLU region: both analytic and FD gradients are zero
    x = Tensor(np.full((3,), -5.0))
    report = finite_diff_check(lambda t: relu(t).sum(), [x])
    assert report["__max__"] == 0.0


def test_adam_zero_gradient_keeps_params():
    store = ParamStore()
    p = store.add("w", np.array([1.0, 2.0]))
    p.grad = np.zeros(2)
    adam_step(store, lr=0.1)
    assert np.array_equal(p.data, [1.0, 2.0])
    assert store.step == 1


def test_adam_first_step_is_signed_lr():
    store = ParamStore()
    p = store.add("w", np.array([1.0, -1.0, 0.5]))
    g = np.array([0.3, -0.7, 2.0])
    p.grad = g.copy()
    adam_step(store, lr=1e-2)
    expect = np.array([1.0, -1.0, 0.5]) - 1e-2 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p.data, expect, atol=1e-9)


def test_adam_quadratic_bowl_converges():
    store = ParamStore()
    p = store.add("x", np.array([3.0, -2.0]))
    losses = []
    for _ in range(100):
        store.zero_grad()
        losses.append(float(np.sum(p.data**2)))
        p.grad = 2.0 * p.data
        adam_step(store, lr=0.05)
    assert all(losses[i + 1] < losses[i] for i in range(5, 99))
    assert losses[-1] < losses[0] * 0.01


def test_adam_nan_gradient_aborts_with_name():
    store = ParamStore()
    a = store.add("alpha", np.ones(2))
    b = store.add("beta", np.ones(2))
    a.grad = np.ones(2)
    b.grad = np.array([1.0, np.nan])
    with pytest.raises(AdamError, match="beta"):
        adam_step(store, lr=0.1)
    assert store.step == 0
    assert np.array_equal(a.data, np.ones(2))  # nothing mutated


def test_param_store_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    store = ParamStore()
    store.add("layer/w", rng.standard_normal((3, 4)))
    store.add("layer/b", rng.standard_normal(4))
    store.buffers["bn/mean"] = rng.standard_normal(4)
    store.params["layer/w"].grad = np.ones((3, 4))
    adam_step(store, lr=1e-3)
    path = tmp_path / "ckpt.frtn"
    store.save(path, extra_meta={"note": "test"})

    fresh = ParamStore()
    fresh.add("layer/w", np.zeros((3, 4)))
    fresh.add("layer/b", np.zeros(4))
    meta = fresh.load(path)
    assert meta["note"] == "test"
    assert fresh.step == store.step
    assert np.array_equal(fresh.params["layer/w"].data, store.params["layer/w"].data)
    assert np.array_equal(fresh.m["layer/w"], store.m["layer/w"])
    assert np.array_equal(fresh.buffers["bn/mean"], store.buffers["bn/mean"])
    assert (tmp_path / "ckpt.frtn.json").exists()


def test_l1_zero_on_identical():
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal((4, 4)))
    assert l1(x, Tensor(x.data.copy())).item() == 0.0
