import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import conv2d_naive, finite_diff, layer_grad_errors, rel_err
from wmhseg.nncore import ops
from wmhseg.nncore.layers import (BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, LeakyReLU, ReLU,
                                  Sigmoid, StateError, Tanh01)
from wmhseg.nncore.losses import LossWeights, bce_with_logits, gan_loss, l1_loss
from wmhseg.nncore.nets import ArchSpec, DiscriminatorNet, GanModel, GeneratorNet
from wmhseg.nncore.optim import Adam, OptimizerConfig, adam_step
from wmhseg.nncore.train import TrainConfig, TrainPair, holdout_split, train

F64 = np.float64


def away_from_zero(rng, shape, margin=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-30) + x, x)


def check_layer(layer, x, train=True, reseed=None, tol=1e-6):
    for name, err in layer_grad_errors(layer, x, train, reseed).items():
        assert err < tol, name


# -- forward examples ---------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).random((2, 3, 5, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out, _ = ops.conv2d(x, w, np.zeros(3))
    assert np.array_equal(out, x)


def test_conv_zero_weights_gives_bias():
    x = np.random.default_rng(0).random((1, 2, 6, 6))
    out, _ = ops.conv2d(x, np.zeros((3, 2, 3, 3)), np.array([1.0, -2.0, 0.5]), 1, 1)
    assert out.shape == (1, 3, 6, 6)
    assert np.all(out[0, 1] == -2.0) and np.all(out[0, 2] == 0.5)


def test_conv_all_ones_sums_to_nine():
    out, _ = ops.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 9.0


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 4), (1, 1, 3), (3, 2, 2)])
def test_conv_matches_naive(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 3, 9, 7))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out, _ = ops.conv2d(x, w, b, stride, pad)
    want = conv2d_naive(x, w, b, stride, pad)
    assert out.shape == want.shape
    assert np.allclose(out, want, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        ops.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_conv_transpose_unit_input_is_kernel():
    k = np.random.default_rng(2).standard_normal((1, 1, 4, 4))
    out = ops.conv2d_transpose(np.ones((1, 1, 1, 1)), k, None, stride=2, padding=0)
    assert np.array_equal(out[0, 0], k[0, 0])


def test_conv_transpose_zero_in_zero_out():
    w = np.random.default_rng(3).standard_normal((2, 3, 4, 4))
    assert not ops.conv2d_transpose(np.zeros((1, 2, 5, 5)), w, None, 2, 1).any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([(1, 0, 3), (2, 1, 4), (2, 0, 2), (1, 1, 3)]))
def test_adjoint_identity(seed, geom):
    stride, pad, k = geom
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 8, 8))
    w = rng.standard_normal((3, 2, k, k))
    y_shape = ops.conv2d(x, w, None, stride, pad)[0].shape
    y = rng.standard_normal(y_shape)
    lhs = (ops.conv2d(x, w, None, stride, pad)[0] * y).sum()
    rhs = (x * ops.conv2d_transpose(y, w, None, stride, pad, output_size=(8, 8))).sum()
    assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), abs(rhs), 1.0)


def test_batch_norm_examples():
    # +-1 pattern: zero mean, unit variance; eps shifts it by about 5e-6
    z = np.where(np.indices((4, 1, 16, 16)).sum(axis=0) % 2 == 0, 1.0, -1.0)
    out, _ = ops.batch_norm(z, np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), True)
    assert np.abs(out - z).max() < 1e-5

    const = np.full((2, 1, 3, 3), 7.0)
    out, _ = ops.batch_norm(const, np.ones(1), np.full(1, 0.3), np.zeros(1), np.ones(1), True)
    assert np.allclose(out, 0.3)

    four = np.array([1.0, 2.0, 3.0, 6.0]).reshape(1, 1, 2, 2)
    out, _ = ops.batch_norm(four, np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), True)
    mu, var = 3.0, (4 + 1 + 0 + 9) / 4
    assert np.allclose(out.ravel(), (four.ravel() - mu) / math.sqrt(var + 1e-5))


def test_batch_norm_running_stats_and_eval():
    bn = BatchNorm2d(1, dtype=F64)
    x = np.array([1.0, 2.0, 3.0, 6.0]).reshape(1, 1, 2, 2)
    bn.forward(x, train=True)
    assert bn.buffers["running_mean"][0] == pytest.approx(0.1 * 3.0)
    assert bn.buffers["running_var"][0] == pytest.approx(0.9 + 0.1 * 14 / 3)
    out = bn.forward(x, train=False)
    rm, rv = bn.buffers["running_mean"][0], bn.buffers["running_var"][0]
    assert np.allclose(out, (x - rm) / np.sqrt(rv + 1e-5))


def test_activation_values():
    assert ops.leaky_relu(np.array([-1.0, 2.0])).tolist() == [-0.2, 2.0]
    assert ops.tanh01(np.array(0.0)) == 0.5
    assert ops.relu(np.array([-3.0, 0.5])).tolist() == [0.0, 0.5]
    s = ops.sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert s.tolist() == [0.0, 0.5, 1.0]


def test_dropout_modes():
    x = np.ones((1, 1, 50, 50))
    out, mask = ops.dropout(x, 0.5, np.random.default_rng(0), train=False)
    assert out is x and mask is None
    out, mask = ops.dropout(x, 0.5, np.random.default_rng(0), train=True)
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert 0.4 < (out > 0).mean() < 0.6


# -- gradients ----------------------------------------------------------------

def test_grad_conv2d():
    rng = np.random.default_rng(1)
    layer = Conv2d(2, 3, k=4, stride=2, padding=1, rng=rng, dtype=F64, init_std=0.5)
    layer.params["bias"][:] = rng.standard_normal(3)
    check_layer(layer, rng.standard_normal((2, 2, 6, 6)))


def test_grad_conv_transpose():
    rng = np.random.default_rng(2)
    layer = ConvTranspose2d(3, 2, rng=rng, dtype=F64, init_std=0.5)
    layer.params["bias"][:] = rng.standard_normal(2)
    check_layer(layer, rng.standard_normal((2, 3, 3, 3)))


@pytest.mark.parametrize("train", [True, False])
def test_grad_batch_norm(train):
    rng = np.random.default_rng(3)
    layer = BatchNorm2d(3, dtype=F64)
    layer.params["gamma"][:] = rng.random(3) + 0.5
    layer.params["beta"][:] = rng.standard_normal(3)
    layer.buffers["running_var"][:] = rng.random(3) + 0.5
    check_layer(layer, rng.standard_normal((2, 3, 3, 4)) * 2 + 1, train=train)


@pytest.mark.parametrize("layer", [LeakyReLU(0.2), ReLU(), Tanh01(), Sigmoid()],
                         ids=["leaky", "relu", "tanh01", "sigmoid"])
def test_grad_activations(layer):
    check_layer(layer, away_from_zero(np.random.default_rng(4), (2, 2, 4, 4)))


def test_grad_dropout_pass_through():
    layer = Dropout(0.5)

    def reseed():
        layer.rng = np.random.default_rng(11)

    check_layer(layer, np.random.default_rng(5).standard_normal((1, 2, 5, 5)), reseed=reseed)
    # eval mode is the identity, so is its gradient
    g = np.random.default_rng(6).standard_normal((1, 2, 5, 5))
    layer.forward(g, train=False)
    assert np.array_equal(layer.backward(g), g)


@pytest.mark.parametrize("label", [0.0, 1.0])
def test_grad_bce(label):
    z = np.random.default_rng(7).standard_normal((2, 1, 3, 3)) * 3
    _, g = bce_with_logits(z, label)
    assert rel_err(g, finite_diff(lambda: bce_with_logits(z, label)[0], z)) < 1e-6


def test_grad_l1():
    rng = np.random.default_rng(8)
    t = rng.random((1, 1, 6, 6))
    p = t + away_from_zero(rng, t.shape) * 0.1
    _, g = l1_loss(p, t)
    assert rel_err(g, finite_diff(lambda: l1_loss(p, t)[0], p)) < 1e-6


def test_l1_subgradient_zero_at_tie():
    t = np.random.default_rng(0).random((4, 4))
    loss, g = l1_loss(t.copy(), t)
    assert loss == 0.0 and not g.any()


def test_grad_mini_generator():
    net = GeneratorNet(channels=(2, 3, 4, 4), rng=np.random.default_rng(9), dtype=F64)
    for name, p in net.named_parameters():
        if name.endswith("weight"):
            p *= 10  # init std 0.2 keeps activations away from the flat tanh tails

    def reseed():
        net.set_rng(np.random.default_rng(12))

    x = np.random.default_rng(10).random((1, 1, 16, 16))
    check_layer(net, x, reseed=reseed)


def test_zero_upstream_gives_zero_param_grads():
    net = GeneratorNet(channels=(2, 3, 4, 4), rng=np.random.default_rng(0), dtype=F64)
    net.set_rng(np.random.default_rng(0))
    out = net.forward(np.random.default_rng(1).random((1, 1, 16, 16)), train=True)
    net.zero_grad()
    net.backward(np.zeros_like(out))
    assert all(not g.any() for _, g in net.named_grads())


def test_backward_without_forward():
    with pytest.raises(StateError):
        Conv2d(1, 1).backward(np.zeros((1, 1, 2, 2)))
    layer = ReLU()
    layer.forward(np.ones((1, 1, 2, 2)))
    layer.backward(np.ones((1, 1, 2, 2)))
    with pytest.raises(StateError):
        layer.backward(np.ones((1, 1, 2, 2)))


# -- losses -------------------------------------------------------------------

def test_gan_loss_logit_zero_is_ln2():
    z = np.zeros((1, 1, 30, 30))
    t = np.random.default_rng(0).random((1, 1, 8, 8))
    res = gan_loss(z, z, t, t)
    assert res.adv == pytest.approx(math.log(2), abs=1e-15)
    assert res.l1 == 0.0
    assert res.loss_g == res.adv
    assert res.loss_d == pytest.approx(math.log(2))


def test_gan_loss_weights():
    rng = np.random.default_rng(1)
    real, fake = rng.standard_normal((2, 1, 1, 5, 5))
    out, t = rng.random((2, 1, 1, 8, 8))
    res = gan_loss(real, fake, out, t)
    assert res.loss_g == pytest.approx(res.adv + 100 * np.abs(out - t).mean())
    assert LossWeights() == LossWeights(1.0, 100.0)


def test_bce_stable_for_huge_logits():
    loss, g = bce_with_logits(np.array([1e4, -1e4]), 1.0)
    assert math.isfinite(loss) and loss == pytest.approx(1e4 / 2)
    assert np.all(np.isfinite(g))


# -- optimiser ----------------------------------------------------------------

def test_adam_zero_grad_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    m, v = {"w": np.zeros(2)}, {"w": np.zeros(2)}
    adam_step(p, {"w": np.zeros(2)}, m, v, OptimizerConfig(), 1)
    assert p["w"].tolist() == [1.0, -2.0]


@pytest.mark.parametrize("g", [3.0, -0.01, 1e3])
def test_adam_first_step_magnitude(g):
    p = {"w": np.array([0.0, 5.0])}
    m, v = {"w": np.zeros(2)}, {"w": np.zeros(2)}
    adam_step(p, {"w": np.array([g, g])}, m, v, OptimizerConfig(), 1)
    want = -2e-4 * g / (abs(g) + 1e-8)
    assert p["w"][0] == pytest.approx(want, rel=1e-9)
    assert p["w"][1] - 5.0 == pytest.approx(want, rel=1e-6)


def test_adam_matches_textbook_over_steps():
    rng = np.random.default_rng(0)
    cfg = OptimizerConfig()
    p = {"w": rng.standard_normal(5)}
    m, v = {"w": np.zeros(5)}, {"w": np.zeros(5)}
    ref, rm, rv = p["w"].copy(), np.zeros(5), np.zeros(5)
    for t in range(1, 6):
        g = rng.standard_normal(5)
        adam_step(p, {"w": g}, m, v, cfg, t)
        rm = 0.5 * rm + 0.5 * g
        rv = 0.999 * rv + 0.001 * g * g
        ref = ref - 2e-4 * (rm / (1 - 0.5 ** t)) / (np.sqrt(rv / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p["w"], ref, rtol=1e-12, atol=1e-15)


def test_adam_rejects_step_zero():
    with pytest.raises(ValueError):
        adam_step({}, {}, {}, {}, OptimizerConfig(), 0)


# -- networks -----------------------------------------------------------------

TINY = ArchSpec(gen_channels=(4, 8, 8, 8, 8), disc_channels=(4, 8, 8, 8))


def test_generator_shape_range_determinism():
    model = GanModel.build(TINY, seed=1)
    x = np.random.default_rng(0).random((32, 32))
    a, b = model.predict(x), model.predict(x)
    assert a.shape == (32, 32)
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(a)) and a.min() > 0 and a.max() < 1


def test_generator_rejects_wrong_size():
    with pytest.raises(ValueError):
        GanModel.build(TINY).generator.forward(np.zeros((1, 1, 16, 16)))


def test_generator_no_nan_over_many_cycles():
    net = GeneratorNet(channels=(4, 8, 8, 8), rng=np.random.default_rng(0))
    net.set_rng(np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for _ in range(1000):
        out = net.forward(rng.random((1, 1, 16, 16)).astype(np.float32), train=True)
        assert np.all(np.isfinite(out)) and out.min() >= 0 and out.max() <= 1
        dx = net.backward(rng.standard_normal(out.shape).astype(np.float32))
        assert np.all(np.isfinite(dx))


def test_generator_dropout_only_in_train():
    model = GanModel.build(TINY, seed=0)
    G = model.generator
    G.set_rng(np.random.default_rng(0))
    x = np.random.default_rng(1).random((1, 1, 32, 32)).astype(np.float32)
    assert len(G.dropouts) == 3
    a, b = G.forward(x, train=True), G.forward(x, train=True)
    assert not np.array_equal(a, b)


def test_discriminator_patch_grid_full_size():
    D = DiscriminatorNet()
    out = D.forward_pair(np.zeros((1, 1, 256, 256), np.float32), np.zeros((1, 1, 256, 256), np.float32))
    assert out.shape == (1, 1, 30, 30)


def test_discriminator_batch_permutation():
    D = DiscriminatorNet((4, 8, 8, 8), rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    img, msk = rng.random((2, 3, 1, 32, 32)).astype(np.float32)
    out = D.forward_pair(img, msk)
    perm = [2, 0, 1]
    assert out.shape[2] > 1
    assert np.array_equal(D.forward_pair(img[perm], msk[perm]), out[perm])
    assert np.array_equal(D.forward_pair(img, msk), out)


def test_discriminator_shape_mismatch():
    with pytest.raises(ValueError):
        DiscriminatorNet((4, 8)).forward_pair(np.zeros((1, 1, 16, 16)), np.zeros((1, 1, 8, 8)))


# -- training loop ------------------------------------------------------------

def _toy_pairs(n_cases=3, per_case=2, size=32):
    rng = np.random.default_rng(0)
    pairs = []
    for c in range(n_cases):
        for _ in range(per_case):
            img = rng.random((size, size))
            tgt = np.where(img > 0.6, 1.0, np.where(img > 0.3, 0.25, 0.0))
            pairs.append(TrainPair(img, tgt, f"case{c:02d}"))
    return pairs


def test_training_deterministic():
    cfg = TrainConfig(epochs=2, rng_seed=4)
    a = train(_toy_pairs(), cfg, arch=TINY)
    b = train(_toy_pairs(), cfg, arch=TINY)
    assert a.log == b.log
    sa, sb = a.model.state_arrays(), b.model.state_arrays()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_zero_weights_leave_generator_untouched():
    pairs = _toy_pairs()
    res = train(pairs, TrainConfig(epochs=1, holdout_fraction=0.0), weights=LossWeights(0.0, 0.0),
                arch=TINY)
    assert all(r["loss_g"] == 0.0 for r in res.log)
    # rebuild with the same init seed to compare generator parameters
    init_seed = np.random.SeedSequence(0).spawn(3)[0]
    fresh = GanModel.build(TINY, seed=int(init_seed.generate_state(1)[0]))
    got = dict(res.model.generator.named_parameters())
    for k, v in fresh.generator.named_parameters():
        assert np.array_equal(got[k], v), k


def test_training_empty_and_shape_errors():
    from wmhseg.errors import DataError
    with pytest.raises(DataError):
        train([], TrainConfig(epochs=1), arch=TINY)
    with pytest.raises(DataError):
        train([TrainPair(np.zeros((16, 16)), np.zeros((16, 16)), "a")], TrainConfig(epochs=1), arch=TINY)


def test_holdout_split_last_cases():
    pairs = _toy_pairs(n_cases=10, per_case=1)
    tr, ho = holdout_split(pairs, 0.15)
    assert [p.case_id for p in ho] == ["case08", "case09"]
    assert len(tr) == 8
    tr, ho = holdout_split(_toy_pairs(n_cases=1), 0.15)
    assert ho == [] and len(tr) == 2


def test_adam_module_wrapper_steps_all_params():
    net = Conv2d(1, 2, rng=np.random.default_rng(0))
    opt = Adam(net)
    before = {k: v.copy() for k, v in net.params.items()}
    net.grads["weight"][:] = 1.0
    net.grads["bias"][:] = -1.0
    opt.step()
    assert np.allclose(net.params["weight"] - before["weight"], -2e-4, rtol=1e-4)
    assert np.allclose(net.params["bias"] - before["bias"], 2e-4, rtol=1e-4)
