import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from domainadaptor.errors import IncompatibleSnapshotError, ShapeError, StateError
from domainadaptor.nn import (ADABN, SOURCE, TRAIN, LayerSpec, Model, backward, forward, mix, restore,
                              sgd_step, small_convnet, snapshot)


def linear_model(n_in, n_out, dtype=np.float64):
    return Model([LayerSpec("linear", "fc", n_in, n_out)], seed=0, dtype=dtype)


def reference_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += float(xp[b, ch, i * stride + di, j * stride + dj]) * float(w[o, ch, di, dj])
                    out[b, o, i, j] = acc
    return out


def _relu_masks(model):
    return [c for s, c in zip(model.specs, model._caches) if s.kind == "relu"]


def _probe(model, x, r, w, i, step, mode):
    old = w[i]
    w[i] = old + step
    fp = float((model.forward(x, mode) * r).sum())
    mp = _relu_masks(model)
    w[i] = old - step
    fm = float((model.forward(x, mode) * r).sum())
    mm = _relu_masks(model)
    w[i] = old
    smooth = all(np.array_equal(a, b) for a, b in zip(mp, mm))
    return (fp - fm) / (2 * step), smooth


def fd_grad(model, x, r, name, mode, h=1e-4, picks=None):
    """Central differences at step ``h`` with one Richardson refinement (h and h/2).

    A probe whose two sides flip a ReLU gate straddles a kink; it is re-probed
    with a 100x smaller step.
    """
    w = model.params[name].reshape(-1)
    picks = np.arange(w.size) if picks is None else picks
    num = np.empty(len(picks))
    kinks = 0
    for k, i in enumerate(picks):
        step = h
        d1, ok1 = _probe(model, x, r, w, i, step, mode)
        if not ok1:
            kinks += 1
            step = h / 100
            d1, ok1 = _probe(model, x, r, w, i, step, mode)
        d2, _ = _probe(model, x, r, w, i, step / 2, mode)
        num[k] = (4 * d2 - d1) / 3
    assert kinks <= max(1, len(picks) // 4), f"{name}: {kinks} of {len(picks)} probes straddle a ReLU kink"
    return num


def narrow_convnet(num_classes=3):
    """Same layer pattern as the benchmark network with a handful of channels."""
    specs = []
    chans = [3, 2, 3, 4]
    for i, stride in enumerate((1, 2, 2)):
        specs += [LayerSpec("conv2d", f"conv{i + 1}", chans[i], chans[i + 1], 3, stride, 1),
                  LayerSpec("batchnorm2d", f"bn{i + 1}", chans[i + 1], chans[i + 1]),
                  LayerSpec("relu", f"relu{i + 1}")]
    return specs + [LayerSpec("global-avg-pool", "pool"), LayerSpec("linear", "fc", 4, num_classes)]


def assert_grad_close(ana, num, label):
    small = np.abs(ana) < 1e-8
    assert np.all(np.abs(ana - num)[small] <= 1e-6), label
    rel = np.abs(ana - num)[~small] / np.maximum(np.abs(ana), np.abs(num))[~small]
    assert rel.size == 0 or rel.max() <= 1e-4, (label, float(rel.max()))


def check_network_gradients(specs, mode, rng, per_param=None):
    model = Model(specs, seed=2, dtype=np.float64)
    for name in model.buffers:
        model.buffers[name] = rng.uniform(0.5, 2.0, model.buffers[name].shape)
    x = rng.normal(size=(3, 3, 6, 6))
    r = rng.normal(size=(3, model.specs[-1].out_ch))
    snap = snapshot(model)
    model.forward(x, mode)
    grads = model.backward(r, list(model.params))
    restore(model, snap)
    for name, w in model.params.items():
        picks = None
        if per_param is not None and w.size > per_param:
            picks = rng.choice(w.size, per_param, replace=False)
        num = fd_grad(model, x, r, name, mode, picks=picks)
        restore(model, snap)  # train mode moves running stats on every forward
        ana = grads[name].reshape(-1)
        assert_grad_close(ana if picks is None else ana[picks], num, name)


class TestForward:
    def test_zero_final_layer_gives_zero_logits(self, model32, images32):
        model32.params["fc.weight"][:] = 0
        assert np.array_equal(model32.forward(images32), np.zeros((8, 5), dtype=np.float32))

    def test_identity_linear_passes_input_through(self, rng):
        m = linear_model(4, 4)
        m.params["fc.weight"][:] = np.eye(4)
        x = rng.normal(size=(3, 4))
        assert np.array_equal(m.forward(x), x)

    def test_two_layer_model_matches_reference_loop(self, rng):
        specs = [LayerSpec("conv2d", "conv", 2, 3, 3, 2, 1), LayerSpec("relu", "relu"),
                 LayerSpec("global-avg-pool", "pool"), LayerSpec("linear", "fc", 3, 4)]
        m = Model(specs, seed=5)
        x = rng.normal(size=(2, 2, 7, 7)).astype(np.float32)
        conv = reference_conv(x.astype(np.float64), m.params["conv.weight"].astype(np.float64), 2, 1)
        feat = np.maximum(conv, 0).mean(axis=(2, 3))
        ref = feat @ m.params["fc.weight"].astype(np.float64).T + m.params["fc.bias"]
        assert np.max(np.abs(m.forward(x) - ref)) <= 1e-5

    def test_channel_mismatch_is_a_shape_error(self, model32):
        with pytest.raises(ShapeError, match="channels|x H x W"):
            model32.forward(np.zeros((2, 4, 8, 8), dtype=np.float32))

    def test_rank2_input_to_conv_net_rejected(self, model32):
        with pytest.raises(ShapeError):
            model32.forward(np.zeros((2, 3)))

    def test_inconsistent_channel_chain_rejected(self):
        with pytest.raises(ShapeError, match="expects 8 channels"):
            Model([LayerSpec("conv2d", "a", 3, 4, 3, 1, 1), LayerSpec("conv2d", "b", 8, 4, 3, 1, 1)])

    def test_same_seed_same_bits(self, images32):
        a, b = Model(small_convnet(), seed=11), Model(small_convnet(), seed=11)
        assert a.forward(images32, ADABN).tobytes() == b.forward(images32, ADABN).tobytes()

    def test_train_mode_updates_running_stats_with_momentum(self, rng):
        m = Model(small_convnet(), seed=0, dtype=np.float64)
        x = rng.normal(2.0, 1.0, (4, 3, 6, 6))
        m.forward(x, TRAIN)
        pre = m.forward(x, TRAIN)
        assert pre.shape == (4, 5)
        # two updates from (0, 1) toward the same batch statistics of bn1's input are not tracked here;
        # check the first layer directly instead
        m2 = Model(small_convnet(), seed=0, dtype=np.float64)
        m2.forward(x, TRAIN)
        conv1 = m2._caches[0]
        assert m2.trace[0].alpha is None
        t = m2.trace[0].test
        assert np.allclose(m2.buffers["bn1.running_mean"], 0.1 * t.mean)
        assert np.allclose(m2.buffers["bn1.running_var"], 0.9 + 0.1 * t.var)
        assert conv1 is not None

    def test_module_level_wrappers(self, model64, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        out = forward(model64, x, SOURCE)
        assert np.array_equal(out, model64.forward(x, SOURCE))
        grads = backward(model64, np.ones_like(out), ["fc.bias"])
        assert np.allclose(grads["fc.bias"], 2.0)


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self, model64, rng):
        out = model64.forward(rng.normal(size=(3, 3, 6, 6)), ADABN)
        grads = model64.backward(np.zeros_like(out), list(model64.params))
        assert all(not np.any(g) for g in grads.values())

    def test_linear_weight_gradient_is_input_column_sums(self, rng):
        m = linear_model(5, 3)
        x = rng.normal(size=(6, 5))
        m.forward(x)
        g = m.backward(np.ones((6, 3)), ["fc.weight"])["fc.weight"]
        assert np.allclose(g, np.tile(x.sum(axis=0), (3, 1)), atol=1e-12)

    def test_only_trainable_names_returned(self, model64, rng):
        out = model64.forward(rng.normal(size=(2, 3, 6, 6)), ADABN)
        grads = model64.backward(np.ones_like(out), model64.affine_names())
        assert set(grads) == set(model64.affine_names())

    def test_backward_before_forward_is_state_error(self):
        with pytest.raises(StateError):
            Model(small_convnet()).backward(np.zeros((1, 5)), [])

    def test_unknown_trainable_name(self, model64, rng):
        model64.forward(rng.normal(size=(2, 3, 6, 6)))
        with pytest.raises(KeyError, match="nope"):
            model64.backward(np.zeros((2, 3)), ["nope"])

    @pytest.mark.parametrize("mode", [ADABN, SOURCE, mix(0.3), TRAIN], ids=["adabn", "source", "mix", "train"])
    def test_narrow_network_every_element_matches_finite_differences(self, mode, rng):
        check_network_gradients(narrow_convnet(), mode, rng)

    @pytest.mark.parametrize("mode", [ADABN, mix(0.7)], ids=["adabn", "mix"])
    def test_benchmark_network_every_parameter_matches_finite_differences(self, mode, rng):
        check_network_gradients(small_convnet(num_classes=3), mode, rng, per_param=24)


class TestSgdAndSnapshots:
    def test_zero_lr_is_a_no_op(self, model32):
        before = snapshot(model32)
        sgd_step(model32, {k: np.ones_like(v) for k, v in model32.params.items()}, 0.0)
        assert all(model32.params[k].tobytes() == v.tobytes() for k, v in before.params.items())

    def test_scalar_step(self):
        m = linear_model(1, 1)
        m.params["fc.weight"][:] = 1.0
        sgd_step(m, {"fc.weight": np.array([[2.0]])}, 0.5)
        assert m.params["fc.weight"][0, 0] == 0.0

    def test_two_steps_equal_one_summed_step(self, rng):
        a, b = linear_model(6, 1), linear_model(6, 1)
        g1, g2 = rng.normal(size=(1, 6)), rng.normal(size=(1, 6))
        sgd_step(a, {"fc.weight": g1}, 0.1)
        sgd_step(a, {"fc.weight": g2}, 0.1)
        sgd_step(b, {"fc.weight": g1 + g2}, 0.1)
        assert np.allclose(a.params["fc.weight"], b.params["fc.weight"], atol=1e-15)

    def test_unknown_gradient_name(self, model32):
        with pytest.raises(KeyError):
            sgd_step(model32, {"bn9.gamma": np.zeros(1)}, 0.1)

    def test_snapshot_restore_after_step(self, model32):
        snap = snapshot(model32)
        sgd_step(model32, {k: np.ones_like(v) for k, v in model32.params.items()}, 0.3)
        restore(model32, snap)
        assert all(model32.params[k].tobytes() == v.tobytes() for k, v in snap.params.items())

    def test_interleaved_snapshots_over_random_steps(self, model32, rng):
        history = []
        for _ in range(100):
            if rng.uniform() < 0.3 or not history:
                history.append(snapshot(model32))
            name = rng.choice(list(model32.params))
            sgd_step(model32, {name: rng.normal(size=model32.params[name].shape)}, 0.01)
            if rng.uniform() < 0.2:
                snap = history[int(rng.integers(len(history)))]
                restore(model32, snap)
                assert all(model32.params[k].tobytes() == v.tobytes() for k, v in snap.params.items())

    def test_restore_keeps_array_identity(self, model32):
        gamma = model32.params["bn1.gamma"]
        snap = snapshot(model32)
        gamma += 1
        restore(model32, snap)
        assert model32.params["bn1.gamma"] is gamma

    def test_snapshot_from_other_architecture(self, model32):
        other = Model(small_convnet(num_classes=3))
        with pytest.raises(IncompatibleSnapshotError):
            restore(model32, snapshot(other))

    def test_clone_is_independent(self, model32):
        twin = model32.clone()
        twin.params["fc.bias"] += 1
        assert not np.array_equal(twin.params["fc.bias"], model32.params["fc.bias"])


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 4), h=st.integers(3, 9))
def test_logits_shape_for_any_spatial_size(n, h):
    m = Model(small_convnet(num_classes=4), seed=0)
    out = m.forward(np.zeros((n, 3, h, h), dtype=np.float32), SOURCE)
    assert out.shape == (n, 4) and out.dtype == np.float32
