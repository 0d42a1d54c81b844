"""Subnet wiring tests: shapes, receptive fields, sharing, checkpoints."""

import numpy as np
import pytest

import ctxseg.autodiff as ad
from ctxseg import RngState, Tensor, sgd_step
from ctxseg.errors import ConfigError, ContractError, DimensionError, ParseError
from ctxseg.network import (Model, VariantConfig, load_checkpoint,
                            sample_latent, save_checkpoint, variant_config)


def tiny_model(variant="full", feat=8, classes=6, d=12, hidden=16, seed=11):
    return Model(num_classes=classes, embed_dim=d, feat=feat, hidden=hidden,
                 variant=variant, seed=seed)


def context_support_sizes(variant, feat=6, size=41):
    """Impulse-probe oracle: bounding box of each context map's response.

    Biases are zeroed so the response support equals the receptive field
    reachable from the impulse (leaky-relu preserves zeros).
    """
    model = tiny_model(variant=variant, feat=feat)
    cm = model.cm
    for conv in cm.ctx:
        conv.bias.value.data[:] = 0.0
    f = np.zeros((1, feat, size, size))
    f[0, :, size // 2, size // 2] = 1.0
    sizes = []
    for m in cm.context_maps(Tensor(f)):
        resp = np.abs(m.data[0]).max(axis=0)
        ys, xs = np.nonzero(resp > 1e-12)
        sizes.append((ys.max() - ys.min() + 1, xs.max() - xs.min() + 1))
    return sizes


class TestBackbone:
    def test_zero_image_zero_biases_zero_features(self):
        m = tiny_model()
        for conv in m.backbone.convs:
            conv.bias.value.data[:] = 0.0
        f = m.backbone(Tensor(np.zeros((1, 3, 32, 32))))
        assert np.all(f.data == 0)

    def test_output_stride_four(self):
        m = Model(num_classes=16, embed_dim=32, feat=64, hidden=32, seed=0)
        f = m.backbone(Tensor(RngState(0).normal((1, 3, 64, 64))))
        assert f.shape == (1, 64, 16, 16)

    def test_batch_independence(self):
        m = tiny_model()
        imgs = RngState(1).normal((3, 3, 32, 32))
        f = m.backbone(Tensor(imgs)).data
        perm = [2, 0, 1]
        fp = m.backbone(Tensor(imgs[perm])).data
        np.testing.assert_allclose(fp, f[perm], atol=1e-12)

    def test_indivisible_size_raises(self):
        with pytest.raises(DimensionError):
            tiny_model().backbone(Tensor(np.zeros((1, 3, 30, 30))))


class TestReceptiveFields:
    def test_serial_supports_3_7_17(self):
        sizes = context_support_sizes("full")
        assert sizes == [(3, 3), (7, 7), (17, 17)]

    def test_parallel_supports_3_5_13(self):
        sizes = context_support_sizes("parallel")
        assert sizes == [(3, 3), (5, 5), (13, 13)]

    def test_undilated_supports_3_5_7(self):
        sizes = context_support_sizes("conv_stack")
        assert sizes == [(3, 3), (5, 5), (7, 7)]

    @pytest.mark.parametrize("variant,caps", [
        ("full", [3, 7, 17]), ("parallel", [3, 5, 13])])
    def test_support_never_exceeds_window(self, variant, caps):
        for (h, w), cap in zip(context_support_sizes(variant), caps):
            assert h <= cap and w <= cap


class TestContextModule:
    def test_selector_weights_are_distribution(self):
        m = tiny_model()
        f = Tensor(RngState(2).normal((2, 8, 8, 8)))
        _, _, a = m.cm.forward(f, RngState(3), train=True)
        assert a.shape == (2, 3, 8, 8)
        np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(a.data >= 0)

    def test_global_selector_broadcasts_one_weight_per_scale(self):
        m = tiny_model(variant="global_selector")
        f = Tensor(RngState(2).normal((2, 8, 8, 8)))
        _, _, a = m.cm.forward(f, RngState(3), train=True)
        assert a.shape == (2, 3, 1, 1)
        np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-9)

    def test_residual_attention_formula(self):
        m = tiny_model()
        f = Tensor(RngState(4).normal((1, 8, 8, 8)))
        x, lat, _ = m.cm.forward(f, None, train=False)
        expected = f.data + f.data * (1.0 / (1.0 + np.exp(-lat.z.data)))
        np.testing.assert_allclose(x.data, expected, atol=1e-12)

    def test_residual_off_returns_f_but_still_produces_z(self):
        m = tiny_model(variant="no_residual")
        f = Tensor(RngState(4).normal((1, 8, 8, 8)))
        x, lat, _ = m.cm.forward(f, RngState(5), train=True)
        np.testing.assert_array_equal(x.data, f.data)
        assert lat.z is not None and lat.z.shape == f.shape

    def test_sigma_head_at_zero_gives_half_attention(self):
        # mu = 0, logvar large-negative -> sigma floored, z = mu = 0 in eval,
        # sigmoid(0) = 0.5, so X = 1.5 * F.
        m = tiny_model()
        m.cm.head.kernel.value.data[:] = 0.0
        m.cm.head.bias.value.data[:] = 0.0
        m.cm.head.bias.value.data[m.cm.feat:] = -60.0  # logvar -> sigma floor
        f = Tensor(RngState(4).normal((1, 8, 8, 8)))
        x, lat, _ = m.cm.forward(f, None, train=False)
        assert np.all(lat.sigma.data == pytest.approx(1e-6))
        np.testing.assert_allclose(x.data, 1.5 * f.data, atol=1e-12)

    def test_masked_center_zeroed_after_update(self):
        m = tiny_model(variant="masked_center")
        k = m.cm.ctx[0].kernel
        assert np.all(k.data[:, :, 1, 1] == 0)
        k.value.grad = np.ones_like(k.data)
        sgd_step([k], lr=0.1)
        m.apply_constraints()
        assert np.all(k.data[:, :, 1, 1] == 0)

    def test_train_mode_uses_fresh_eps_eval_uses_mu(self):
        m = tiny_model()
        f = Tensor(RngState(6).normal((1, 8, 8, 8)))
        _, lat_a, _ = m.cm.forward(f, RngState(7), train=True)
        _, lat_b, _ = m.cm.forward(f, RngState(7), train=True)
        np.testing.assert_array_equal(lat_a.z.data, lat_b.z.data)
        _, lat_eval, _ = m.cm.forward(f, None, train=False)
        np.testing.assert_array_equal(lat_eval.z.data, lat_eval.mu.data)


class TestSampleLatent:
    def test_sigma_floor_clamp_gives_mu(self):
        mu = Tensor(RngState(0).normal((1, 4, 3, 3)))
        sigma = Tensor(np.full((1, 4, 3, 3), 1e-300))
        with pytest.raises(ContractError):
            sample_latent(mu, Tensor(np.zeros((1, 4, 3, 3))), RngState(1))
        z = sample_latent(mu, sigma, RngState(1))
        np.testing.assert_allclose(z.data, mu.data, atol=1e-290)

    def test_moments(self):
        mu = Tensor(np.zeros((1, 1, 320, 320)))
        sigma = Tensor(np.ones((1, 1, 320, 320)))
        z = sample_latent(mu, sigma, RngState(2)).data  # 102400 pixels
        assert abs(z.mean()) < 0.02
        assert 0.97 < z.var() < 1.03

    def test_eps_shared_across_channels(self):
        mu = Tensor(np.zeros((1, 5, 4, 4)))
        sigma = Tensor(np.ones((1, 5, 4, 4)))
        z = sample_latent(mu, sigma, RngState(3)).data
        for c in range(1, 5):
            np.testing.assert_array_equal(z[0, c], z[0, 0])

    def test_eps_per_channel_flag(self):
        mu = Tensor(np.zeros((1, 5, 4, 4)))
        sigma = Tensor(np.ones((1, 5, 4, 4)))
        z = sample_latent(mu, sigma, RngState(3), per_channel=True).data
        assert np.max(np.abs(z[0, 1] - z[0, 0])) > 0

    def test_deterministic(self):
        mu = Tensor(RngState(4).normal((1, 3, 4, 4)))
        sigma = Tensor(np.abs(RngState(5).normal((1, 3, 4, 4))) + 0.1)
        a = sample_latent(mu, sigma, RngState(6)).data
        b = sample_latent(mu, sigma, RngState(6)).data
        np.testing.assert_array_equal(a, b)


class TestGenerator:
    def test_pixelwise_purity(self):
        m = tiny_model()
        rng = RngState(8)
        z = rng.normal((1, 8, 4, 4))
        w = rng.normal((1, 12, 4, 4))
        z[0, :, 2, 3] = z[0, :, 0, 0]
        w[0, :, 2, 3] = w[0, :, 0, 0]
        out = m.generator.forward(Tensor(z), Tensor(w), None, train=False).data
        np.testing.assert_allclose(out[0, :, 2, 3], out[0, :, 0, 0], atol=1e-12)

    def test_output_shape(self):
        m = Model(num_classes=16, embed_dim=32, feat=64, hidden=64, seed=0)
        z = Tensor(RngState(9).normal((1, 64, 16, 16)))
        w = Tensor(RngState(10).normal((1, 32, 16, 16)))
        out = m.generator.forward(z, w, None, train=False)
        assert out.shape == (1, 64, 16, 16)

    def test_varying_z_changes_output(self):
        m = tiny_model()
        w = Tensor(RngState(11).normal((1, 12, 2, 2)))
        z1 = Tensor(RngState(12).normal((1, 8, 2, 2)))
        z2 = Tensor(RngState(13).normal((1, 8, 2, 2)))
        a = m.generator.forward(z1, w, None, train=False).data
        b = m.generator.forward(z2, w, None, train=False).data
        assert np.max(np.abs(a - b)) > 0

    def test_rows_and_map_paths_agree(self):
        m = tiny_model()
        z = RngState(14).normal((1, 8, 3, 3))
        w = RngState(15).normal((1, 12, 3, 3))
        out_map = m.generator.forward(Tensor(z), Tensor(w), None, train=False).data
        rows = np.concatenate([z, w], axis=1)[0].transpose(1, 2, 0).reshape(9, 20)
        out_rows = m.generator.forward_rows(Tensor(rows), None, train=False).data
        np.testing.assert_allclose(
            out_map[0].transpose(1, 2, 0).reshape(9, 8), out_rows, atol=1e-12)

    def test_dim_mismatch(self):
        m = tiny_model()
        with pytest.raises(DimensionError):
            m.generator.forward(Tensor(np.zeros((1, 7, 2, 2))),
                                Tensor(np.zeros((1, 12, 2, 2))), None, False)


class TestHeads:
    def test_discriminator_range(self):
        m = tiny_model()
        x = Tensor(RngState(16).normal((2, 8, 5, 5)) * 30)
        d = m.heads.discriminate(x).data
        assert np.all(d > 0) and np.all(d < 1)
        assert d.shape == (2, 1, 5, 5)

    def test_shared_layer_is_one_parameter(self):
        m = tiny_model()
        x = Tensor(RngState(17).normal((1, 8, 4, 4)))
        before_c = m.heads.classify(x).data.copy()
        before_d = m.heads.discriminate(x).data.copy()
        m.heads.shared.kernel.value.data = m.heads.shared.kernel.data + 0.05
        assert np.max(np.abs(m.heads.classify(x).data - before_c)) > 0
        assert np.max(np.abs(m.heads.discriminate(x).data - before_d)) > 0

    def test_argmax_matches_softmax_argmax(self):
        m = tiny_model()
        x = Tensor(RngState(18).normal((1, 8, 6, 6)))
        logits = m.heads.classify(x)
        soft = ad.softmax_channels(logits)
        np.testing.assert_array_equal(np.argmax(logits.data, axis=1),
                                      np.argmax(soft.data, axis=1))


class TestSegment:
    def test_deterministic(self):
        m = tiny_model()
        img = RngState(19).normal((3, 32, 32))
        a = m.segment(img)
        b = m.segment(img)
        assert a.tobytes() == b.tobytes()

    def test_valid_ids(self):
        m = tiny_model(classes=6)
        pred = m.segment(RngState(20).normal((3, 32, 32)))
        assert pred.shape == (8, 8)
        assert set(np.unique(pred)) <= set(range(6))


class TestVariants:
    def test_no_cm_has_no_contextual_module(self):
        m = tiny_model(variant="no_cm")
        assert m.cm is None
        img = Tensor(RngState(21).normal((1, 3, 32, 32)))
        f, x, lat, a = m.features(img)
        assert x is f and lat is None and a is None

    def test_baseline_drops_generator_and_discriminator_use(self):
        m = tiny_model(variant="baseline")
        assert m.generator is None and m.cm is None

    def test_unknown_variant_lists_names(self):
        with pytest.raises(ConfigError, match="full"):
            variant_config("bogus")

    def test_conv1x1_variant_uses_1x1_context(self):
        m = tiny_model(variant="conv1x1")
        assert m.cm.ctx[0].kernel.data.shape[-1] == 1


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path):
        m = tiny_model(variant="masked_center", seed=23)
        p = tmp_path / "model.ckpt"
        save_checkpoint(m, p)
        back = load_checkpoint(p)
        assert back.variant == m.variant
        for (na, pa), (nb, pb) in zip(m.named_params(), back.named_params()):
            assert na == nb
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_roundtrip_preserves_predictions(self, tmp_path):
        m = tiny_model(seed=29)
        img = RngState(30).normal((3, 32, 32))
        p = tmp_path / "model.ckpt"
        save_checkpoint(m, p)
        back = load_checkpoint(p)
        np.testing.assert_array_equal(m.segment(img), back.segment(img))

    def test_bad_magic_raises(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOTACKPT" + bytes(32))
        with pytest.raises(ParseError):
            load_checkpoint(p)

    def test_truncated_raises(self, tmp_path):
        m = tiny_model()
        p = tmp_path / "model.ckpt"
        save_checkpoint(m, p)
        data = p.read_bytes()
        p.write_bytes(data[: len(data) // 2])
        with pytest.raises(ParseError):
            load_checkpoint(p)
