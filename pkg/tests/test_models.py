import numpy as np
import pytest
import torch

from voxssl.errors import (
    EmptySequence,
    IncompatibleCheckpoint,
    NotAMultiple,
    ShapeNotDivisible,
)
from voxssl.models import (
    CheckpointState,
    ContextNet,
    ContextNetSpec,
    Encoder,
    EncoderSpec,
    HeadSpec,
    SegmentationModel,
    attach_decoder,
    attach_projection_head,
    checkpoint_from_encoder,
    contextualize,
    desk_spec,
    encode,
    encoder_from_checkpoint,
    inflate_encoder,
    inflate_input_layer,
    load_checkpoint,
    save_checkpoint,
    to_model_input,
)

SMALL = desk_spec(levels=3)


def make_encoder(seed=0, spec=SMALL):
    torch.manual_seed(seed)
    return Encoder(spec)


class TestEncoder:
    def test_default_spec_matches_reference_widths(self):
        spec = EncoderSpec()
        assert spec.levels == 5
        assert spec.filters == (32, 64, 128, 256, 512)
        assert spec.embedding_dim == 64

    def test_desk_spec_scaled(self):
        assert SMALL.filters == (8, 16, 32)
        assert SMALL.reduction == 4

    def test_eval_mode_deterministic(self):
        enc = make_encoder()
        x = np.random.default_rng(0).uniform(size=(8, 8, 8, 1)).astype(np.float32)
        a = encode(enc, x)
        b = encode(enc, x)
        assert np.array_equal(a, b)
        assert a.shape == (64,)

    def test_finite_on_unit_inputs(self):
        enc = make_encoder(1)
        rng = np.random.default_rng(1)
        batch = rng.uniform(size=(100, 8, 8, 8, 1)).astype(np.float32)
        out = encode(enc, batch)
        assert out.shape == (100, 64)
        assert np.isfinite(out).all()

    def test_shape_not_divisible(self):
        enc = make_encoder()
        with pytest.raises(ShapeNotDivisible):
            encode(enc, np.zeros((6, 8, 8, 1), np.float32))

    def test_feature_pyramid_shapes(self):
        enc = make_encoder()
        x = torch.zeros(2, 1, 16, 16, 16)
        feats = enc.forward_features(x)
        assert [tuple(f.shape[1:]) for f in feats] == [
            (8, 16, 16, 16), (16, 8, 8, 8), (32, 4, 4, 4)]

    def test_2d_encoder(self):
        enc = make_encoder(spec=desk_spec(spatial_rank=2, levels=3))
        out = encode(enc, np.zeros((16, 16, 1), np.float32))
        assert out.shape == (64,)

    def test_to_model_input_layouts(self):
        single = np.zeros((4, 4, 4, 2), np.float32)
        batch = np.zeros((5, 4, 4, 4, 2), np.float32)
        assert tuple(to_model_input(single).shape) == (2, 4, 4, 4)
        assert tuple(to_model_input(batch).shape) == (5, 2, 4, 4, 4)
        with pytest.raises(ShapeNotDivisible):
            to_model_input(np.zeros((4, 4), np.float32))


class TestContextNet:
    def test_single_step_sequence(self):
        torch.manual_seed(0)
        net = ContextNet(ContextNetSpec())
        out = contextualize(net, np.random.default_rng(0).normal(size=(1, 64)))
        assert out.shape == (1024,)
        assert np.isfinite(out).all()

    def test_default_code_dim(self):
        assert ContextNetSpec().code_dim == 1024

    def test_order_sensitivity(self):
        torch.manual_seed(1)
        net = ContextNet(ContextNetSpec(code_dim=32))
        rng = np.random.default_rng(2)
        seq = rng.normal(size=(6, 64)).astype(np.float32)
        base = contextualize(net, seq)
        changed = 0
        for s in range(10):
            perm = np.random.default_rng(s).permutation(6)
            if np.array_equal(perm, np.arange(6)):
                continue
            out = contextualize(net, seq[perm])
            changed += not np.allclose(out, base)
        assert changed >= 8

    def test_causality_prefix_independence(self):
        # the code for a prefix does not depend on later elements
        torch.manual_seed(2)
        net = ContextNet(ContextNetSpec(code_dim=16))
        rng = np.random.default_rng(3)
        seq = rng.normal(size=(5, 64)).astype(np.float32)
        prefix = contextualize(net, seq[:3])
        seq2 = seq.copy()
        seq2[3:] = rng.normal(size=(2, 64))
        assert np.allclose(prefix, contextualize(net, seq2[:3]))

    def test_empty_sequence(self):
        net = ContextNet(ContextNetSpec())
        with pytest.raises(EmptySequence):
            net(torch.zeros(0, 64))


class TestHeads:
    def test_rotation_head_width_10(self):
        model = attach_projection_head(make_encoder(), HeadSpec(n_inputs=1, n_classes=10))
        x = torch.rand(3, 1, 1, 8, 8, 8)
        assert tuple(model(x).shape) == (3, 10)

    def test_rpl_head_two_inputs_26(self):
        model = attach_projection_head(make_encoder(), HeadSpec(n_inputs=2, n_classes=26))
        x = torch.rand(2, 2, 1, 8, 8, 8)
        assert tuple(model(x).shape) == (2, 26)

    def test_jigsaw_head_27_inputs(self):
        model = attach_projection_head(make_encoder(), HeadSpec(n_inputs=27, n_classes=50))
        x = torch.rand(1, 27, 1, 4, 4, 4)
        assert tuple(model(x).shape) == (1, 50)

    def test_wrong_input_count_rejected(self):
        model = attach_projection_head(make_encoder(), HeadSpec(n_inputs=2, n_classes=26))
        with pytest.raises(ShapeNotDivisible):
            model(torch.rand(2, 3, 1, 8, 8, 8))


class TestDecoder:
    def test_output_shape_matches_input(self):
        model = attach_decoder(make_encoder(), num_classes=3)
        x = torch.rand(2, 1, 16, 16, 16)
        out = model(x)
        assert tuple(out.shape) == (2, 3, 16, 16, 16)

    def test_forward_backward_finite(self):
        model = attach_decoder(make_encoder(3), num_classes=3)
        x = torch.rand(2, 1, 16, 16, 16)
        target = torch.randint(0, 3, (2, 16, 16, 16))
        loss = torch.nn.functional.cross_entropy(model(x), target)
        loss.backward()
        for p in model.parameters():
            if p.grad is not None:
                assert torch.isfinite(p.grad).all()

    def test_2d_decoder(self):
        model = attach_decoder(make_encoder(spec=desk_spec(spatial_rank=2, levels=3)), 2)
        out = model(torch.rand(1, 1, 16, 16))
        assert tuple(out.shape) == (1, 2, 16, 16)


class TestInflation:
    def test_same_channels_identity(self):
        w = torch.randn(4, 2, 3, 3, 3)
        out = inflate_input_layer(w, 2, 2)
        assert torch.equal(out, w)

    def test_not_a_multiple(self):
        w = torch.randn(4, 2, 3, 3, 3)
        with pytest.raises(NotAMultiple):
            inflate_input_layer(w, 2, 5)

    def test_unscaled_doubles_linear_response(self):
        torch.manual_seed(0)
        w = torch.randn(4, 2, 3, 3, 3)
        x = torch.rand(1, 2, 8, 8, 8)
        tiled_x = x.repeat(1, 2, 1, 1, 1)
        w4 = inflate_input_layer(w, 2, 4, preserve_scale=False)
        base = torch.nn.functional.conv3d(x, w, padding=1)
        doubled = torch.nn.functional.conv3d(tiled_x, w4, padding=1)
        assert torch.allclose(doubled, 2 * base, atol=1e-5)

    def test_preserve_scale_exact_on_tiled_input(self):
        spec = desk_spec(in_channels=2, levels=3)
        enc = make_encoder(5, spec)
        big = inflate_encoder(enc, 4, preserve_scale=True)
        x = np.random.default_rng(4).uniform(size=(8, 8, 8, 2)).astype(np.float32)
        tiled = np.concatenate([x, x], axis=-1)
        np.testing.assert_allclose(encode(big, tiled), encode(enc, x), atol=1e-6)


class TestCheckpoints:
    def test_roundtrip_bitwise(self, tmp_path):
        enc = make_encoder(7)
        state = checkpoint_from_encoder(enc, task="rotation", seed=7)
        path = save_checkpoint(state, tmp_path / "enc")
        back = load_checkpoint(path)
        assert back.task == "rotation" and back.seed == 7
        assert back.spec == enc.spec
        for k, v in state.weights.items():
            assert np.array_equal(back.weights[k], v)

    def test_rebuild_matches_forward(self, tmp_path):
        enc = make_encoder(8)
        path = save_checkpoint(checkpoint_from_encoder(enc, "jigsaw", 0), tmp_path / "e")
        rebuilt = encoder_from_checkpoint(load_checkpoint(path))
        x = np.random.default_rng(1).uniform(size=(8, 8, 8, 1)).astype(np.float32)
        assert np.array_equal(encode(rebuilt, x), encode(enc, x))

    def test_tampered_fingerprint_rejected(self, tmp_path):
        enc = make_encoder(9)
        path = save_checkpoint(checkpoint_from_encoder(enc, "cpc", 0), tmp_path / "e")
        with np.load(path) as f:
            payload = {k: f[k] for k in f.files}
        header = bytes(payload["__meta__"]).decode().replace(
            '"embedding_dim": 64', '"embedding_dim": 65')
        payload["__meta__"] = np.frombuffer(header.encode(), dtype=np.uint8)
        np.savez(path, **payload)
        with pytest.raises(IncompatibleCheckpoint):
            load_checkpoint(path)

    def test_channel_inflation_on_load(self, tmp_path):
        enc = make_encoder(10, desk_spec(in_channels=2, levels=3))
        path = save_checkpoint(checkpoint_from_encoder(enc, "rpl", 1), tmp_path / "e")
        big = encoder_from_checkpoint(load_checkpoint(path), in_channels=4)
        assert big.spec.in_channels == 4
        with pytest.raises(IncompatibleCheckpoint):
            encoder_from_checkpoint(load_checkpoint(path), in_channels=3)
