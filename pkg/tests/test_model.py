"""Network components: positional encodings, attention, transformer blocks,
prediction heads, the full forward contract, and checkpoint round trips."""

import numpy as np
import pytest
import torch

from gazedet.model import (
    FeatureExtractor,
    FlattenedFeatures,
    GazeTargetDetector,
    ModelConfig,
    MultiHeadAttention,
    PredictionSet,
    TransformerDecoder,
    TransformerEncoder,
    attention,
    build_backbone,
    center_size_to_corners,
    load_checkpoint,
    positional_encoding_2d,
    prepare_images,
    save_checkpoint,
)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        d_model=32, num_encoder_layers=1, num_decoder_layers=2, num_heads=4,
        num_queries=4, backbone="tiny", heatmap_h=16, heatmap_w=16,
        ffn_dim=64, dropout=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.d_model == 256
        assert cfg.num_encoder_layers == cfg.num_decoder_layers == 6
        assert cfg.num_heads == 8
        assert cfg.num_queries == 20

    def test_rejects_unknown_backbone(self):
        with pytest.raises(ValueError, match="unknown backbone"):
            ModelConfig(backbone="vgg")

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=64, num_heads=7)

    def test_rejects_bad_d_model(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=30)  # not a multiple of 4

    def test_rejects_zero_layers(self):
        with pytest.raises(ValueError):
            ModelConfig(num_encoder_layers=0)


class TestPositionalEncoding:
    def test_origin_token_pattern(self):
        pe = positional_encoding_2d(4, 4, 16)
        # token (0, 0): every sin channel 0, every cos channel 1
        np.testing.assert_allclose(pe[0, 0::2].numpy(), 0.0, atol=1e-7)
        np.testing.assert_allclose(pe[0, 1::2].numpy(), 1.0, atol=1e-7)

    def test_shape_and_determinism(self):
        a = positional_encoding_2d(6, 5, 32)
        b = positional_encoding_2d(6, 5, 32)
        assert a.shape == (30, 32)
        assert torch.equal(a, b)

    def test_rows_distinct_on_large_grid(self):
        pe = positional_encoding_2d(50, 50, 256).numpy()
        assert np.unique(pe.round(decimals=7), axis=0).shape[0] == 2500

    def test_row_and_column_halves(self):
        d = 16
        pe = positional_encoding_2d(3, 4, d)
        # first half encodes the row index: constant along a row of tokens
        row0 = pe[:4, : d // 2]
        assert torch.allclose(row0 - row0[0], torch.zeros_like(row0))
        # second half encodes the column index: repeats across rows
        assert torch.allclose(pe[:4, d // 2:], pe[4:8, d // 2:])

    def test_rejects_indivisible_d_model(self):
        with pytest.raises(ValueError):
            positional_encoding_2d(4, 4, 18)


class TestAttention:
    def test_single_key_returns_value(self):
        q = torch.randn(1, 3, 8)
        k = torch.randn(1, 1, 8)
        v = torch.randn(1, 1, 8)
        out, w = attention(q, k, v)
        assert torch.allclose(out, v.expand(1, 3, 8))
        assert torch.allclose(w, torch.ones(1, 3, 1))

    def test_identical_keys_average_values(self):
        q = torch.randn(2, 7)
        k = torch.zeros(5, 7)
        v = torch.randn(5, 7)
        out, w = attention(q, k, v)
        assert torch.allclose(out, v.mean(dim=0).expand(2, 7), atol=1e-6)
        assert torch.allclose(w, torch.full((2, 5), 0.2))

    def test_weights_rows_sum_to_one(self):
        q, k, v = torch.randn(3, 4, 16), torch.randn(3, 9, 16), torch.randn(3, 9, 16)
        _, w = attention(q, k, v, q_p=torch.randn(3, 4, 16), k_p=torch.randn(3, 9, 16))
        assert torch.allclose(w.sum(dim=-1), torch.ones(3, 4), atol=1e-6)

    def test_positions_shift_scores_not_values(self):
        # moving all positional mass to one key shifts attention toward it
        q = torch.zeros(1, 1, 4)
        k = torch.zeros(1, 3, 4)
        v = torch.eye(3, 4)[None]
        k_p = torch.zeros(1, 3, 4)
        k_p[0, 2] = 5.0
        q_p = torch.full((1, 1, 4), 1.0)
        _, w = attention(q, k, v, q_p=q_p, k_p=k_p)
        assert w[0, 0, 2] > w[0, 0, 0]

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            attention(torch.zeros(1, 2, 8), torch.zeros(1, 2, 4), torch.zeros(1, 2, 4))
        with pytest.raises(ValueError):
            attention(torch.zeros(1, 2, 8), torch.zeros(1, 3, 8), torch.zeros(1, 2, 8))


class TestMultiHeadAttention:
    def test_output_shape_and_weights(self):
        mha = MultiHeadAttention(32, 4)
        q, kv = torch.randn(2, 5, 32), torch.randn(2, 9, 32)
        out, w = mha(q, kv, kv, need_weights=True)
        assert out.shape == (2, 5, 32)
        assert w.shape == (2, 5, 9)
        assert torch.allclose(w.sum(-1), torch.ones(2, 5), atol=1e-6)

    def test_rejects_indivisible(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(30, 4)


class TestFeatureExtraction:
    def test_tiny_backbone_grid(self):
        fe = FeatureExtractor("tiny", 32)
        feats = fe(torch.randn(2, 3, 96, 96))
        assert feats.values.shape == (2, 36, 32)  # 96 / 16 = 6
        assert (feats.grid_h, feats.grid_w) == (6, 6)

    def test_resnet50_stride_32(self):
        fe = FeatureExtractor("resnet50", 256)
        fe.eval()
        with torch.no_grad():
            feats = fe(torch.randn(1, 3, 224, 224))
        assert feats.values.shape == (1, 49, 256)
        assert (feats.grid_h, feats.grid_w) == (7, 7)
        with torch.no_grad():
            small = fe(torch.randn(1, 3, 64, 64))
        assert small.values.shape == (1, 4, 256)

    def test_unknown_backbone(self):
        with pytest.raises(ValueError, match="unknown backbone"):
            build_backbone("alexnet")

    def test_deterministic_for_equal_inputs(self):
        fe = FeatureExtractor("tiny", 16)
        fe.eval()
        x = torch.rand(1, 3, 64, 64)
        with torch.no_grad():
            a = fe(torch.cat([x, x])).values
        assert torch.allclose(a[0], a[1])

    def test_flattened_features_validation(self):
        with pytest.raises(ValueError):
            FlattenedFeatures(torch.zeros(1, 10, 8), 3, 4)  # 10 != 12


class TestTransformerBlocks:
    def test_encoder_preserves_shape(self):
        enc = TransformerEncoder(2, 32, 4, 64, 0.0)
        src = torch.randn(2, 12, 32)
        pos = torch.randn(12, 32)
        assert enc(src, pos).shape == (2, 12, 32)

    def test_zero_layer_encoder_is_identity(self):
        enc = TransformerEncoder(0, 32, 4, 64, 0.0)
        src = torch.randn(1, 5, 32)
        assert torch.equal(enc(src, torch.randn(5, 32)), src)

    def test_encoder_token_permutation_equivariance(self):
        # with matching position permutation, encoding commutes with it
        torch.manual_seed(0)
        enc = TransformerEncoder(2, 32, 4, 64, 0.0)
        enc.eval()
        src = torch.randn(1, 10, 32)
        pos = torch.randn(10, 32)
        perm = torch.randperm(10)
        with torch.no_grad():
            out = enc(src, pos)
            out_p = enc(src[:, perm], pos[perm])
        assert torch.allclose(out[:, perm], out_p, atol=1e-5)

    def test_decoder_returns_all_layers(self):
        dec = TransformerDecoder(3, 32, 4, 64, 0.0)
        memory = torch.randn(2, 12, 32)
        pos = torch.randn(12, 32)
        qpos = torch.randn(6, 32)
        stack, attn = dec(memory, pos, qpos, need_weights=True)
        assert stack.shape == (3, 2, 6, 32)
        assert len(attn) == 3
        assert attn[-1].shape == (2, 6, 12)
        assert torch.allclose(attn[-1].sum(-1), torch.ones(2, 6), atol=1e-6)

    def test_decoder_query_permutation_equivariance(self):
        torch.manual_seed(1)
        dec = TransformerDecoder(2, 32, 4, 64, 0.0)
        dec.eval()
        memory = torch.randn(1, 9, 32)
        pos = torch.randn(9, 32)
        qpos = torch.randn(5, 32)
        perm = torch.randperm(5)
        with torch.no_grad():
            stack, _ = dec(memory, pos, qpos)
            stack_p, _ = dec(memory, pos, qpos[perm])
        assert torch.allclose(stack[:, :, perm], stack_p, atol=1e-5)


class TestPredictionHeads:
    def test_center_size_to_corners(self):
        cs = torch.tensor([[0.5, 0.5, 0.2, 0.4]])
        corners = center_size_to_corners(cs)
        assert torch.allclose(corners, torch.tensor([[0.4, 0.3, 0.6, 0.7]]))

    def test_corners_clamped_to_unit_square(self):
        cs = torch.tensor([[0.05, 0.95, 0.3, 0.3]])
        corners = center_size_to_corners(cs)
        assert corners[0, 0] == 0.0  # left edge clamped
        assert corners[0, 3] == 1.0  # bottom edge clamped
        assert corners[0, 0] < corners[0, 2]
        assert corners[0, 1] < corners[0, 3]

    def test_prediction_set_slots(self):
        model = GazeTargetDetector(tiny_config())
        model.eval()
        with torch.no_grad():
            preds = model.predict_instances(torch.randn(4, 32))
        assert isinstance(preds, PredictionSet)
        assert preds.num_queries == 4
        probs = preds.is_head_probs
        assert torch.allclose(probs.sum(-1), torch.ones(4), atol=1e-6)
        assert (preds.heatmaps > 0).all() and (preds.heatmaps < 1).all()
        boxes = preds.boxes
        assert (boxes[:, 0] < boxes[:, 2]).all() and (boxes[:, 1] < boxes[:, 3]).all()
        assert (boxes >= 0).all() and (boxes <= 1).all()

    def test_instance_materialization(self):
        model = GazeTargetDetector(tiny_config())
        model.eval()
        with torch.no_grad():
            preds = model.predict_instances(torch.randn(4, 32))
        inst = preds.instance(0)
        assert 0.0 <= inst.head.x_tl < inst.head.x_br <= 1.0
        assert inst.gaze.inside == (inst.gaze.point is not None)
        with pytest.raises(ValueError):
            preds.instance(9)

    def test_structured_output_init_survives_model_reset(self):
        # The blanket xavier sweep at model construction must not erase
        # the heads' structured output-layer initialization.
        model = GazeTargetDetector(tiny_config())
        painter = model.heads.heatmap.layers[-1]
        assert torch.all(painter.weight.detach() == 0.0)
        assert torch.all(painter.bias.detach() == -4.5)
        box_out = model.heads.box.layers[-1]
        assert torch.all(box_out.bias.detach()[:2] == 0.0)
        assert torch.all(box_out.bias.detach()[2:] == -1.5)
        # The heatmap therefore starts exactly blank for any input.
        model.eval()
        with torch.no_grad():
            heat = model(torch.rand(1, 3, 64, 64)).final[0].heatmaps
        assert torch.allclose(heat, torch.full_like(heat, torch.sigmoid(torch.tensor(-4.5)).item()))


class TestForward:
    def test_forward_contract(self):
        cfg = tiny_config()
        model = GazeTargetDetector(cfg)
        model.eval()
        with torch.no_grad():
            result = model(torch.rand(2, 3, 96, 96))
        assert len(result.layers) == cfg.num_decoder_layers
        assert all(len(layer) == 2 for layer in result.layers)
        assert result.final[0].num_queries == cfg.num_queries
        assert result.final[0].heatmaps.shape == (4, 16, 16)
        assert (result.grid_h, result.grid_w) == (6, 6)
        assert result.cross_attention is None

    def test_forward_attention_request(self):
        model = GazeTargetDetector(tiny_config())
        model.eval()
        with torch.no_grad():
            result = model(torch.rand(1, 3, 64, 64), need_attention=True)
        attn = result.cross_attention
        assert attn.shape == (1, 4, result.grid_h * result.grid_w)
        assert torch.allclose(attn.sum(-1), torch.ones(1, 4), atol=1e-6)

    def test_eval_determinism(self):
        model = GazeTargetDetector(tiny_config())
        model.eval()
        x = torch.rand(1, 3, 96, 96)
        with torch.no_grad():
            a = model(x).final[0]
            b = model(x).final[0]
        assert torch.equal(a.boxes, b.boxes)
        assert torch.equal(a.heatmaps, b.heatmaps)

    def test_gradients_reach_all_heads(self):
        cfg = tiny_config()
        model = GazeTargetDetector(cfg)
        result = model(torch.rand(1, 3, 64, 64))
        final = result.final[0]
        total = (
            final.is_head_logits.sum() + final.watch_logits.sum()
            + final.boxes.sum() + final.heatmaps.sum()
        )
        total.backward()
        grads = [p.grad for p in model.parameters()]
        assert all(g is not None for g in grads)
        assert any(float(g.abs().sum()) > 0 for g in grads)

    def test_double_precision_forward(self):
        model = GazeTargetDetector(tiny_config()).double()
        with torch.no_grad():
            result = model(torch.rand(1, 3, 64, 64, dtype=torch.float64))
        assert result.final[0].boxes.dtype == torch.float64


class TestPrepareImages:
    def test_resize_and_range(self):
        img = (np.random.default_rng(0).uniform(0, 255, (50, 70, 3))).astype(np.uint8)
        batch = prepare_images([img], size=96)
        assert batch.shape == (1, 3, 96, 96)
        assert float(batch.min()) >= 0.0 and float(batch.max()) <= 1.0

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            prepare_images([np.zeros((32, 32), dtype=np.uint8)])


class TestCheckpointRoundTrip:
    def test_round_trip_bit_exact(self, tmp_path):
        model = GazeTargetDetector(tiny_config())
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, meta={"image_size": 96})
        loaded, meta = load_checkpoint(path)
        assert meta == {"image_size": 96}
        assert loaded.config == model.config
        for (na, a), (nb, b) in zip(
            sorted(model.state_dict().items()), sorted(loaded.state_dict().items())
        ):
            assert na == nb
            assert torch.equal(a, b)

    def test_same_weights_same_bytes(self, tmp_path):
        model = GazeTargetDetector(tiny_config())
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, model)
        save_checkpoint(p2, model)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"definitely not a checkpoint")
        with pytest.raises(ValueError, match="not a gazedet checkpoint"):
            load_checkpoint(path)

    def test_loaded_model_same_outputs(self, tmp_path):
        model = GazeTargetDetector(tiny_config())
        model.eval()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        loaded, _ = load_checkpoint(path)
        loaded.eval()
        x = torch.rand(1, 3, 96, 96)
        with torch.no_grad():
            a = model(x).final[0].heatmaps
            b = loaded(x).final[0].heatmaps
        assert torch.equal(a, b)
