import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfkd.detr import (DetectionTarget, DetectionTrainConfig, DetrConfig, DetrLite, bbox_loss,
                       boxes_from_normalized, boxes_to_normalized, cross_attention_probe, decode,
                       detection_classification_loss, detection_distill_loss, detr_forward, distill_detection,
                       draw_boxes, evaluate_map, expand_targets, normalize_pixels, preprocess_detection,
                       resize_bilinear, resize_dims, sine_positions, train_detr_teacher, write_detections_csv)
from dfkd.detr.model import REFERENCE_STUDENT, REFERENCE_TEACHER
from dfkd.engine import Rng, Tensor
from dfkd.engine import functional as F
from dfkd.engine.gradcheck import check_gradients, numerical_grad
from dfkd.errors import ConfigError, ContractError, DomainError, ShapeError
from oracles import kl_scalar

MICRO = DetrConfig(image_size=16, backbone=((4, 2), (8, 2)), embed_dim=8, num_heads=2, ffn_dim=16,
                   num_queries=4, num_classes=3, encoder_layers=1, decoder_layers=1)


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


class TestPreprocess:
    def test_shortest_edge_rule(self):
        assert resize_dims(400, 600, 800, 1333) == (800, 1200)

    def test_longest_edge_cap(self):
        assert resize_dims(400, 1000, 800, 1333) == (533, 1333)
        assert resize_dims(1000, 400, 800, 1333) == (1333, 533)

    def test_pixel_normalisation(self):
        px = normalize_pixels(np.full((1, 1, 3), 255.0))
        assert px[0, 0, 0] == pytest.approx(2.248908, abs=1e-6)
        assert px.shape == (3, 1, 1)

    def test_identity_on_conforming_size(self):
        img = Rng(0).uniform(0, 255, (64, 64, 3))
        assert np.array_equal(resize_bilinear(img, 64, 64), img)
        px, _ = preprocess_detection(img, [], np.zeros((0, 4)))
        np.testing.assert_allclose(px, normalize_pixels(img), atol=0)

    def test_resize_constant_image(self):
        img = np.full((10, 20, 3), 7.0)
        out = resize_bilinear(img, 15, 30)
        assert out.shape == (15, 30, 3)
        np.testing.assert_allclose(out, 7.0)

    def test_box_conversion(self):
        _, t = preprocess_detection(np.zeros((50, 100, 3)), [2], [[10, 5, 20, 10]], shortest=50, longest=100)
        np.testing.assert_allclose(t.boxes, [[0.2, 0.2, 0.2, 0.2]])
        assert t.labels.tolist() == [2] and t.rejected == []

    def test_degenerate_boxes_rejected(self):
        _, t = preprocess_detection(np.zeros((32, 32, 3)), [0, 1, 2],
                                    [[1, 1, 5, 5], [40, 3, 4, 4], [3, 3, 0, 5]], shortest=32, longest=48)
        assert t.labels.tolist() == [0]
        assert [r["index"] for r in t.rejected] == [1, 2]

    def test_clipping(self):
        _, t = preprocess_detection(np.zeros((10, 10, 3)), [0], [[-5, 5, 10, 10]], shortest=10, longest=10)
        np.testing.assert_allclose(t.boxes, [[0.25, 0.75, 0.5, 0.5]])

    def test_empty_image(self):
        with pytest.raises(ContractError):
            preprocess_detection(np.zeros((0, 4, 3)), [], [])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(0.5, 30), st.floats(0.5, 30)),
                    min_size=1, max_size=5), st.integers(20, 200), st.integers(20, 200))
    def test_box_round_trip(self, boxes, width, height):
        b = np.array(boxes)
        back = boxes_from_normalized(boxes_to_normalized(b, width, height), width, height)
        np.testing.assert_allclose(back, b, atol=1e-9)


class TestExpandTargets:
    def test_single_object(self):
        t = DetectionTarget([1], [[0.5, 0.5, 0.2, 0.2]])
        labels, boxes, mask = expand_targets(t, 4, 3)
        assert mask.all()
        np.testing.assert_array_equal(labels, np.tile([0, 1, 0], (4, 1)))
        np.testing.assert_array_equal(boxes, np.tile([0.5, 0.5, 0.2, 0.2], (4, 1)))

    def test_round_robin(self):
        t = DetectionTarget([0, 2], [[0.1, 0.1, 0.1, 0.1], [0.9, 0.9, 0.1, 0.1]])
        labels, boxes, mask = expand_targets(t, 4, 3)
        assert mask.all()
        assert labels.argmax(1).tolist() == [0, 2, 0, 2]
        np.testing.assert_array_equal(boxes[[0, 2]], t.boxes[[0, 0]])
        np.testing.assert_array_equal(boxes[[1, 3]], t.boxes[[1, 1]])

    def test_background_image(self):
        labels, boxes, mask = expand_targets(DetectionTarget([], np.zeros((0, 4))), 4, 3)
        assert not mask.any() and not labels.any() and not boxes.any()
        pred = Tensor(Rng(0).uniform(0, 1, (4, 4)))
        assert bbox_loss(pred, boxes, mask).item() == 0.0

    def test_more_objects_than_queries(self):
        t = DetectionTarget([0, 1, 2], np.full((3, 4), 0.5))
        labels, _, mask = expand_targets(t, 2, 3)
        assert mask.all() and labels.argmax(1).tolist() == [0, 1]

    def test_errors(self):
        with pytest.raises(ContractError):
            expand_targets(DetectionTarget([0], [[0.5] * 4]), 0, 3)
        with pytest.raises(DomainError):
            expand_targets(DetectionTarget([3], [[0.5] * 4]), 4, 3)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 6), st.integers(1, 12), st.integers(1, 4), st.integers(0, 10 ** 6))
    def test_total_and_masked_entries_inert(self, g, q, c, seed):
        rng = Rng(seed)
        t = DetectionTarget(rng.integers(0, c, g), rng.uniform(0.1, 0.9, (g, 4)))
        labels, boxes, mask = expand_targets(t, q, c)
        assert labels.shape == (q, c) and boxes.shape == (q, 4) and mask.shape == (q,)
        assert mask.sum() == (q if g else 0)
        pred = rng.uniform(0, 1, (q, 4))
        base = bbox_loss(Tensor(pred), boxes, mask).item()
        pred[~mask] += 0.3
        assert bbox_loss(Tensor(pred), boxes, mask).item() == base


class TestLosses:
    def test_bce_cases(self):
        assert detection_classification_loss(Tensor([[0.0]]), [[1.0]]).item() == pytest.approx(math.log(2), abs=1e-12)
        assert detection_classification_loss(Tensor([[20.0]]), [[1.0]]).item() < 1e-8

    def test_bce_scalar_oracle(self):
        rng = Rng(4)
        x = rng.normal((4, 3)) * 3
        y = (rng.uniform(0, 1, (4, 3)) > 0.5).astype(float)
        expected = np.mean([-(yv * math.log(_sigmoid(xv)) + (1 - yv) * math.log(1 - _sigmoid(xv)))
                            for xv, yv in zip(x.ravel(), y.ravel())])
        assert detection_classification_loss(Tensor(x), y).item() == pytest.approx(expected, abs=1e-10)

    @pytest.mark.parametrize("d,expected", [(0.5, 0.125), (1.0, 0.5), (-2.0, 1.5)])
    def test_smooth_l1_cases(self, d, expected):
        val = bbox_loss(Tensor([[d, 0, 0, 0]]), np.zeros((1, 4)), [True]).item()
        assert val * 4 == pytest.approx(expected, abs=1e-12)

    def test_smooth_l1_c1_at_one(self):
        quad_value, lin_value = 0.5 * 1.0 ** 2, 1.0 - 0.5
        quad_slope, lin_slope = 1.0, 1.0
        assert abs(quad_value - lin_value) < 1e-9 and abs(quad_slope - lin_slope) < 1e-9
        eps = 1e-7
        below = F.smooth_l1(Tensor([1 - eps])).item()
        above = F.smooth_l1(Tensor([1 + eps])).item()
        assert abs(above - below) < 1e-6
        for d in (1 - eps, 1 + eps):
            t = Tensor([d], requires_grad=True)
            F.sum(F.smooth_l1(t)).backward()
            assert t.grad[0] == pytest.approx(1.0, abs=1e-6)

    def test_bbox_mean_over_contributing_coordinates(self):
        pred = Tensor(np.array([[0.5, 0.5, 0.5, 0.5], [0.9, 0.9, 0.9, 0.9]]))
        val = bbox_loss(pred, np.zeros((2, 4)), [True, False]).item()
        assert val == pytest.approx(0.125, abs=1e-12)

    def test_bbox_shape_error(self):
        with pytest.raises(ShapeError):
            bbox_loss(Tensor(np.zeros((2, 4))), np.zeros((3, 4)), [True] * 3)

    def test_distill_cases(self):
        x = Rng(1).normal((5, 3))
        assert abs(detection_distill_loss(Tensor(x), x, 2.0).item()) < 1e-12
        val = detection_distill_loss(Tensor([[0.0, 0.0]]), np.array([[math.log(3), 0.0]]), 1.0).item()
        assert val == pytest.approx(0.130812, abs=1e-6)

    def test_distill_temperature_invariance(self):
        rng = Rng(2)
        s, t = rng.normal((6, 3)), rng.normal((6, 3))
        a = detection_distill_loss(Tensor(s), t, 1.5).item()
        b = detection_distill_loss(Tensor(2 * s), 2 * t, 3.0).item()
        assert a == pytest.approx(b, abs=1e-12)
        expected = np.mean([kl_scalar(t[i], s[i], 1.5) for i in range(6)])
        assert a == pytest.approx(expected, abs=1e-12)

    def test_distill_errors_and_gradient(self):
        with pytest.raises(DomainError):
            detection_distill_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 3)), 0.0)
        t = Rng(3).normal((2, 4, 3))
        s = Tensor(Rng(4).normal((2, 4, 3)), requires_grad=True)
        assert check_gradients(lambda a: detection_distill_loss(a, t, 2.0), [s]) < 1e-4

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(0.5, 5))
    def test_distill_non_negative(self, seed, temp):
        rng = Rng(seed)
        assert detection_distill_loss(Tensor(rng.normal((3, 4)) * 4), rng.normal((3, 4)) * 4, temp).item() >= -1e-12


class TestModel:
    def test_shapes_and_box_range(self):
        model = DetrLite(MICRO, Rng(0))
        out = model.forward(Rng(1).normal((2, 3, 16, 16)))
        assert out.class_logits.shape == (2, 4, 3) and out.pred_boxes.shape == (2, 4, 4)
        assert np.all((out.pred_boxes.data >= 0) & (out.pred_boxes.data <= 1))
        assert len(out.cross_attention) == 1
        np.testing.assert_allclose(out.cross_attention[0].data.sum(-1), 1.0, atol=1e-12)

    def test_zero_weights_give_class_bias(self):
        model = DetrLite(MICRO, Rng(0))
        state = {k: np.zeros_like(v) for k, v in model.state_dict().items()}
        state["class_head.bias"] = np.array([0.5, -1.0, 2.0])
        out = detr_forward(Rng(1).normal((3, 16, 16)), MICRO, state)
        np.testing.assert_allclose(out.class_logits.data, np.tile([0.5, -1.0, 2.0], (4, 1)), atol=1e-15)
        assert out.pred_boxes.shape == (4, 4)

    def test_shape_error_names_backbone(self):
        with pytest.raises(ShapeError, match="backbone"):
            DetrLite(MICRO, Rng(0)).forward(np.zeros((1, 3, 8, 8)))

    def test_parameter_gradients(self):
        model = DetrLite(MICRO, Rng(0))
        x = Rng(1).normal((2, 3, 16, 16))
        out = model.forward(x)
        loss = F.add(F.sum(out.class_logits), F.sum(out.pred_boxes))
        loss.backward()
        missing = {k for k, p in model.named_parameters() if p.grad is None or not np.any(p.grad)}
        # first decoder self-attention sees all-zero queries with zero biases, so it is inert at init
        assert missing <= {f"decoder.0.{n}" for n in ("self_attn.q_proj.weight", "self_attn.q_proj.bias",
                                                      "self_attn.k_proj.weight", "self_attn.k_proj.bias",
                                                      "self_attn.v_proj.weight", "self_attn.out_proj.weight",
                                                      "norm1.weight")}
        assert not any(k.startswith(("backbone", "encoder", "class_head", "box_mlp", "query_pos")) for k in missing)

    def test_input_gradient(self):
        model = DetrLite(MICRO, Rng(0))
        x = Rng(1).normal((1, 3, 16, 16))
        t = Tensor(x.copy(), requires_grad=True)
        F.sum(model.forward(t).pred_boxes).backward()
        numeric = numerical_grad(lambda: F.sum(model.forward(Tensor(x)).pred_boxes).item(), x)
        # many input entries have ~1e-7 gradients, so compare against the largest entry
        assert np.max(np.abs(t.grad - numeric)) < 1e-4 * np.max(np.abs(numeric))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            DetrConfig(embed_dim=10, num_heads=4)
        with pytest.raises(ConfigError):
            DetrConfig(num_queries=0)

    def test_reference_configs_expressible(self):
        teacher = DetrConfig(**REFERENCE_TEACHER)
        student = DetrConfig(**REFERENCE_STUDENT)
        assert (teacher.encoder_layers, teacher.decoder_layers, teacher.num_heads) == (6, 6, 8)
        assert (student.encoder_layers, student.decoder_layers) == (2, 2)

    def test_sine_positions(self):
        pos = sine_positions(3, 4, 8)
        assert pos.shape == (12, 8)
        assert len({tuple(r) for r in np.round(pos, 12)}) == 12
        with pytest.raises(ConfigError):
            sine_positions(2, 2, 6)

    def test_cross_attention_probe(self):
        model = DetrLite(MICRO, Rng(0))
        out = model.forward(Rng(1).normal((2, 3, 16, 16)))
        probe = cross_attention_probe(out)
        assert probe.shape == (2, MICRO.feature_size ** 2)
        np.testing.assert_allclose(probe.sum(1), 1.0, atol=1e-12)


class TestDecode:
    def test_nms_merges_replicated_queries(self):
        logits = np.array([[5.0, -5, -5], [4.0, -5, -5], [-5, 3.0, -5], [-5, -5, -5]])
        boxes = np.array([[0.3, 0.3, 0.2, 0.2], [0.31, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2], [0.5, 0.5, 0.1, 0.1]])
        queries, classes, scores, xyxy = decode(logits, boxes, score_threshold=0.05)
        assert queries.tolist() == [0, 2] and classes.tolist() == [0, 1]
        assert scores[0] == pytest.approx(_sigmoid(5.0))
        np.testing.assert_allclose(xyxy[0], [0.2, 0.2, 0.4, 0.4])


def _scenes(n=12):
    from dfkd.data import DetectionSceneSpec, gen_detection_dataset
    from dfkd.detr import prepare_detection

    ds = gen_detection_dataset(DetectionSceneSpec(canvas=16, min_size=4, max_size=7, num_images=n, seed=3))
    return ds, prepare_detection(ds, shortest=16, longest=24)


class TestTraining:
    def test_teacher_and_distillation_run(self, tmp_path):
        _, (px, targets) = _scenes()
        cfg = DetectionTrainConfig(epochs=2, batch_size=4, map_every=1)
        teacher = DetrLite(MICRO, Rng(0))
        evals = lambda m: evaluate_map(m, px, targets).map
        hist = train_detr_teacher(teacher, px, targets, cfg, Rng(1), eval_fn=evals)
        assert len(hist) == 2 and all(np.isfinite(r["total"]) and np.isfinite(r["map"]) for r in hist)
        assert all(r["distill"] == 0.0 for r in hist)
        before = {k: v.copy() for k, v in teacher.state_dict().items()}
        student = DetrLite(MICRO, Rng(5))
        hist = distill_detection(teacher, student, px, targets, cfg, Rng(2))
        assert all(r["distill"] > 0 and np.isfinite(r["total"]) for r in hist)
        for k, v in teacher.state_dict().items():
            assert np.array_equal(v, before[k])

    def test_zero_distill_weight_is_supervised_training(self):
        _, (px, targets) = _scenes(8)
        cfg = DetectionTrainConfig(epochs=1, batch_size=4, lambda_distill=0.0)
        teacher = DetrLite(MICRO, Rng(0))
        a, b = DetrLite(MICRO, Rng(5)), DetrLite(MICRO, Rng(5))
        distill_detection(teacher, a, px, targets, cfg, Rng(2))
        train_detr_teacher(b, px, targets, cfg, Rng(2))
        for (k, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert np.array_equal(p.data, q.data), k

    def test_config_mismatch(self):
        _, (px, targets) = _scenes(4)
        other = DetrConfig(**{**MICRO.to_dict(), "num_queries": 6})
        with pytest.raises(ConfigError):
            distill_detection(DetrLite(MICRO, Rng(0)), DetrLite(other, Rng(1)), px, targets,
                              DetectionTrainConfig(epochs=1), Rng(0))

    def test_dump_helpers(self, tmp_path):
        ds, (px, targets) = _scenes(3)
        model = DetrLite(MICRO, Rng(0))
        from dfkd.detr import detections

        dets = detections(model, px, DetectionTrainConfig(score_threshold=0.0))
        path = tmp_path / "dets.csv"
        write_detections_csv(path, [1, 2, 3], dets, 16, 16)
        lines = path.read_text().splitlines()
        assert lines[0] == "image_id,query,class,score,x,y,w,h"
        assert len(lines) == 1 + sum(len(d[0]) for d in dets)
        img = draw_boxes(ds.images[0], np.array([[2, 2, 10, 10]]), [1])
        assert img.dtype == np.uint8 and img.shape == ds.images[0].shape
        assert (img[2, 2:10] == [0, 255, 255]).all()
