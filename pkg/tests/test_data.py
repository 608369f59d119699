import json
import os
import struct

import numpy as np
import pytest

from dfkd.data.augment import augment
from dfkd.data.checkpoint import (MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint,
                                  save_checkpoint)
from dfkd.data.coco import (CocoFormatError, denormalize_bbox, normalize_bbox, parse_coco, read_coco,
                            to_document, write_coco)
from dfkd.data.config import apply_overrides, read_config, write_config
from dfkd.data.datasets import (ClassificationDatasetSpec, DetectionSceneSpec, _object_mask,
                                gen_classification_dataset, gen_detection_dataset,
                                load_classification_dataset, load_detection_dataset, render_scene,
                                save_classification_dataset, save_detection_dataset)
from dfkd.data.idx import read_idx
from dfkd.data.images import read_pnm, to_uint8, write_pnm
from dfkd.engine import Rng
from dfkd.errors import (BadMagicError, BadVersionError, ChecksumError, ConfigError, FormatError)
from dfkd.vit import ViT, ViTConfig, vit_forward

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture(scope="module")
def cls_ds():
    return gen_classification_dataset(ClassificationDatasetSpec(samples_per_class=40, seed=3))


class TestClassificationDataset:
    def test_deterministic(self, cls_ds):
        again = gen_classification_dataset(ClassificationDatasetSpec(samples_per_class=40, seed=3))
        assert cls_ds.images.tobytes() == again.images.tobytes()
        for k in cls_ds.splits:
            np.testing.assert_array_equal(cls_ds.splits[k], again.splits[k])

    def test_seed_changes_images(self, cls_ds):
        other = gen_classification_dataset(ClassificationDatasetSpec(samples_per_class=40, seed=4))
        assert cls_ds.images.tobytes() != other.images.tobytes()

    def test_class_counts(self, cls_ds):
        np.testing.assert_array_equal(np.bincount(cls_ds.labels), [40, 40, 40])
        assert cls_ds.images.shape == (120, 1, 16, 16)
        assert cls_ds.images.min() >= -1 and cls_ds.images.max() <= 1

    def test_splits_disjoint_stratified(self, cls_ds):
        s = cls_ds.splits
        allidx = np.concatenate([s["train"], s["val"], s["test"]])
        assert len(np.unique(allidx)) == len(allidx) == 120
        for name, n in (("train", 28), ("val", 6), ("test", 6)):
            np.testing.assert_array_equal(np.bincount(cls_ds.labels[s[name]], minlength=3), [n] * 3)

    def test_histogram_linear_classifier_beats_chance(self, cls_ds):
        x, y = cls_ds.split("train")
        feats = np.stack([np.histogram(im, bins=8, range=(-1, 1))[0] for im in x]).astype(float)
        feats = np.hstack([feats, np.ones((len(feats), 1))])
        w, *_ = np.linalg.lstsq(feats, np.eye(3)[y], rcond=None)
        assert np.mean(np.argmax(feats @ w, axis=1) == y) > 1 / 3 + 0.2

    def test_save_load(self, cls_ds, tmp_path):
        save_classification_dataset(cls_ds, str(tmp_path))
        back = load_classification_dataset(str(tmp_path))
        assert back.images.tobytes() == cls_ds.images.tobytes()
        assert back.spec == cls_ds.spec
        assert read_pnm(tmp_path / "preview.pgm").ndim == 2

    def test_rejects_bad_spec(self):
        with pytest.raises(ConfigError):
            ClassificationDatasetSpec(num_classes=9)


@pytest.fixture(scope="module")
def det():
    return gen_detection_dataset(DetectionSceneSpec(num_images=30, seed=1))


class TestDetectionDataset:
    def test_boxes_inside_canvas(self, det):
        for a in det.coco.annotations:
            x, y, w, h = a.bbox
            assert w > 0 and h > 0 and x >= 0 and y >= 0 and x + w <= 64 and y + h <= 64

    def test_area_is_w_times_h(self, det):
        for a in det.coco.annotations:
            assert a.area == a.bbox[2] * a.bbox[3]

    def test_every_image_has_objects_in_range(self, det):
        counts = [len(det.coco.annotations_for(img.id)) for img in det.coco.images]
        assert min(counts) >= 1 and max(counts) <= 2

    def test_rendered_pixels_cover_box_centre(self, det):
        spec = DetectionSceneSpec(num_images=30, seed=1)
        for i in range(10):
            img, objects = render_scene(spec, Rng(1).child(2).child(i))
            for cls, (x, y, w, h) in objects:
                patch = img[int(y):int(y + h), int(x):int(x + w)].astype(int)
                colour = np.array([(230, 60, 50), (60, 200, 70), (70, 90, 235)][cls])
                close = np.abs(patch - colour).max(axis=-1) < 70
                ys, xs = np.nonzero(close)
                cy, cx = h / 2, w / 2
                assert ys.min() <= cy <= ys.max() + 1 and xs.min() <= cx <= xs.max() + 1

    def test_triangle_mask_touches_all_sides(self):
        m = _object_mask("triangle", 12, 10, Rng(0))
        assert m[-1].all() and m[0].any() and m[:, 0].any() and m[:, -1].any()

    def test_json_round_trip(self, det, tmp_path):
        path = tmp_path / "ann.json"
        write_coco(det.coco, path)
        assert read_coco(path) == det.coco

    def test_targets_sorted_left_to_right(self, det):
        for i in range(len(det.images)):
            _, boxes = det.targets(i)
            cx = boxes[:, 0] + boxes[:, 2] / 2
            assert np.all(np.diff(cx) >= 0)

    def test_save_load(self, det, tmp_path):
        save_detection_dataset(det, str(tmp_path))
        back = load_detection_dataset(str(tmp_path))
        np.testing.assert_array_equal(back.images, det.images)
        assert back.coco == det.coco
        np.testing.assert_array_equal(read_pnm(tmp_path / "images" / "scene_00000.ppm"), det.images[0])


class TestCoco:
    def test_minimal_fixture(self):
        ds = read_coco(os.path.join(FIXTURES, "minimal_coco.json"))
        assert len(ds.images) == 1 and ds.images[0].width == 64 and ds.images[0].height == 48
        a = ds.annotations[0]
        assert a.bbox == (10.5, 4.0, 20.0, 8.25) and a.category_id == 2 and a.area == 165.0
        assert ds.class_index(2) == 1
        assert a.extra == {"iscrowd": 0, "segmentation": []}

    def test_write_read_identity(self, tmp_path):
        src = os.path.join(FIXTURES, "minimal_coco.json")
        with open(src) as f:
            original = json.load(f)
        out = tmp_path / "c.json"
        write_coco(read_coco(src), out)
        with open(out) as f:
            assert json.load(f) == original

    @pytest.mark.parametrize("seed", range(10))
    def test_normalize_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        w, h = rng.uniform(10, 2000, 2)
        box = [rng.uniform(0, w / 2), rng.uniform(0, h / 2), rng.uniform(1, w / 2), rng.uniform(1, h / 2)]
        np.testing.assert_allclose(denormalize_bbox(normalize_bbox(box, w, h), w, h), box, atol=1e-9)

    def test_normalize_value(self):
        np.testing.assert_allclose(normalize_bbox([10, 20, 30, 40], 100, 200), [0.25, 0.2, 0.3, 0.2])

    def test_syntax_error_has_line(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n "images": [\n  {"id": 1,,}\n ]\n}')
        with pytest.raises(CocoFormatError, match="line 3"):
            read_coco(p)

    def test_field_error_names_field(self):
        doc = {"images": [], "annotations": [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [1, 2, 3],
                                              "area": 1.0}], "categories": []}
        with pytest.raises(CocoFormatError, match=r"annotations\[0\]\.bbox"):
            parse_coco(doc)
        doc["annotations"][0]["bbox"] = [1, 2, 3, 4]
        del doc["annotations"][0]["area"]
        with pytest.raises(CocoFormatError, match="area"):
            parse_coco(doc)

    def test_document_keeps_top_level_extras(self):
        doc = {"info": {"x": 1}, "licenses": [], "images": [], "annotations": [], "categories": []}
        assert to_document(parse_coco(doc)) == doc


def _weights():
    rng = np.random.default_rng(0)
    return {"a.weight": rng.normal(size=(3, 4)), "a.bias": rng.normal(size=4),
            "scalar": np.array(np.pi), "tiny": np.array([5e-324, -0.0, np.inf])}


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        w = _weights()
        save_checkpoint(tmp_path / "w.ckpt", "test", w, {"k": 1.5}, {"note": "x"})
        ck = load_checkpoint(tmp_path / "w.ckpt")
        assert list(ck.tensors) == list(w)
        for k in w:
            assert ck.tensors[k].shape == w[k].shape
            assert ck.tensors[k].tobytes() == np.asarray(w[k], dtype=np.float64).tobytes()
        assert ck.kind == "test" and ck.config == {"k": 1.5} and ck.meta == {"note": "x"}

    def test_encoding_is_deterministic(self):
        assert encode_checkpoint("t", _weights()) == encode_checkpoint("t", _weights())

    def test_layout(self):
        blob = encode_checkpoint("t", {"x": np.array([1.0, 2.0])})
        magic, version, hlen = struct.unpack_from("<4sIQ", blob)
        assert magic == MAGIC and version == 1
        payload = blob[16 + hlen:-8]
        np.testing.assert_array_equal(np.frombuffer(payload, "<f8"), [1.0, 2.0])

    @pytest.mark.parametrize("cut", [5, 17, 60, -9, -1])
    def test_truncation_is_checksum_error(self, cut):
        blob = encode_checkpoint("t", _weights())
        with pytest.raises(ChecksumError):
            decode_checkpoint(blob[:cut])

    def test_flipped_payload_byte(self):
        blob = bytearray(encode_checkpoint("t", _weights()))
        blob[-20] ^= 0x01
        with pytest.raises(ChecksumError):
            decode_checkpoint(bytes(blob))

    def test_bad_magic(self):
        with pytest.raises(BadMagicError):
            decode_checkpoint(b"NOPE" + encode_checkpoint("t", _weights())[4:])

    def test_bad_version(self):
        blob = bytearray(encode_checkpoint("t", _weights()))
        blob[4:8] = struct.pack("<I", 99)
        with pytest.raises(BadVersionError):
            decode_checkpoint(bytes(blob))

    def test_error_codes_distinct(self):
        codes = {BadMagicError.code, BadVersionError.code, ChecksumError.code}
        assert len(codes) == 3
        assert all(issubclass(e, FormatError) for e in (BadMagicError, BadVersionError, ChecksumError))

    def test_v1_fixture_loads_and_runs(self):
        ck = load_checkpoint(os.path.join(FIXTURES, "tiny_vit_v1.ckpt"))
        assert ck.version == 1 and ck.kind == "vit"
        image = ck.tensors.pop("probe_image")
        cfg = ViTConfig(**ck.config)
        logits, _ = vit_forward(image, cfg, ck.tensors)
        assert logits.data.tolist() == ck.meta["expected_logits"]

    def test_vit_outputs_identical_after_reload(self, tmp_path):
        cfg = ViTConfig(image_size=8, patch_size=2, embed_dim=8, depth=2, num_classes=3)
        model = ViT(cfg, Rng(7))
        image = Rng(8).normal((1, 8, 8))
        before, maps_before = vit_forward(image, cfg, model.state_dict())
        save_checkpoint(tmp_path / "m.ckpt", "vit", model.state_dict(), cfg.to_dict())
        ck = load_checkpoint(tmp_path / "m.ckpt")
        after, maps_after = vit_forward(image, ViTConfig(**ck.config), ck.tensors)
        assert after.data.tobytes() == before.data.tobytes()
        assert all(a.matrix.tobytes() == b.matrix.tobytes() for a, b in zip(maps_after, maps_before))


class TestConfigFile:
    def test_round_trip_and_coercion(self, tmp_path):
        path = tmp_path / "x.cfg"
        write_config({"data": {"num_classes": 2, "noise": 0.25, "families": ("disk", "ring")}}, path)
        sections = read_config(path)
        spec = apply_overrides(ClassificationDatasetSpec(), sections["data"], "data")
        assert spec.num_classes == 2 and spec.noise == 0.25 and spec.families == ("disk", "ring")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            apply_overrides(ClassificationDatasetSpec(), {"nosie": "0.1"}, "data")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="seed"):
            apply_overrides(ClassificationDatasetSpec(), {"seed": "seven"})

    def test_malformed_file(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("key = value without section\n")
        with pytest.raises(FormatError):
            read_config(p)


class TestPnmAndIdx:
    def test_pgm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (5, 7)).astype(np.uint8)
        write_pnm(tmp_path / "a.pgm", img)
        np.testing.assert_array_equal(read_pnm(tmp_path / "a.pgm"), img)
        assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")

    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(1).integers(0, 256, (4, 3, 3)).astype(np.uint8)
        write_pnm(tmp_path / "a.ppm", img)
        np.testing.assert_array_equal(read_pnm(tmp_path / "a.ppm"), img)

    def test_to_uint8_endpoints(self):
        np.testing.assert_array_equal(to_uint8([-1.0, 0.0, 1.0, 3.0]), [0, 128, 255, 255])

    def test_idx(self, tmp_path):
        arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
        p = tmp_path / "x.idx"
        p.write_bytes(bytes([0, 0, 0x08, 3]) + np.array([2, 3, 4], ">u4").tobytes() + arr.tobytes())
        np.testing.assert_array_equal(read_idx(p), arr)
        p.write_bytes(b"\x00\x00\x08\x03" + np.array([2, 3, 4], ">u4").tobytes() + b"\x00")
        with pytest.raises(FormatError):
            read_idx(p)


class TestAugment:
    def test_off_is_identity(self):
        x = np.random.default_rng(0).uniform(-1, 1, (4, 1, 5, 5))
        np.testing.assert_array_equal(augment(x, Rng(0)), x)

    def test_flip_and_jitter(self):
        x = np.random.default_rng(0).uniform(-1, 1, (64, 1, 5, 5))
        out = augment(x, Rng(0), flip=True)
        flipped = [np.array_equal(o, i[..., ::-1]) for o, i in zip(out, x)]
        assert 10 < sum(flipped) < 54
        j = augment(x, Rng(0), jitter=0.05)
        assert np.abs(j - x).max() <= 0.05 + 1e-15 and j.min() >= -1
