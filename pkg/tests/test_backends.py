import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from altmock import ShiftMock
from promptgeo.backends import BackendError, DetectionCandidate, FeatureMap, MultiScaleMasks, load_backend
from promptgeo.backends.mock import MockBackend, SceneSpec
from promptgeo.errors import ShapeError
from scenes import disc, five_cars, random_scene, rect


def _one_car(det=0.7):
    return SceneSpec(30, 20, (rect(5, 4, 10, 10, "car", det),))


def test_detect_single_car():
    scene = _one_car()
    mb = MockBackend(scene)
    cands = mb.detect(scene.render(), "car")
    assert len(cands) == 1
    assert cands[0].logit == pytest.approx(0.7)
    assert cands[0].box == (5.0, 4.0, 15.0, 14.0)
    assert cands[0].phrase_score == 1.0


def test_detect_no_token_overlap():
    scene = _one_car()
    assert MockBackend(scene).detect(scene.render(), "lake") == []


def test_phrase_score_is_jaccard():
    scene = SceneSpec(20, 20, (rect(1, 1, 4, 4, "small car"),))
    c = MockBackend(scene).detect(scene.render(), "red car")
    assert c[0].phrase_score == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        MockBackend(scene).detect(scene.render(), "  ")


def test_segment_exact_box_middle_scale():
    scene = SceneSpec(30, 30, (disc(12, 12, 6, "tree"),))
    mb = MockBackend(scene)
    obj = scene.masks()[0]
    ys, xs = np.nonzero(obj)
    ms = mb.segment_box(scene.render(), (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1))
    assert np.array_equal(ms.binary(1), obj)
    assert ms.confidences[1] == 1.0


def test_scale_nesting():
    for seed in range(20):
        scene = random_scene(seed, 8, disjoint=False)
        mb = MockBackend(scene)
        for obj_mask in scene.masks():
            ys, xs = np.nonzero(obj_mask)
            ms = mb.segment_points(scene.render(), [(int(xs[0]), int(ys[0]))])
            s1, s2, s3 = (ms.binary(k) for k in range(3))
            assert not (s1 & ~s2).any() and not (s2 & ~s3).any()


def test_no_match_gives_empty_scales():
    scene = _one_car()
    ms = MockBackend(scene).segment_box(scene.render(), (20, 15, 25, 19))
    assert not any(ms.binary(k).any() for k in range(3))
    assert ms.confidences.tolist() == [0.0, 0.0, 0.0]


def test_erasing_never_raises_logit():
    scene = _one_car(0.9)
    mb = MockBackend(scene)
    img = scene.render().data.copy()
    last = mb.detect(scene.render(), "car")[0].logit
    rng = np.random.default_rng(0)
    for _ in range(30):
        y, x = rng.integers(4, 14), rng.integers(5, 15)
        img[:, y, x] = 0
        cands = mb.detect(scene.render().with_data(img), "car")
        now = cands[0].logit if cands else 0.0
        assert now <= last + 1e-15
        last = now


def test_fully_erased_object_is_not_returned():
    scene = _one_car()
    img = scene.render().data.copy()
    img[:, 4:14, 5:15] = 1
    assert MockBackend(scene).detect(scene.render().with_data(img), "car") == []


def test_embed_is_one_hot_unit_norm():
    scene = SceneSpec(20, 20, (rect(1, 1, 4, 4, "car"), rect(10, 10, 5, 5, "tree")))
    mb = MockBackend(scene)
    fm = mb.embed(scene.render())
    assert fm.stride == 1 and fm.dim == 3
    assert np.allclose(np.linalg.norm(fm.vectors, axis=-1), 1.0, atol=1e-6)
    assert fm.vectors[2, 2].tolist() == [0, 1, 0]
    assert fm.vectors[12, 12].tolist() == [0, 0, 1]
    assert fm.vectors[0, 19].tolist() == [1, 0, 0]


def test_determinism_bit_for_bit():
    scene = random_scene(11, 10)
    a, b = MockBackend(scene), MockBackend(SceneSpec.from_dict(json.loads(json.dumps(scene.to_dict()))))
    img = scene.render()
    assert [c for c in a.detect(img, "car")] == [c for c in b.detect(img, "car")]
    box = a.detect(img, "car")[0].box
    assert a.segment_box(img, box).logits.tobytes() == b.segment_box(img, box).logits.tobytes()


def test_shape_mismatch_rejected():
    scene = _one_car()
    other = SceneSpec(10, 10)
    with pytest.raises(ShapeError):
        MockBackend(scene).detect(other.render(), "car")


def test_scene_validation():
    with pytest.raises(ValueError):
        SceneSpec(10, 10, (rect(8, 8, 4, 4),))
    with pytest.raises(ValueError):
        rect(0, 0, 2, 2, det=1.5)
    with pytest.raises(ValueError):
        SceneSpec(10, 10, (disc(1, 5, 3),))


def test_scene_file_round_trip(tmp_path):
    scene = five_cars()
    (tmp_path / "s.json").write_text(json.dumps(scene.to_dict()))
    assert SceneSpec.load(tmp_path / "s.json") == scene


def test_load_backend_specs(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps(five_cars().to_dict()))
    assert isinstance(load_backend(f"mock:{tmp_path / 's.json'}"), MockBackend)
    for bad in ("bogus", "mock:", f"mock:{tmp_path / 'missing.json'}", "other:x"):
        with pytest.raises(BackendError):
            load_backend(bad)


def test_value_types_validate():
    with pytest.raises(ValueError):
        DetectionCandidate((3, 3, 2, 5), 0.5, 0.5)
    with pytest.raises(ValueError):
        DetectionCandidate((0, 0, 2, 5), 1.5, 0.5)
    with pytest.raises(ShapeError):
        MultiScaleMasks(np.zeros((2, 4, 4)), np.zeros(2))
    with pytest.raises(ValueError):
        FeatureMap(np.ones((2, 2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_second_mock_agrees_on_every_call(seed):
    scene = random_scene(seed, 10, disjoint=False, names=("car", "tree"))
    a, b = MockBackend(scene), ShiftMock(scene)
    img = scene.render()
    ca, cb = (sorted(x.detect(img, "car"), key=lambda c: c.box) for x in (a, b))
    assert [c.box for c in ca] == [c.box for c in cb]
    assert [c.logit for c in ca] == pytest.approx([c.logit for c in cb], abs=1e-12)
    assert [c.phrase_score for c in ca] == pytest.approx([c.phrase_score for c in cb], abs=1e-12)
    rng = np.random.default_rng(seed)
    for _ in range(5):
        x1, y1 = int(rng.integers(0, 40)), int(rng.integers(0, 30))
        box = (x1, y1, x1 + int(rng.integers(1, 8)), y1 + int(rng.integers(1, 8)))
        ma, mb = a.segment_box(img, box), b.segment_box(img, box)
        assert np.array_equal(ma.logits, mb.logits)
        assert np.allclose(ma.confidences, mb.confidences)
        pt = [(int(rng.integers(0, 48)), int(rng.integers(0, 40)))]
        assert np.array_equal(a.segment_points(img, pt).logits, b.segment_points(img, pt).logits)
    assert np.array_equal(a.embed(img).vectors, b.embed(img).vectors)
