import json
import logging

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from weaksurg.pseudomask import (
    IdentityRefiner,
    RefinerUnavailable,
    cam_to_seed,
    refine,
    seed_to_instances,
    write_pseudo_masks,
)
from weaksurg.structures import Instance


def test_all_zero_cam_is_background():
    assert (cam_to_seed(np.zeros((3, 5, 5)), [1, 1, 1]) == 0).all()


def test_square_labelled():
    cam = np.zeros((3, 8, 8))
    cam[1, 2:5, 2:5] = 1.0
    seed = cam_to_seed(cam, [0, 1, 0])
    expected = np.zeros((8, 8), int)
    expected[2:5, 2:5] = 2
    assert np.array_equal(seed, expected)


def test_tie_goes_to_lower_class():
    cam = np.zeros((3, 1, 1))
    cam[1] = cam[2] = 0.8
    assert cam_to_seed(cam, [1, 1, 1])[0, 0] == 2


def test_absent_class_gated():
    cam = np.zeros((2, 2, 2))
    cam[0] = 1.0
    cam[1] = 0.5
    assert (cam_to_seed(cam, [0, 1]) == 2).all()


def test_threshold_boundary():
    cam = np.array([[[0.3, 0.2999]]])
    assert cam_to_seed(cam, [1], 0.3).tolist() == [[1, 0]]


@settings(max_examples=100, deadline=None)
@given(cam=arrays(np.float64, (3, 6, 6), elements=st.floats(0, 1)),
       pres=arrays(np.int64, 3, elements=st.integers(0, 1)))
def test_seed_gated_and_idempotent(cam, pres):
    seed = cam_to_seed(cam, pres)
    present = {c + 1 for c in range(3) if pres[c]}
    assert set(np.unique(seed)) <= present | {0}
    # re-running on the one-hot encoding of the seed reproduces it
    onehot = np.stack([(seed == c + 1).astype(float) for c in range(3)])
    assert np.array_equal(cam_to_seed(onehot, pres), seed)


def test_two_squares_two_instances():
    seed = np.zeros((10, 10), int)
    seed[1:3, 1:3] = 3
    seed[6:9, 6:9] = 3
    cam = np.zeros((3, 10, 10))
    cam[2][seed == 3] = 0.7
    inst = seed_to_instances(seed, cam, 0.0)
    assert len(inst) == 2
    assert {i.class_id for i in inst} == {2}
    assert all(abs(i.score - 0.7) < 1e-12 for i in inst)


def test_diagonal_pixels_connect():
    seed = np.zeros((4, 4), int)
    seed[0, 0] = seed[1, 1] = seed[2, 2] = 1
    assert len(seed_to_instances(seed, np.ones((1, 4, 4)), 0.0)) == 1


def test_small_blob_dropped():
    seed = np.zeros((128, 128), int)
    seed[10, 10:15] = 1  # 5 px < 0.001 * 16384 = 16.4 px
    seed[50:55, 50:55] = 1  # 25 px survives
    inst = seed_to_instances(seed, np.ones((1, 128, 128)), 0.001)
    assert len(inst) == 1 and inst[0].area == 25


@settings(max_examples=100, deadline=None)
@given(seed=arrays(np.int64, (8, 8), elements=st.integers(0, 3)))
def test_instances_partition_seed(seed):
    cam = np.random.default_rng(0).random((3, 8, 8))
    inst = seed_to_instances(seed, cam, 0.0)
    for c in range(3):
        union = np.zeros((8, 8), bool)
        for i in inst:
            if i.class_id == c:
                assert not (union & i.mask).any()
                union |= i.mask
        assert np.array_equal(union, seed == c + 1)
    assert all(0.0 <= i.score <= 1.0 for i in inst)


def test_refine_default_and_identity():
    inst = [Instance(0, 0.5, np.eye(3, dtype=bool))]
    assert refine(inst, None) == inst
    assert refine([], None) == []
    once = refine(inst, None, IdentityRefiner())
    assert refine(once, None, IdentityRefiner()) == once == inst


def test_refine_unavailable_falls_back(caplog):
    def broken(instances, frame):
        raise RefinerUnavailable("no backend")

    inst = [Instance(1, 0.2, np.ones((2, 2), bool))]
    with caplog.at_level(logging.WARNING):
        assert refine(inst, None, broken) == inst
    assert "unavailable" in caplog.text


def test_write_pseudo_masks(tmp_path):
    a = Instance(0, 0.9, np.zeros((4, 4), bool))
    a.mask[0, 0] = True
    b = Instance(2, 0.4, np.zeros((4, 4), bool))
    b.mask[3, 3] = True
    write_pseudo_masks([[a, b], []], tmp_path, (4, 4))
    first = np.asarray(Image.open(tmp_path / "masks" / "000000.png"))
    assert first[0, 0] == 1 and first[3, 3] == 2 and first.sum() == 3
    assert not np.asarray(Image.open(tmp_path / "masks" / "000001.png")).any()
    scores = json.loads((tmp_path / "scores.json").read_text())
    assert scores["000000.png"] == {"1": [0, 0.9], "2": [2, 0.4]}
    assert scores["000001.png"] == {}
