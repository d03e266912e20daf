import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from falkdet.errors import IngestionError, InputError
from falkdet.regions import (Box, DetectionDataset, GroundTruth, RegionProposal, assign_labels,
                             iou, iou_matrix, label_image, load_dataset, make_image,
                             save_dataset, split_images)
from falkdet.synthetic import SyntheticConfig, generate_synthetic

coord = st.floats(-500, 500, allow_nan=False)
side = st.floats(0.5, 300, allow_nan=False)


@st.composite
def boxes(draw):
    x, y, w, h = draw(coord), draw(coord), draw(side), draw(side)
    return Box(x, y, x + w, y + h)


# -- boxes and overlap ---------------------------------------------------------------

@pytest.mark.parametrize("vals", [(0, 0, 0, 1), (0, 0, 1, 0), (2, 0, 1, 1), (0, 0, float("nan"), 1)])
def test_box_rejects_degenerate(vals):
    with pytest.raises(InputError):
        Box(*vals)


def test_iou_examples():
    a = Box(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, Box(20, 20, 30, 30)) == 0.0
    assert iou(a, Box(10, 0, 20, 10)) == 0.0          # touching edge
    assert iou(a, Box(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)


@settings(max_examples=300, deadline=None)
@given(boxes(), boxes())
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert iou(a, a) == 1.0
    assert iou_matrix(a.as_array(), b.as_array())[0, 0] == pytest.approx(v, abs=1e-12)


def test_iou_matrix_matches_scalar_on_many_boxes():
    rng = np.random.default_rng(5)
    xy = rng.uniform(0, 100, (10_000, 2))
    wh = rng.uniform(1, 40, (10_000, 2))
    arr = np.hstack([xy, xy + wh])
    M = iou_matrix(arr[:100], arr)
    assert M.shape == (100, 10_000)
    assert np.all((M >= 0) & (M <= 1 + 1e-15))
    np.testing.assert_allclose(np.diag(M[:, :100]), 1.0, rtol=1e-15)
    np.testing.assert_allclose(M[:, :100], iou_matrix(arr[:100], arr[:100]).T, atol=1e-15)
    for i, j in rng.integers(0, 100, (200, 2)):
        assert M[i, j] == pytest.approx(iou(Box(*arr[i]), Box(*arr[j])), abs=1e-12)


# -- labeling ----------------------------------------------------------------------------

def _regions(boxes_):
    return [RegionProposal("im", Box(*b), i, np.zeros(2)) for i, b in enumerate(boxes_)]


def test_assign_labels_examples():
    gt = [GroundTruth("im", 2, Box(0, 0, 10, 10), feat_row=0)]
    # exact GT, disjoint, IoU 0.45 (band), IoU 0.25
    props = _regions([(0, 0, 10, 10), (50, 50, 60, 60), (0, 0, 10, 4.5), (0, 0, 10, 2.5)])
    out = assign_labels(props, gt, 0.6, 0.3)
    assert [(r.proposal.feat_row, r.class_id) for r in out] == [(0, 2), (1, None), (3, None)]
    assert out[0].matched_gt is gt[0] and out[1].matched_gt is None


def test_assign_labels_injects_gt_without_proposal():
    feats = np.arange(10.0).reshape(5, 2)
    gt = [GroundTruth("im", 0, Box(0, 0, 10, 10), feat_row=4)]
    out = assign_labels(_regions([(50, 50, 60, 60)]), gt, features=feats)
    assert len(out) == 2
    injected = out[-1]
    assert injected.class_id == 0 and injected.proposal.box == gt[0].box
    np.testing.assert_array_equal(injected.proposal.feature, feats[4])


def test_assign_labels_best_class_wins():
    gts = [GroundTruth("im", 0, Box(0, 0, 10, 10)), GroundTruth("im", 1, Box(0, 0, 10, 11))]
    out = assign_labels(_regions([(0, 0, 10, 10.9)]), gts)
    assert out[0].class_id == 1


def test_assign_labels_thresholds_validated():
    with pytest.raises(InputError):
        assign_labels([], [], tau_pos=0.3, tau_neg=0.3)
    with pytest.raises(InputError):
        assign_labels(_regions([(0, 0, 1, 1)]) + [RegionProposal("other", Box(0, 0, 1, 1), 0, None)], [])


@settings(max_examples=100, deadline=None)
@given(st.lists(boxes(), min_size=0, max_size=12), st.lists(boxes(), min_size=1, max_size=4),
       st.floats(0.05, 0.5), st.floats(0.5, 1.0))
def test_labeling_partitions_regions(props, gts, tau_neg, tau_pos):
    if tau_neg >= tau_pos:
        return
    image = make_image("im", [b.as_array() for b in props], range(len(props)),
                       [b.as_array() for b in gts], [k % 2 for k in range(len(gts))], [-1] * len(gts))
    lab = label_image(image, tau_pos, tau_neg)
    assert len(set(lab.source.tolist())) == len(lab.source)
    ov = iou_matrix(lab.boxes, image.gt_boxes)
    for r in range(len(lab.rows)):
        if lab.labels[r] >= 0:
            assert ov[r, lab.matched[r]] >= tau_pos
            assert image.gt_classes[lab.matched[r]] == lab.labels[r]
        else:
            assert lab.labels[r] == -1 and ov[r].max() < tau_neg
    dropped = set(range(len(props))) - set(lab.source.tolist())
    for p in dropped:
        best = iou_matrix(image.proposal_boxes[p], image.gt_boxes)[0]
        assert best.max() >= tau_neg


# -- dataset directory format ----------------------------------------------------------------

def _fixture(directory):
    (directory / "meta.txt").write_text("d=2\nclasses=cat,dog\nimages=2\n")
    (directory / "proposals.csv").write_text(
        "image_id,x1,y1,x2,y2,feat_row\n"
        "a,0,0,10,10,0\n"
        "a,5,5,20,25,1\n"
        "b,1.5,2.5,3.5,4.5,2\n")
    (directory / "groundtruth.csv").write_text(
        "image_id,class_id,x1,y1,x2,y2,feat_row\n"
        "a,1,0,0,10,10,0\n"
        "b,0,1,2,3,4,-1\n")
    np.array([[1, 2], [3, 4], [5, 6]], dtype="<f4").tofile(directory / "features.bin")


def test_load_handwritten_fixture(tmp_path):
    _fixture(tmp_path)
    ds = load_dataset(tmp_path)
    assert ds.d == 2 and ds.class_names == ["cat", "dog"] and len(ds.images) == 2
    a, b = ds.images
    assert a.image_id == "a" and b.image_id == "b"
    np.testing.assert_array_equal(a.proposal_boxes, [[0, 0, 10, 10], [5, 5, 20, 25]])
    np.testing.assert_array_equal(a.proposal_rows, [0, 1])
    np.testing.assert_array_equal(b.proposal_boxes, [[1.5, 2.5, 3.5, 4.5]])
    assert a.ground_truths() == [GroundTruth("a", 1, Box(0, 0, 10, 10), 0)]
    assert b.ground_truths() == [GroundTruth("b", 0, Box(1, 2, 3, 4), -1)]
    np.testing.assert_array_equal(ds.features, [[1, 2], [3, 4], [5, 6]])
    assert ds.features.dtype == np.float32


def test_load_empty_proposals(tmp_path):
    (tmp_path / "meta.txt").write_text("d=3\nclasses=x\nimages=0\n")
    (tmp_path / "proposals.csv").write_text("image_id,x1,y1,x2,y2,feat_row\n")
    (tmp_path / "groundtruth.csv").write_text("image_id,class_id,x1,y1,x2,y2,feat_row\n")
    (tmp_path / "features.bin").write_bytes(b"")
    ds = load_dataset(tmp_path)
    assert ds.num_proposals == 0 and ds.images == [] and ds.features.shape == (0, 3)


@pytest.mark.parametrize("name", ["meta.txt", "proposals.csv", "groundtruth.csv", "features.bin"])
def test_missing_file_named(tmp_path, name):
    _fixture(tmp_path)
    (tmp_path / name).unlink()
    with pytest.raises(IngestionError, match=name):
        load_dataset(tmp_path)


@pytest.mark.parametrize("file,old,new,pattern", [
    ("proposals.csv", "a,5,5,20,25,1", "a,5,5,20,25,7", r"proposals.csv:3: feat_row 7 out of range"),
    ("proposals.csv", "a,5,5,20,25,1", "a,5,x,20,25,1", r"proposals.csv:3: malformed"),
    ("proposals.csv", "a,5,5,20,25,1", "a,5,5,20,1", r"proposals.csv:3: expected 6 fields"),
    ("proposals.csv", "a,5,5,20,25,1", "a,25,5,20,25,1", r"proposals.csv:3: invalid box"),
    ("proposals.csv", "image_id,x1", "id,x1", r"proposals.csv:1: expected header"),
    ("groundtruth.csv", "b,0,1,2", "b,5,1,2", r"groundtruth.csv:3: class_id 5"),
    ("meta.txt", "d=2", "d=5", r"features.bin: size 24 is not a multiple"),
    ("meta.txt", "images=2", "images=3", r"meta.txt:3: images=3"),
    ("meta.txt", "classes=", "names=", r"meta.txt:2: expected 'classes"),
])
def test_ingestion_errors_name_file_and_line(tmp_path, file, old, new, pattern):
    _fixture(tmp_path)
    path = tmp_path / file
    path.write_text(path.read_text().replace(old, new))
    with pytest.raises(IngestionError, match=pattern):
        load_dataset(tmp_path)


def test_generated_roundtrip_bitwise(tmp_path):
    cfg = SyntheticConfig(num_classes=2, dim=5, images=3, imbalance=5, hard_fraction=0.3)
    ds = generate_synthetic(cfg, seed=8)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back == ds
    save_dataset(back, tmp_path / "e")
    for name in ("meta.txt", "proposals.csv", "groundtruth.csv", "features.bin"):
        assert (tmp_path / "d" / name).read_bytes() == (tmp_path / "e" / name).read_bytes()


def test_save_rejects_unrepresentable(tmp_path):
    feats = np.zeros((1, 2), np.float32)
    empty = DetectionDataset(2, ["a"], [make_image("x")], feats)
    with pytest.raises(InputError):
        save_dataset(empty, tmp_path)
    bad_name = DetectionDataset(2, ["a,b"], [], feats)
    with pytest.raises(InputError):
        save_dataset(bad_name, tmp_path)


def test_dataset_validation():
    feats = np.zeros((2, 2), np.float32)
    with pytest.raises(InputError):
        DetectionDataset(2, ["a"], [make_image("x", [[0, 0, 1, 1]], [5])], feats)
    with pytest.raises(InputError):
        DetectionDataset(2, ["a"], [make_image("x", gt_boxes=[[0, 0, 1, 1]], gt_classes=[1],
                                               gt_rows=[-1])], feats)
    with pytest.raises(InputError):
        DetectionDataset(2, ["a"], [make_image("x"), make_image("x")], feats)


def test_split_images():
    kept, held = split_images(10, 0.2, seed=1)
    assert len(held) == 2 and len(kept) == 8
    assert sorted(np.concatenate([kept, held]).tolist()) == list(range(10))
    again = split_images(10, 0.2, seed=1)
    assert np.array_equal(kept, again[0]) and np.array_equal(held, again[1])
    with pytest.raises(InputError):
        split_images(1, 0.2, 0)
