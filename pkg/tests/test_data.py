import csv
import filecmp

import numpy as np
import pytest

from ocreid.data import (
    AugmentConfig,
    SampleRecord,
    SyntheticSpec,
    augment,
    generate_synthetic_dataset,
    load_dataset,
    load_parsing_map,
    make_pk_sampler,
    parsing_path,
    render_layout,
    save_image,
)
from ocreid.exceptions import ConfigurationError, IntegrityError


def write_manifest_rows(root, rows, make_images=True):
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "identity_id", "clothes_id", "camera_id", "split"])
        for r in rows:
            w.writerow(r)
            if make_images:
                save_image(root / r[0], np.full((8, 4, 3), 0.5))


def test_synthetic_counts(tmp_path):
    index = generate_synthetic_dataset(SyntheticSpec(4, 2, 6), seed=0, out_root=tmp_path)
    loaded = load_dataset(tmp_path, "synthetic")
    for idx in (index, loaded):
        assert (idx.num_identities, idx.num_clothes, len(idx)) == (4, 8, 48)


def test_synthetic_small_spec_files(tmp_path):
    generate_synthetic_dataset(SyntheticSpec(2, 2, 3), seed=3, out_root=tmp_path)
    assert len(list((tmp_path / "images").rglob("*.png"))) == 12
    assert len(list((tmp_path / "parsing").rglob("*.png"))) == 12
    with open(tmp_path / "manifest.csv") as fh:
        assert len(fh.read().strip().split("\n")) == 13


def test_synthetic_is_bit_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_synthetic_dataset(SyntheticSpec(2, 2, 3), seed=9, out_root=a)
    generate_synthetic_dataset(SyntheticSpec(2, 2, 3), seed=9, out_root=b)
    cmp = filecmp.dircmp(a, b)
    files = [p.relative_to(a) for p in a.rglob("*") if p.is_file()]
    assert files
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    assert not cmp.left_only and not cmp.right_only


def test_no_occluders_means_clean_parsing_maps(tmp_path):
    import json

    generate_synthetic_dataset(SyntheticSpec(2, 1, 4, occluder_prob=0.0), seed=5, out_root=tmp_path)
    boxes = json.loads((tmp_path / "occluders.json").read_text())
    assert boxes and all(v is None for v in boxes.values())
    for rel in boxes:
        pm = load_parsing_map(parsing_path(tmp_path, rel))
        assert set(np.unique(pm)) <= set(range(7))


def test_occluders_clear_parsing_labels(tmp_path):
    import json

    generate_synthetic_dataset(SyntheticSpec(2, 1, 4, occluder_prob=1.0), seed=5, out_root=tmp_path)
    boxes = json.loads((tmp_path / "occluders.json").read_text())
    for rel, (y0, x0, y1, x1) in boxes.items():
        assert not load_parsing_map(parsing_path(tmp_path, rel))[y0:y1, x0:x1].any()


def test_identity_layout_is_stable_across_clothes(tmp_path):
    # body layout depends on identity traits and jitter only, never on clothes
    traits = {"head_scale": 1.0, "torso_frac": 0.3}
    assert np.array_equal(render_layout(64, 32, traits), render_layout(64, 32, traits))
    assert set(np.unique(render_layout(64, 32, traits))) == set(range(7))


def test_manifest_singleton(tmp_path):
    write_manifest_rows(tmp_path, [("a.png", 0, 0, 0, "train")])
    index = load_dataset(tmp_path, "manifest")
    assert len(index) == 1
    assert dict(index.clothes_of_identity) == {0: frozenset({0})}


def test_manifest_clothes_under_two_identities(tmp_path):
    write_manifest_rows(tmp_path, [("a.png", 1, 5, 0, "train"), ("b.png", 2, 5, 0, "train")])
    with pytest.raises(IntegrityError, match="clothes_id 5"):
        load_dataset(tmp_path, "manifest")


def test_missing_root_and_unreadable_image(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope", "manifest")
    write_manifest_rows(tmp_path, [("a.png", 0, 0, 0, "train")], make_images=False)
    (tmp_path / "a.png").write_bytes(b"not an image")
    with pytest.raises(OSError, match="a.png"):
        load_dataset(tmp_path, "manifest")


def test_records_sorted_by_path(tmp_path):
    write_manifest_rows(tmp_path, [("b.png", 0, 0, 0, "train"), ("a.png", 1, 1, 0, "train")])
    refs = [r.image_ref for r in load_dataset(tmp_path).records]
    assert refs == sorted(refs)


def test_ltcc_like_layout(tmp_path):
    for d, name in [("train", "003_01_c1_0001.png"), ("train", "003_02_c2_0002.png"),
                    ("query", "010_01_c3_0001.png"), ("test", "010_02_c4_0001.png")]:
        save_image(tmp_path / d / name, np.zeros((8, 4, 3)))
    index = load_dataset(tmp_path, "ltcc_like")
    assert index.num_identities == 2 and index.num_clothes == 4
    assert sorted(r.split for r in index.records) == ["gallery", "query", "train", "train"]


def test_prcc_like_layout(tmp_path):
    for rel in ["rgb/train/001/A_cropped_1.jpg", "rgb/train/001/C_cropped_2.jpg",
                "rgb/test/A/007/a.jpg", "rgb/test/C/007/c.jpg"]:
        (tmp_path / rel).parent.mkdir(parents=True, exist_ok=True)
        from PIL import Image
        Image.new("RGB", (4, 8)).save(tmp_path / rel)
    index = load_dataset(tmp_path, "prcc_like")
    assert index.num_identities == 2 and index.num_clothes == 4
    by_split = {r.split: r.camera_id for r in index.records if r.split != "train"}
    assert by_split == {"gallery": 0, "query": 2}


def _index(n_ids, per_id):
    recs = [SampleRecord(np.zeros((1, 1, 3)), p, p, 0, "train") for p in range(n_ids) for _ in range(per_id)]
    from ocreid.data import DatasetIndex
    return DatasetIndex.from_records(recs)


def test_pk_batches_have_p_identities_k_samples():
    index = _index(8, 5)
    plan = make_pk_sampler(index, P=4, K=2, seed=0)
    assert len(plan) > 0
    for batch in plan:
        assert len(batch) == 8
        pids = [index.records[i].identity_id for i in batch]
        counts = {p: pids.count(p) for p in set(pids)}
        assert len(counts) == 4 and set(counts.values()) == {2}


def test_pk_deterministic_and_repeats():
    index = _index(8, 5)
    assert make_pk_sampler(index, 4, 2, seed=7) == make_pk_sampler(index, 4, 2, seed=7)
    assert len(make_pk_sampler(index, 4, 2, seed=7, num_batches=23)) == 23


def test_pk_with_replacement_for_small_identities():
    plan = make_pk_sampler(_index(3, 1), P=2, K=4, seed=0)
    assert all(len(b) == 8 for b in plan)


@pytest.mark.parametrize("P,K", [(10, 2), (0, 2), (2, 0)])
def test_pk_configuration_errors(P, K):
    with pytest.raises(ConfigurationError):
        make_pk_sampler(_index(4, 2), P=P, K=K, seed=0)


def test_augment_identity_config():
    img = np.random.default_rng(0).random((16, 8, 3)).astype(np.float32)
    cfg = AugmentConfig(flip_prob=0, crop_padding=0, erase_prob=0)
    assert np.array_equal(augment(img, cfg, np.random.default_rng(1)), img)


def test_augment_double_flip():
    img = np.random.default_rng(0).random((16, 8, 3)).astype(np.float32)
    cfg = AugmentConfig(flip_prob=1, crop_padding=0, erase_prob=0)
    once = augment(img, cfg, np.random.default_rng(1))
    assert not np.array_equal(once, img)
    assert np.array_equal(augment(once, cfg, np.random.default_rng(2)), img)


@pytest.mark.parametrize("seed", range(20))
def test_erase_area_within_range(seed):
    img = np.full((64, 32, 3), 0.5, dtype=np.float32)
    cfg = AugmentConfig(flip_prob=0, crop_padding=0, erase_prob=1, erase_area_range=(0.05, 0.3))
    out = augment(img, cfg, np.random.default_rng(seed))
    assert out.shape == img.shape
    changed = np.argwhere((out != img).any(axis=2))
    (y0, x0), (y1, x1) = changed.min(0), changed.max(0)
    frac = (y1 - y0 + 1) * (x1 - x0 + 1) / (64 * 32)
    assert 0.05 <= frac <= 0.3
    assert out.min() >= 0 and out.max() <= 1


def test_augment_config_validation():
    with pytest.raises(ConfigurationError):
        AugmentConfig(flip_prob=1.5)
    with pytest.raises(ConfigurationError):
        AugmentConfig(erase_area_range=(0.4, 0.2))
