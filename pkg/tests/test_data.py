import csv

import numpy as np
import pytest
import torch
from PIL import Image

from agemorph.conditioning import AgeGroupScheme
from agemorph.data import (DatasetRecord, SplitSpec, aging_region, ingest_directory,
                           image_to_tensor, region_mask, save_records, split,
                           synth_dataset, synth_record_image, tensor_to_image,
                           to_tensors)
from agemorph.errors import InvariantError


def write_dataset(tmp_path, n=10, size=16):
    rows = []
    rng = np.random.default_rng(0)
    for i in range(n):
        name = f"face{i:02d}.png"
        arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        Image.fromarray(arr).save(tmp_path / name)
        rows.append((name, 20 + i * 5, f"subj{i % 4}"))
    meta = tmp_path / "metadata.csv"
    with open(meta, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "age", "subject_id"])
        writer.writerows(rows)
    return meta


class TestIngest:
    def test_counts_all_valid_files(self, tmp_path):
        meta = write_dataset(tmp_path, n=10)
        records, errors = ingest_directory(tmp_path, meta, (16, 16))
        assert len(records) == 10
        assert errors == []

    def test_corrupt_file_isolated(self, tmp_path):
        meta = write_dataset(tmp_path, n=10)
        (tmp_path / "face03.png").write_bytes(b"not a png at all")
        records, errors = ingest_directory(tmp_path, meta, (16, 16))
        assert len(records) == 9
        assert len(errors) == 1
        assert errors[0].filename == "face03.png"
        assert "undecodable" in errors[0].reason

    def test_missing_metadata_row_reported(self, tmp_path):
        meta = write_dataset(tmp_path, n=4)
        Image.new("RGB", (16, 16)).save(tmp_path / "orphan.png")
        records, errors = ingest_directory(tmp_path, meta, (16, 16))
        assert len(records) == 4
        assert any(e.filename == "orphan.png" and "metadata" in e.reason for e in errors)

    def test_age_below_scheme_reported(self, tmp_path):
        meta = write_dataset(tmp_path, n=3)
        with open(meta, "a", newline="") as fh:
            csv.writer(fh).writerow(["young.png", 5, "subjx"])
        Image.new("RGB", (16, 16)).save(tmp_path / "young.png")
        records, errors = ingest_directory(tmp_path, meta, (16, 16))
        assert len(records) == 3
        assert any("age 5" in e.reason for e in errors)

    def test_value_scaling_endpoints(self, tmp_path):
        arr = np.zeros((8, 8, 3), dtype=np.uint8)
        arr[0, 0] = 255
        tensor = image_to_tensor(Image.fromarray(arr), (8, 8))
        assert float(tensor[0, 0, 0]) == 1.0
        assert float(tensor[0, 4, 4]) == -1.0

    def test_idempotent(self, tmp_path):
        meta = write_dataset(tmp_path, n=6)
        first, _ = ingest_directory(tmp_path, meta, (16, 16))
        second, _ = ingest_directory(tmp_path, meta, (16, 16))
        assert [r.subject_id for r in first] == [r.subject_id for r in second]
        assert all(torch.equal(a.image, b.image) for a, b in zip(first, second))


class TestSplit:
    def make_records(self, n, subjects=None):
        img = torch.zeros(3, 4, 4)
        return [DatasetRecord(image=img, age=20 + (i % 40),
                              subject_id=subjects[i % len(subjects)] if subjects
                              else f"s{i}")
                for i in range(n)]

    def test_ninety_ten(self):
        train, test = split(self.make_records(100), SplitSpec(0.9, seed=1))
        assert len(train) == 90 and len(test) == 10

    def test_deterministic(self):
        records = self.make_records(50)
        a = split(records, SplitSpec(0.8, seed=7))
        b = split(records, SplitSpec(0.8, seed=7))
        assert [id(r) for r in a[0]] == [id(r) for r in b[0]]
        assert [id(r) for r in a[1]] == [id(r) for r in b[1]]

    def test_subject_disjoint(self):
        records = self.make_records(30, subjects=["a", "b", "c"])
        train, test = split(records, SplitSpec(0.66, seed=3, by_subject=True))
        train_subjects = {r.subject_id for r in train}
        test_subjects = {r.subject_id for r in test}
        assert train_subjects and test_subjects
        assert not train_subjects & test_subjects

    def test_empty_side_rejected(self):
        with pytest.raises(InvariantError):
            split(self.make_records(3), SplitSpec(0.1, seed=0))  # empty train side
        with pytest.raises(InvariantError):
            split([], SplitSpec(0.5, seed=0))

    def test_fraction_validated(self):
        with pytest.raises(InvariantError):
            SplitSpec(train_fraction=1.5)


class TestSynth:
    def test_group_balance(self):
        scheme = AgeGroupScheme()
        for n in (5, 23, 100):
            records = synth_dataset(n, (16, 16), seed=0)
            bundle = to_tensors(records, scheme)
            counts = torch.bincount(bundle.group_indices, minlength=5).tolist()
            assert all(c in (n // 5, n // 5 + 1) for c in counts)
            assert sum(counts) == n

    def test_minimum_size(self):
        with pytest.raises(InvariantError):
            synth_dataset(4, (16, 16), seed=0)

    def test_same_subject_differs_only_in_region(self):
        resolution = (32, 32)
        mask = region_mask(resolution)
        img_young = synth_record_image(subject_seed=1234, group=0, resolution=resolution)
        img_old = synth_record_image(subject_seed=1234, group=4, resolution=resolution)
        outside_equal = torch.equal(img_young[:, ~mask], img_old[:, ~mask])
        inside_differs = not torch.equal(img_young[:, mask], img_old[:, mask])
        assert outside_equal and inside_differs

    def test_groups_pairwise_distinct_in_region(self):
        resolution = (32, 32)
        mask = region_mask(resolution)
        patches = [synth_record_image(7, g, resolution)[:, mask] for g in range(5)]
        for i in range(5):
            for j in range(i + 1, 5):
                assert not torch.equal(patches[i], patches[j])

    def test_deterministic(self):
        a = synth_dataset(15, (16, 16), seed=42)
        b = synth_dataset(15, (16, 16), seed=42)
        assert all(torch.equal(x.image, y.image) and x.age == y.age
                   and x.subject_id == y.subject_id for x, y in zip(a, b))

    def test_values_in_range(self):
        for rec in synth_dataset(10, (16, 16), seed=3):
            assert float(rec.image.min()) >= -1.0
            assert float(rec.image.max()) <= 1.0

    def test_ages_match_groups(self):
        scheme = AgeGroupScheme()
        bundle = to_tensors(synth_dataset(25, (16, 16), seed=5), scheme)
        assert (bundle.group_indices == torch.arange(25) % 5).all()

    def test_region_covers_expected_fraction(self):
        mask = region_mask((32, 32))
        r0, r1, c0, c1 = aging_region((32, 32))
        assert float(mask.sum()) == (r1 - r0) * (c1 - c0)
        assert 0.1 <= float(mask.float().mean()) <= 0.3


class TestMaterialize:
    def test_roundtrip(self, tmp_path):
        records = synth_dataset(10, (16, 16), seed=9)
        meta = save_records(records, tmp_path / "out")
        loaded, errors = ingest_directory(tmp_path / "out", meta, (16, 16))
        assert errors == []
        assert len(loaded) == 10
        quant = 1.0 / 127.5
        for orig, back in zip(records, loaded):
            assert back.age == orig.age
            assert back.subject_id == orig.subject_id
            assert float((back.image - orig.image).abs().max()) <= quant

    def test_tensor_image_inverse(self):
        gen = torch.Generator().manual_seed(11)
        tensor = torch.rand(3, 8, 8, generator=gen) * 2 - 1
        back = image_to_tensor(tensor_to_image(tensor), (8, 8))
        assert float((back - tensor).abs().max()) <= 1.0 / 127.5
