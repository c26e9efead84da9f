"""
Tests for dataset parsing, preprocessing, pose subsets and the sample cache.
"""
import os

import numpy as np
import pandas as pd
import pytest

from .conftest import fer_pixels
from ..src.lanmsff.datasets import (
    FER2013_SCHEMA,
    FERPLUS_SCHEMA,
    KDEF_ANGLES,
    check_subset_containment,
    kdef_actor_groups,
    load_samples,
    majority_label,
    normalize_minmax,
    parse_fer2013,
    parse_ferplus,
    parse_kdef,
    parse_kdef_name,
    pose_subset,
    read_cache,
    resize,
    select_split,
    tag_subsets,
    to_arrays,
    write_cache,
)
from ..src.lanmsff.exceptions import DatasetError, DatasetFormatError, UnknownIdentifierError


def write_fer(tmp_path, rows):
    path = tmp_path / "broken.csv"
    pd.DataFrame(rows, columns=["emotion", "pixels", "Usage"]).to_csv(path, index=False)
    return path


class TestPreprocessing:
    def test_minmax_range(self, rng):
        out = normalize_minmax(rng.integers(0, 256, size=(1, 48, 48)))

        assert out.min() == 0.0 and out.max() == 1.0

    def test_constant_image_maps_to_zeros(self):
        np.testing.assert_array_equal(normalize_minmax(np.full((1, 8, 8), 7.0)), 0.0)

    def test_resize_48_to_64(self, rng):
        out = resize(rng.random((1, 48, 48)))

        assert out.shape == (1, 64, 64)

    def test_resize_keeps_value_range(self, rng):
        image = rng.random((3, 30, 40))
        out = resize(image)

        assert out.min() >= image.min() and out.max() <= image.max()


class TestSchemas:
    def test_fer2013_order(self):
        assert FER2013_SCHEMA.classes == ("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")
        assert FER2013_SCHEMA.index("happy") == 3

    def test_ferplus_has_eight_classes(self):
        assert len(FERPLUS_SCHEMA) == 8
        assert FERPLUS_SCHEMA.classes[-1] == "contempt"


class TestFer2013:
    def test_parses_rows_in_order(self, fer_csv):
        samples = parse_fer2013(fer_csv)

        assert len(samples) == 12
        assert [s.label for s in samples] == [i % 7 for i in range(12)]
        assert samples[0].source_id == "fer0000000"
        assert samples[0].image.shape == (1, 64, 64)
        assert samples[0].pose is None

    def test_usage_maps_to_splits(self, fer_csv):
        samples = parse_fer2013(fer_csv)

        assert [len(select_split(samples, tag)) for tag in ("train", "val", "test")] == [6, 3, 3]

    def test_three_channel_replication(self, fer_csv):
        sample = parse_fer2013(fer_csv, channels=3)[0]

        assert sample.image.shape == (3, 64, 64)
        np.testing.assert_array_equal(sample.image[0], sample.image[2])

    def test_wrong_pixel_count_names_row(self, tmp_path, rng):
        path = write_fer(tmp_path, [[0, fer_pixels(rng), "Training"], [1, "1 2 3", "Training"]])

        with pytest.raises(DatasetFormatError) as info:
            parse_fer2013(path)
        assert info.value.row == 3

    def test_label_out_of_range(self, tmp_path, rng):
        path = write_fer(tmp_path, [[7, fer_pixels(rng), "Training"]])

        with pytest.raises(DatasetFormatError, match="outside"):
            parse_fer2013(path)

    def test_malformed_pixel(self, tmp_path, rng):
        pixels = fer_pixels(rng).split()
        pixels[10] = "x1"
        path = write_fer(tmp_path, [[0, " ".join(pixels), "Training"]])

        with pytest.raises(DatasetFormatError, match="x1"):
            parse_fer2013(path)

    def test_unknown_usage(self, tmp_path, rng):
        path = write_fer(tmp_path, [[0, fer_pixels(rng), "Validation"]])

        with pytest.raises(DatasetFormatError):
            parse_fer2013(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError):
            parse_fer2013(tmp_path / "absent.csv")


class TestFerPlus:
    def test_majority_vote(self):
        assert majority_label([1, 7, 2, 0, 0, 0, 0, 0, 0, 0]) == 1
        assert majority_label([0, 0, 0, 0, 0, 0, 0, 0, 6, 4]) is None
        assert majority_label([0, 0, 0, 0, 0, 0, 0, 0, 0, 10]) is None

    def test_tie_goes_to_lower_index(self):
        assert majority_label([5, 5, 0, 0, 0, 0, 0, 0, 0, 0]) == 0

    def test_relabels_and_discards(self, fer_csv, ferplus_votes):
        samples = parse_ferplus(ferplus_votes, parse_fer2013(fer_csv))

        kept = [i for i in range(12) if i not in (3, 7)]
        assert len(samples) == 10
        assert [s.label for s in samples] == [i % 8 for i in kept]
        assert samples[0].source_id == "fer0000000.png"
        assert max(s.label for s in samples) < len(FERPLUS_SCHEMA)

    def test_length_mismatch(self, fer_csv, ferplus_votes):
        with pytest.raises(DatasetFormatError):
            parse_ferplus(ferplus_votes, parse_fer2013(fer_csv)[:5])

    def test_load_requires_votes(self, fer_csv):
        with pytest.raises(DatasetError):
            load_samples("ferplus", fer_csv)


class TestKdef:
    @pytest.mark.parametrize(
        "stem, label, pose",
        [("AF01AFS", "fear", 0), ("BM35HAFL", "happy", -90), ("AF22SUHR", "surprise", 45)],
    )
    def test_name_decoding(self, stem, label, pose):
        name = parse_kdef_name(stem)

        assert FER2013_SCHEMA.classes[name.label] == label
        assert name.pose == pose

    @pytest.mark.parametrize("stem", ["AF01XXS", "AF01ANZZ", "notkdef", "CF01ANS"])
    def test_unrecognised_names(self, stem):
        assert parse_kdef_name(stem) is None

    def test_parses_directory_and_skips_strays(self, kdef_dir, caplog):
        with caplog.at_level("WARNING"):
            samples = parse_kdef(kdef_dir)

        assert len(samples) == 2 * 7 * 3
        assert {s.pose for s in samples} == {-45, 0, 45}
        assert all(s.image.shape == (1, 64, 64) for s in samples)
        assert "AF01XXS" in caplog.text

    def test_rgb_input(self, kdef_dir):
        assert parse_kdef(kdef_dir, channels=3)[0].image.shape == (3, 64, 64)

    def test_actor_groups(self, kdef_dir):
        groups = kdef_actor_groups(parse_kdef(kdef_dir))

        assert set(groups) == {"F01", "M02"}

    def test_angle_table(self):
        assert sorted(KDEF_ANGLES.values()) == [-90, -45, 0, 45, 90]


class TestPoseSubsets:
    @pytest.fixture
    def kdef_samples(self, kdef_dir):
        return parse_kdef(kdef_dir)

    def test_tags_listed_samples(self, kdef_samples, tmp_path):
        index = tmp_path / "idx30.txt"
        index.write_text("AF01ANHL\nAM02HAHR\n")

        subset = pose_subset(kdef_samples, index, 30)

        assert [s.source_id for s in subset] == ["AF01ANHL", "AM02HAHR"]
        assert all(s.subsets == (">30",) for s in subset)

    def test_unknown_identifiers(self, kdef_samples, tmp_path):
        index = tmp_path / "idx.txt"
        index.write_text("AF01ANHL\nMISSING\n")

        assert len(pose_subset(kdef_samples, index, 30)) == 1
        with pytest.raises(UnknownIdentifierError):
            pose_subset(kdef_samples, index, 30, strict=True)

    def test_containment(self, kdef_samples, tmp_path):
        loose, strict = tmp_path / "30.txt", tmp_path / "45.txt"
        loose.write_text("AF01ANHL\nAF01ANHR\n")
        strict.write_text("AF01ANHL\n")
        outer = pose_subset(kdef_samples, loose, 30)
        inner = pose_subset(kdef_samples, strict, 45)

        check_subset_containment(inner, outer)
        with pytest.raises(DatasetError):
            check_subset_containment(outer, inner)

    def test_tag_subsets_merges_tags(self, kdef_samples, tmp_path):
        loose, strict = tmp_path / "30.txt", tmp_path / "45.txt"
        loose.write_text("AF01ANHL\nAF01ANHR\n")
        strict.write_text("AF01ANHL\n")

        tagged = tag_subsets(
            kdef_samples, [pose_subset(kdef_samples, loose, 30), pose_subset(kdef_samples, strict, 45)]
        )

        by_id = {s.source_id: s for s in tagged}
        assert by_id["AF01ANHL"].subsets == (">30", ">45")
        assert by_id["AF01ANHR"].subsets == (">30",)
        assert by_id["AF01ANS"].subsets == ()


class TestCache:
    def test_round_trip(self, kdef_dir, tmp_path):
        samples = parse_kdef(kdef_dir)
        path = tmp_path / "samples.bin"

        write_cache(samples, path)
        restored = read_cache(path)

        assert [s.source_id for s in restored] == [s.source_id for s in samples]
        assert [s.pose for s in restored] == [s.pose for s in samples]
        np.testing.assert_allclose(restored[5].image, samples[5].image, atol=1e-7)

    def test_unknown_pose_survives(self, fer_csv, tmp_path):
        path = tmp_path / "fer.bin"
        write_cache(parse_fer2013(fer_csv), path)

        restored = load_samples("cache", path)

        assert all(s.pose is None for s in restored)
        assert [s.split for s in restored][:7] == ["train"] * 6 + ["val"]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"JUNKJUNK" + bytes(20))

        with pytest.raises(DatasetFormatError):
            read_cache(path)

    def test_truncated(self, fer_csv, tmp_path):
        path = tmp_path / "fer.bin"
        write_cache(parse_fer2013(fer_csv), path)
        path.write_bytes(path.read_bytes()[:-100])

        with pytest.raises(DatasetFormatError):
            read_cache(path)

    def test_arrays(self, fer_csv):
        images, labels = to_arrays(parse_fer2013(fer_csv))

        assert images.shape == (12, 1, 64, 64)
        assert labels.dtype == np.int64


@pytest.mark.skipif("LANMSFF_FER2013_CSV" not in os.environ, reason="FER-2013 CSV not available")
def test_real_fer2013_distribution():
    """The published per-class totals of the full FER-2013 release."""
    samples = parse_fer2013(os.environ["LANMSFF_FER2013_CSV"])
    counts = np.bincount([s.label for s in samples], minlength=7)

    assert counts.tolist() == [4953, 547, 5121, 8989, 6077, 4002, 6198]
    assert len(samples) == 35_887
