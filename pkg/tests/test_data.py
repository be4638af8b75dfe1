"""Ingestion, labeling, and feature-store tests."""

import json
import struct

import numpy as np
import pytest

from attnpop import data as D
from attnpop.errors import (FeatureConsistencyError, FeatureFormatError,
                            FeatureTruncationError, ManifestError,
                            VocabularyError)


def _write_manifest(path, docs):
    with open(path, "w", encoding="utf-8") as handle:
        for doc in docs:
            handle.write(json.dumps(doc) + "\n")


def _doc(i, **overrides):
    doc = dict(id=f"vid{i}", headline=f"headline {i}", view_count=100 * i,
               follower_count=1000, frame_features_path=f"{i}.vfb")
    doc.update(overrides)
    return doc


class TestManifest:
    def test_valid_three_line_file(self, tmp_path):
        path = tmp_path / "m.jsonl"
        _write_manifest(path, [_doc(i) for i in range(3)])
        records = D.load_manifest(path)
        assert len(records) == 3
        assert records[1].id == "vid1"
        assert records[1].view_count == 100
        assert records[1].conv_activations_path is None

    def test_optional_conv_path_is_kept(self, tmp_path):
        path = tmp_path / "m.jsonl"
        _write_manifest(path, [_doc(0, conv_activations_path="0.vca")])
        assert D.load_manifest(path)[0].conv_activations_path == "0.vca"

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps(_doc(0)) + "\n\n" + json.dumps(_doc(1))
                        + "\n")
        assert len(D.load_manifest(path)) == 2

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps(_doc(0)) + "\n{not valid\n")
        with pytest.raises(ManifestError) as info:
            D.load_manifest(path)
        assert info.value.line == 2
        assert "line 2" in str(info.value)

    def test_zero_followers_names_the_record(self, tmp_path):
        path = tmp_path / "m.jsonl"
        _write_manifest(path, [_doc(0), _doc(1, follower_count=0)])
        with pytest.raises(ManifestError, match="vid1"):
            D.load_manifest(path)

    def test_duplicate_id_lists_the_id(self, tmp_path):
        path = tmp_path / "m.jsonl"
        _write_manifest(path, [_doc(0), _doc(1, id="vid0")])
        with pytest.raises(ManifestError, match="duplicate id 'vid0'"):
            D.load_manifest(path)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "m.jsonl"
        doc = _doc(0)
        del doc["headline"]
        _write_manifest(path, [doc])
        with pytest.raises(ManifestError, match="headline"):
            D.load_manifest(path)

    def test_unknown_field(self, tmp_path):
        path = tmp_path / "m.jsonl"
        _write_manifest(path, [_doc(0, extra=1)])
        with pytest.raises(ManifestError, match="extra"):
            D.load_manifest(path)

    def test_negative_view_count(self, tmp_path):
        path = tmp_path / "m.jsonl"
        _write_manifest(path, [_doc(0, view_count=-1)])
        with pytest.raises(ManifestError, match="view_count"):
            D.load_manifest(path)

    def test_boolean_counts_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        _write_manifest(path, [_doc(0, view_count=True)])
        with pytest.raises(ManifestError, match="view_count"):
            D.load_manifest(path)


class TestGlove:
    def test_basic_parse(self, tmp_path):
        path = tmp_path / "vectors.txt"
        path.write_text("the 0.1 0.2 0.3\ncat 1 2 3\n")
        vocab = D.load_glove(path)
        assert vocab.word_dim == 3
        assert len(vocab) == 2
        assert vocab.vector("the").tolist() == [0.1, 0.2, 0.3]

    def test_lookup_is_case_insensitive(self, tmp_path):
        path = tmp_path / "vectors.txt"
        path.write_text("The 1 2\n")
        vocab = D.load_glove(path)
        assert "THE" in vocab
        assert vocab.vector("the").tolist() == [1.0, 2.0]

    def test_inconsistent_dimension_reports_line(self, tmp_path):
        path = tmp_path / "vectors.txt"
        path.write_text("a 1 2 3\nb 1 2 3 4\n")
        with pytest.raises(VocabularyError) as info:
            D.load_glove(path)
        assert info.value.line == 2

    def test_empty_file(self, tmp_path):
        path = tmp_path / "vectors.txt"
        path.write_text("")
        with pytest.raises(VocabularyError, match="empty vocabulary"):
            D.load_glove(path)

    def test_bad_component(self, tmp_path):
        path = tmp_path / "vectors.txt"
        path.write_text("a 1 2\nb 1 oops\n")
        with pytest.raises(VocabularyError) as info:
            D.load_glove(path)
        assert info.value.line == 2

    def test_word_without_components(self, tmp_path):
        path = tmp_path / "vectors.txt"
        path.write_text("lonely\n")
        with pytest.raises(VocabularyError):
            D.load_glove(path)

    def test_missing_word_returns_none(self, tmp_path):
        path = tmp_path / "vectors.txt"
        path.write_text("a 1 2\n")
        assert D.load_glove(path).vector("b") is None


@pytest.fixture
def tiny_vocab(tmp_path):
    path = tmp_path / "vectors.txt"
    path.write_text("the 1 0\ncat 0 1\nworld 2 2\n")
    return D.load_glove(path)


class TestHeadlineToVectors:
    def test_lowercasing(self, tiny_vocab):
        vecs = D.headline_to_vectors(tiny_vocab, "The CAT")
        assert [v.tolist() for v in vecs] == [[1.0, 0.0], [0.0, 1.0]]

    def test_out_of_vocabulary_is_zero(self, tiny_vocab):
        vecs = D.headline_to_vectors(tiny_vocab, "zzzunknownzzz")
        assert len(vecs) == 1
        assert vecs[0].tolist() == [0.0, 0.0]

    def test_empty_headline_gives_single_zero(self, tiny_vocab):
        vecs = D.headline_to_vectors(tiny_vocab, "")
        assert len(vecs) == 1
        assert vecs[0].tolist() == [0.0, 0.0]

    def test_punctuation_stripped(self, tiny_vocab):
        assert D.tokenize("Hello, World!") == ["hello", "world"]
        vecs = D.headline_to_vectors(tiny_vocab, '"The" cat...')
        assert [v.tolist() for v in vecs] == [[1.0, 0.0], [0.0, 1.0]]

    def test_punctuation_only_tokens_dropped(self, tiny_vocab):
        assert D.tokenize("cat -- the") == ["cat", "the"]

    def test_never_empty(self, tiny_vocab):
        for headline in ("", "   ", "...", "?! --", "\t\n"):
            assert len(D.headline_to_vectors(tiny_vocab, headline)) >= 1


class TestNormalizedViewcount:
    def test_ratio(self):
        assert D.normalized_viewcount(1000, 10000) == 0.1

    def test_zero_views(self):
        assert D.normalized_viewcount(0, 5) == 0.0

    def test_zero_followers_rejected(self):
        with pytest.raises(ValueError):
            D.normalized_viewcount(10, 0)


class TestAssignLabels:
    def test_even_count_midpoint_median(self):
        # median of [0.1, 0.2, 0.3, 0.4] is 0.25
        assert D.assign_labels([0.1, 0.2, 0.3, 0.4]) == [0, 0, 1, 1]

    def test_ties_at_median_are_unpopular(self):
        # median 1; strict inequality sends both 1s to the low class
        assert D.assign_labels([1.0, 1.0, 2.0]) == [0, 0, 1]

    def test_degenerate_all_equal_warns(self):
        with pytest.warns(RuntimeWarning):
            labels = D.assign_labels([3.0, 3.0, 3.0])
        assert labels == [0, 0, 0]

    def test_too_few_records(self):
        with pytest.raises(ValueError):
            D.assign_labels([1.0])

    def test_balance_without_median_ties(self):
        # with distinct values nothing can sit exactly at the median,
        # so the classes differ by at most one
        rng = np.random.default_rng(0)
        for n in range(2, 40):
            values = rng.permutation(np.arange(n) + rng.random(n) * 0.5)
            labels = D.assign_labels(list(values))
            assert abs(sum(labels) - (n - sum(labels))) <= 1


class TestSplitDataset:
    def test_hundred_records(self):
        names = D.split_dataset(range(100), seed=7).names
        assert names.count("train") == 80
        assert names.count("val") == 10
        assert names.count("test") == 10

    def test_floor_rule_ten_records(self):
        names = D.split_dataset(range(10), seed=7).names
        assert (names.count("train"), names.count("val"),
                names.count("test")) == (8, 1, 1)

    def test_same_seed_identical(self):
        a = D.split_dataset(range(50), seed=3)
        b = D.split_dataset(range(50), seed=3)
        assert a == b

    def test_different_seeds_differ(self):
        a = D.split_dataset(range(100), seed=3)
        b = D.split_dataset(range(100), seed=4)
        assert a != b

    def test_partition_property(self):
        for n in range(3, 30):
            for seed in (0, 11):
                assignment = D.split_dataset(range(n), seed=seed)
                buckets = [assignment.indices(s) for s in D.SPLITS]
                merged = sorted(i for b in buckets for i in b)
                assert merged == list(range(n))

    def test_custom_ratios(self):
        names = D.split_dataset(range(8), ratios=(0.5, 0.25, 0.25)).names
        assert (names.count("train"), names.count("val"),
                names.count("test")) == (4, 2, 2)

    def test_bad_ratio_sum(self):
        with pytest.raises(ValueError):
            D.split_dataset(range(10), ratios=(0.8, 0.1, 0.2))

    def test_negative_ratio(self):
        with pytest.raises(ValueError):
            D.split_dataset(range(10), ratios=(1.2, -0.1, -0.1))

    def test_indices_rejects_unknown_split(self):
        with pytest.raises(ValueError):
            D.split_dataset(range(4)).indices("holdout")


class TestBuildDataset:
    def test_composition(self, tmp_path):
        records = [D.ManifestRecord(f"v{i}", "h", (i + 1) * 10, 100,
                                    f"{i}.vfb") for i in range(10)]
        labeled = D.build_dataset(records, seed=5)
        nv = [r.view_count / r.follower_count for r in records]
        assert [lr.normalized_viewcount for lr in labeled] == nv
        assert [lr.label for lr in labeled] == D.assign_labels(nv)
        expected = D.split_dataset(records, seed=5).names
        assert tuple(lr.split for lr in labeled) == expected
        assert sum(lr.label for lr in labeled) == 5


def _consistent_pair(tmp_path, rng, n=3, k=2, f=4, name="a"):
    """Write a conv file plus the frame file holding its spatial means."""
    conv = rng.standard_normal((n, k, k, f)).astype(np.float32)
    frames = conv.astype(np.float64).mean(axis=(1, 2))
    fpath, cpath = tmp_path / f"{name}.vfb", tmp_path / f"{name}.vca"
    D.write_frame_features(fpath, frames)
    D.write_conv_activations(cpath, conv)
    return str(fpath), str(cpath), conv


class TestFeatureFiles:
    def test_frame_round_trip_is_exact(self, tmp_path):
        # values already representable in 32 bits survive unchanged
        rng = np.random.default_rng(1)
        original = rng.standard_normal((5, 6)).astype(np.float32)
        path = tmp_path / "a.vfb"
        D.write_frame_features(path, original.astype(np.float64))
        loaded = D.read_frame_features(path)
        assert loaded.data.dtype == np.float64
        assert np.array_equal(loaded.data, original.astype(np.float64))

    def test_conv_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(2)
        original = rng.standard_normal((2, 3, 3, 4)).astype(np.float32)
        path = tmp_path / "a.vca"
        D.write_conv_activations(path, original.astype(np.float64))
        loaded = D.read_conv_activations(path)
        assert np.array_equal(loaded.data, original.astype(np.float64))

    def test_default_sized_frame_file(self, tmp_path):
        path = tmp_path / "full.vfb"
        D.write_frame_features(path, np.zeros((18, 2048)))
        assert D.read_frame_features(path).shape == (18, 2048)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "a.vfb"
        D.write_frame_features(path, np.zeros((2, 3)))
        raw = path.read_bytes()
        path.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FeatureFormatError):
            D.read_frame_features(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "a.vfb"
        D.write_frame_features(path, np.ones((2, 3)))
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FeatureTruncationError):
            D.read_frame_features(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "a.vfb"
        D.write_frame_features(path, np.ones((2, 3)))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FeatureTruncationError):
            D.read_frame_features(path)

    def test_zero_dimension_header(self, tmp_path):
        path = tmp_path / "a.vfb"
        path.write_bytes(D.FRAME_MAGIC + struct.pack("<II", 0, 3))
        with pytest.raises(FeatureFormatError):
            D.read_frame_features(path)

    def test_store_without_conv(self, tmp_path):
        path = tmp_path / "a.vfb"
        D.write_frame_features(path, np.ones((4, 5)))
        record = D.ManifestRecord("v", "h", 1, 1, str(path))
        frames, conv = D.load_feature_store(record)
        assert frames.shape == (4, 5)
        assert conv is None

    def test_store_with_consistent_conv(self, tmp_path):
        fpath, cpath, original = _consistent_pair(
            tmp_path, np.random.default_rng(3))
        record = D.ManifestRecord("v", "h", 1, 1, fpath, cpath)
        frames, conv = D.load_feature_store(record)
        assert conv.shape == (3, 2, 2, 4)
        assert np.array_equal(conv.data, original.astype(np.float64))

    def test_perturbed_cell_trips_consistency_check(self, tmp_path):
        # adding 1.0 to one cell moves that channel's spatial mean by
        # 1/K^2 = 0.25, far beyond the 1e-4 relative budget
        fpath, cpath, conv = _consistent_pair(
            tmp_path, np.random.default_rng(4))
        conv = conv.copy()
        conv[0, 0, 0, 0] += 1.0
        D.write_conv_activations(cpath, conv)
        record = D.ManifestRecord("v", "h", 1, 1, fpath, cpath)
        with pytest.raises(FeatureConsistencyError, match="frame 0"):
            D.load_feature_store(record)

    def test_frame_count_mismatch(self, tmp_path):
        fpath, cpath, conv = _consistent_pair(
            tmp_path, np.random.default_rng(5))
        D.write_conv_activations(cpath, conv[:2])
        record = D.ManifestRecord("v", "h", 1, 1, fpath, cpath)
        with pytest.raises(FeatureConsistencyError, match="frames"):
            D.load_feature_store(record)

    def test_channel_count_mismatch(self, tmp_path):
        fpath, cpath, conv = _consistent_pair(
            tmp_path, np.random.default_rng(6))
        D.write_conv_activations(cpath, conv[:, :, :, :3])
        record = D.ManifestRecord("v", "h", 1, 1, fpath, cpath)
        with pytest.raises(FeatureConsistencyError, match="channels"):
            D.load_feature_store(record)

    def test_writer_validates_rank(self, tmp_path):
        with pytest.raises(ValueError):
            D.write_frame_features(tmp_path / "a.vfb", np.zeros(3))
        with pytest.raises(ValueError):
            D.write_conv_activations(tmp_path / "a.vca", np.zeros((2, 2, 3, 4)))
