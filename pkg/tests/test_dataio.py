"""Record format round-trips, corpus generation, sampling, and splitting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from poolforge.dataio import (
    SyntheticSpec,
    VideoRecord,
    generate_corpus,
    load_corpus,
    read_manifest,
    read_records,
    split,
    uniform_sample,
    write_manifest,
    write_records,
)
from poolforge.errors import ConfigError, DataError, FormatError


def _record(rid="vid0", labels=(1,), t=3, vd=4, ad=2, seed=0):
    rng = np.random.default_rng(seed)
    return VideoRecord(
        id=rid,
        labels=frozenset(labels),
        video_frames=rng.standard_normal((t, vd)).astype(np.float32),
        audio_frames=rng.standard_normal((t, ad)).astype(np.float32),
    )


@st.composite
def video_records(draw):
    t = draw(st.integers(1, 5))
    vd = draw(st.integers(1, 6))
    ad = draw(st.integers(1, 4))
    finite32 = st.floats(width=32, allow_nan=False, allow_infinity=False)
    return VideoRecord(
        id=draw(st.text(max_size=16)),
        labels=frozenset(draw(st.sets(st.integers(0, 99), min_size=1,
                                      max_size=5))),
        video_frames=draw(arrays(np.float32, (t, vd), elements=finite32)),
        audio_frames=draw(arrays(np.float32, (t, ad), elements=finite32)),
    )


class TestVideoRecord:
    def test_rejects_empty_labels(self):
        with pytest.raises(DataError):
            _record(labels=())

    def test_rejects_frame_count_mismatch(self):
        with pytest.raises(DataError):
            VideoRecord(id="x", labels=frozenset([0]),
                        video_frames=np.zeros((3, 4), dtype=np.float32),
                        audio_frames=np.zeros((2, 2), dtype=np.float32))

    def test_rejects_nan(self):
        frames = np.zeros((2, 2), dtype=np.float32)
        frames[0, 0] = np.nan
        with pytest.raises(DataError):
            VideoRecord(id="x", labels=frozenset([0]), video_frames=frames,
                        audio_frames=np.zeros((2, 2), dtype=np.float32))


class TestRoundTrip:
    def test_ten_random_records(self, tmp_path):
        records = [_record(rid=f"v{i}", labels=(i, i + 1), t=2 + i % 3, seed=i)
                   for i in range(10)]
        path = tmp_path / "corpus.rec"
        assert write_records(path, records) == 10
        loaded = read_records(path)
        assert loaded == records

    @settings(max_examples=60, deadline=None)
    @given(records=st.lists(video_records(), max_size=4))
    def test_arbitrary_records(self, records, tmp_path_factory):
        path = tmp_path_factory.mktemp("rt") / "corpus.rec"
        write_records(path, records)
        loaded = read_records(path)
        assert loaded == records

    def test_empty_corpus_round_trips(self, tmp_path):
        path = tmp_path / "empty.rec"
        write_records(path, [])
        assert read_records(path) == []


class TestCorruption:
    def test_empty_file_missing_magic(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b"")
        with pytest.raises(FormatError, match="magic"):
            read_records(path)

    def test_corrupt_length_field_is_an_error_not_a_crash(self, tmp_path):
        path = tmp_path / "corpus.rec"
        write_records(path, [_record()])
        blob = bytearray(path.read_bytes())
        blob[10] = 0xFF  # id length field of record 0
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            read_records(path)

    def test_truncation_names_last_good_record(self, tmp_path):
        path = tmp_path / "corpus.rec"
        write_records(path, [_record(rid=f"v{i}", seed=i) for i in range(3)])
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 5])
        with pytest.raises(FormatError, match="2 intact record"):
            read_records(path)

    def test_single_byte_mutations_always_rejected(self, tmp_path):
        path = tmp_path / "corpus.rec"
        write_records(path, [_record(rid=f"v{i}", labels=(i,), seed=i)
                             for i in range(4)])
        pristine = path.read_bytes()
        rng = np.random.default_rng(0)
        for trial in range(200):
            blob = bytearray(pristine)
            kind = trial % 3
            if kind == 0:  # flip one byte
                pos = int(rng.integers(0, len(blob)))
                old = blob[pos]
                blob[pos] = (old + int(rng.integers(1, 256))) % 256
            elif kind == 1:  # truncate
                blob = blob[: int(rng.integers(0, len(blob)))]
            else:  # append garbage
                blob = blob + bytes(rng.integers(0, 256,
                                                 int(rng.integers(1, 9)),
                                                 dtype=np.uint8))
            path.write_bytes(bytes(blob))
            with pytest.raises(FormatError):
                read_records(path)


class TestGenerateCorpus:
    def test_zero_count_is_empty(self):
        spec = SyntheticSpec(labels=3, feature_video=4, feature_audio=2)
        assert list(generate_corpus(spec, 0)) == []

    def test_same_seed_bit_identical(self):
        spec = SyntheticSpec(labels=4, feature_video=6, feature_audio=3,
                             seed=17)
        a = list(generate_corpus(spec, 8))
        b = list(generate_corpus(spec, 8))
        assert a == b

    def test_different_seed_differs(self):
        base = dict(labels=4, feature_video=6, feature_audio=3)
        a = list(generate_corpus(SyntheticSpec(seed=1, **base), 4))
        b = list(generate_corpus(SyntheticSpec(seed=2, **base), 4))
        assert a != b

    def test_single_label_zero_noise_mean_statistics(self):
        # With one component, one label per video and no extra noise, each
        # frame is mean + spread * eps, so the per-video frame mean is within
        # 3 * spread / sqrt(T) of the label mean per coordinate ~99.7% of the
        # time. Allow the statistical slack and bound the worst case.
        spread = 0.5
        spec = SyntheticSpec(labels=5, feature_video=8, feature_audio=4,
                             spread=spread, noise=0.0, components=1,
                             max_labels_per_video=1, frames_min=40,
                             frames_max=40, seed=3)
        rng = np.random.Generator(np.random.PCG64(spec.seed))
        means_v = spec.mean_scale * rng.standard_normal((5, 1, 8))

        inside = 0
        total = 0
        worst = 0.0
        for record in generate_corpus(spec, 100):
            label = next(iter(record.labels))
            bound = 3.0 * spread / np.sqrt(record.num_frames)
            errors = np.abs(record.video_frames.mean(axis=0)
                            - means_v[label, 0])
            inside += int((errors < bound).sum())
            total += errors.size
            worst = max(worst, float(errors.max() / bound))
        assert inside / total > 0.99
        assert worst < 2.0

    def test_labels_within_range(self):
        spec = SyntheticSpec(labels=3, feature_video=4, feature_audio=2,
                             max_labels_per_video=3, seed=9)
        for record in generate_corpus(spec, 20):
            assert record.labels
            assert all(0 <= l < 3 for l in record.labels)


class TestUniformSample:
    def test_identity_when_sizes_match(self):
        record = _record(t=8, vd=3, ad=2)
        out = uniform_sample(record, n=8)
        want = np.hstack([record.video_frames, record.audio_frames])
        np.testing.assert_array_equal(out, want)

    def test_single_frame_repeats(self):
        record = _record(t=1, vd=3, ad=2)
        out = uniform_sample(record, n=16)
        assert out.shape == (16, 5)
        for row in out:
            np.testing.assert_array_equal(
                row, np.hstack([record.video_frames[0],
                                record.audio_frames[0]]))

    def test_double_length_index_formula(self):
        # T = 2n: the floor(i*T/n) rule selects exactly the even indices.
        record = _record(t=512, vd=1, ad=1)
        out = uniform_sample(record, n=256)
        indices = (np.arange(256, dtype=np.int64) * 512) // 256
        assert indices[0] == 0 and indices[-1] == 510
        assert set(np.diff(indices).tolist()) == {2}
        np.testing.assert_array_equal(out[:, 0],
                                      record.video_frames[indices, 0])

    def test_order_preserving_and_total(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            t = int(rng.integers(1, 40))
            record = _record(t=t, vd=2, ad=1, seed=t)
            out = uniform_sample(record, n=16)
            indices = (np.arange(16, dtype=np.int64) * t) // 16
            assert np.all(np.diff(indices) >= 0)
            assert out.shape == (16, 3)


class TestSplit:
    def _corpus(self, count):
        return [_record(rid=f"v{i}", labels=(i % 5,), seed=i)
                for i in range(count)]

    def test_two_percent_of_hundred(self):
        train, holdout = split(self._corpus(100), 0.02, seed=0)
        assert len(train) == 98 and len(holdout) == 2

    def test_disjoint_and_exhaustive(self):
        corpus = self._corpus(37)
        train, holdout = split(corpus, 0.1, seed=5)
        ids = {r.id for r in train} | {r.id for r in holdout}
        assert ids == {r.id for r in corpus}
        assert not ({r.id for r in train} & {r.id for r in holdout})

    def test_deterministic_under_seed(self):
        corpus = self._corpus(50)
        a = split(corpus, 0.1, seed=7)
        b = split(corpus, 0.1, seed=7)
        assert [r.id for r in a[0]] == [r.id for r in b[0]]
        assert [r.id for r in a[1]] == [r.id for r in b[1]]

    def test_tiny_corpus_rejected(self):
        with pytest.raises(DataError):
            split(self._corpus(1), 0.5, seed=0)

    def test_bad_fraction_rejected(self):
        with pytest.raises(ConfigError):
            split(self._corpus(10), 1.5, seed=0)


class TestManifest:
    def test_round_trip_and_load(self, tmp_path):
        first = [_record(rid=f"a{i}", seed=i) for i in range(3)]
        second = [_record(rid=f"b{i}", seed=10 + i) for i in range(2)]
        write_records(tmp_path / "a.rec", first)
        write_records(tmp_path / "b.rec", second)
        manifest = tmp_path / "corpus.manifest"
        write_manifest(manifest, ["a.rec", "b.rec"])
        assert [p.name for p in read_manifest(manifest)] == ["a.rec", "b.rec"]
        assert load_corpus(manifest) == first + second

    def test_missing_file_is_data_error(self, tmp_path):
        manifest = tmp_path / "corpus.manifest"
        write_manifest(manifest, ["ghost.rec"])
        with pytest.raises(DataError, match="ghost"):
            load_corpus(manifest)
