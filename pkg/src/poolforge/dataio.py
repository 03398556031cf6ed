"""Synthetic corpora, the binary record format, sampling, and splits.

Record files are little-endian binary, format version 1:

    magic "PFRC" | u16 version (= 1) | u32 record_count
    per record:
        u32 id_len | id (UTF-8)
        u32 label_count | u32 x labels
        u32 T | u32 video_dim | u32 audio_dim
        f32 x (T * video_dim) video frames, row-major
        f32 x (T * audio_dim) audio frames, row-major
        u32 CRC32 of the record's bytes (id_len through the last float)

The per-record checksum makes any byte-level corruption detectable, so a
damaged file is always rejected with an error instead of yielding garbage
records. A corpus manifest is a plain-text file with one record-file path
per line, resolved relative to the manifest's directory.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError

MAGIC = b"PFRC"
VERSION = 1

VIDEO_WIDTH = 1024  # benchmark-convention feature widths
AUDIO_WIDTH = 128

__all__ = [
    "AUDIO_WIDTH",
    "VIDEO_WIDTH",
    "SyntheticSpec",
    "VideoRecord",
    "generate_corpus",
    "load_corpus",
    "read_manifest",
    "read_records",
    "split",
    "uniform_sample",
    "write_manifest",
    "write_records",
]


@dataclass
class VideoRecord:
    """One video: id, label set, and per-frame video/audio descriptors."""

    id: str
    labels: frozenset
    video_frames: np.ndarray  # [T, video_dim] float32
    audio_frames: np.ndarray  # [T, audio_dim] float32

    def __post_init__(self):
        self.labels = frozenset(int(l) for l in self.labels)
        if not self.labels:
            raise DataError(f"record '{self.id}' has an empty label set")
        if any(l < 0 for l in self.labels):
            raise DataError(f"record '{self.id}' has negative labels")
        self.video_frames = np.ascontiguousarray(self.video_frames,
                                                 dtype=np.float32)
        self.audio_frames = np.ascontiguousarray(self.audio_frames,
                                                 dtype=np.float32)
        if self.video_frames.ndim != 2 or self.audio_frames.ndim != 2:
            raise DataError(f"record '{self.id}' frames must be 2-d")
        if self.video_frames.shape[0] != self.audio_frames.shape[0]:
            raise DataError(
                f"record '{self.id}': video has {self.video_frames.shape[0]} "
                f"frames but audio has {self.audio_frames.shape[0]}"
            )
        if self.video_frames.shape[0] < 1:
            raise DataError(f"record '{self.id}' has no frames")
        if not (np.isfinite(self.video_frames).all()
                and np.isfinite(self.audio_frames).all()):
            raise DataError(f"record '{self.id}' contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.video_frames.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, VideoRecord)
            and self.id == other.id
            and self.labels == other.labels
            and np.array_equal(self.video_frames, other.video_frames)
            and np.array_equal(self.audio_frames, other.audio_frames)
        )


@dataclass
class SyntheticSpec:
    """Mixture recipe standing in for a real corpus; fully seed-determined.

    Each label owns `components` Gaussian bumps per modality. A video's
    frames are drawn from the bumps of its labels with per-component spread
    plus label-independent additive noise.
    """

    labels: int
    feature_video: int = VIDEO_WIDTH
    feature_audio: int = AUDIO_WIDTH
    components: int = 1
    mean_scale: float = 3.0
    spread: float = 0.5
    noise: float = 0.0
    frames_min: int = 20
    frames_max: int = 60
    max_labels_per_video: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.labels < 1 or self.components < 1:
            raise ConfigError("labels and components must be >= 1")
        if self.feature_video < 1 or self.feature_audio < 1:
            raise ConfigError("feature widths must be >= 1")
        if not (1 <= self.frames_min <= self.frames_max):
            raise ConfigError(
                f"bad frame range [{self.frames_min}, {self.frames_max}]"
            )
        if not (1 <= self.max_labels_per_video <= self.labels):
            raise ConfigError("max_labels_per_video must be in [1, labels]")
        if self.spread < 0 or self.noise < 0 or self.mean_scale <= 0:
            raise ConfigError("spread/noise must be >= 0, mean_scale > 0")

    def to_dict(self) -> dict:
        from dataclasses import fields
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, table: dict) -> "SyntheticSpec":
        from dataclasses import fields
        known = {f.name for f in fields(cls)}
        unknown = set(table) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        try:
            return cls(**table)
        except TypeError as exc:
            raise ConfigError(f"bad synthetic spec: {exc}") from None


def generate_corpus(spec: SyntheticSpec, count: int) -> Iterator[VideoRecord]:
    """Yield `count` reproducible records (same spec -> bit-identical)."""
    if count < 0:
        raise ConfigError(f"count must be >= 0, got {count}")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    means_v = spec.mean_scale * rng.standard_normal(
        (spec.labels, spec.components, spec.feature_video))
    means_a = spec.mean_scale * rng.standard_normal(
        (spec.labels, spec.components, spec.feature_audio))

    for index in range(count):
        n_labels = int(rng.integers(1, spec.max_labels_per_video + 1))
        labels = rng.choice(spec.labels, size=n_labels, replace=False)
        t = int(rng.integers(spec.frames_min, spec.frames_max + 1))
        video = np.empty((t, spec.feature_video), dtype=np.float64)
        audio = np.empty((t, spec.feature_audio), dtype=np.float64)
        for frame in range(t):
            label = int(labels[rng.integers(0, n_labels)])
            component = int(rng.integers(0, spec.components))
            video[frame] = means_v[label, component] + spec.spread * \
                rng.standard_normal(spec.feature_video)
            audio[frame] = means_a[label, component] + spec.spread * \
                rng.standard_normal(spec.feature_audio)
        if spec.noise > 0:
            video += spec.noise * rng.standard_normal(video.shape)
            audio += spec.noise * rng.standard_normal(audio.shape)
        yield VideoRecord(
            id=f"synth{spec.seed:04d}_{index:06d}",
            labels=frozenset(int(l) for l in labels),
            video_frames=video.astype(np.float32),
            audio_frames=audio.astype(np.float32),
        )


def uniform_sample(record: VideoRecord, n: int = 256) -> np.ndarray:
    """Evenly spaced frame selection, order-preserving, repeats when T < n.

    Index rule: floor(i * T / n) for i in 0..n-1. Returns the concatenated
    [n, video_dim + audio_dim] float32 matrix.
    """
    if n < 1:
        raise ConfigError(f"sample size must be >= 1, got {n}")
    t = record.num_frames
    indices = (np.arange(n, dtype=np.int64) * t) // n
    return np.hstack([record.video_frames[indices],
                      record.audio_frames[indices]])


def split(corpus: Sequence[VideoRecord], holdout_fraction: float = 0.02,
          seed: int = 0):
    """Deterministic disjoint train/validation split.

    Validation gets round(holdout_fraction * len(corpus)) records chosen by a
    seeded shuffle; both sides keep the corpus order.
    """
    if not (0.0 < holdout_fraction < 1.0):
        raise ConfigError(
            f"holdout fraction must be in (0, 1), got {holdout_fraction}"
        )
    count = len(corpus)
    if count < 2:
        raise DataError(f"cannot split a corpus of {count} record(s)")
    rng = np.random.Generator(np.random.PCG64(seed))
    holdout_count = int(holdout_fraction * count + 0.5)
    chosen = set(rng.permutation(count)[:holdout_count].tolist())
    train = [r for i, r in enumerate(corpus) if i not in chosen]
    holdout = [r for i, r in enumerate(corpus) if i in chosen]
    return train, holdout


# ---------------------------------------------------------------------------
# Binary record files
# ---------------------------------------------------------------------------


def _record_payload(record: VideoRecord) -> bytes:
    parts = []
    encoded = record.id.encode("utf-8")
    parts.append(struct.pack("<I", len(encoded)))
    parts.append(encoded)
    labels = sorted(record.labels)
    parts.append(struct.pack("<I", len(labels)))
    parts.append(struct.pack(f"<{len(labels)}I", *labels))
    t = record.num_frames
    parts.append(struct.pack("<III", t, record.video_frames.shape[1],
                             record.audio_frames.shape[1]))
    parts.append(record.video_frames.astype("<f4", copy=False).tobytes())
    parts.append(record.audio_frames.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def write_records(path, records: Iterable[VideoRecord]) -> int:
    """Write records to one file; returns the number written."""
    records = list(records)
    with open(path, "wb") as out:
        out.write(MAGIC)
        out.write(struct.pack("<H", VERSION))
        out.write(struct.pack("<I", len(records)))
        for record in records:
            payload = _record_payload(record)
            out.write(payload)
            out.write(struct.pack("<I", zlib.crc32(payload)))
    return len(records)


class _RecordReader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, count: int) -> bytes:
        if count < 0 or self.pos + count > len(self.blob):
            raise FormatError("unexpected end of data", offset=self.pos)
        chunk = self.blob[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_records(path) -> list:
    """Read every record, verifying structure and per-record checksums."""
    with open(path, "rb") as handle:
        blob = handle.read()
    reader = _RecordReader(blob)
    if len(blob) < 4 or reader.take(4) != MAGIC:
        raise FormatError(f"'{path}' is not a record file (missing magic)",
                          offset=0)
    version = reader.u16()
    if version != VERSION:
        raise FormatError(
            f"record format version {version} unsupported (expected {VERSION})",
            offset=4,
        )
    count = reader.u32()
    records = []
    for index in range(count):
        start = reader.pos
        try:
            record = _read_one(reader)
        except FormatError as exc:
            raise FormatError(
                f"corrupt record {index} in '{path}' after {len(records)} "
                f"intact record(s): {exc}",
                offset=start,
            ) from None
        except DataError as exc:
            raise FormatError(
                f"invalid record {index} in '{path}' after {len(records)} "
                f"intact record(s): {exc}",
                offset=start,
            ) from None
        records.append(record)
    if reader.pos != len(blob):
        raise FormatError(
            f"trailing bytes after final record in '{path}'", offset=reader.pos
        )
    return records


def _read_one(reader: _RecordReader) -> VideoRecord:
    start = reader.pos
    id_len = reader.u32()
    try:
        record_id = reader.take(id_len).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("record id is not valid UTF-8", offset=start)
    label_count = reader.u32()
    labels = struct.unpack(f"<{label_count}I", reader.take(4 * label_count))
    t = reader.u32()
    video_dim = reader.u32()
    audio_dim = reader.u32()
    video = np.frombuffer(reader.take(4 * t * video_dim), dtype="<f4")
    audio = np.frombuffer(reader.take(4 * t * audio_dim), dtype="<f4")
    payload = reader.blob[start:reader.pos]
    stored_crc = reader.u32()
    actual_crc = zlib.crc32(payload)
    if stored_crc != actual_crc:
        raise FormatError(
            f"checksum mismatch (stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x})",
            offset=start,
        )
    if t < 1 or video_dim < 1 or audio_dim < 1:
        raise FormatError(f"bad extents T={t}, dims=({video_dim}, {audio_dim})",
                          offset=start)
    return VideoRecord(
        id=record_id,
        labels=frozenset(labels),
        video_frames=video.reshape(t, video_dim),
        audio_frames=audio.reshape(t, audio_dim),
    )


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def write_manifest(path, record_files: Sequence) -> None:
    path = Path(path)
    lines = [str(Path(p)) for p in record_files]
    path.write_text("\n".join(lines) + ("\n" if lines else ""),
                    encoding="utf-8")


def read_manifest(path) -> list:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest '{path}' does not exist")
    files = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        candidate = Path(line)
        if not candidate.is_absolute():
            candidate = path.parent / candidate
        files.append(candidate)
    return files


def load_corpus(manifest_path) -> list:
    """Read every record from every file listed in the manifest."""
    records = []
    for file_path in read_manifest(manifest_path):
        if not file_path.exists():
            raise DataError(f"record file '{file_path}' does not exist")
        records.extend(read_records(file_path))
    return records
