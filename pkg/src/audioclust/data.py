"""Dataset manifests and deterministic WAV clip loading.

Manifests are JSON-lines files (one object per line with keys ``path``,
optional ``label``, and ``split``). Audio is restricted to linear-PCM RIFF
WAV so that decoding stays dependency-free and bit-reproducible; every clip
is folded to mono, resampled, cropped or padded to a fixed duration, and
peak-normalized into [-1, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly


class ManifestError(ValueError):
    """Raised for unreadable or invalid manifest files."""


class DecodeError(ValueError):
    """Raised when an audio file cannot be decoded as linear-PCM WAV."""


VALID_SPLITS = ("train", "test")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: Optional[int]
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    num_classes: Optional[int] = None

    def split_entries(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def require_split(self, split: str, use: str) -> list[ManifestEntry]:
        got = self.split_entries(split)
        if not got:
            raise ManifestError(f"{use} requires a non-empty '{split}' split")
        return got


@dataclass
class AudioClip:
    clip_id: str
    samples: np.ndarray  # float64, peak-normalized into [-1, 1]
    sample_rate: int
    label: Optional[int] = None
    split: str = "train"

    def __post_init__(self) -> None:
        if self.samples.size == 0:
            raise ValueError("AudioClip requires non-empty samples")
        if self.sample_rate <= 0:
            raise ValueError("AudioClip requires a positive sample rate")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read and validate a JSON-lines manifest.

    Labels are optional (pretraining is label-free). When any labels are
    present, num_classes is inferred as max(label) + 1 and all labels must
    fall in [0, num_classes).
    """
    path = Path(path)
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed record: {exc.msg}") from exc
            if not isinstance(rec, dict) or "path" not in rec:
                raise ManifestError(f"{path}:{lineno}: record must be an object with a 'path' key")
            clip_path = rec["path"]
            if not isinstance(clip_path, str) or not clip_path:
                raise ManifestError(f"{path}:{lineno}: 'path' must be a non-empty string")
            if clip_path in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {clip_path!r}")
            seen.add(clip_path)
            label = rec.get("label")
            if label is not None:
                if not isinstance(label, int) or isinstance(label, bool) or label < 0:
                    raise ManifestError(f"{path}:{lineno}: 'label' must be a non-negative integer")
            split = rec.get("split", "train")
            if split not in VALID_SPLITS:
                raise ManifestError(
                    f"{path}:{lineno}: 'split' must be one of {VALID_SPLITS}, got {split!r}"
                )
            entries.append(ManifestEntry(path=clip_path, label=label, split=split))
    if not entries:
        raise ManifestError(f"{path}: empty manifest")
    labels = [e.label for e in entries if e.label is not None]
    num_classes = (max(labels) + 1) if labels else None
    return DatasetManifest(entries=entries, num_classes=num_classes)


def _decode_wav(path: str | Path) -> tuple[int, np.ndarray]:
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DecodeError(f"{path}: not a readable linear-PCM WAV file ({exc})") from exc
    if data.size == 0:
        raise DecodeError(f"{path}: zero-length audio")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        raise DecodeError(f"{path}: unsupported sample format {data.dtype}")
    return int(rate), samples


def load_clip(
    entry: ManifestEntry,
    target_rate: int,
    duration: float,
    root: str | Path | None = None,
) -> AudioClip:
    """Decode one manifest entry to a fixed-length mono clip.

    Channels are averaged, the waveform is resampled to ``target_rate``,
    center-cropped or right-padded with zeros to exactly
    ``round(duration * target_rate)`` samples, then peak-normalized so the
    emitted clip has max |sample| = 1 (all-zero audio is left untouched).
    """
    path = Path(root) / entry.path if root is not None else Path(entry.path)
    rate, samples = _decode_wav(path)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if rate != target_rate:
        g = math.gcd(target_rate, rate)
        samples = resample_poly(samples, target_rate // g, rate // g)
    target_len = int(round(duration * target_rate))
    n = samples.shape[0]
    if n > target_len:
        start = (n - target_len) // 2
        samples = samples[start : start + target_len]
    elif n < target_len:
        samples = np.concatenate([samples, np.zeros(target_len - n)])
    peak = np.max(np.abs(samples))
    if peak > 0:
        samples = samples / peak
    return AudioClip(
        clip_id=entry.path,
        samples=samples,
        sample_rate=target_rate,
        label=entry.label,
        split=entry.split,
    )
