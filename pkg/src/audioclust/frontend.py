"""Log-mel filterbank frontend and time/frequency masking augmentation.

The analysis chain is a Hann-windowed STFT power spectrum pushed through a
triangular mel filterbank (Slaney-style scale: linear below 1 kHz,
logarithmic above) and floored before the natural log, so silence maps to
log(floor) instead of -inf.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from .data import AudioClip


class FrontendError(ValueError):
    """Raised for inputs the analysis chain cannot handle."""


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    win_ms: float = 25.0
    hop_ms: float = 10.0
    mel_bins: int = 64
    fmin: float = 60.0
    fmax: float = 7800.0
    floor: float = 1e-10

    @property
    def win_length(self) -> int:
        return int(round(self.win_ms * self.sample_rate / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def n_fft(self) -> int:
        n = 1
        while n < self.win_length:
            n *= 2
        return n

    def config_hash(self) -> str:
        blob = json.dumps(
            {
                "sample_rate": self.sample_rate,
                "win_ms": self.win_ms,
                "hop_ms": self.hop_ms,
                "mel_bins": self.mel_bins,
                "fmin": self.fmin,
                "fmax": self.fmax,
                "floor": self.floor,
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (T, F) natural-log power
    clip_id: str

    @property
    def frame_count(self) -> int:
        return self.values.shape[0]

    @property
    def mel_bins(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SpecAugmentPolicy:
    num_freq_masks: int = 2
    max_freq_width: int = 8
    num_time_masks: int = 2
    max_time_width: Optional[int] = None  # None -> 10% of the frame count
    mask_value: Optional[float] = None  # None -> per-spectrogram mean
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_freq_masks < 0 or self.num_time_masks < 0:
            raise ValueError("mask counts must be >= 0")
        if self.max_freq_width < 0:
            raise ValueError("max_freq_width must be >= 0")
        if self.max_time_width is not None and self.max_time_width < 0:
            raise ValueError("max_time_width must be >= 0")


def hz_to_mel(freq: np.ndarray | float) -> np.ndarray:
    """Slaney mel scale: linear up to 1 kHz, log-spaced above."""
    freq = np.asarray(freq, dtype=np.float64)
    mel = freq * 3.0 / 200.0
    log_region = freq >= 1000.0
    logstep = np.log(6.4) / 27.0
    mel = np.where(log_region, 15.0 + np.log(np.maximum(freq, 1e-12) / 1000.0) / logstep, mel)
    return mel


def mel_to_hz(mel: np.ndarray | float) -> np.ndarray:
    mel = np.asarray(mel, dtype=np.float64)
    freq = mel * 200.0 / 3.0
    logstep = np.log(6.4) / 27.0
    log_region = mel >= 15.0
    freq = np.where(log_region, 1000.0 * np.exp(logstep * (mel - 15.0)), freq)
    return freq


@lru_cache(maxsize=8)
def mel_filterbank(config: FrontendConfig) -> np.ndarray:
    """Triangular peak-one filters, shape (mel_bins, n_fft // 2 + 1)."""
    n_freqs = config.n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, config.sample_rate / 2.0, n_freqs)
    mel_pts = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.mel_bins + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((config.mel_bins, n_freqs))
    for m in range(config.mel_bins):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (fft_freqs - lo) / max(ctr - lo, 1e-12)
        falling = (hi - fft_freqs) / max(hi - ctr, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def compute_logmel(clip: AudioClip, config: FrontendConfig) -> MelSpectrogram:
    """STFT power -> mel filterbank -> log(max(power, floor)).

    Frame count is 1 + floor((num_samples - win_length) / hop_length); clips
    shorter than one window are rejected.
    """
    win = config.win_length
    hop = config.hop_length
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.shape[0] < win:
        raise FrontendError(
            f"clip too short: {x.shape[0]} samples < one {win}-sample window"
        )
    n_frames = 1 + (x.shape[0] - win) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    window = np.hanning(win)
    spectrum = np.fft.rfft(frames * window, n=config.n_fft, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    mel_power = power @ mel_filterbank(config).T
    values = np.log(np.maximum(mel_power, config.floor))
    return MelSpectrogram(values=values, clip_id=clip.clip_id)


def draw_masks(
    policy: SpecAugmentPolicy, n_frames: int, n_bins: int
) -> list[tuple[str, int, int]]:
    """Consume the policy generator and return (axis, start, width) bands.

    Frequency bands are drawn first, then time bands; widths are uniform on
    [0, max_width] inclusive and starts uniform over valid offsets. Kept
    separate from the painting step so a test can recompute mask areas
    independently from the same seed.
    """
    rng = np.random.default_rng(policy.seed)
    max_t = policy.max_time_width if policy.max_time_width is not None else n_frames // 10
    if policy.max_freq_width > n_bins:
        raise ValueError("max_freq_width exceeds the mel bin count")
    if max_t > n_frames:
        raise ValueError("max_time_width exceeds the frame count")
    bands: list[tuple[str, int, int]] = []
    for _ in range(policy.num_freq_masks):
        width = int(rng.integers(0, policy.max_freq_width + 1))
        start = int(rng.integers(0, n_bins - width + 1))
        bands.append(("freq", start, width))
    for _ in range(policy.num_time_masks):
        width = int(rng.integers(0, max_t + 1))
        start = int(rng.integers(0, n_frames - width + 1))
        bands.append(("time", start, width))
    return bands


def spec_augment(mel: MelSpectrogram, policy: SpecAugmentPolicy) -> MelSpectrogram:
    """Return a copy with contiguous frequency and time bands overwritten.

    Cells outside the drawn bands are bit-identical to the input; the same
    seed always reproduces the same bands.
    """
    values = mel.values.copy()
    n_frames, n_bins = values.shape
    bands = draw_masks(policy, n_frames, n_bins)
    fill = float(values.mean()) if policy.mask_value is None else policy.mask_value
    for axis, start, width in bands:
        if width == 0:
            continue
        if axis == "freq":
            values[:, start : start + width] = fill
        else:
            values[start : start + width, :] = fill
    return MelSpectrogram(values=values, clip_id=mel.clip_id)


def policy_for(policy: SpecAugmentPolicy, seed: int) -> SpecAugmentPolicy:
    """Copy of the policy bound to a new seed (one generator per call site)."""
    return replace(policy, seed=seed)


class MelCache:
    """One binary array per clip under a directory, with a JSON sidecar
    recording the frontend config hash; a hash mismatch invalidates the entry.
    """

    def __init__(self, cache_dir: str | Path, config: FrontendConfig):
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config_hash = config.config_hash()

    def _paths(self, clip_id: str) -> tuple[Path, Path]:
        stem = hashlib.sha1(clip_id.encode()).hexdigest()
        return self.dir / f"{stem}.npy", self.dir / f"{stem}.json"

    def get(self, clip_id: str) -> Optional[np.ndarray]:
        arr_path, meta_path = self._paths(clip_id)
        if not (arr_path.exists() and meta_path.exists()):
            return None
        try:
            meta = json.loads(meta_path.read_text())
        except (OSError, json.JSONDecodeError):
            return None
        if meta.get("config_hash") != self.config_hash or meta.get("clip_id") != clip_id:
            return None
        return np.load(arr_path)

    def put(self, clip_id: str, values: np.ndarray) -> None:
        arr_path, meta_path = self._paths(clip_id)
        np.save(arr_path, values)
        meta_path.write_text(
            json.dumps({"clip_id": clip_id, "config_hash": self.config_hash})
        )


def logmel_cached(
    clip: AudioClip, config: FrontendConfig, cache: Optional[MelCache]
) -> MelSpectrogram:
    if cache is not None:
        hit = cache.get(clip.clip_id)
        if hit is not None:
            return MelSpectrogram(values=hit, clip_id=clip.clip_id)
    mel = compute_logmel(clip, config)
    if cache is not None:
        cache.put(clip.clip_id, mel.values)
    return mel
