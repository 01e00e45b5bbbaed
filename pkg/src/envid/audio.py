"""Audio clip container plus WAV I/O, resampling and length normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import UnreadableFile

WORKING_RATE = 16000
CLIP_SECONDS = 3.0


@dataclass(eq=False)
class AudioClip:
    sample_rate: int
    samples: np.ndarray
    fixed_length: bool = False

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("clips are mono 1-D arrays")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("clip contains non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


def peak_guard(x: np.ndarray) -> np.ndarray:
    """Normalize the peak to 0.9 only when it exceeds 1.0."""
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak > 1.0:
        return x * (0.9 / peak)
    return x


def resample(clip: AudioClip, rate: int) -> AudioClip:
    if rate == clip.sample_rate:
        return replace(clip, samples=clip.samples.copy())
    g = math.gcd(rate, clip.sample_rate)
    out = resample_poly(clip.samples, rate // g, clip.sample_rate // g)
    return AudioClip(sample_rate=rate, samples=out, fixed_length=False)


def standardize_length(clip: AudioClip, seconds: float = CLIP_SECONDS) -> AudioClip:
    n = round(seconds * clip.sample_rate)
    x = clip.samples
    if x.size >= n:
        x = x[:n]
    else:
        x = np.concatenate([x, np.zeros(n - x.size)])
    return AudioClip(sample_rate=clip.sample_rate, samples=x, fixed_length=True)


def load_wav(path, target_rate: int | None = None) -> AudioClip:
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as e:
        raise UnreadableFile(f"cannot read WAV {path}: {e}") from e
    if data.ndim == 2:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data / float(np.iinfo(data.dtype).max)
    clip = AudioClip(sample_rate=int(rate), samples=data.astype(np.float64))
    if target_rate is not None and rate != target_rate:
        clip = resample(clip, target_rate)
    return clip


def save_wav(path, clip: AudioClip) -> None:
    wavfile.write(path, clip.sample_rate, clip.samples.astype(np.float32))
