"""3 s clip -> 96x276 feature map (256 log-Mel bands + 20 MFCCs per frame)."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.signal import get_window

from .audio import AudioClip, rms, standardize_length

N_FFT = 1024
HOP = 512
N_MELS = 256
N_MFCC = 20
N_FRAMES = 96
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8


@dataclass(eq=False)
class FeatureMap:
    values: np.ndarray  # (96, 276)
    mean: float
    std: float

    def __post_init__(self):
        if self.values.shape != (N_FRAMES, N_MELS + N_MFCC):
            raise ValueError(f"feature map shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature map contains non-finite values")


def stft(clip: AudioClip, window: int = N_FFT, fft: int = N_FFT,
         hop: int = HOP) -> np.ndarray:
    """Centered Hann STFT; returns (frames, fft//2 + 1) complex."""
    x = clip.samples
    pad = fft // 2
    xp = np.pad(x, pad, mode="reflect")
    n_frames = 1 + x.size // hop
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = xp[idx] * get_window("hann", window, fftbins=True)[None, :]
    return np.fft.rfft(frames, n=fft, axis=1)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int = 16000, n_fft: int = N_FFT,
                   n_mels: int = N_MELS) -> np.ndarray:
    """(n_mels, n_fft//2+1) triangular HTK-Mel filters, cell-averaged.

    Each weight is the triangle's mean over the FFT bin's frequency cell
    rather than a point sample, so narrow low-frequency filters keep a
    positive area even when no bin center falls inside their support.
    """
    n_bins = n_fft // 2 + 1
    corners = np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), n_mels + 2)
    width = sample_rate / n_fft
    offs = np.linspace(-width / 2.0, width / 2.0, 9)
    f = np.clip(np.arange(n_bins) * width + offs[:, None], 0.0, sample_rate / 2.0)
    m = _hz_to_mel(f)  # (9, n_bins)
    lo = corners[:-2, None, None]
    mid = corners[1:-1, None, None]
    hi = corners[2:, None, None]
    tri = np.minimum((m[None] - lo) / (mid - lo), (hi - m[None]) / (hi - mid))
    return np.maximum(tri, 0.0).mean(axis=1)


def mel_spectrogram(power_spec: np.ndarray, n_mels: int = N_MELS,
                    sample_rate: int = 16000, n_frames: int = N_FRAMES) -> np.ndarray:
    """Log Mel energies, time axis padded/cropped to n_frames with the log floor."""
    fb = mel_filterbank(sample_rate, 2 * (power_spec.shape[1] - 1), n_mels)
    out = np.log(power_spec @ fb.T + LOG_FLOOR)
    if out.shape[0] >= n_frames:
        return out[:n_frames]
    pad = np.full((n_frames - out.shape[0], n_mels), np.log(LOG_FLOOR))
    return np.vstack([out, pad])


def mfcc(log_mel: np.ndarray, n_coeff: int = N_MFCC) -> np.ndarray:
    """First n_coeff orthonormal DCT-II coefficients along the Mel axis."""
    return dct(log_mel, type=2, norm="ortho", axis=1)[:, :n_coeff]


def _standardize(x: np.ndarray) -> tuple[np.ndarray, float, float]:
    mean = float(x.mean())
    std = float(x.std())
    return (x - mean) / max(std, STD_FLOOR), mean, std


def featurize(clip: AudioClip, sample_rate: int = 16000) -> FeatureMap:
    """Concatenated [log-Mel | MFCC] map with per-map standardization.

    Two normalization choices make the map invariant to global gain and send
    digital silence to all zeros: the clip is scaled to unit RMS before
    analysis (so the log floor sees the same powers at any gain), and the
    log-Mel block is standardized over its real (unpadded) frames before time
    padding and before the DCT (so padding cannot reintroduce level offsets).
    """
    if clip.sample_rate != sample_rate:
        raise ValueError(f"expected {sample_rate} Hz input, got {clip.sample_rate}")
    if not clip.fixed_length:
        clip = standardize_length(clip)
    level = rms(clip.samples)
    if level > 0.0:
        clip = AudioClip(clip.sample_rate, clip.samples / level, fixed_length=True)
    spec = stft(clip)
    power = np.abs(spec) ** 2
    fb = mel_filterbank(sample_rate, N_FFT, N_MELS)
    log_mel = np.log(power @ fb.T + LOG_FLOOR)
    log_mel, _, _ = _standardize(log_mel)
    n = log_mel.shape[0]
    if n >= N_FRAMES:
        log_mel = log_mel[:N_FRAMES]
    else:
        log_mel = np.vstack([log_mel, np.zeros((N_FRAMES - n, N_MELS))])
    coeffs = mfcc(log_mel)
    full, mean, std = _standardize(np.hstack([log_mel, coeffs]))
    return FeatureMap(values=full, mean=mean, std=std)


class FeatureCache:
    """Disk cache of feature maps keyed by a content hash of the raw clip."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(clip: AudioClip) -> str:
        h = hashlib.sha256()
        h.update(str(clip.sample_rate).encode())
        h.update(clip.samples.astype("<f8").tobytes())
        return h.hexdigest()

    def _path(self, key: str) -> Path:
        return self.root / f"{key}.f32"

    def load(self, key: str) -> np.ndarray | None:
        p = self._path(key)
        if not p.exists():
            return None
        raw = np.frombuffer(p.read_bytes(), dtype="<f4")
        return raw.reshape(N_FRAMES, N_MELS + N_MFCC).astype(np.float64)

    def store(self, key: str, values: np.ndarray) -> None:
        self._path(key).write_bytes(values.astype("<f4").tobytes())
