"""Reverb convolution, SNR-controlled noise and lossy codec chains.

The degradation order follows the signal model: reverberant speech, plus
scaled noise, then zero to three lossy compression steps. Every transform is
pure given its inputs; randomness enters only through sample_degradation and
the plan seed.
"""

from __future__ import annotations

import json
import math
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .audio import (AudioClip, CLIP_SECONDS, load_wav, peak_guard, resample,
                    rms, save_wav, standardize_length)
from .errors import (CodecFailure, CodecUnavailable, EmptyProfile,
                     SampleRateMismatch, SilentNoiseSource)

INFINITE = math.inf

C_MP3 = (8.0, 16.0, 24.0, 32.0, 40.0, 48.0, 56.0, 64.0, 80.0, 96.0, 112.0, 128.0)
C_AMR_NB = (4.75, 5.15, 5.9, 6.7, 7.4, 7.95, 10.2, 12.2)
C_GSM = (13.0,)

_BITRATE_SETS = {"MP3": C_MP3, "AMR-NB": C_AMR_NB, "GSM": C_GSM}
_CODEC_IDS = {"MP3", "AMR-NB", "GSM", "VORBIS", "EXTERNAL", "SIMULATED"}

# narrowband codecs operate at 8 kHz; clips are resampled around the step
NARROWBAND_RATES = {"AMR-NB": 8000, "GSM": 8000}


@dataclass(frozen=True)
class NoiseConfig:
    snr_db: float
    noise_source: str = "white"  # "white" or a WAV path

    def __post_init__(self):
        if self.snr_db != INFINITE and not (-10.0 <= self.snr_db <= 50.0):
            raise ValueError(f"snr_db {self.snr_db} outside [-10, 50] + INFINITE")


@dataclass(frozen=True)
class CodecStep:
    codec_id: str
    bitrate_kbps: float

    def __post_init__(self):
        if self.codec_id not in _CODEC_IDS:
            raise ValueError(f"unknown codec {self.codec_id!r}")
        if self.bitrate_kbps <= 0:
            raise ValueError("bitrate must be positive")
        allowed = _BITRATE_SETS.get(self.codec_id)
        if allowed is not None and not any(
                abs(self.bitrate_kbps - b) < 1e-9 for b in allowed):
            raise ValueError(
                f"bitrate {self.bitrate_kbps} not in the {self.codec_id} set")


@dataclass(frozen=True)
class DegradationPlan:
    noise: NoiseConfig
    chain: tuple[CodecStep, ...]
    seed: int

    def __post_init__(self):
        if len(self.chain) > 3:
            raise ValueError("codec chains are limited to 3 steps")


@dataclass(frozen=True)
class DegradationProfile:
    codecs: tuple[tuple[str, tuple[float, ...]], ...]
    snr_range: tuple[float, float] = (-10.0, 50.0)
    p_infinite: float = 1.0 / 63.0
    chain_lengths: tuple[int, ...] = (0, 1)


TRAINING_PROFILE = DegradationProfile(
    codecs=(("MP3", C_MP3), ("AMR-NB", C_AMR_NB), ("GSM", C_GSM)))


def convolve_reverb(speech: AudioClip, air) -> AudioClip:
    """Spectral full convolution with an AIR, restored to 3 s."""
    if speech.sample_rate != air.sample_rate:
        raise SampleRateMismatch(
            f"speech at {speech.sample_rate} Hz, AIR at {air.sample_rate} Hz")
    full = fftconvolve(speech.samples, np.asarray(air.samples, dtype=np.float64))
    out = standardize_length(AudioClip(speech.sample_rate, full))
    return replace(out, samples=peak_guard(out.samples))


def mix_noise(signal: AudioClip, noise: AudioClip, snr_db: float) -> AudioClip:
    """signal + alpha*noise with alpha setting the requested component SNR."""
    if snr_db == INFINITE:
        return replace(signal, samples=signal.samples.copy())
    if signal.sample_rate != noise.sample_rate:
        raise SampleRateMismatch("signal and noise rates differ")
    if signal.samples.size != noise.samples.size:
        raise ValueError("signal and noise lengths differ")
    noise_rms = rms(noise.samples)
    if noise_rms == 0.0:
        raise SilentNoiseSource("noise has zero RMS at finite SNR")
    alpha = rms(signal.samples) / (noise_rms * 10.0 ** (snr_db / 20.0))
    out = signal.samples + alpha * noise.samples
    return replace(signal, samples=peak_guard(out))


def simulated_codec(signal: AudioClip, bitrate_kbps: float) -> AudioClip:
    """Hermetic lossy stand-in: brick-wall low-pass at min(sr/2, 350*kbps) Hz
    plus per-1024-frame log-magnitude quantization, phase preserved.

    Bits are spent log-spaced like perceptual coders, and the representable
    dynamic range below each frame's peak grows with rate: high rates keep
    quiet spectral structure (near-transparent), low rates both coarsen it
    and floor it away."""
    if bitrate_kbps <= 0:
        raise ValueError("bitrate must be positive")
    sr = signal.sample_rate
    x = signal.samples
    fc = min(sr / 2.0, 350.0 * bitrate_kbps)
    spec = np.fft.rfft(x)
    spec[np.fft.rfftfreq(x.size, 1.0 / sr) > fc] = 0.0
    x = np.fft.irfft(spec, n=x.size)

    levels = max(2, round(bitrate_kbps))
    range_db = min(96.0, 30.0 + 0.5 * bitrate_kbps)
    step = range_db / levels  # quantizer step in dB
    out = np.empty_like(x)
    for start in range(0, x.size, 1024):
        frame = x[start:start + 1024]
        f = np.fft.rfft(frame)
        mag = np.abs(f)
        peak = mag.max()
        if peak > 0.0:
            with np.errstate(divide="ignore"):
                drop_db = -20.0 * np.log10(mag / peak)  # 0 at peak, +inf at 0
            q_db = np.round(drop_db / step) * step
            q = np.where(q_db > range_db, 0.0, peak * 10.0 ** (-q_db / 20.0))
            f = q * np.exp(1j * np.angle(f))
        out[start:start + frame.size] = np.fft.irfft(f, n=frame.size)
    return replace(signal, samples=peak_guard(out))


class CodecBridge:
    """Command-template bridge to external encoders.

    Config maps codec_id to {"encode": template, "decode": template,
    "extension": ".mp3", "sample_rate": int}; templates use {input},
    {output} and {bitrate} placeholders.
    """

    def __init__(self, config: dict):
        for cid, entry in config.items():
            if "encode" not in entry or "decode" not in entry:
                raise ValueError(f"bridge entry {cid!r} needs encode and decode")
        self.config = config

    @classmethod
    def from_file(cls, path) -> "CodecBridge":
        return cls(json.loads(Path(path).read_text()))

    def has(self, codec_id: str) -> bool:
        return codec_id in self.config

    def _run(self, template: str, mapping: dict):
        cmd = [tok.format(**mapping) for tok in shlex.split(template)]
        try:
            proc = subprocess.run(cmd, capture_output=True)
        except FileNotFoundError as e:
            raise CodecUnavailable(f"encoder tool missing: {cmd[0]}") from e
        if proc.returncode != 0:
            raise CodecFailure(
                f"{cmd[0]} exited {proc.returncode}: {proc.stderr[-400:]!r}")

    def roundtrip(self, clip: AudioClip, codec_id: str, bitrate_kbps: float) -> AudioClip:
        entry = self.config[codec_id]
        rate = int(entry.get("sample_rate", clip.sample_rate))
        work = resample(clip, rate) if rate != clip.sample_rate else clip
        ext = entry.get("extension", ".bin")
        with tempfile.TemporaryDirectory() as td:
            src = str(Path(td) / "in.wav")
            enc = str(Path(td) / ("enc" + ext))
            dst = str(Path(td) / "out.wav")
            save_wav(src, work)
            self._run(entry["encode"],
                      {"input": src, "output": enc, "bitrate": bitrate_kbps})
            self._run(entry["decode"],
                      {"input": enc, "output": dst, "bitrate": bitrate_kbps})
            try:
                return load_wav(dst)
            except Exception as e:
                raise CodecFailure(f"decoder produced unreadable output: {e}") from e


def apply_codec_chain(signal: AudioClip, chain, bridge: CodecBridge | None = None,
                      fallback_simulated: bool = True) -> AudioClip:
    """Apply codec steps left to right, each encode->decode->resample back.

    Named codecs run through the bridge when configured; otherwise the
    hermetic simulated codec stands in (at 8 kHz for narrowband codecs)
    unless fallback_simulated is off, which raises CodecUnavailable.
    """
    if len(chain) > 3:
        raise ValueError("codec chains are limited to 3 steps")
    out = replace(signal, samples=signal.samples.copy())
    for step in chain:
        work_rate = out.sample_rate
        if bridge is not None and bridge.has(step.codec_id):
            dec = bridge.roundtrip(out, step.codec_id, step.bitrate_kbps)
        elif step.codec_id == "SIMULATED":
            dec = simulated_codec(out, step.bitrate_kbps)
        elif step.codec_id != "EXTERNAL" and fallback_simulated:
            step_rate = NARROWBAND_RATES.get(step.codec_id, work_rate)
            x = resample(out, step_rate) if step_rate != work_rate else out
            dec = simulated_codec(x, step.bitrate_kbps)
        else:
            raise CodecUnavailable(
                f"no bridge entry for {step.codec_id} and no fallback")
        if dec.sample_rate != work_rate:
            dec = resample(dec, work_rate)
        out = standardize_length(dec)
        out = replace(out, samples=peak_guard(out.samples))
    return out


def sample_degradation(rng: np.random.Generator,
                       profile: DegradationProfile = TRAINING_PROFILE) -> DegradationPlan:
    """Draw a degradation plan: SNR, chain length, codec steps, noise seed."""
    if not profile.chain_lengths:
        raise EmptyProfile("profile admits no chain length")
    if max(profile.chain_lengths) > 0 and not profile.codecs:
        raise EmptyProfile("profile requires codec steps but lists no codecs")
    if rng.random() < profile.p_infinite:
        snr = INFINITE
    else:
        snr = float(rng.uniform(*profile.snr_range))
    k = int(profile.chain_lengths[rng.integers(0, len(profile.chain_lengths))])
    steps = []
    for _ in range(k):
        cid, rates = profile.codecs[rng.integers(0, len(profile.codecs))]
        steps.append(CodecStep(cid, float(rates[rng.integers(0, len(rates))])))
    seed = int(rng.integers(0, 2 ** 63))
    return DegradationPlan(NoiseConfig(snr), tuple(steps), seed)


def render_noise(config: NoiseConfig, n_samples: int, sample_rate: int,
                 seed: int) -> AudioClip:
    """Materialize the noise source for a plan at a given length."""
    if config.noise_source == "white":
        gen = np.random.Generator(np.random.PCG64(seed))
        x = gen.standard_normal(n_samples)
    else:
        src = load_wav(config.noise_source, target_rate=sample_rate).samples
        if src.size == 0 or not np.any(src):
            raise SilentNoiseSource(f"noise file {config.noise_source} is silent")
        reps = -(-n_samples // src.size)
        x = np.tile(src, reps)[:n_samples]
    return AudioClip(sample_rate=sample_rate, samples=x, fixed_length=True)


def apply_plan(clip: AudioClip, plan: DegradationPlan,
               bridge: CodecBridge | None = None,
               fallback_simulated: bool = True) -> AudioClip:
    """Noise mixing followed by the codec chain (reverb is applied upstream)."""
    out = clip
    if plan.noise.snr_db != INFINITE:
        noise = render_noise(plan.noise, clip.samples.size, clip.sample_rate,
                             plan.seed)
        out = mix_noise(out, noise, plan.noise.snr_db)
    return apply_codec_chain(out, plan.chain, bridge, fallback_simulated)
