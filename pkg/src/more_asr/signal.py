"""Waveforms, the differentiable feature frontend, SNR arithmetic and l-inf clipping."""
from __future__ import annotations

import functools
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, InvalidConfig, InvalidInput, UndefinedSNR

SAMPLE_RATE = 16000
PCM_SCALE = 32768.0


@dataclass(frozen=True)
class FrontendConfig:
    frame_len: int = 64
    hop: int = 32
    d_feat: int = 16
    seed: int = 1234
    gain: float = 256.0

    def __post_init__(self):
        if self.frame_len <= 0 or self.d_feat <= 0:
            raise InvalidConfig("frame_len and d_feat must be positive")
        if not 0 < self.hop <= self.frame_len:
            raise InvalidConfig("hop must satisfy 0 < hop <= frame_len")
        if not self.gain > 0:
            raise InvalidConfig("gain must be positive")


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInput("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise InvalidInput("sample_rate must be positive")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Waveform):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(self.samples, other.samples)

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _samples(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def frame_count(waveform, frontend: FrontendConfig) -> int:
    n = len(_samples(waveform))
    if n < frontend.frame_len:
        raise InvalidInput(f"waveform has {n} samples, shorter than one frame ({frontend.frame_len})")
    return (n - frontend.frame_len) // frontend.hop + 1


@functools.lru_cache(maxsize=16)
def _projection(frontend: FrontendConfig) -> np.ndarray:
    rng = np.random.default_rng(frontend.seed)
    w = rng.standard_normal((frontend.d_feat, frontend.frame_len)) * (2.0 * frontend.gain / np.sqrt(frontend.frame_len))
    w.setflags(write=False)
    return w


def projection_matrix(frontend: FrontendConfig) -> np.ndarray:
    """The fixed d_feat x frame_len projection drawn from the frontend seed."""
    return _projection(frontend)


def frames_torch(samples: torch.Tensor, frontend: FrontendConfig) -> torch.Tensor:
    """Slice (..., T) samples into (..., F, frame_len) overlapping frames."""
    if samples.shape[-1] < frontend.frame_len:
        raise InvalidInput(
            f"waveform has {samples.shape[-1]} samples, shorter than one frame ({frontend.frame_len})"
        )
    return samples.unfold(-1, frontend.frame_len, frontend.hop)


@functools.lru_cache(maxsize=16)
def _projection_t(frontend: FrontendConfig, dtype: torch.dtype) -> torch.Tensor:
    return torch.tensor(_projection(frontend), dtype=dtype)


def features_torch(samples: torch.Tensor, frontend: FrontendConfig) -> torch.Tensor:
    """Differentiable frontend: tanh(W @ frame) for every frame of ``samples``."""
    return torch.tanh(frames_torch(samples, frontend) @ _projection_t(frontend, samples.dtype).T)


def extract_features(waveform, frontend: FrontendConfig) -> np.ndarray:
    x = torch.tensor(_samples(waveform), dtype=torch.float64)
    return features_torch(x, frontend).numpy()


def snr_db(x, delta) -> float:
    """Energy ratio 20*log10(||x||_2 / ||delta||_2) in dB."""
    xs, ds = _samples(x), _samples(delta)
    nx, nd = float(np.linalg.norm(xs)), float(np.linalg.norm(ds))
    if nx == 0.0:
        raise InvalidInput("signal has zero energy")
    if nd == 0.0:
        raise UndefinedSNR("perturbation has zero energy; SNR is infinite")
    return 20.0 * np.log10(nx / nd)


def epsilon_for_snr(x, snr_db_target: float) -> float:
    """Peak-amplitude radius ||x||_inf / 10**(dB/20)."""
    if snr_db_target <= 0:
        raise InvalidInput("SNR target must be positive (dB)")
    peak = float(np.max(np.abs(_samples(x)))) if len(_samples(x)) else 0.0
    if peak == 0.0:
        raise InvalidInput("silent waveform has no peak amplitude")
    return peak / 10.0 ** (snr_db_target / 20.0)


def clip_linf(delta, epsilon: float):
    if isinstance(delta, torch.Tensor):
        return delta.clamp(-epsilon, epsilon)
    return np.clip(np.asarray(delta, dtype=np.float64), -epsilon, epsilon)


def apply(x, delta) -> Waveform:
    """Add a perturbation without clamping; clamping happens only at WAV export."""
    xs, ds = _samples(x), _samples(delta)
    if xs.shape != ds.shape:
        raise InvalidInput(f"length mismatch: waveform {xs.shape[0]} vs perturbation {ds.shape[0]}")
    rate = x.sample_rate if isinstance(x, Waveform) else SAMPLE_RATE
    return Waveform(xs + ds, rate)


def to_pcm16(samples) -> np.ndarray:
    scaled = np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE)
    return np.clip(scaled, -PCM_SCALE, PCM_SCALE - 1).astype("<i2")


def save_wav(path, waveform: Waveform) -> Path:
    path = Path(path)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(waveform.sample_rate)
        w.writeframes(to_pcm16(waveform.samples).tobytes())
    return path


def load_wav(path, expected_rate: int = SAMPLE_RATE) -> Waveform:
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise FormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    if channels != 1:
        raise FormatError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise FormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
    if rate != expected_rate:
        raise FormatError(f"{path}: expected {expected_rate} Hz, got {rate} Hz")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / PCM_SCALE, rate)
