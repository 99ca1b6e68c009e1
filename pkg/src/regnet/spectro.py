"""Waveform <-> log-mel spectrogram pipeline and a Griffin-Lim inverter.

Framing convention: the clip is padded with ``(window - hop) / 2`` zeros on
each side before framing, so frame ``k`` is centred on the middle of hop block
``k`` and a clip of ``n * hop`` samples yields exactly ``n`` frames.  The FFT
size equals the window length.  Mel filters are triangular on the HTK mel
scale, span 0 Hz to Nyquist, and are area-normalised (each triangle is scaled
by ``2 / (f_right - f_left)``).

Log compression is ``log(max(mel + log_offset, log_floor))`` with natural log.
"""
from __future__ import annotations

import dataclasses
import wave
from functools import lru_cache
from pathlib import Path

import numpy as np


class SpectroError(ValueError):
    """Invalid waveform or spectrogram input."""


@dataclasses.dataclass(frozen=True)
class SpectroParams:
    sample_rate: int = 22050
    hop: int = 256
    window: int = 1024
    n_mels: int = 80
    clip_samples: int = 220160
    log_floor: float = 1e-5
    log_offset: float = 1e-5
    griffin_lim_seed: int = 0

    def __post_init__(self):
        if self.window < self.hop:
            raise SpectroError(f"window ({self.window}) must be >= hop ({self.hop})")
        if (self.window - self.hop) % 2:
            raise SpectroError("window - hop must be even")
        if self.n_mels < 1:
            raise SpectroError("n_mels must be >= 1")
        if self.clip_samples % self.hop:
            raise SpectroError(
                f"clip_samples ({self.clip_samples}) must be a multiple of hop ({self.hop})")
        if self.log_floor <= 0:
            raise SpectroError("log_floor must be > 0")

    @property
    def n_frames(self) -> int:
        return self.clip_samples // self.hop

    @property
    def n_fft(self) -> int:
        return self.window

    @property
    def floor_value(self) -> float:
        """Log-mel value of a silent cell."""
        return float(np.log(max(self.log_offset, self.log_floor)))

    @classmethod
    def desk(cls, n_frames: int = 128, **kw) -> "SpectroParams":
        """Parameters with the full-scale signal constants but a shorter clip."""
        hop = kw.pop("hop", 256)
        return cls(hop=hop, clip_samples=hop * n_frames, **kw)


# --------------------------------------------------------------------------- #
# filterbank

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(sample_rate: int, n_mels: int) -> np.ndarray:
    """``n_mels + 2`` band edge frequencies in Hz, equally spaced in mel."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))


def triangle_weight(freq_hz, left, centre, right):
    """Area-normalised triangular response evaluated at arbitrary frequencies."""
    f = np.asarray(freq_hz, dtype=np.float64)
    up = (f - left) / (centre - left)
    down = (right - f) / (right - centre)
    return np.maximum(0.0, np.minimum(up, down)) * (2.0 / (right - left))


@lru_cache(maxsize=16)
def _mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    edges = mel_band_edges(sample_rate, n_mels)
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fb = np.stack([triangle_weight(freqs, *edges[m:m + 3]) for m in range(n_mels)])
    fb.setflags(write=False)
    return fb


def mel_filterbank(p: SpectroParams) -> np.ndarray:
    """``n_mels x (n_fft // 2 + 1)`` filter matrix (read-only)."""
    return _mel_filterbank(p.sample_rate, p.n_fft, p.n_mels)


@lru_cache(maxsize=16)
def _window(n: int) -> np.ndarray:
    w = np.hanning(n + 1)[:-1]  # periodic Hann
    w.setflags(write=False)
    return w


# --------------------------------------------------------------------------- #
# waveform utilities

def _as_waveform(samples) -> np.ndarray:
    w = np.asarray(samples, dtype=np.float64)
    if w.ndim != 1:
        raise SpectroError(f"waveform must be 1-D, got shape {w.shape}")
    if w.size == 0:
        raise SpectroError("waveform is empty")
    if not np.all(np.isfinite(w)):
        raise SpectroError("waveform contains NaN or Inf samples")
    return w


def pad_or_trim(samples, target_samples: int) -> np.ndarray:
    """Repeat a short clip cyclically (or truncate a long one) to ``target_samples``."""
    w = _as_waveform(samples)
    if target_samples < 1:
        raise SpectroError("target_samples must be >= 1")
    if w.size >= target_samples:
        return w[:target_samples].copy()
    reps = -(-target_samples // w.size)
    return np.tile(w, reps)[:target_samples]


def stft(samples, p: SpectroParams) -> np.ndarray:
    """Complex STFT, shape ``(n_fft // 2 + 1, len(samples) // hop)``."""
    w = _as_waveform(samples)
    pad = (p.window - p.hop) // 2
    x = np.pad(w, (pad, pad))
    n_frames = (x.size - p.window) // p.hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, p.window)[::p.hop][:n_frames]
    return np.fft.rfft(frames * _window(p.window), n=p.n_fft, axis=1).T


def istft(spec: np.ndarray, p: SpectroParams, length: int | None = None) -> np.ndarray:
    """Least-squares overlap-add inverse of :func:`stft`."""
    n_frames = spec.shape[1]
    win = _window(p.window)
    frames = np.fft.irfft(spec.T, n=p.n_fft, axis=1)[:, :p.window] * win
    pad = (p.window - p.hop) // 2
    total = (n_frames - 1) * p.hop + p.window
    out = np.zeros(total)
    norm = np.zeros(total)
    for k in range(n_frames):
        s = k * p.hop
        out[s:s + p.window] += frames[k]
        norm[s:s + p.window] += win ** 2
    out = out / np.maximum(norm, 1e-8)
    out = out[pad:pad + n_frames * p.hop]
    if length is not None:
        out = out[:length]
    return out


def mel_magnitude(samples, p: SpectroParams) -> np.ndarray:
    """Mel-projected magnitude spectrogram before log compression."""
    return mel_filterbank(p) @ np.abs(stft(samples, p))


def compress(mel: np.ndarray, p: SpectroParams) -> np.ndarray:
    return np.log(np.maximum(mel + p.log_offset, p.log_floor))


def decompress(logmel: np.ndarray, p: SpectroParams) -> np.ndarray:
    return np.maximum(np.exp(logmel) - p.log_offset, 0.0)


def wav_to_mel(samples, p: SpectroParams) -> np.ndarray:
    """Log-mel spectrogram of a clip already padded to ``p.clip_samples``.

    Returns an ``n_mels x n_frames`` float64 array.
    """
    w = _as_waveform(samples)
    if w.size != p.clip_samples:
        raise SpectroError(
            f"waveform has {w.size} samples, expected clip_samples={p.clip_samples}; "
            "use pad_or_trim first")
    return compress(mel_magnitude(w, p), p)


def mel_to_linear(logmel: np.ndarray, p: SpectroParams, iters: int = 200) -> np.ndarray:
    """Nonnegative linear magnitudes whose mel projection matches ``logmel``.

    Multiplicative updates for ``min ||fb @ X - mel||^2`` subject to ``X >= 0``.
    """
    fb = mel_filterbank(p)
    target = decompress(logmel, p)
    num = fb.T @ target
    x = num + 1e-12
    for _ in range(iters):
        x *= num / (fb.T @ (fb @ x) + 1e-12)
    return x


def griffin_lim(magnitude: np.ndarray, p: SpectroParams, iters: int, seed: int | None = None) -> np.ndarray:
    if iters < 1:
        raise SpectroError("iters must be >= 1")
    rng = np.random.default_rng(p.griffin_lim_seed if seed is None else seed)
    phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    length = magnitude.shape[1] * p.hop
    x = istft(magnitude * phase, p, length)
    for _ in range(iters - 1):
        spec = stft(x, p)
        phase = np.exp(1j * np.angle(spec))
        x = istft(magnitude * phase, p, length)
    return x


def mel_to_wav(logmel, p: SpectroParams, iters: int = 32, seed: int | None = None) -> np.ndarray:
    """Invert a log-mel spectrogram to a waveform of ``p.clip_samples`` samples."""
    m = np.asarray(logmel, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != p.n_mels:
        raise SpectroError(f"expected a {p.n_mels} x frames array, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise SpectroError("mel spectrogram contains NaN or Inf")
    x = griffin_lim(mel_to_linear(m, p), p, iters, seed)
    return np.clip(pad_or_trim(x, p.clip_samples), -1.0, 1.0)


# --------------------------------------------------------------------------- #
# file I/O

def save_wav(samples, path, p: SpectroParams) -> None:
    """Write mono 16-bit PCM."""
    w = _as_waveform(samples)
    pcm = np.clip(np.round(w * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(p.sample_rate)
        f.writeframes(pcm.tobytes())


def load_wav(path, p: SpectroParams) -> np.ndarray:
    """Read mono 16-bit PCM at ``p.sample_rate`` into floats in [-1, 1)."""
    try:
        f = wave.open(str(path), "rb")
    except (wave.Error, EOFError, OSError) as e:
        raise OSError(f"cannot read WAV file {path}: {e}") from e
    with f:
        if f.getnchannels() != 1:
            raise OSError(f"{path}: expected 1 channel, file has channels={f.getnchannels()}")
        if f.getsampwidth() != 2:
            raise OSError(f"{path}: expected 16-bit PCM, file has bit depth={8 * f.getsampwidth()}")
        if f.getframerate() != p.sample_rate:
            raise OSError(
                f"{path}: sample_rate={f.getframerate()} does not match configured {p.sample_rate}")
        raw = f.readframes(f.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def save_mel(logmel: np.ndarray, path) -> None:
    """Persist a mel array as ``.npy`` (magic, version, dtype/shape header, raw data)."""
    np.save(Path(path), np.asarray(logmel), allow_pickle=False)


def load_mel(path) -> np.ndarray:
    return np.load(Path(path), allow_pickle=False)
