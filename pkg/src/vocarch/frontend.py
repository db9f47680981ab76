"""Audio decoding, resampling, framing and the Hilbert envelope."""
from __future__ import annotations

import math
import struct
import warnings
import wave
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from .errors import CorruptFile, TooShort, UnsupportedFormat

HOP_S = 0.010
PITCH_RATE = 16000
# Kaiser beta for the polyphase anti-aliasing filter; ~80 dB stopband
RESAMPLE_BETA = 8.0


@dataclass(frozen=True)
class Signal:
    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float)
        if x.ndim != 1:
            raise ValueError("Signal samples must be one-dimensional")
        if not np.all(np.isfinite(x)):
            raise ValueError("Signal samples must be finite")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def crop(self, start_s: float, end_s: float) -> "Signal":
        i0 = max(0, int(round(start_s * self.sample_rate)))
        i1 = min(self.samples.size, int(round(end_s * self.sample_rate)))
        return Signal(self.samples[i0:i1], self.sample_rate)


@dataclass(frozen=True)
class FrameGrid:
    """Uniform analysis grid; frame ``i`` is centred at ``(i + 0.5) * hop_s``."""

    n_frames: int
    hop_s: float = HOP_S

    @classmethod
    def for_duration(cls, duration_s: float, hop_s: float = HOP_S) -> "FrameGrid":
        # small epsilon guards 0.3 / 0.01 = 29.999...
        return cls(int(math.floor(duration_s / hop_s + 1e-9)), hop_s)

    @classmethod
    def for_signal(cls, sig: Signal, hop_s: float = HOP_S) -> "FrameGrid":
        return cls.for_duration(sig.duration_s, hop_s)

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_frames) + 0.5) * self.hop_s

    def __len__(self):
        return self.n_frames


def read_wav(path) -> Signal:
    """Decode a PCM WAV file (first channel) to a float signal in [-1, 1]."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", wavfile.WavFileWarning)
        try:
            rate, data = wavfile.read(path)
        except FileNotFoundError:
            raise
        except (ValueError, EOFError, struct.error, wave.Error, OSError) as exc:
            msg = str(exc)
            if "not understood" in msg or "Unknown wave file format" in msg or "Unsupported" in msg:
                raise UnsupportedFormat(f"{path}: {msg}") from None
            raise CorruptFile(f"{path}: {msg or type(exc).__name__}") from None
    for w in caught:
        if "prematurely" in str(w.message):
            raise CorruptFile(f"{path}: {w.message}")
    if data.ndim == 2:
        data = data[:, 0]
    if data.dtype == np.int16:
        x = data.astype(float) / 32768.0
    elif data.dtype == np.int32:
        # 24-bit files are returned left-justified in int32
        x = data.astype(float) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(float) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(float)
    else:
        raise UnsupportedFormat(f"{path}: sample type {data.dtype} not supported")
    if rate < 8000:
        raise UnsupportedFormat(f"{path}: sample rate {rate} Hz below 8 kHz")
    return Signal(x, float(rate))


def write_wav(path, sig: Signal) -> None:
    """Write a signal as 32-bit float PCM."""
    wavfile.write(path, int(round(sig.sample_rate)), sig.samples.astype(np.float32))


def resample(sig: Signal, target_rate: float) -> Signal:
    """Polyphase windowed-sinc resampling to ``target_rate``."""
    if target_rate == sig.sample_rate:
        return sig
    ratio = Fraction(int(round(target_rate)), int(round(sig.sample_rate)))
    if sig.samples.size == 0:
        return Signal(sig.samples, float(target_rate))
    y = sps.resample_poly(
        sig.samples, ratio.numerator, ratio.denominator, window=("kaiser", RESAMPLE_BETA)
    )
    return Signal(y, float(target_rate))


def decode_and_resample(path, target_rate: float = PITCH_RATE) -> Signal:
    return resample(read_wav(path), target_rate)


def hilbert_envelope(sig: Signal) -> Signal:
    """Magnitude of the analytic signal."""
    if sig.samples.size < 64:
        raise TooShort("Hilbert envelope needs at least 64 samples")
    return Signal(np.abs(sps.hilbert(sig.samples)), sig.sample_rate)


def highpass(sig: Signal, cutoff_hz: float, order: int = 2) -> Signal:
    sos = sps.butter(order, cutoff_hz, btype="highpass", fs=sig.sample_rate, output="sos")
    return Signal(sps.sosfilt(sos, sig.samples), sig.sample_rate)


def frame_positions(grid: FrameGrid, sample_rate: float) -> np.ndarray:
    """Sample index of every frame centre."""
    return np.round(grid.centers * sample_rate).astype(int)


def frame_signal(sig: Signal, grid: FrameGrid, window_s: float, window="hann",
                 length=None) -> np.ndarray:
    """Cut one frame per grid centre, zero-padding beyond the signal edges.

    Returns an ``(n_frames, n)`` array. ``length`` overrides the frame
    length in samples (the window is then applied to the whole frame).
    Pass ``window=None`` for rectangular frames.
    """
    if window_s < grid.hop_s:
        raise ValueError("window_s must be at least the hop")
    n = int(length) if length is not None else int(round(window_s * sig.sample_rate))
    if grid.n_frames == 0 or n == 0:
        return np.zeros((grid.n_frames, n))
    starts = frame_positions(grid, sig.sample_rate) - n // 2
    return _gather(sig.samples, starts, n, window)


def _gather(x, starts, n, window=None):
    pad_left = max(0, -int(starts.min()))
    pad_right = max(0, int(starts.max()) + n - x.size)
    xp = np.concatenate([np.zeros(pad_left), x, np.zeros(pad_right)])
    view = np.lib.stride_tricks.sliding_window_view(xp, n)
    frames = view[starts + pad_left].copy()
    if window is not None:
        w = sps.get_window(window, n, fftbins=False) if isinstance(window, (str, tuple)) else np.asarray(window)
        frames *= w
    return frames


def _fmt_col(values, fmt, mask=None):
    """Format a float column, leaving non-finite or masked-out entries empty."""
    vals = np.asarray(values, dtype=float)
    keep = np.isfinite(vals) if mask is None else np.asarray(mask, dtype=bool) & np.isfinite(vals)
    return [fmt.format(v) if k else "" for v, k in zip(vals.tolist(), keep.tolist())]


def _parse_col(strings):
    return np.array([s if s else "nan" for s in strings], dtype=float)
