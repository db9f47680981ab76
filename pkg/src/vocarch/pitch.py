"""Frame-synchronous F0 and voicing estimators.

Three estimators share a 10 ms grid and the same dynamic-programming
backend:

``estimate_ac``
    normalized autocorrelation with octave / octave-jump / voicing costs
    (65-650 Hz).
``estimate_nccf``
    normalized cross-correlation, on the waveform or on its Hilbert
    envelope (40-500 Hz).
``estimate_wide``
    cumulative-mean-normalized difference function (30-1000 Hz) smoothed
    by a Viterbi pass whose transition cost grows with the semitone jump.

Every silence test is relative to the loudest frame, so results do not
depend on the input gain.
"""
from __future__ import annotations

import csv
from itertools import repeat
from dataclasses import dataclass, field
from typing import Iterable, Tuple

import numpy as np
from scipy import fft as spfft
from scipy import signal as sps

from .errors import TooShort
from .frontend import (PITCH_RATE, FrameGrid, Signal, _fmt_col, _gather, _parse_col, frame_positions,
                       hilbert_envelope, highpass, resample)

AC = "ac"
NCCF = "nccf"
NCCF_HILBERT = "nccf_hilbert"
WIDE = "wide"
ESTIMATORS = (AC, NCCF, NCCF_HILBERT, WIDE)

TRACK_COLUMNS = ("frame_idx", "time_s", "voiced", "f0_hz", "estimator", "source")


@dataclass
class PitchTrack:
    """Per-frame voicing and F0 (NaN where unvoiced)."""

    grid: FrameGrid
    voiced: np.ndarray
    f0: np.ndarray
    estimator: str
    source: str = "raw"
    f0_range: Tuple[float, float] = (0.0, np.inf)
    strength: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.voiced = np.asarray(self.voiced, dtype=bool)
        self.f0 = np.where(self.voiced, np.asarray(self.f0, dtype=float), np.nan)
        if self.voiced.size != self.grid.n_frames:
            raise ValueError("track length must equal grid length")

    @property
    def tag(self) -> str:
        return f"{self.estimator}:{self.source}"

    def rows(self):
        return zip(range(self.grid.n_frames), _fmt_col(self.grid.centers, "{:.3f}"),
                   self.voiced.astype(int).tolist(), _fmt_col(self.f0, "{:.4f}", self.voiced),
                   repeat(self.estimator), repeat(self.source))


def write_tracks_csv(path, tracks: Iterable[PitchTrack]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_COLUMNS)
        for tr in tracks:
            w.writerows(tr.rows())


def read_tracks_csv(path, hop_s=0.01):
    """Inverse of :func:`write_tracks_csv`; returns ``{tag: PitchTrack}``."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        col = {name: i for i, name in enumerate(next(rd))}
        rows = list(rd)
    groups = {}
    for r in rows:
        groups.setdefault((r[col["estimator"]], r[col["source"]]), []).append(r)
    out = {}
    for (est, src), rs in groups.items():
        voiced = np.array([r[col["voiced"]] == "1" for r in rs], dtype=bool)
        f0 = _parse_col([r[col["f0_hz"]] for r in rs])
        tr = PitchTrack(FrameGrid(len(rs), hop_s), voiced, f0, est, src)
        out[tr.tag] = tr
    return out


# ---------------------------------------------------------------------------
# shared machinery

def _prepare(sig: Signal, min_len_s: float) -> Signal:
    if sig.sample_rate != PITCH_RATE:
        sig = resample(sig, PITCH_RATE)
    if sig.duration_s < min_len_s:
        raise TooShort(f"signal of {sig.duration_s:.3f} s is shorter than {min_len_s:.3f} s")
    return sig


def _frames(x, grid, rate, n, extra=0, offset=None):
    """Frames of ``n + extra`` samples whose first ``n`` are centred on the grid."""
    starts = frame_positions(grid, rate) - (n // 2 if offset is None else offset)
    return _gather(x, starts, n + extra)


def _pick_extrema(y, lo, hi, k, maxima=True, threshold=None, by_lag=False):
    """Best ``k`` interior local extrema of each row within lags ``[lo, hi]``.

    ``by_lag`` keeps the ``k`` shortest-lag extrema passing ``threshold``
    instead of the ``k`` most extreme ones (ties go to the shorter lag).
    Returns interpolated lags and values, shape ``(rows, k)``, NaN-padded.
    """
    s = y if maxima else -y
    rows = s.shape[0]
    k = min(k, hi - lo + 1)
    mid = s[:, lo:hi + 1]
    is_ext = (mid > s[:, lo - 1:hi]) & (mid >= s[:, lo + 1:hi + 2])
    if threshold is not None:
        is_ext &= (mid > threshold) if maxima else (mid > -threshold)
    # only the (few) extrema are ranked; nonzero yields them row by row, lag ascending
    r, c = np.nonzero(is_ext)
    if not by_lag:
        order = np.lexsort((c, -mid[r, c], r))
        r, c = r[order], c[order]
    counts = np.bincount(r, minlength=rows)
    rank = np.arange(r.size) - (np.cumsum(counts) - counts)[r]
    keep = rank < k
    r, c, rank = r[keep], c[keep] + lo, rank[keep]
    a, b, d = s[r, c - 1], s[r, c], s[r, c + 1]
    den = a - 2 * b + d
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(np.abs(den) > 1e-12, 0.5 * (a - d) / den, 0.0)
    delta = np.clip(delta, -0.5, 0.5)
    val = b - 0.25 * (a - d) * delta
    out_lag = np.full((rows, k), np.nan)
    out_val = np.full((rows, k), np.nan)
    out_lag[r, rank] = c + delta
    out_val[r, rank] = val if maxima else -val
    return out_lag, out_val


def _xcorr(ref, frames, nfft, n_lags):
    """First ``n_lags`` lags of the cross-correlation of ``ref`` rows with ``frames`` rows.

    The transforms run in single precision (about twice as fast); energies
    and everything downstream stay in double precision.
    """
    a = spfft.rfft(ref.astype(np.float32), nfft)
    b = spfft.rfft(frames.astype(np.float32), nfft)
    return spfft.irfft(np.conj(a) * b, nfft)[:, :n_lags].astype(float)


def _energy_prefix(frames):
    """Running sums of squares with a leading zero column."""
    sq = np.zeros((frames.shape[0], frames.shape[1] + 1))
    np.cumsum(frames * frames, axis=1, out=sq[:, 1:])
    return sq


def viterbi(cost, freqs, jump_cost, vuv_cost):
    """Minimum-cost path through per-frame candidate states.

    ``cost`` and ``freqs`` are ``(T, S)``; column 0 is the unvoiced state,
    other columns are voiced candidates (``inf`` cost when absent).
    Moving between voiced states costs ``jump_cost`` per octave; switching
    voicing costs ``vuv_cost``. Returns the chosen column per frame.
    """
    T, S = cost.shape
    if T == 0:
        return np.zeros(0, dtype=int)
    with np.errstate(divide="ignore", invalid="ignore"):
        lf = np.log2(np.where(np.isfinite(freqs) & (freqs > 0), freqs, 1.0))
    # all transition matrices at once; the loop only accumulates
    trans = np.abs(lf[1:, None, :] - lf[:-1, :, None]) * jump_cost
    trans[:, 0, :] = vuv_cost
    trans[:, :, 0] = vuv_cost
    trans[:, 0, 0] = 0.0
    back = np.zeros((T, S), dtype=np.int64)
    acc = cost[0].copy()
    cols = np.arange(S)
    for t in range(1, T):
        tot = trans[t - 1] + acc[:, None]
        best = tot.argmin(axis=0)
        back[t] = best
        acc = tot[best, cols] + cost[t]
    path = np.empty(T, dtype=np.int64)
    path[-1] = int(np.argmin(acc))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def _finish(grid, path, freqs, estimator, source, f0_range, strength=None):
    rows = np.arange(grid.n_frames)
    f0 = freqs[rows, path] if grid.n_frames else np.zeros(0)
    voiced = path > 0
    lo, hi = f0_range
    voiced &= (f0 >= lo) & (f0 <= hi)
    return PitchTrack(grid, voiced, f0, estimator, source, f0_range,
                      None if strength is None else strength[rows, path])


def _relative_level(frames_abs_peak):
    top = frames_abs_peak.max() if frames_abs_peak.size else 0.0
    if top <= 0:
        return np.zeros_like(frames_abs_peak)
    return frames_abs_peak / top


# ---------------------------------------------------------------------------
# E1: autocorrelation

@dataclass(frozen=True)
class AcParams:
    min_pitch: float = 65.0
    max_pitch: float = 650.0
    periods_per_window: float = 3.0
    silence_threshold: float = 0.03
    voicing_threshold: float = 0.45
    octave_cost: float = 0.01
    octave_jump_cost: float = 0.35
    voiced_unvoiced_cost: float = 0.14
    max_candidates: int = 15
    lag_upsampling: int = 4


def estimate_ac(sig: Signal, f0_range=(65.0, 650.0), params: AcParams = None,
                grid: FrameGrid = None, source="raw") -> PitchTrack:
    """Autocorrelation pitch tracker.

    Each frame is mean-removed, Hann-windowed and its autocorrelation is
    divided by that of the window. Candidate strength is the interpolated
    peak minus an octave cost; the unvoiced candidate gains strength as the
    frame gets quiet relative to the loudest sample of the signal.
    """
    p = params or AcParams()
    lo, hi = f0_range if f0_range is not None else (p.min_pitch, p.max_pitch)
    rate = PITCH_RATE
    window_s = p.periods_per_window / lo
    sig = _prepare(sig, 2 * window_s)
    grid = grid or FrameGrid.for_signal(sig)
    x = sig.samples
    n = int(round(window_s * rate))
    frames = _frames(x, grid, rate, n)
    frames = frames - frames.mean(axis=1, keepdims=True)
    local_peak = np.abs(frames).max(axis=1)
    global_peak = np.abs(x - x.mean()).max() if x.size else 0.0

    win = np.hanning(n)
    tau_max = int(np.ceil(rate / lo))
    tau_min = max(2, int(np.floor(rate / hi)))
    # padding past the largest lag read keeps those lags free of circular wrap
    nfft = spfft.next_fast_len(n + tau_max + 2, real=True)
    up = p.lag_upsampling
    n_lag = up * (tau_max + 2)
    wac = spfft.irfft(np.abs(spfft.rfft(win, nfft)) ** 2, up * nfft)[:n_lag]
    r = np.empty((grid.n_frames, n_lag))
    win32 = win.astype(np.float32)
    for b in range(0, grid.n_frames, 256):
        spec = spfft.rfft(frames[b:b + 256].astype(np.float32) * win32, nfft)
        # zero-padded inverse = band-limited interpolation of the autocorrelation
        ac = spfft.irfft(spec.real ** 2 + spec.imag ** 2, up * nfft)[:, :n_lag]
        with np.errstate(divide="ignore", invalid="ignore"):
            r[b:b + 256] = (ac / ac[:, :1]) / (wac / wac[0])
    r[~np.isfinite(r)] = 0.0

    lags, vals = _pick_extrema(r, up * tau_min, up * tau_max, p.max_candidates - 1,
                               threshold=0.5 * p.voicing_threshold)
    lags = lags / up
    vals = np.where(vals > 1.0, 1.0 / vals, vals)
    with np.errstate(invalid="ignore", divide="ignore"):
        freqs_v = rate / lags
    in_range = (freqs_v >= lo) & (freqs_v <= hi)
    strength_v = vals - p.octave_cost * np.log2(lo / freqs_v)
    strength_v = np.where(in_range, strength_v, -np.inf)

    rel = local_peak / global_peak if global_peak > 0 else np.zeros_like(local_peak)
    unv = p.voicing_threshold + np.maximum(
        0.0, 2.0 - rel / (p.silence_threshold / (1.0 + p.voicing_threshold))
    )
    strength = np.column_stack([unv, strength_v])
    freqs = np.column_stack([np.full(grid.n_frames, np.nan), np.where(in_range, freqs_v, np.nan)])
    path = viterbi(-strength, freqs, p.octave_jump_cost, p.voiced_unvoiced_cost)
    return _finish(grid, path, freqs, AC, source, (lo, hi), strength)


# ---------------------------------------------------------------------------
# E2: normalized cross-correlation

@dataclass(frozen=True)
class NccfParams:
    window_s: float = 0.025
    candidate_threshold: float = 0.3
    max_candidates: int = 10
    lag_weight: float = 0.3
    unvoiced_bias: float = 0.0
    jump_cost: float = 0.35
    voicing_cost: float = 0.2
    silence_threshold: float = 0.03
    envelope_highpass_hz: float = 20.0


def _nccf(x, grid, rate, n, k_max):
    frames = _frames(x, grid, rate, n, extra=k_max + 1)
    ref = frames[:, :n]
    mu = ref.mean(axis=1, keepdims=True)
    frames = frames - mu
    ref = frames[:, :n]
    # no circular wrap for lags up to k_max + 1 once nfft covers the frame
    nfft = spfft.next_fast_len(frames.shape[1], real=True)
    cross = _xcorr(ref, frames, nfft, k_max + 2)
    sq = _energy_prefix(frames)
    energy = sq[:, n:n + k_max + 2] - sq[:, :k_max + 2]
    e0 = energy[:, :1]
    den = np.sqrt(np.maximum(e0 * energy, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(den > 1e-20, cross / den, 0.0)
    rms = np.sqrt(e0[:, 0] / n)
    return phi, rms


def estimate_nccf(sig: Signal, setting="default", f0_range=(40.0, 500.0),
                  params: NccfParams = None, grid: FrameGrid = None, source="raw") -> PitchTrack:
    """Normalized cross-correlation tracker with a two-state voicing DP.

    ``setting="hilbert"`` analyses the 20 Hz high-passed Hilbert envelope
    instead of the waveform, which exposes periodicity carried only by the
    amplitude envelope.
    """
    if setting not in ("default", "hilbert"):
        raise ValueError(f"unknown setting {setting!r}")
    p = params or NccfParams()
    lo, hi = f0_range
    rate = PITCH_RATE
    sig = _prepare(sig, 2 * 3.0 / lo)
    grid = grid or FrameGrid.for_signal(sig)
    if setting == "hilbert":
        sig = highpass(hilbert_envelope(sig), p.envelope_highpass_hz)
    n = int(round(p.window_s * rate))
    k_min = max(2, int(np.floor(rate / hi)))
    k_max = int(np.ceil(rate / lo))
    phi, rms = _nccf(sig.samples, grid, rate, n, k_max)

    lags, vals = _pick_extrema(phi, k_min, k_max, p.max_candidates, threshold=p.candidate_threshold)
    with np.errstate(invalid="ignore", divide="ignore"):
        freqs_v = rate / lags
    in_range = (freqs_v >= lo) & (freqs_v <= hi)
    cost_v = 1.0 - vals * (1.0 - p.lag_weight * lags / k_max)
    cost_v = np.where(in_range, cost_v, np.inf)

    quiet = _relative_level(rms) < p.silence_threshold
    phi_max = np.nanmax(np.where(in_range, vals, 0.0), axis=1, initial=0.0)
    cost_u = p.unvoiced_bias + phi_max
    cost_v[quiet] = np.inf
    cost = np.column_stack([cost_u, cost_v])
    freqs = np.column_stack([np.full(grid.n_frames, np.nan), np.where(in_range, freqs_v, np.nan)])
    path = viterbi(cost, freqs, p.jump_cost, p.voicing_cost)
    tag = NCCF if setting == "default" else NCCF_HILBERT
    return _finish(grid, path, freqs, tag, source, (lo, hi), 1.0 - cost)


# ---------------------------------------------------------------------------
# E3: wide-range difference function + Viterbi

@dataclass(frozen=True)
class WideParams:
    candidate_threshold: float = 0.6
    max_candidates: int = 8
    octave_bias: float = 0.05
    unvoiced_cost: float = 0.3
    semitone_cost: float = 0.05
    voicing_cost: float = 0.3
    silence_threshold: float = 0.03
    lowpass_hz: float = 1000.0


def cmndf(frames, w, tau_max):
    """Cumulative-mean-normalized difference function of each frame row.

    Frame rows hold ``w + tau_max`` samples; the integration window is the
    first ``w``.
    """
    m = frames.shape[1]
    nfft = spfft.next_fast_len(m, real=True)
    cross = _xcorr(frames[:, :w], frames, nfft, tau_max + 1)
    sq = _energy_prefix(frames)
    tau = np.arange(tau_max + 1)
    e_tau = sq[:, w:w + tau_max + 1] - sq[:, :tau_max + 1]
    d = np.maximum(e_tau[:, :1] + e_tau - 2.0 * cross, 0.0)
    run = np.cumsum(d[:, 1:], axis=1)
    out = np.ones_like(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[:, 1:] = np.where(run > 0, d[:, 1:] * tau[1:] / run, 1.0)
    return out


def estimate_wide(sig: Signal, f0_range=(30.0, 1000.0), params: WideParams = None,
                  grid: FrameGrid = None, source="raw") -> PitchTrack:
    """Difference-function F0 estimator with Viterbi smoothing (30-1000 Hz)."""
    p = params or WideParams()
    lo, hi = f0_range
    rate = PITCH_RATE
    tau_max = int(np.ceil(rate / lo))
    tau_min = max(2, int(np.floor(rate / hi)))
    w = tau_max
    sig = _prepare(sig, 2 * 3.0 / lo)
    grid = grid or FrameGrid.for_signal(sig)
    x = sps.sosfilt(sps.butter(6, p.lowpass_hz, fs=rate, output="sos"), sig.samples)
    frames = _frames(x, grid, rate, w, extra=tau_max + 1, offset=(w + tau_max) // 2)
    frames = frames - frames.mean(axis=1, keepdims=True)
    rms = np.sqrt((frames[:, :w] ** 2).mean(axis=1))
    d = cmndf(frames, w, tau_max + 1)

    lags, vals = _pick_extrema(d, tau_min, tau_max, p.max_candidates, maxima=False,
                               threshold=p.candidate_threshold, by_lag=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        freqs_v = rate / lags
    in_range = (freqs_v >= lo) & (freqs_v <= hi)
    cost_v = np.maximum(vals, 0.0) + p.octave_bias * np.log2(hi / freqs_v)
    cost_v = np.where(in_range, cost_v, np.inf)
    cost_v[_relative_level(rms) < p.silence_threshold] = np.inf
    cost = np.column_stack([np.full(grid.n_frames, p.unvoiced_cost), cost_v])
    freqs = np.column_stack([np.full(grid.n_frames, np.nan), np.where(in_range, freqs_v, np.nan)])
    path = viterbi(cost, freqs, 12.0 * p.semitone_cost, p.voicing_cost)
    return _finish(grid, path, freqs, WIDE, source, (lo, hi), 1.0 - cost)


def run_all(sig: Signal, source="raw", grid: FrameGrid = None):
    """The four pitch tracks computed per signal, in fixed estimator order."""
    sig = _prepare(sig, 2 * 3.0 / 30.0)
    grid = grid or FrameGrid.for_signal(sig)
    return [
        estimate_ac(sig, grid=grid, source=source),
        estimate_nccf(sig, "default", grid=grid, source=source),
        estimate_nccf(sig, "hilbert", grid=grid, source=source),
        estimate_wide(sig, grid=grid, source=source),
    ]
