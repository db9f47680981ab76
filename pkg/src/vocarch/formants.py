"""Linear-prediction formant analysis (Burg) with gender presets."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import repeat
from typing import Optional

import numpy as np

from .errors import NumericalInstability, TooShort
from .frontend import FrameGrid, Signal, _fmt_col, _gather, _parse_col, frame_positions, resample

N_FORMANTS = 4
MIN_FREQ_HZ = 50.0
EDGE_HZ = 50.0
MAX_BANDWIDTH_HZ = 700.0

FORMANT_COLUMNS = ("frame_idx", "time_s", "f1", "f2", "f3", "f4", "b1", "b2", "b3", "b4", "source")


@dataclass(frozen=True)
class FormantConfig:
    """Analysis settings.

    ``window_s`` follows the usual LPC-tool convention: the Gaussian window
    physically spans twice this duration, its effective length being about
    ``window_s``.
    """

    ceiling: float = 5500.0
    n_formants_to_track: int = 5
    window_s: float = 0.025
    pre_emphasis_from: float = 50.0

    @property
    def order(self) -> int:
        return 2 * self.n_formants_to_track

    @property
    def analysis_rate(self) -> float:
        return 2.0 * self.ceiling


PRESETS = {
    "F": FormantConfig(5500.0, 5),
    "M": FormantConfig(5000.0, 5),
    "alt": FormantConfig(5500.0, 6),
}


def config_for_gender(gender, preset: str = "default") -> FormantConfig:
    """Gender-dependent ceiling; ``preset="alt"`` selects six formants under 5.5 kHz."""
    if preset == "alt":
        return PRESETS["alt"]
    if preset != "default":
        raise ValueError(f"unknown formant preset {preset!r}")
    key = getattr(gender, "value", gender)
    return PRESETS[str(key)]


@dataclass
class FormantTrack:
    """``freqs`` and ``bandwidths`` are ``(n_frames, 4)`` with NaN for missing slots."""

    grid: FrameGrid
    freqs: np.ndarray
    bandwidths: np.ndarray
    source: str = "raw"

    @property
    def complete(self) -> np.ndarray:
        return np.all(np.isfinite(self.freqs), axis=1)

    def frame(self, i) -> "FormantFrame":
        return FormantFrame(tuple(_opt(v) for v in self.freqs[i]), tuple(_opt(v) for v in self.bandwidths[i]))

    def rows(self):
        cols = [_fmt_col(self.freqs[:, j], "{:.3f}") for j in range(N_FORMANTS)]
        bws = [_fmt_col(self.bandwidths[:, j], "{:.3f}") for j in range(N_FORMANTS)]
        named = {"frame_idx": range(self.grid.n_frames), "time_s": _fmt_col(self.grid.centers, "{:.3f}"),
                 "source": repeat(self.source)}
        for j in range(N_FORMANTS):
            named[f"f{j + 1}"], named[f"b{j + 1}"] = cols[j], bws[j]
        return zip(*(named[c] for c in FORMANT_COLUMNS))


def _opt(v):
    return float(v) if np.isfinite(v) else None


@dataclass(frozen=True)
class FormantFrame:
    f: tuple
    b: tuple = (None, None, None, None)

    @property
    def complete(self) -> bool:
        return all(v is not None for v in self.f)


def write_formants_csv(path, tracks) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FORMANT_COLUMNS)
        for tr in tracks:
            w.writerows(tr.rows())


def read_formants_csv(path, hop_s=0.01):
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        col = {name: i for i, name in enumerate(next(rd))}
        rows = list(rd)
    groups = {}
    for r in rows:
        groups.setdefault(r[col["source"]], []).append(r)
    out = {}
    for src, rs in groups.items():
        f = np.stack([_parse_col([r[col[f"f{j}"]] for r in rs]) for j in range(1, 5)], axis=1) if rs else np.zeros((0, 4))
        b = np.stack([_parse_col([r[col[f"b{j}"]] for r in rs]) for j in range(1, 5)], axis=1) if rs else np.zeros((0, 4))
        out[src] = FormantTrack(FrameGrid(len(rs), hop_s), f, b, src)
    return out


def gaussian_window(n: int) -> np.ndarray:
    """Gaussian window going to zero at the edges (exp(-12 x^2) shape)."""
    if n <= 1:
        return np.ones(max(n, 0))
    mid = (n - 1) / 2.0
    x = (np.arange(n) - mid) / mid
    edge = np.exp(-12.0)
    return (np.exp(-12.0 * x * x) - edge) / (1.0 - edge)


def burg(frames: np.ndarray, order: int) -> np.ndarray:
    """Burg lattice recursion on every row of ``frames``.

    Returns prediction polynomials ``a`` of shape ``(rows, order + 1)`` with
    ``a[:, 0] == 1`` so that ``e[n] = sum_k a[k] x[n - k]``. Rows whose
    energy vanishes keep a trivial polynomial.
    """
    frames = np.asarray(frames, dtype=float)
    rows, n = frames.shape
    a = np.zeros((rows, order + 1))
    a[:, 0] = 1.0
    if n <= order:
        return a
    ef = frames[:, 1:].copy()
    eb = frames[:, :-1].copy()
    den = np.einsum("ij,ij->i", ef, ef) + np.einsum("ij,ij->i", eb, eb)
    for m in range(1, order + 1):
        num = np.einsum("ij,ij->i", ef, eb)
        with np.errstate(divide="ignore", invalid="ignore"):
            k = np.where(den > 1e-300, -2.0 * num / den, 0.0)
        if not np.all(np.isfinite(k)):
            raise NumericalInstability("non-finite reflection coefficient")
        prev = a[:, 1:m].copy()
        a[:, 1:m] = prev + k[:, None] * prev[:, ::-1]
        a[:, m] = k
        if m < order:
            ef, eb = ef + k[:, None] * eb, eb + k[:, None] * ef
            # the lattice update scales the summed energies by (1 - k^2); then drop the end samples
            den = (1.0 - k * k) * den - ef[:, 0] ** 2 - eb[:, -1] ** 2
            ef, eb = ef[:, 1:], eb[:, :-1]
    return a


def lpc_roots(a: np.ndarray) -> np.ndarray:
    """Roots of ``z^p + a1 z^(p-1) + ... + ap`` for every row (companion eigenvalues)."""
    rows, p1 = a.shape
    p = p1 - 1
    comp = np.zeros((rows, p, p))
    comp[:, 0, :] = -a[:, 1:]
    comp[:, np.arange(1, p), np.arange(p - 1)] = 1.0
    return np.linalg.eigvals(comp)


def roots_to_formants(roots, rate, ceiling, max_bandwidth=MAX_BANDWIDTH_HZ):
    """Convert LPC roots to ``(freqs, bandwidths)`` arrays of shape ``(rows, 4)``."""
    rows = roots.shape[0]
    with np.errstate(divide="ignore"):
        freq = np.angle(roots) * rate / (2 * np.pi)
        bw = -np.log(np.abs(roots)) * rate / np.pi
    # unstable roots are reflected inside the unit circle: same angle, |log r| bandwidth
    bw = np.abs(bw)
    keep = (np.imag(roots) > 0) & (freq > MIN_FREQ_HZ) & (freq < ceiling - EDGE_HZ) & (bw < max_bandwidth)
    freq = np.where(keep, freq, np.inf)
    order = np.argsort(freq, axis=1)
    fs = np.take_along_axis(freq, order, axis=1)
    bs = np.take_along_axis(bw, order, axis=1)
    out_f = np.full((rows, N_FORMANTS), np.nan)
    out_b = np.full((rows, N_FORMANTS), np.nan)
    k = min(N_FORMANTS, fs.shape[1])
    out_f[:, :k] = np.where(np.isfinite(fs[:, :k]), fs[:, :k], np.nan)
    out_b[:, :k] = np.where(np.isfinite(fs[:, :k]), bs[:, :k], np.nan)
    return out_f, out_b


def pre_emphasize(x, rate, from_hz):
    alpha = np.exp(-2 * np.pi * from_hz / rate)
    y = x.copy()
    y[1:] -= alpha * x[:-1]
    return y


def estimate_formants(sig: Signal, grid: Optional[FrameGrid] = None,
                      config: FormantConfig = PRESETS["F"], source="raw") -> FormantTrack:
    """First four formants per grid frame.

    The signal is resampled to twice the ceiling and pre-emphasized; each
    Gaussian-windowed frame gets an order ``2 * n_formants_to_track`` Burg
    fit whose complex roots become formant candidates. Candidates outside
    (50 Hz, ceiling - 50 Hz) or wider than 700 Hz are dropped and the lowest
    four survivors fill F1-F4 in ascending order.
    """
    rate = config.analysis_rate
    x = resample(sig, rate).samples
    grid = grid or FrameGrid.for_duration(sig.duration_s)
    n = int(round(2 * config.window_s * rate))
    if x.size < n:
        raise TooShort(f"formant analysis needs at least {2 * config.window_s:.3f} s")
    x = pre_emphasize(x, rate, config.pre_emphasis_from)
    starts = frame_positions(grid, rate) - n // 2
    if grid.n_frames == 0:
        empty = np.zeros((0, N_FORMANTS))
        return FormantTrack(grid, empty, empty.copy(), source)
    frames = _gather(x, starts, n, gaussian_window(n))
    a = burg(frames, config.order)
    roots = lpc_roots(a)
    freqs, bws = roots_to_formants(roots, rate, config.ceiling)
    return FormantTrack(grid, freqs, bws, source)
