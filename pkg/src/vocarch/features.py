"""Chunking of valid frames and the two long-term features per chunk."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import EmptyChunk, MissingFormant, NoFormantFrames, NonPositiveFormant

CHUNK_S = 10.0
SEMITONE_REF_HZ = 100.0
BASE_F0_QUANTILE = 0.7

FEATURE_COLUMNS = (
    "speaker_id", "program_id", "gender", "age_years", "period", "chunk_idx",
    "base_f0_hz", "base_f0_st", "vtl_cm", "n_frames_pitch", "n_frames_formant",
)


@dataclass(frozen=True)
class VtlModel:
    """Formant-based length estimate ``intercept + sum_i w_i (2i - 1) c / (4 F_i)``.

    The default weights average the four quarter-wave tube lengths.
    """

    weights: Sequence[float] = (0.25, 0.25, 0.25, 0.25)
    intercept: float = 0.0
    speed_of_sound: float = 35000.0


DEFAULT_VTL = VtlModel()


@dataclass
class Chunk:
    speaker_id: str
    program_id: str
    f0: np.ndarray
    formants: np.ndarray
    hop_s: float = 0.01

    @property
    def n_frames(self) -> int:
        return self.f0.size

    @property
    def duration_s(self) -> float:
        return self.n_frames * self.hop_s


@dataclass(frozen=True)
class ChunkFeatures:
    base_f0_hz: float
    base_f0_st: float
    vtl_cm: float
    n_frames_pitch: int
    n_frames_formant: int


def chunk_sizes(n_frames: int, hop_s: float = 0.01, chunk_s: float = CHUNK_S) -> List[int]:
    """Frame counts of ``floor(T / chunk_s)`` near-equal chunks covering all frames."""
    per = int(round(chunk_s / hop_s))
    k = n_frames // per
    if k == 0:
        return []
    base, extra = divmod(n_frames, k)
    return [base + 1] * extra + [base] * (k - extra)


def make_chunks(speaker_id, program_id, f0, formants, hop_s=0.01, chunk_s=CHUNK_S) -> List[Chunk]:
    """Split one speaker-program stream of valid frames into contiguous chunks.

    ``f0`` holds the consensus F0 of the valid-pitch frames in time order;
    ``formants`` the matching ``(n, 4)`` consensus formants (NaN rows for
    frames that failed the formant check).
    """
    f0 = np.asarray(f0, dtype=float)
    formants = np.asarray(formants, dtype=float).reshape(-1, 4)
    out, start = [], 0
    for size in chunk_sizes(f0.size, hop_s, chunk_s):
        out.append(Chunk(speaker_id, program_id, f0[start:start + size], formants[start:start + size], hop_s))
        start += size
    return out


def quantile_linear(values, q: float) -> float:
    """Sample quantile at position ``h = (n - 1) q + 1`` with linear interpolation."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise EmptyChunk("quantile of an empty sample")
    # 1-based position, interpolating between order statistics lo and lo + 1
    h = (v.size - 1) * q + 1
    lo = int(math.floor(h))
    if lo >= v.size:
        return float(v[-1])
    return float(v[lo - 1] + (h - lo) * (v[lo] - v[lo - 1]))


def median(values) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    n = v.size
    if n == 0:
        raise ValueError("median of an empty sample")
    mid = n // 2
    return float(v[mid]) if n % 2 else float(0.5 * (v[mid - 1] + v[mid]))


def hz_to_st(hz, reference_hz: float = SEMITONE_REF_HZ):
    return 12.0 * np.log2(np.asarray(hz, dtype=float) / reference_hz)


def base_f0(f0, reference_hz: float = SEMITONE_REF_HZ):
    """Seventh decile of a chunk's F0 values, in Hz and semitones."""
    f = np.asarray(getattr(f0, "f0", f0), dtype=float)
    f = f[np.isfinite(f)]
    if f.size == 0:
        raise EmptyChunk("chunk has no valid-pitch frames")
    hz = quantile_linear(f, BASE_F0_QUANTILE)
    return hz, float(hz_to_st(hz, reference_hz))


def vtl_frame(formants, model: VtlModel = DEFAULT_VTL) -> float:
    """Vocal tract length (cm) from F1-F4."""
    if len(formants) < 4 or any(f is None or not np.isfinite(f) for f in formants[:4]):
        raise MissingFormant("all four formants are required")
    f = np.asarray(formants[:4], dtype=float)
    if np.any(f <= 0):
        raise NonPositiveFormant("formant frequencies must be positive")
    return _vtl(f[None, :], model)[0]


def _vtl(f: np.ndarray, model: VtlModel) -> np.ndarray:
    i = np.arange(1, 5)
    per = (2 * i - 1) * model.speed_of_sound / (4.0 * f)
    return model.intercept + per @ np.asarray(model.weights, dtype=float)


def vtl_chunk(formants, model: VtlModel = DEFAULT_VTL) -> float:
    """Median of per-frame lengths over frames with four valid formants."""
    f = np.asarray(getattr(formants, "formants", formants), dtype=float).reshape(-1, 4)
    f = f[np.all(np.isfinite(f), axis=1)]
    if f.shape[0] == 0:
        raise NoFormantFrames("chunk has no frames with four formants")
    if np.any(f <= 0):
        raise NonPositiveFormant("formant frequencies must be positive")
    return median(_vtl(f, model))


def chunk_features(chunk: Chunk, reference_hz: float = SEMITONE_REF_HZ,
                   model: VtlModel = DEFAULT_VTL) -> ChunkFeatures:
    hz, st = base_f0(chunk.f0, reference_hz)
    n_fm = int(np.all(np.isfinite(chunk.formants), axis=1).sum())
    vtl = vtl_chunk(chunk.formants, model) if n_fm else float("nan")
    return ChunkFeatures(hz, st, vtl, int(np.isfinite(chunk.f0).sum()), n_fm)


def write_features_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FEATURE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in FEATURE_COLUMNS})


def _fmt(v):
    if isinstance(v, float):
        return "" if not np.isfinite(v) else repr(v)
    return v


def read_features_csv(path) -> List[dict]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            r = dict(row)
            for k in ("base_f0_hz", "base_f0_st", "vtl_cm", "age_years"):
                r[k] = float(r[k]) if r[k] != "" else float("nan")
            for k in ("chunk_idx", "n_frames_pitch", "n_frames_formant"):
                r[k] = int(r[k])
            out.append(r)
    return out
