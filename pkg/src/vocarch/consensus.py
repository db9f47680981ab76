"""Multi-estimator consensus: voicing intersection, F0 and formant agreement.

Stage 1 keeps frames voiced in every voicing stream, stage 2 keeps those
whose F0 estimates all lie within 20 % of their median, stage 3 keeps
those whose raw and separated formants are complete and agree within 20 %
of the pair mean.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import GridMismatch
from .formants import FormantTrack
from .frontend import _fmt_col, _parse_col
from .pitch import AC, NCCF, NCCF_HILBERT, WIDE, PitchTrack

log = logging.getLogger(__name__)

F0_GROSS = 0.20
FORMANT_GROSS = 0.20
MIN_VALID_S = 10.0

VOICING_ESTIMATORS = (AC, NCCF, NCCF_HILBERT)
F0_ESTIMATORS = (AC, WIDE)
SOURCES = ("raw", "separated")

FUSED_COLUMNS = ("time_s", "voiced6", "f0_consensus", "valid_pitch", "valid_formants", "f1", "f2", "f3", "f4")


def _check_grid(tracks):
    ref = tracks[0].grid
    for tr in tracks[1:]:
        if tr.grid != ref:
            raise GridMismatch(f"track {tr.tag} has grid {tr.grid}, expected {ref}")


def fuse_voicing(tracks: Sequence[PitchTrack]) -> np.ndarray:
    """Frames voiced in every track (logical AND)."""
    if not tracks:
        raise ValueError("no voicing streams")
    _check_grid(tracks)
    n = tracks[0].grid.n_frames
    out = np.ones(n, dtype=bool)
    for tr in tracks:
        out &= tr.voiced
    return out


def filter_f0_consensus(f0s, threshold: float = F0_GROSS):
    """Median-agreement rule on an ``(n_frames, k)`` array of F0 estimates.

    A frame is valid when every estimate is present and deviates from the
    frame median by at most ``threshold`` (relative to the median). Returns
    ``(valid, consensus)`` with consensus NaN where invalid. A single
    frame may be passed as a 1-D sequence.
    """
    f = np.asarray(f0s, dtype=float)
    single = f.ndim == 1
    f = np.atleast_2d(f)
    present = np.all(np.isfinite(f) & (f > 0), axis=1)
    med = np.median(np.where(np.isfinite(f), f, 0.0), axis=1)
    with np.errstate(invalid="ignore"):
        valid = present & np.all(np.abs(f - med[:, None]) <= threshold * med[:, None], axis=1)
    consensus = np.where(valid, med, np.nan)
    if single:
        return bool(valid[0]), float(consensus[0])
    return valid, consensus


def filter_formant_consensus(raw, sep=None, threshold: float = FORMANT_GROSS):
    """Raw vs separated formant agreement.

    ``raw`` and ``sep`` are ``(n_frames, 4)`` arrays (NaN = missing) or
    single 4-sequences. Valid iff both are complete and every formant pair
    differs by at most ``threshold`` of the pair mean; the consensus is the
    pair mean. With ``sep=None`` (single-signal mode) only completeness is
    checked and ``raw`` is the consensus.
    """
    r = np.asarray([np.nan if v is None else v for v in raw] if _is_frame(raw) else raw, dtype=float)
    single = r.ndim == 1
    r = np.atleast_2d(r)
    complete = np.all(np.isfinite(r), axis=1)
    if sep is None:
        valid, cons = complete, r
    else:
        s = np.atleast_2d(np.asarray([np.nan if v is None else v for v in sep] if _is_frame(sep) else sep,
                                     dtype=float))
        complete &= np.all(np.isfinite(s), axis=1)
        mean = 0.5 * (r + s)
        with np.errstate(invalid="ignore"):
            valid = complete & np.all(np.abs(r - s) <= threshold * mean, axis=1)
        cons = mean
    cons = np.where(valid[:, None], cons, np.nan)
    if single:
        return bool(valid[0]), cons[0]
    return valid, cons


def _is_frame(x):
    return isinstance(x, (list, tuple)) and len(x) == 4 and not isinstance(x[0], (list, tuple, np.ndarray))


@dataclass
class FusedSegment:
    """Per-frame fusion output for one segment."""

    times: np.ndarray
    voiced: np.ndarray
    consensus_f0: np.ndarray
    valid_pitch: np.ndarray
    valid_formants: np.ndarray
    formants: np.ndarray
    degraded: bool = False
    voiced_any: Optional[np.ndarray] = None

    @property
    def n_frames(self) -> int:
        return self.times.size

    def retention(self) -> "RetentionStats":
        any_ = self.voiced if self.voiced_any is None else self.voiced_any
        return RetentionStats.from_counts(
            self.n_frames, int(any_.sum()), int(self.voiced.sum()),
            int(self.valid_pitch.sum()), int(self.valid_formants.sum()))

    def rows(self):
        named = {
            "time_s": _fmt_col(self.times, "{:.3f}"),
            "voiced6": self.voiced.astype(int).tolist(),
            "f0_consensus": _fmt_col(self.consensus_f0, "{:.4f}", self.valid_pitch),
            "valid_pitch": self.valid_pitch.astype(int).tolist(),
            "valid_formants": self.valid_formants.astype(int).tolist(),
        }
        for j in range(4):
            named[f"f{j + 1}"] = _fmt_col(self.formants[:, j], "{:.3f}", self.valid_formants)
        return zip(*(named[c] for c in FUSED_COLUMNS))


def fuse_segment(pitch_tracks: Mapping[str, PitchTrack], formant_tracks: Mapping[str, FormantTrack],
                 f0_threshold: float = F0_GROSS, formant_threshold: float = FORMANT_GROSS) -> FusedSegment:
    """Run all three stages on one segment.

    ``pitch_tracks`` is keyed by ``"estimator:source"`` and
    ``formant_tracks`` by source. When no separated-signal tracks are
    present the segment runs in single-signal mode (3 voicing streams,
    2 F0 streams, completeness-only formant check).
    """
    sources = [s for s in SOURCES if any(k.endswith(":" + s) for k in pitch_tracks)]
    degraded = "separated" not in sources
    if degraded:
        log.warning("no separated signal: running single-signal consensus")
    voicing = [pitch_tracks[f"{e}:{s}"] for s in sources for e in VOICING_ESTIMATORS]
    voiced = fuse_voicing(voicing)
    f0_tracks = [pitch_tracks[f"{e}:{s}"] for s in sources for e in F0_ESTIMATORS]
    _check_grid(voicing + f0_tracks)
    f0s = np.column_stack([tr.f0 for tr in f0_tracks])
    valid_f0, cons = filter_f0_consensus(f0s, f0_threshold)
    valid_pitch = voiced & valid_f0
    cons = np.where(valid_pitch, cons, np.nan)

    n = voiced.size
    raw = formant_tracks.get("raw")
    sep = None if degraded else formant_tracks.get("separated")
    if raw is None or raw.freqs.shape[0] != n or (sep is not None and sep.freqs.shape[0] != n):
        raise GridMismatch("formant tracks do not match the pitch grid")
    valid_fm, fm = filter_formant_consensus(raw.freqs, None if sep is None else sep.freqs, formant_threshold)
    valid_formants = valid_pitch & valid_fm
    voiced_any = np.zeros(n, dtype=bool)
    for tr in voicing:
        voiced_any |= tr.voiced
    return FusedSegment(
        times=voicing[0].grid.centers, voiced=voiced, consensus_f0=cons, valid_pitch=valid_pitch,
        valid_formants=valid_formants, formants=np.where(valid_formants[:, None], fm, np.nan),
        degraded=degraded, voiced_any=voiced_any,
    )


def write_fused_csv(path, seg: FusedSegment) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FUSED_COLUMNS)
        w.writerows(seg.rows())


def read_fused_csv(path) -> FusedSegment:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        col = {name: i for i, name in enumerate(next(rd))}
        cols = list(zip(*rd)) or [()] * len(col)

    def get(name):
        return cols[col[name]]

    def flag(name):
        return np.array([v == "1" for v in get(name)], dtype=bool)

    fm = np.stack([_parse_col(get(f"f{j}")) for j in range(1, 5)], axis=1).reshape(-1, 4)
    return FusedSegment(_parse_col(get("time_s")), flag("voiced6"), _parse_col(get("f0_consensus")),
                        flag("valid_pitch"), flag("valid_formants"), fm)


@dataclass(frozen=True)
class RetentionStats:
    """Frame fractions surviving each stage, relative to all frames."""

    n_frames: int
    fraction_voiced_any: float
    fraction_after_voicing: float
    fraction_after_f0: float
    fraction_after_formants: float

    @classmethod
    def from_counts(cls, n, any_, voicing, f0, formants):
        if n == 0:
            return cls(0, 0.0, 0.0, 0.0, 0.0)
        return cls(n, any_ / n, voicing / n, f0 / n, formants / n)

    def counts(self):
        n = self.n_frames
        return (n, round(self.fraction_voiced_any * n), round(self.fraction_after_voicing * n),
                round(self.fraction_after_f0 * n), round(self.fraction_after_formants * n))

    def to_dict(self):
        return asdict(self)


def aggregate_retention(stats: Iterable[RetentionStats]) -> RetentionStats:
    """Frame-weighted aggregate; order-independent (integer count sums)."""
    tot = np.zeros(5, dtype=np.int64)
    for s in stats:
        tot += np.array(s.counts(), dtype=np.int64)
    return RetentionStats.from_counts(*map(int, tot))


def retention_report(segments: Mapping[str, FusedSegment]) -> dict:
    per = {k: seg.retention() for k, seg in sorted(segments.items())}
    return {
        "segments": {k: v.to_dict() for k, v in per.items()},
        "corpus": aggregate_retention(per.values()).to_dict(),
    }


@dataclass(frozen=True)
class Admission:
    admitted: tuple
    rejected: Dict[str, float]
    valid_seconds: Dict[str, float]


def reject_short_speakers(valid_frames: Mapping[str, int], hop_s: float = 0.01,
                          min_valid_s: float = MIN_VALID_S) -> Admission:
    """Admit speakers whose valid-pitch frames total at least ``min_valid_s``.

    ``valid_frames`` maps speaker id to the number of valid-pitch frames
    summed over all their segments.
    """
    need = int(round(min_valid_s / hop_s))
    admitted, rejected, secs = [], {}, {}
    for sid in sorted(valid_frames):
        count = int(valid_frames[sid])
        secs[sid] = round(count * hop_s, 6)
        if count >= need:
            admitted.append(sid)
        else:
            rejected[sid] = secs[sid]
    return Admission(tuple(admitted), rejected, secs)


def save_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
