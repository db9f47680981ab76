"""Corpus data model, manifest ingestion and segment admission gates.

A manifest is the hand-off point from diarization: every row names one
audio segment already attributed to a speaker appearing in a program.
"""
from __future__ import annotations

import csv
import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
from scipy import signal as sps

from .errors import (
    AgeOutOfRange,
    DanglingReference,
    MissingAudio,
    SchemaError,
    TooShort,
    YearOutsideCorpusPeriods,
)

MANIFEST_COLUMNS = (
    "speaker_id",
    "gender",
    "birth_year",
    "program_id",
    "recording_year",
    "raw_path",
    "separated_path",
    "start_s",
    "end_s",
)

TELEPHONE_CUTOFF_HZ = 3800.0
TELEPHONE_RATIO = 0.005


class Gender(str, enum.Enum):
    F = "F"
    M = "M"


class Period(str, enum.Enum):
    P1955 = "P1955"
    P1975 = "P1975"
    P1995 = "P1995"
    P2015 = "P2015"


class AgeGroup(str, enum.Enum):
    A20_35 = "A20_35"
    A36_50 = "A36_50"
    A51_65 = "A51_65"
    A65plus = "A65plus"


PERIOD_YEARS = {
    Period.P1955: range(1954, 1958),
    Period.P1975: range(1974, 1978),
    Period.P1995: range(1995, 1997),
    Period.P2015: range(2015, 2017),
}

# upper bounds (inclusive) of each age group
AGE_GROUP_BOUNDS = (
    (35, AgeGroup.A20_35),
    (50, AgeGroup.A36_50),
    (65, AgeGroup.A51_65),
)
MIN_AGE = 20


@dataclass(frozen=True)
class SpeakerRecord:
    speaker_id: str
    gender: Gender
    birth_year: int


@dataclass(frozen=True)
class ProgramRecord:
    program_id: str
    recording_year: int
    period: Period

    def __post_init__(self):
        if derive_period(self.recording_year) is not self.period:
            raise SchemaError(
                f"program {self.program_id!r}: period {self.period.value} does not "
                f"match recording year {self.recording_year}"
            )


@dataclass(frozen=True)
class SegmentRecord:
    speaker_id: str
    program_id: str
    raw_audio_path: str
    separated_audio_path: Optional[str]
    start_s: float
    end_s: float

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise SchemaError(
                f"segment of {self.speaker_id!r}/{self.program_id!r}: "
                f"end_s ({self.end_s}) must exceed start_s ({self.start_s})"
            )

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class Corpus:
    """Immutable, cross-linked corpus."""

    speakers: Mapping[str, SpeakerRecord]
    programs: Mapping[str, ProgramRecord]
    segments: Tuple[SegmentRecord, ...]
    root: str = field(default="", compare=False)

    @property
    def counts(self) -> Tuple[int, int, int]:
        return len(self.speakers), len(self.programs), len(self.segments)

    def age_of(self, speaker_id: str, program_id: str) -> Tuple[int, AgeGroup]:
        return derive_age(self.speakers[speaker_id], self.programs[program_id])

    def resolve(self, path: Optional[str]) -> Optional[str]:
        """Absolute path of an audio file named in the manifest."""
        if not path:
            return None
        if os.path.isabs(path) or not self.root:
            return path
        return os.path.join(self.root, path)

    def to_dict(self) -> dict:
        return {
            "speakers": [
                {"speaker_id": s.speaker_id, "gender": s.gender.value, "birth_year": s.birth_year}
                for s in self.speakers.values()
            ],
            "programs": [
                {"program_id": p.program_id, "recording_year": p.recording_year}
                for p in self.programs.values()
            ],
            "segments": [
                {
                    "speaker_id": s.speaker_id,
                    "program_id": s.program_id,
                    "raw_path": self.resolve(s.raw_audio_path),
                    "separated_path": self.resolve(s.separated_audio_path) or "",
                    "start_s": s.start_s,
                    "end_s": s.end_s,
                }
                for s in self.segments
            ],
        }


def derive_period(recording_year: int) -> Period:
    """Map a recording year onto one of the four corpus periods."""
    year = int(recording_year)
    for period, years in PERIOD_YEARS.items():
        if year in years:
            return period
    raise YearOutsideCorpusPeriods(f"year {year} lies outside the corpus periods")


def age_group(age: int) -> AgeGroup:
    if age < MIN_AGE:
        raise AgeOutOfRange(f"age {age} is below {MIN_AGE}")
    for upper, group in AGE_GROUP_BOUNDS:
        if age <= upper:
            return group
    return AgeGroup.A65plus


def derive_age(speaker: SpeakerRecord, program: ProgramRecord) -> Tuple[int, AgeGroup]:
    """Age in calendar years at recording time and its age group."""
    if speaker.birth_year >= program.recording_year:
        raise AgeOutOfRange(
            f"speaker {speaker.speaker_id!r} born {speaker.birth_year} cannot appear "
            f"in a {program.recording_year} recording"
        )
    age = program.recording_year - speaker.birth_year
    return age, age_group(age)


def _parse_int(value, what):
    try:
        return int(str(value).strip())
    except (TypeError, ValueError):
        raise SchemaError(f"{what}: expected an integer, got {value!r}") from None


def _parse_float(value, what):
    try:
        return float(str(value).strip())
    except (TypeError, ValueError):
        raise SchemaError(f"{what}: expected a number, got {value!r}") from None


def _blank(value) -> bool:
    return value is None or str(value).strip() == ""


def _rows_from_csv(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty manifest")
        missing = [c for c in MANIFEST_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        return list(reader)


def _rows_from_json(path: Path):
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(data, list):
        return data, None, None
    if isinstance(data, dict) and "segments" in data:
        return data["segments"], data.get("speakers", []), data.get("programs", [])
    raise SchemaError(f"{path}: JSON manifest must be a list of rows or an object with 'segments'")


def ingest_manifest(path, check_audio: bool = True) -> Corpus:
    """Read a CSV or JSON manifest into a cross-linked :class:`Corpus`.

    Speaker and program attributes may be given on every row or only once;
    rows that leave them blank must refer to an id defined elsewhere.
    Relative audio paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"manifest {path} does not exist")
    speaker_rows, program_rows = [], []
    if path.suffix.lower() == ".json":
        rows, speaker_rows, program_rows = _rows_from_json(path)
        speaker_rows = speaker_rows or []
        program_rows = program_rows or []
    else:
        rows = _rows_from_csv(path)

    speakers: Dict[str, SpeakerRecord] = {}
    programs: Dict[str, ProgramRecord] = {}

    def add_speaker(sid, gender, birth_year):
        try:
            g = Gender(str(gender).strip())
        except ValueError:
            raise SchemaError(f"speaker {sid!r}: gender must be F or M, got {gender!r}") from None
        rec = SpeakerRecord(sid, g, _parse_int(birth_year, f"speaker {sid!r} birth_year"))
        if speakers.setdefault(sid, rec) != rec:
            raise SchemaError(f"speaker {sid!r} defined with conflicting attributes")

    def add_program(pid, year):
        year = _parse_int(year, f"program {pid!r} recording_year")
        try:
            rec = ProgramRecord(pid, year, derive_period(year))
        except YearOutsideCorpusPeriods as exc:
            raise SchemaError(f"program {pid!r}: {exc}") from None
        if programs.setdefault(pid, rec) != rec:
            raise SchemaError(f"program {pid!r} defined with conflicting attributes")

    for row in speaker_rows:
        add_speaker(str(row["speaker_id"]), row.get("gender"), row.get("birth_year"))
    for row in program_rows:
        add_program(str(row["program_id"]), row.get("recording_year"))

    for i, row in enumerate(rows):
        if not isinstance(row, dict):
            raise SchemaError(f"row {i}: expected a mapping")
        for key in ("speaker_id", "program_id", "raw_path", "start_s", "end_s"):
            if _blank(row.get(key)):
                raise SchemaError(f"row {i}: field {key!r} is required")
        sid, pid = str(row["speaker_id"]).strip(), str(row["program_id"]).strip()
        if not (_blank(row.get("gender")) and _blank(row.get("birth_year"))):
            add_speaker(sid, row.get("gender"), row.get("birth_year"))
        if not _blank(row.get("recording_year")):
            add_program(pid, row.get("recording_year"))

    segments = []
    owner: Dict[str, str] = {}
    root = str(path.parent.resolve())
    for i, row in enumerate(rows):
        sid, pid = str(row["speaker_id"]).strip(), str(row["program_id"]).strip()
        if sid not in speakers:
            raise DanglingReference(f"row {i}: unknown speaker {sid!r}")
        if pid not in programs:
            raise DanglingReference(f"row {i}: unknown program {pid!r}")
        # programs nest inside speakers
        if owner.setdefault(pid, sid) != sid:
            raise SchemaError(f"program {pid!r} is attributed to more than one speaker")
        derive_age(speakers[sid], programs[pid])
        sep = None if _blank(row.get("separated_path")) else str(row["separated_path"]).strip()
        seg = SegmentRecord(
            speaker_id=sid,
            program_id=pid,
            raw_audio_path=str(row["raw_path"]).strip(),
            separated_audio_path=sep,
            start_s=_parse_float(row["start_s"], f"row {i} start_s"),
            end_s=_parse_float(row["end_s"], f"row {i} end_s"),
        )
        segments.append(seg)

    corpus = Corpus(speakers=dict(speakers), programs=dict(programs), segments=tuple(segments), root=root)
    if check_audio:
        for seg in corpus.segments:
            for p in (seg.raw_audio_path, seg.separated_audio_path):
                if p is not None and not os.path.isfile(corpus.resolve(p)):
                    raise MissingAudio(f"audio file {p!r} not found")
    return corpus


def write_manifest(path, rows) -> None:
    """Write manifest rows (mappings keyed by ``MANIFEST_COLUMNS``) as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in MANIFEST_COLUMNS})


@dataclass(frozen=True)
class TelephoneCheck:
    is_telephone: bool
    high_band_ratio: float
    sample_rate: float


def detect_telephone_quality(samples, sample_rate, threshold=TELEPHONE_RATIO,
                             cutoff_hz=TELEPHONE_CUTOFF_HZ) -> TelephoneCheck:
    """Flag narrowband (telephone-like) audio.

    The signal must be given at its native sample rate. Audio sampled at
    8 kHz or less is narrowband by construction; otherwise the fraction of
    Welch power above ``cutoff_hz`` is compared with ``threshold``.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < sample_rate:
        raise TooShort("telephone detection needs at least 1 s of audio")
    if sample_rate <= 8000:
        return TelephoneCheck(True, 0.0, float(sample_rate))
    freqs, pxx = sps.welch(x, fs=sample_rate, nperseg=1024)
    total = pxx.sum()
    ratio = float(pxx[freqs >= cutoff_hz].sum() / total) if total > 0 else 0.0
    return TelephoneCheck(ratio < threshold, ratio, float(sample_rate))
