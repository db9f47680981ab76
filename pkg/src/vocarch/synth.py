"""Synthetic source-filter voices and planted-effect corpora.

The oracle stands in for real recordings: a band-limited impulse train
drives four resonators tuned to a uniform tube, the "separated" signal is
the clean synthesis and the "raw" signal adds shaped noise and, optionally,
a telephone channel. A corpus plan plants a known mixed-model response so
that every downstream stage can be checked against ground truth.
"""
from __future__ import annotations

import csv
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
from scipy import signal as sps

from .corpus import PERIOD_YEARS, AgeGroup, Gender, Period, write_manifest
from .errors import ParameterOutOfRange
from .frontend import Signal, write_wav

SPEED_OF_SOUND_CM_S = 35000.0
DEFAULT_BANDWIDTHS = (60.0, 90.0, 120.0, 150.0)
TELEPHONE_BAND = (300.0, 3400.0)
SYNTH_RATE = 16000

GROUND_TRUTH_COLUMNS = (
    "speaker_id", "program_id", "chunk_idx", "target_base_f0_st",
    "target_vtl_cm", "u_speaker", "u_program", "eps",
)


def tube_formants(length_cm: float, n: int = 4, c: float = SPEED_OF_SOUND_CM_S) -> np.ndarray:
    """Quarter-wave resonances ``(2i - 1) c / 4L`` of a uniform tube."""
    i = np.arange(1, n + 1)
    return (2 * i - 1) * c / (4.0 * length_cm)


def _f0_per_sample(f0, n, rate):
    if np.isscalar(f0):
        return np.full(n, float(f0))
    f0 = np.asarray(f0, dtype=float)
    if f0.size == n:
        return f0
    # evenly spaced control points spanning the signal
    return np.interp(np.linspace(0, 1, n), np.linspace(0, 1, f0.size), f0)


def pulse_train(f0, duration_s: float, rate: float = SYNTH_RATE, half_width: int = 16,
                phase: float = 0.0) -> np.ndarray:
    """Band-limited unit impulse train following an F0 contour.

    Pulses sit at exact (fractional) times where the integrated phase
    crosses an integer and are rendered as Kaiser-windowed sincs, so the
    period is not rounded to whole samples.
    """
    n = int(round(duration_s * rate))
    if n <= 0:
        return np.zeros(0)
    f = _f0_per_sample(f0, n, rate)
    cyc = phase + np.concatenate([[0.0], np.cumsum(f[:-1])]) / rate
    k0, k1 = int(np.ceil(cyc[0])), int(np.floor(cyc[-1]))
    if k1 < k0:
        return np.zeros(n)
    ks = np.arange(k0, k1 + 1, dtype=float)
    t = np.interp(ks, cyc, np.arange(n, dtype=float))
    offs = np.arange(-half_width, half_width + 1)
    base = np.floor(t).astype(int)
    pos = base[:, None] + offs[None, :]
    dist = pos - t[:, None]
    # cutoff slightly below Nyquist
    kern = 0.9 * np.sinc(0.9 * dist) * np.kaiser(2 * half_width + 1, 8.0)[None, :]
    y = np.zeros(n + 2 * half_width + 2)
    np.add.at(y, (pos + half_width + 1).ravel(), kern.ravel())
    return y[half_width + 1: half_width + 1 + n]


def resonator_sos(freq: float, bw: float, rate: float) -> np.ndarray:
    """Unity-DC-gain two-pole resonator as one SOS row."""
    r = np.exp(-np.pi * bw / rate)
    a1 = -2 * r * np.cos(2 * np.pi * freq / rate)
    a2 = r * r
    g = 1 + a1 + a2
    return np.array([g, 0.0, 0.0, 1.0, a1, a2])


def formant_filter(x, formants, bandwidths, rate):
    sos = np.vstack([resonator_sos(f, b, rate) for f, b in zip(formants, bandwidths)])
    return sps.sosfilt(sos, x)


def tilt(x, rate, corner_hz=50.0):
    """First-order low-pass giving a -6 dB/octave slope above ``corner_hz``."""
    a = np.exp(-2 * np.pi * corner_hz / rate)
    return sps.lfilter([1 - a], [1, -a], x)


def synth_vowel(f0, formants, bandwidths, duration_s, rate=SYNTH_RATE, peak=0.5, phase=0.0):
    """Impulse-train source through a resonator cascade with spectral tilt."""
    src = pulse_train(f0, duration_s, rate, phase=phase)
    if src.size == 0:
        return Signal(src, rate)
    y = tilt(formant_filter(src, formants, bandwidths, rate), rate)
    top = np.abs(y).max()
    if top > 0:
        y = y * (peak / top)
    return Signal(y, rate)


def synth_voice(f0_contour, tube_length_cm: float, duration_s: float, rate: float = SYNTH_RATE,
                bandwidths=DEFAULT_BANDWIDTHS, phase: float = 0.0) -> Signal:
    """Source-filter voice for a uniform tube of ``tube_length_cm``."""
    f0 = np.atleast_1d(np.asarray(f0_contour, dtype=float))
    if f0.size and (f0.min() <= 30 or f0.max() >= 1000):
        raise ParameterOutOfRange("f0 contour must lie within (30, 1000) Hz")
    if not 8 < tube_length_cm < 25:
        raise ParameterOutOfRange("tube length must lie within (8, 25) cm")
    if duration_s <= 0:
        return Signal(np.zeros(0), rate)
    fm = tube_formants(tube_length_cm)
    if fm[-1] >= rate / 2:
        raise ParameterOutOfRange("fourth resonance above Nyquist")
    contour = float(f0[0]) if f0.size == 1 else f0
    return synth_vowel(contour, fm, bandwidths, duration_s, rate, phase=phase)


def telephone_filter(x, rate, band=TELEPHONE_BAND, order=8):
    """Zero-phase 300-3400 Hz band-pass standing in for a telephone channel."""
    sos = sps.butter(order, band, btype="bandpass", fs=rate, output="sos")
    return sps.sosfiltfilt(sos, x)


def shaped_noise(n, rng, exponent=1.0):
    """Gaussian noise with a ``1 / f**exponent`` power spectrum (pink by default)."""
    if n == 0:
        return np.zeros(0)
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=float)
    f[0] = 1.0
    spec /= f ** (exponent / 2)
    spec[0] = 0.0  # zero mean, so unit std is unit power
    y = np.fft.irfft(spec, n)
    return y / (np.sqrt(np.mean(y ** 2)) or 1.0)


def degrade(sig: Signal, snr_db: float, telephone: bool = False, rng=None):
    """Return ``(raw, separated)``: noisy (optionally telephone) copy and the clean input."""
    if not -5 <= snr_db <= 60:
        raise ParameterOutOfRange("snr_db must lie within [-5, 60]")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = sig.samples
    p_sig = np.mean(x ** 2) if x.size else 0.0
    noise = shaped_noise(x.size, rng) * np.sqrt(p_sig / 10 ** (snr_db / 10))
    raw = x + noise
    if telephone:
        raw = telephone_filter(raw, sig.sample_rate)
    return Signal(raw, sig.sample_rate), Signal(x.copy(), sig.sample_rate)


CONSONANT_PERIOD_S = 0.43
CONSONANT_S = 0.04
CONSONANT_LEVEL_DB = -6.0
CONSONANT_HIGHPASS_HZ = 3000.0


def insert_consonants(sig: Signal, rng, period_s=CONSONANT_PERIOD_S, dur_s=CONSONANT_S,
                      level_db=CONSONANT_LEVEL_DB) -> Signal:
    """Replace short stretches of a voice by high-passed noise bursts.

    Vowel-only synthesis has almost no energy above 4 kHz, unlike running
    speech whose fricatives make broadcast audio broadband. The bursts
    restore that property (so a wideband recording is not mistaken for a
    telephone channel) without touching the voiced frames in between.
    """
    x = sig.samples.copy()
    rate = sig.sample_rate
    n, w = x.size, int(round(dur_s * rate))
    if n == 0 or w == 0:
        return Signal(x, rate)
    rms = np.sqrt(np.mean(x ** 2))
    sos = sps.butter(4, CONSONANT_HIGHPASS_HZ, "highpass", fs=rate, output="sos")
    ramp = int(round(0.005 * rate))
    env = np.ones(w)
    env[:ramp] = np.linspace(0, 1, ramp, endpoint=False)
    env[w - ramp:] = env[:ramp][::-1]
    for start in np.arange(period_s / 2, n / rate - dur_s, period_s):
        i = int(round(start * rate))
        burst = sps.sosfilt(sos, rng.standard_normal(w))
        burst *= rms * 10 ** (level_db / 20) / (np.sqrt(np.mean(burst ** 2)) or 1.0)
        x[i:i + w] = x[i:i + w] * (1 - env) + burst * env
    return Signal(x, rate)


# ---------------------------------------------------------------------------
# corpus plans

AGE_RANGES = {
    AgeGroup.A20_35: (22, 34),
    AgeGroup.A36_50: (37, 49),
    AgeGroup.A51_65: (52, 64),
    AgeGroup.A65plus: (67, 80),
}


@dataclass(frozen=True)
class Effects:
    """Planted response model for base-F0 (semitones) and tube length (cm).

    ``base_f0_st = intercept - gender_gap_st * [M] + age_slope * (age - age_ref)
    + age_slope_male * (age - age_ref) * [M] + period_offsets[period]
    + age_period_slopes[period] * (age - age_ref) + u_speaker + u_program + eps``
    """

    intercept_st: float = 12.0
    gender_gap_st: float = 9.0
    age_ref: float = 50.0
    age_slope_st: float = -0.03
    age_slope_male_st: float = 0.03
    period_offsets_st: Dict[str, float] = field(default_factory=lambda: {
        "P1955": 0.0, "P1975": -0.3, "P1995": -0.6, "P2015": -0.8})
    age_period_slopes_st: Dict[str, float] = field(default_factory=lambda: {
        "P1955": 0.0, "P1975": 0.0, "P1995": 0.0, "P2015": 0.0})
    sd_speaker_st: float = 1.2
    sd_program_st: float = 0.5
    sd_resid_st: float = 0.4
    vtl_female_cm: float = 14.8
    vtl_male_cm: float = 16.5
    vtl_sd_speaker_cm: float = 0.4

    def fixed_st(self, gender: str, age: float, period: str) -> float:
        male = 1.0 if gender == "M" else 0.0
        a = age - self.age_ref
        return (self.intercept_st - self.gender_gap_st * male + self.age_slope_st * a
                + self.age_slope_male_st * a * male + self.period_offsets_st.get(period, 0.0)
                + self.age_period_slopes_st.get(period, 0.0) * a)

    def fixed_vtl(self, gender: str) -> float:
        return self.vtl_male_cm if gender == "M" else self.vtl_female_cm


NULL_EFFECTS = Effects(
    gender_gap_st=0.0, age_slope_st=0.0, age_slope_male_st=0.0,
    period_offsets_st={"P1955": 0.0, "P1975": 0.0, "P1995": 0.0, "P2015": 0.0},
    sd_speaker_st=0.0, sd_program_st=0.0, sd_resid_st=0.0, vtl_sd_speaker_cm=0.0,
)


@dataclass(frozen=True)
class SpeakerPlan:
    speaker_id: str
    gender: str
    birth_year: int
    recording_years: Sequence[int]
    tube_length_cm: float
    u_speaker: float
    u_programs: Sequence[float]
    eps: Sequence[Sequence[float]]

    def program_ids(self) -> List[str]:
        return [f"{self.speaker_id}_p{k}" for k in range(len(self.recording_years))]


@dataclass(frozen=True)
class SynthPlan:
    speakers: Sequence[SpeakerPlan]
    effects: Effects = Effects()
    seed: int = 0
    chunk_s: float = 12.5
    snr_db: float = 40.0
    telephone: bool = False
    vibrato: bool = False
    consonants: bool = True
    reference_hz: float = 100.0
    rate: int = SYNTH_RATE

    def target_st(self, sp: SpeakerPlan, prog: int, chunk: int) -> float:
        age = sp.recording_years[prog] - sp.birth_year
        period = _period_of(sp.recording_years[prog])
        return (self.effects.fixed_st(sp.gender, age, period) + sp.u_speaker
                + sp.u_programs[prog] + sp.eps[prog][chunk])


def _period_of(year):
    for period, years in PERIOD_YEARS.items():
        if year in years:
            return period.value
    raise ParameterOutOfRange(f"recording year {year} outside corpus periods")


def stream_rng(seed: int, key: str) -> np.random.Generator:
    """Per-key generator derived from the seed by a stable (CRC-32) hash."""
    return np.random.default_rng([int(seed), zlib.crc32(key.encode("utf-8"))])


def make_plan(seed: int = 0, speakers_per_cell: int = 1, programs_per_speaker: int = 1,
              chunks_per_program: int = 1, effects: Effects = None, **kwargs) -> SynthPlan:
    """Table-style design: periods x age groups x genders, ``speakers_per_cell`` each."""
    effects = effects or Effects()
    speakers = []
    for period in Period:
        years = list(PERIOD_YEARS[period])
        for group in AgeGroup:
            for gender in Gender:
                for k in range(speakers_per_cell):
                    sid = f"{period.value}_{group.value}_{gender.value}_{k}"
                    rng = stream_rng(seed, sid)
                    rec0 = int(rng.choice(years))
                    age = int(rng.integers(AGE_RANGES[group][0], AGE_RANGES[group][1] + 1))
                    rec_years = [rec0] + [int(rng.choice(years)) for _ in range(programs_per_speaker - 1)]
                    # later programs must not move the speaker across an age boundary
                    rec_years = [y if _same_group(age + y - rec0, group) else rec0 for y in rec_years]
                    u_s = effects.sd_speaker_st * rng.standard_normal()
                    u_p = effects.sd_program_st * rng.standard_normal(programs_per_speaker)
                    eps = effects.sd_resid_st * rng.standard_normal((programs_per_speaker, chunks_per_program))
                    tube = effects.fixed_vtl(gender.value) + effects.vtl_sd_speaker_cm * rng.standard_normal()
                    speakers.append(SpeakerPlan(
                        speaker_id=sid, gender=gender.value, birth_year=rec0 - age,
                        recording_years=tuple(rec_years), tube_length_cm=float(np.clip(tube, 11.0, 20.0)),
                        u_speaker=float(u_s), u_programs=tuple(map(float, u_p)),
                        eps=tuple(tuple(map(float, row)) for row in eps),
                    ))
    return SynthPlan(speakers=tuple(speakers), effects=effects, seed=seed, **kwargs)


def _same_group(age, group):
    bounds = {AgeGroup.A20_35: (20, 35), AgeGroup.A36_50: (36, 50),
              AgeGroup.A51_65: (51, 65), AgeGroup.A65plus: (66, 200)}[group]
    return bounds[0] <= age <= bounds[1]


VIBRATO_DEPTH_ST = 2.0
VIBRATO_RATE_HZ = 5.0


def chunk_contour(target_st, duration_s, rate, reference_hz=100.0, vibrato=False):
    """F0 contour whose 7th decile equals ``target_st``.

    With vibrato the contour is a +-2 st sinusoid; its 7th decile sits
    ``2 sin(0.2 pi)`` st above the centre, so the centre is lowered by that much.
    """
    f_target = reference_hz * 2 ** (target_st / 12)
    if not vibrato:
        return f_target
    n = int(round(duration_s * rate))
    t = np.arange(n) / rate
    centre = target_st - VIBRATO_DEPTH_ST * np.sin(0.2 * np.pi)
    st = centre + VIBRATO_DEPTH_ST * np.sin(2 * np.pi * VIBRATO_RATE_HZ * t)
    return reference_hz * 2 ** (st / 12)


def _render_speaker(plan: SynthPlan, sp: SpeakerPlan, out: Path):
    rng = stream_rng(plan.seed, sp.speaker_id + "/audio")
    rows, truth = [], []
    for p, pid in enumerate(sp.program_ids()):
        for c in range(len(sp.eps[p])):
            target = plan.target_st(sp, p, c)
            contour = chunk_contour(target, plan.chunk_s, plan.rate, plan.reference_hz, plan.vibrato)
            clean = synth_voice(contour, sp.tube_length_cm, plan.chunk_s, plan.rate,
                                phase=float(rng.uniform()))
            if plan.consonants:
                clean = insert_consonants(clean, rng)
            raw, sep = degrade(clean, plan.snr_db, plan.telephone, rng)
            stem = f"{pid}_c{c}"
            raw_rel, sep_rel = f"audio/{stem}_raw.wav", f"audio/{stem}_sep.wav"
            write_wav(out / raw_rel, raw)
            write_wav(out / sep_rel, sep)
            rows.append({
                "speaker_id": sp.speaker_id, "gender": sp.gender, "birth_year": sp.birth_year,
                "program_id": pid, "recording_year": sp.recording_years[p],
                "raw_path": raw_rel, "separated_path": sep_rel,
                "start_s": "0.0", "end_s": f"{plan.chunk_s:.3f}",
            })
            truth.append({
                "speaker_id": sp.speaker_id, "program_id": pid, "chunk_idx": c,
                "target_base_f0_st": repr(target), "target_vtl_cm": repr(sp.tube_length_cm),
                "u_speaker": repr(sp.u_speaker), "u_program": repr(sp.u_programs[p]),
                "eps": repr(sp.eps[p][c]),
            })
    return rows, truth


def synth_corpus(plan: SynthPlan, outdir, threads: int = 1) -> Dict[str, str]:
    """Render a plan to WAV files, ``manifest.csv`` and ``ground_truth.csv``.

    Each chunk becomes one segment (raw and separated WAV). Output is a
    pure function of the plan: every speaker draws from its own generator,
    so the thread count cannot change a byte.
    """
    out = Path(outdir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda sp: _render_speaker(plan, sp, out), plan.speakers))
    else:
        parts = [_render_speaker(plan, sp, out) for sp in plan.speakers]
    rows = [r for part in parts for r in part[0]]
    truth = [t for part in parts for t in part[1]]
    write_manifest(out / "manifest.csv", rows)
    with open(out / "ground_truth.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=GROUND_TRUTH_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(truth)
    return {"manifest": str(out / "manifest.csv"), "ground_truth": str(out / "ground_truth.csv")}
