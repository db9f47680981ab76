"""Resumable pipeline stages over a working directory of CSV/JSON artifacts.

Stage chain: ``extract -> filter -> features -> fit -> report``; ``synth``
is standalone and writes an oracle corpus whose manifest the chain can
consume. Each stage records a content hash of its inputs and settings in
``stamps/<stage>.json`` and is skipped when nothing changed.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from . import consensus, features, formants, mixed, pitch, synth
from .corpus import AgeGroup, Period, detect_telephone_quality, ingest_manifest
from .errors import ConfigError, MissingStageArtifact, TooShort
from .frontend import FrameGrid, read_wav

log = logging.getLogger(__name__)

STAGES = ("extract", "filter", "features", "fit", "report")
RESPONSES = ("base_f0_st", "vtl_cm")


@dataclass(frozen=True)
class RunConfig:
    """All tunable settings of a run; a JSON config file may override any field."""

    workdir: str = "work"
    manifest: Optional[str] = None
    f0_gross: float = consensus.F0_GROSS
    formant_gross: float = consensus.FORMANT_GROSS
    min_valid_s: float = consensus.MIN_VALID_S
    telephone_ratio: float = 0.005
    formant_preset: str = "default"
    semitone_ref_hz: float = features.SEMITONE_REF_HZ
    alpha: float = 0.05
    threads: int = 1
    seed: int = 0
    speakers_per_cell: int = 1
    programs_per_speaker: int = 2
    chunks_per_program: int = 2
    chunk_s: float = 12.5
    snr_db: float = 40.0
    telephone: bool = False
    vibrato: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("f0_gross", "formant_gross", "telephone_ratio"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and 0.0 < v <= 1.0):
                raise ConfigError(name, f"must lie in (0, 1], got {v!r}")
        if not (0.0 < self.alpha < 1.0):
            raise ConfigError("alpha", f"must lie in (0, 1), got {self.alpha!r}")
        for name in ("min_valid_s", "semitone_ref_hz", "chunk_s"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, f"must be positive, got {getattr(self, name)!r}")
        if self.formant_preset not in ("default", "alt"):
            raise ConfigError("formant_preset", f"must be 'default' or 'alt', got {self.formant_preset!r}")
        for name in ("threads", "speakers_per_cell", "programs_per_speaker", "chunks_per_program"):
            v = getattr(self, name)
            if not (isinstance(v, int) and not isinstance(v, bool) and v >= 1):
                raise ConfigError(name, f"must be an integer >= 1, got {v!r}")
        if not (-5.0 <= self.snr_db <= 60.0):
            raise ConfigError("snr_db", f"must lie in [-5, 60], got {self.snr_db!r}")

    @classmethod
    def load(cls, config_path=None, **overrides) -> "RunConfig":
        """Defaults, then the JSON file, then explicit overrides (``None`` = unset)."""
        names = {f.name: f for f in fields(cls)}
        values = {}
        if config_path:
            try:
                with open(config_path) as fh:
                    data = json.load(fh)
            except FileNotFoundError:
                raise ConfigError("config", f"file {config_path} not found") from None
            except json.JSONDecodeError as exc:
                raise ConfigError("config", f"invalid JSON: {exc}") from None
            if not isinstance(data, dict):
                raise ConfigError("config", "top level must be an object")
            values.update(data)
        values.update({k: v for k, v in overrides.items() if v is not None})
        if "threads" not in values:
            env = os.environ.get("VOCARCH_THREADS")
            try:
                values["threads"] = int(env) if env else default_threads()
            except ValueError:
                raise ConfigError("threads", "VOCARCH_THREADS must be an integer") from None
        for key, val in values.items():
            if key not in names:
                raise ConfigError(key, "unknown field")
            values[key] = _coerce(key, names[key].type, val)
        return cls(**values)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name, typ, val):
    typ = str(typ)
    try:
        if "bool" in typ:
            if isinstance(val, str):
                return val.lower() in ("1", "true", "yes")
            return bool(val)
        if typ == "int" and not isinstance(val, bool):
            if isinstance(val, float) and not val.is_integer():
                raise ValueError
            return int(val)
        if typ == "float":
            return float(val)
    except (TypeError, ValueError):
        raise ConfigError(name, f"cannot interpret {val!r} as {typ}") from None
    return val


def default_threads() -> int:
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# workdir helpers

class Workdir:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def require(self, stage: str, *parts) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise MissingStageArtifact(f"{stage} needs {p}; run the preceding stage first")
        return p


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _stamp_ok(wd: Workdir, stage: str, key: str, outputs: Iterable[Path]) -> bool:
    p = wd.path("stamps", f"{stage}.json")
    if not p.exists() or not all(Path(o).exists() for o in outputs):
        return False
    with open(p) as fh:
        return json.load(fh).get("key") == key


def _write_stamp(wd: Workdir, stage: str, key: str) -> None:
    wd.path("stamps").mkdir(parents=True, exist_ok=True)
    consensus.save_json(wd.path("stamps", f"{stage}.json"), {"stage": stage, "key": key})


def _pmap(fn: Callable, items: List, threads: int) -> List:
    """Ordered map; results come back in input order whatever the thread count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# stages

def run_synth(cfg: RunConfig) -> Dict[str, str]:
    """Render an oracle corpus into ``<workdir>/synth``."""
    wd = Workdir(cfg.workdir)
    out = wd.path("synth")
    key = _digest({k: getattr(cfg, k) for k in (
        "seed", "speakers_per_cell", "programs_per_speaker", "chunks_per_program",
        "chunk_s", "snr_db", "telephone", "vibrato", "semitone_ref_hz")})
    targets = {"manifest": str(out / "manifest.csv"), "ground_truth": str(out / "ground_truth.csv")}
    if _stamp_ok(wd, "synth", key, map(Path, targets.values())):
        log.info("synth: up to date")
        return targets
    plan = synth.make_plan(cfg.seed, cfg.speakers_per_cell, cfg.programs_per_speaker,
                           cfg.chunks_per_program, chunk_s=cfg.chunk_s, snr_db=cfg.snr_db,
                           telephone=cfg.telephone, vibrato=cfg.vibrato, reference_hz=cfg.semitone_ref_hz)
    res = synth.synth_corpus(plan, out, threads=cfg.threads)
    _write_stamp(wd, "synth", key)
    return res


def _manifest_path(cfg: RunConfig, wd: Workdir) -> Path:
    if cfg.manifest:
        p = Path(cfg.manifest)
        if not p.exists():
            raise MissingStageArtifact(f"manifest {p} not found")
        return p
    return wd.require("extract", "synth", "manifest.csv")


def _extract_segment(job):
    """Tracks for one segment, or a rejection status."""
    seg, raw_path, sep_path, gender, cfg = job
    raw = read_wav(raw_path).crop(seg.start_s, seg.end_s)
    try:
        tel = detect_telephone_quality(raw.samples, raw.sample_rate, cfg.telephone_ratio)
    except TooShort:
        return "too_short", None, None, None
    if tel.is_telephone:
        return "telephone", tel.high_band_ratio, None, None
    signals = {"raw": raw}
    if sep_path:
        signals["separated"] = read_wav(sep_path).crop(seg.start_s, seg.end_s)
    duration = min(s.duration_s for s in signals.values())
    grid = FrameGrid.for_duration(duration)
    fcfg = formants.config_for_gender(gender, cfg.formant_preset)
    ptracks, ftracks = [], []
    try:
        for src, sig in signals.items():
            ptracks.extend(pitch.run_all(sig, src, grid))
            ftracks.append(formants.estimate_formants(sig, grid, fcfg, src))
    except TooShort:
        return "too_short", tel.high_band_ratio, None, None
    return "ok", tel.high_band_ratio, ptracks, ftracks


def run_extract(cfg: RunConfig) -> Path:
    wd = Workdir(cfg.workdir)
    manifest = _manifest_path(cfg, wd)
    corpus = ingest_manifest(manifest)
    audio = sorted({corpus.resolve(p) for s in corpus.segments
                    for p in (s.raw_audio_path, s.separated_audio_path) if p})
    key = _digest({
        "manifest": file_hash(manifest), "audio": {os.path.basename(a): file_hash(a) for a in audio},
        "telephone_ratio": cfg.telephone_ratio, "formant_preset": cfg.formant_preset,
    })
    index_path = wd.path("extract.json")
    if _stamp_ok(wd, "extract", key, [index_path, wd.path("corpus.json")]):
        log.info("extract: up to date")
        return index_path
    wd.path("tracks").mkdir(parents=True, exist_ok=True)
    consensus.save_json(wd.path("corpus.json"), corpus.to_dict())
    jobs = []
    for seg in corpus.segments:
        gender = corpus.speakers[seg.speaker_id].gender.value
        jobs.append((seg, corpus.resolve(seg.raw_audio_path), corpus.resolve(seg.separated_audio_path),
                     gender, cfg))
    results = _pmap(_extract_segment, jobs, cfg.threads)
    index = []
    for i, (job, (status, ratio, ptracks, ftracks)) in enumerate(zip(jobs, results)):
        seg = job[0]
        age, group = corpus.age_of(seg.speaker_id, seg.program_id)
        prog = corpus.programs[seg.program_id]
        sid = f"{i:05d}_{seg.program_id}"
        if status == "ok":
            pitch.write_tracks_csv(wd.path("tracks", f"{sid}.pitch.csv"), ptracks)
            formants.write_formants_csv(wd.path("tracks", f"{sid}.formants.csv"), ftracks)
        index.append({
            "segment_id": sid, "speaker_id": seg.speaker_id, "program_id": seg.program_id,
            "gender": job[3], "age_years": age, "age_group": group.value, "period": prog.period.value,
            "start_s": seg.start_s, "end_s": seg.end_s, "status": status,
            "telephone_ratio": ratio,
        })
    consensus.save_json(index_path, {"segments": index})
    _write_stamp(wd, "extract", key)
    return index_path


def _fuse_one(job):
    wd, sid, f0_gross, formant_gross = job
    ptracks = pitch.read_tracks_csv(wd.path("tracks", f"{sid}.pitch.csv"))
    ftracks = formants.read_formants_csv(wd.path("tracks", f"{sid}.formants.csv"))
    return consensus.fuse_segment(ptracks, ftracks, f0_gross, formant_gross)


def run_filter(cfg: RunConfig) -> Path:
    wd = Workdir(cfg.workdir)
    index_path = wd.require("filter", "extract.json")
    index = _read_json(index_path)["segments"]
    ok = [s for s in index if s["status"] == "ok"]
    key = _digest({"extract": _stamp_key(wd, "extract"), "f0_gross": cfg.f0_gross,
                   "formant_gross": cfg.formant_gross, "min_valid_s": cfg.min_valid_s})
    outputs = [wd.path("retention.json"), wd.path("admission.json")]
    if _stamp_ok(wd, "filter", key, outputs):
        log.info("filter: up to date")
        return outputs[0]
    wd.path("fused").mkdir(parents=True, exist_ok=True)
    fused = _pmap(_fuse_one, [(wd, s["segment_id"], cfg.f0_gross, cfg.formant_gross) for s in ok], cfg.threads)
    valid: Dict[str, int] = {}
    for s in index:
        valid.setdefault(s["speaker_id"], 0)
    segs = {}
    for s, seg in zip(ok, fused):
        consensus.write_fused_csv(wd.path("fused", f"{s['segment_id']}.csv"), seg)
        valid[s["speaker_id"]] += int(seg.valid_pitch.sum())
        segs[s["segment_id"]] = seg
    report = consensus.retention_report(segs)
    report["degraded_segments"] = sorted(k for k, v in segs.items() if v.degraded)
    consensus.save_json(outputs[0], report)
    adm = consensus.reject_short_speakers(valid, min_valid_s=cfg.min_valid_s)
    consensus.save_json(outputs[1], {
        "min_valid_s": cfg.min_valid_s, "admitted": list(adm.admitted),
        "rejected": adm.rejected, "valid_seconds": adm.valid_seconds,
        "rejected_segments": {s["segment_id"]: s["status"] for s in index if s["status"] != "ok"},
    })
    _write_stamp(wd, "filter", key)
    return outputs[0]


def _stamp_key(wd: Workdir, stage: str) -> str:
    p = wd.path("stamps", f"{stage}.json")
    return _read_json(p)["key"] if p.exists() else ""


def run_features(cfg: RunConfig) -> Path:
    wd = Workdir(cfg.workdir)
    index = _read_json(wd.require("features", "extract.json"))["segments"]
    admission = _read_json(wd.require("features", "admission.json"))
    key = _digest({"filter": _stamp_key(wd, "filter"), "semitone_ref_hz": cfg.semitone_ref_hz})
    out = wd.path("features.csv")
    if _stamp_ok(wd, "features", key, [out]):
        log.info("features: up to date")
        return out
    admitted = set(admission["admitted"])
    streams: Dict[tuple, dict] = {}
    for s in index:
        if s["status"] != "ok" or s["speaker_id"] not in admitted:
            continue
        k = (s["speaker_id"], s["program_id"])
        streams.setdefault(k, {"meta": s, "segments": []})["segments"].append(s)
    rows = []
    for (spk, prog), st in streams.items():
        f0s, fms = [], []
        for s in sorted(st["segments"], key=lambda r: (r["start_s"], r["segment_id"])):
            fused = consensus.read_fused_csv(wd.require("features", "fused", f"{s['segment_id']}.csv"))
            f0s.append(fused.consensus_f0[fused.valid_pitch])
            fms.append(fused.formants[fused.valid_pitch])
        chunks = features.make_chunks(spk, prog, np.concatenate(f0s), np.concatenate(fms))
        meta = st["meta"]
        for c, ch in enumerate(chunks):
            cf = features.chunk_features(ch, cfg.semitone_ref_hz)
            rows.append({
                "speaker_id": spk, "program_id": prog, "gender": meta["gender"],
                "age_years": float(meta["age_years"]), "period": meta["period"], "chunk_idx": c,
                "base_f0_hz": cf.base_f0_hz, "base_f0_st": cf.base_f0_st, "vtl_cm": cf.vtl_cm,
                "n_frames_pitch": cf.n_frames_pitch, "n_frames_formant": cf.n_frames_formant,
            })
    features.write_features_csv(out, rows)
    _write_stamp(wd, "features", key)
    return out


def fit_response(rows, response: str, alpha: float) -> dict:
    obs = mixed.Observations.from_rows(rows, response)
    maximal = mixed.fit(obs, mixed.ModelSpec.maximal())
    simp = mixed.simplify(obs, mixed.ModelSpec.maximal(), alpha)
    return {
        "response": response,
        "maximal": maximal.to_dict(),
        "simplification": simp.audit(),
        "dropped": simp.dropped,
        "minimal": simp.fit.to_dict(),
    }


def run_fit(cfg: RunConfig) -> Path:
    wd = Workdir(cfg.workdir)
    feat = wd.require("fit", "features.csv")
    key = _digest({"features": file_hash(feat), "alpha": cfg.alpha})
    out = wd.path("fit_report.json")
    if _stamp_ok(wd, "fit", key, [out]):
        log.info("fit: up to date")
        return out
    rows = features.read_features_csv(feat)
    report = {"alpha": cfg.alpha, "semitone_ref_hz": cfg.semitone_ref_hz,
              "responses": {r: fit_response(rows, r, cfg.alpha) for r in RESPONSES}}
    consensus.save_json(out, report)
    _write_stamp(wd, "fit", key)
    return out


def fit_from_report(entry: dict) -> mixed.FitResult:
    """Rebuild a prediction-capable fit from its report entry."""
    spec = mixed.ModelSpec(frozenset(entry["terms"]), entry["random"])
    cols = list(entry["coefficients"])
    beta = np.array([entry["coefficients"][c]["estimate"] for c in cols])
    se = np.array([entry["coefficients"][c]["std_error"] for c in cols])
    vc = entry["variance_components"]
    return mixed.FitResult(
        spec=spec, columns=cols, coefficients=beta, std_errors=se,
        sigma2_speaker=vc["speaker"], sigma2_program=vc["program_in_speaker"], sigma2_residual=vc["residual"],
        loglik_reml=entry["loglik"]["reml"], loglik_ml=entry["loglik"]["ml"], ml_variances=(0.0, 0.0, 0.0),
        fitted=np.zeros(0), r2_marginal=entry["r_squared"]["marginal"],
        r2_conditional=entry["r_squared"]["conditional"], sigma2_fixed=entry["sigma2_fixed"],
        age_center=entry["age_center"], n_obs=entry["n_obs"], n_speakers=entry["n_speakers"],
        n_programs=entry["n_programs"], boundary=entry["boundary"],
    )


def corpus_table(index: List[dict], admitted: Iterable[str]) -> List[dict]:
    """Admitted speakers per period (rows) by age group and gender (columns)."""
    admitted = set(admitted)
    groups: Dict[tuple, set] = {}
    for s in index:
        if s["speaker_id"] in admitted:
            groups.setdefault((s["period"], s["age_group"], s["gender"]), set()).add(s["speaker_id"])
    rows = []
    for period in Period:
        row = {"period": period.value}
        total = 0
        for group in AgeGroup:
            for g in ("F", "M"):
                n = len(groups.get((period.value, group.value, g), ()))
                row[f"{group.value}_{g}"] = n
                total += n
        row["total"] = total
        rows.append(row)
    return rows


def run_report(cfg: RunConfig) -> Path:
    wd = Workdir(cfg.workdir)
    fit_path = wd.require("report", "fit_report.json")
    index = _read_json(wd.require("report", "extract.json"))["segments"]
    admission = _read_json(wd.require("report", "admission.json"))
    retention = _read_json(wd.require("report", "retention.json"))
    out = wd.path("report")
    key = _digest({"fit": file_hash(fit_path), "filter": _stamp_key(wd, "filter")})
    fig1 = out / "fig1_age_gender.csv"
    if _stamp_ok(wd, "report", key, [fig1]):
        log.info("report: up to date")
        return out
    out.mkdir(parents=True, exist_ok=True)
    report = _read_json(fit_path)
    fit_res = fit_from_report(report["responses"]["base_f0_st"]["minimal"])
    c1, c2 = mixed.effect_curves(fit_res)
    _write_csv(fig1, ("age", "gender", "fitted_st"), ({**r, "fitted_st": repr(r["fitted_st"])} for r in c1))
    _write_csv(out / "fig2_age_period_gender.csv", ("age", "period", "gender", "fitted_st"),
               ({**r, "fitted_st": repr(r["fitted_st"])} for r in c2))
    table = corpus_table(index, admission["admitted"])
    _write_csv(out / "corpus_table.csv", list(table[0]), table)
    corp = retention["corpus"]
    _write_csv(out / "retention_summary.csv", ("stage", "fraction"), [
        {"stage": "voiced_any", "fraction": corp["fraction_voiced_any"]},
        {"stage": "voicing_intersection", "fraction": corp["fraction_after_voicing"]},
        {"stage": "f0_consensus", "fraction": corp["fraction_after_f0"]},
        {"stage": "formant_consensus", "fraction": corp["fraction_after_formants"]},
    ])
    summary = {
        "n_frames": corp["n_frames"],
        "speakers_admitted": len(admission["admitted"]),
        "speakers_rejected": sorted(admission["rejected"]),
        "segments_rejected": admission.get("rejected_segments", {}),
        "models": {
            r: {"formula": report["responses"][r]["minimal"]["formula"],
                "r_squared": report["responses"][r]["minimal"]["r_squared"],
                "dropped": report["responses"][r]["dropped"]}
            for r in report["responses"]
        },
    }
    consensus.save_json(out / "summary.json", summary)
    _write_stamp(wd, "report", key)
    return out


RUNNERS = {"synth": run_synth, "extract": run_extract, "filter": run_filter,
           "features": run_features, "fit": run_fit, "report": run_report}


def run_stages(cfg: RunConfig, stages: Iterable[str]) -> None:
    for st in stages:
        log.info("stage %s", st)
        RUNNERS[st](cfg)

