import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from vocarch.consensus import fuse_segment
from vocarch.corpus import detect_telephone_quality, ingest_manifest
from vocarch.errors import ParameterOutOfRange
from vocarch.features import base_f0, make_chunks, quantile_linear, vtl_chunk
from vocarch.formants import config_for_gender, estimate_formants
from vocarch.frontend import FrameGrid, Signal
from vocarch.pitch import estimate_ac, run_all
from vocarch.synth import (
    NULL_EFFECTS,
    chunk_contour,
    degrade,
    insert_consonants,
    make_plan,
    stream_rng,
    synth_corpus,
    synth_voice,
    tube_formants,
)

RATE = 16000


def test_tube_formants_match_oracle():
    assert np.allclose(tube_formants(17.5), oracles.tube_formants(17.5))
    assert np.allclose(tube_formants(17.5), [500, 1500, 2500, 3500])


def test_reference_voice_recovered():
    sig = synth_voice(120.0, 17.5, 2.0)
    tr = estimate_ac(sig)
    f = tr.f0[5:-5]
    assert np.mean(tr.voiced[5:-5] & (np.abs(np.nan_to_num(f) - 120.0) <= 2.0)) >= 0.95
    fm = estimate_formants(sig, config=config_for_gender("M")).freqs[5:-5]
    target = np.array([500.0, 1500.0, 2500.0, 3500.0])
    assert np.all(np.abs(np.nanmedian(fm, axis=0) - target) <= 0.05 * target)


def test_tube_length_recovered():
    sig = synth_voice(130.0, 14.0, 2.0)
    fm = estimate_formants(sig, config=config_for_gender("F")).freqs[5:-5]
    assert vtl_chunk(fm) == pytest.approx(14.0, abs=0.3)


def test_zero_duration_is_empty():
    assert synth_voice(120.0, 15.0, 0.0).samples.size == 0


@pytest.mark.parametrize("kwargs", [dict(f0_contour=20.0, tube_length_cm=15.0),
                                    dict(f0_contour=1200.0, tube_length_cm=15.0),
                                    dict(f0_contour=120.0, tube_length_cm=7.0),
                                    dict(f0_contour=120.0, tube_length_cm=30.0)])
def test_parameters_out_of_range(kwargs):
    with pytest.raises(ParameterOutOfRange):
        synth_voice(duration_s=1.0, **kwargs)


def test_degrade_high_snr_is_transparent():
    sig = synth_voice(150.0, 15.0, 1.0)
    raw, sep = degrade(sig, 60.0, rng=np.random.default_rng(0))
    assert np.array_equal(sep.samples, sig.samples)
    err = np.sqrt(np.mean((raw.samples - sep.samples) ** 2) / np.mean(sep.samples ** 2))
    assert 20 * np.log10(err) < -40
    with pytest.raises(ParameterOutOfRange):
        degrade(sig, 70.0)


@given(st.floats(-5, 60))
@settings(max_examples=20)
def test_degrade_hits_requested_snr(snr):
    sig = synth_voice(150.0, 15.0, 0.5)
    raw, sep = degrade(sig, snr, rng=np.random.default_rng(1))
    noise = raw.samples - sep.samples
    measured = 10 * np.log10(np.mean(sep.samples ** 2) / np.mean(noise ** 2))
    assert measured == pytest.approx(snr, abs=1e-6)


def test_telephone_channel_flagged_and_wideband_not():
    rng = np.random.default_rng(2)
    clean = insert_consonants(synth_voice(140.0, 16.0, 3.0), rng)
    wide, _ = degrade(clean, 40.0, rng=rng)
    tel, _ = degrade(clean, 40.0, telephone=True, rng=rng)
    assert detect_telephone_quality(tel.samples, RATE).is_telephone
    assert not detect_telephone_quality(wide.samples, RATE).is_telephone


def test_vibrato_contour_decile_hits_target():
    contour = chunk_contour(10.0, 12.0, RATE, vibrato=True)
    st_values = 12 * np.log2(contour / 100.0)
    assert quantile_linear(st_values, 0.7) == pytest.approx(10.0, abs=0.01)


def test_stream_rng_stable():
    a = stream_rng(3, "speaker").standard_normal(4)
    b = stream_rng(3, "speaker").standard_normal(4)
    c = stream_rng(3, "other").standard_normal(4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_plan_covers_design():
    plan = make_plan(seed=7)
    corpus_cells = {(s.speaker_id.split("_")[0], s.speaker_id.split("_")[1], s.gender) for s in plan.speakers}
    assert len(plan.speakers) == 32 and len(corpus_cells) == 32


def test_corpus_deterministic_and_thread_independent(tmp_path):
    plan = make_plan(seed=5, chunks_per_program=1, chunk_s=1.0)
    synth_corpus(plan, tmp_path / "a", threads=1)
    synth_corpus(plan, tmp_path / "b", threads=4)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 2 + 2 * 32
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_manifest_valid_and_bookkeeping_closes(tmp_path):
    plan = make_plan(seed=6, programs_per_speaker=2, chunks_per_program=2, chunk_s=0.5)
    paths = synth_corpus(plan, tmp_path)
    corpus = ingest_manifest(paths["manifest"])
    assert corpus.counts[0] == 32
    by_id = {s.speaker_id: s for s in plan.speakers}
    with open(paths["ground_truth"]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 32 * 2 * 2
    for r in rows:
        sp = by_id[r["speaker_id"]]
        p = int(r["program_id"].rsplit("_p", 1)[1])
        c = int(r["chunk_idx"])
        fixed = plan.target_st(sp, p, c) - sp.u_speaker - sp.u_programs[p] - sp.eps[p][c]
        total = fixed + float(r["u_speaker"]) + float(r["u_program"]) + float(r["eps"])
        assert total == pytest.approx(float(r["target_base_f0_st"]), abs=1e-12)


def _measure_chunk(sig_raw, sig_sep):
    grid = FrameGrid.for_duration(sig_raw.duration_s)
    tracks = {t.tag: t for s, sig in (("raw", sig_raw), ("separated", sig_sep)) for t in run_all(sig, s, grid)}
    fm = {s: estimate_formants(sig, grid, config_for_gender("F"), s)
          for s, sig in (("raw", sig_raw), ("separated", sig_sep))}
    seg = fuse_segment(tracks, fm)
    f0 = seg.consensus_f0[seg.valid_pitch]
    return seg, make_chunks("s", "p", f0, seg.formants[seg.valid_pitch])


def test_null_plan_measures_intercept():
    plan = make_plan(seed=8, effects=NULL_EFFECTS, chunk_s=12.5)
    sp = plan.speakers[0]
    target = plan.target_st(sp, 0, 0)
    assert target == NULL_EFFECTS.intercept_st
    rng = np.random.default_rng(0)
    clean = insert_consonants(synth_voice(chunk_contour(target, 12.5, RATE), sp.tube_length_cm, 12.5), rng)
    raw, sep = degrade(clean, 40.0, rng=rng)
    seg, chunks = _measure_chunk(raw, sep)
    r = seg.retention()
    assert r.fraction_after_f0 >= 0.8
    assert len(chunks) == 1
    assert base_f0(chunks[0].f0)[1] == pytest.approx(target, abs=0.3)


def test_zero_effects_signal_is_deterministic():
    a = synth_voice(chunk_contour(5.0, 1.0, RATE), 15.0, 1.0, phase=0.3)
    b = synth_voice(chunk_contour(5.0, 1.0, RATE), 15.0, 1.0, phase=0.3)
    assert isinstance(a, Signal) and np.array_equal(a.samples, b.samples)
