import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from vocarch.errors import EmptyChunk, MissingFormant, NoFormantFrames, NonPositiveFormant
from vocarch.features import (
    VtlModel,
    base_f0,
    chunk_features,
    chunk_sizes,
    make_chunks,
    quantile_linear,
    read_features_csv,
    vtl_chunk,
    vtl_frame,
    write_features_csv,
)

C = 35000.0


@pytest.mark.parametrize("seconds,expected", [
    (36.0, [1200, 1200, 1200]),
    (10.0, [1000]),
    (9.99, []),
    (25.0, [1250, 1250]),
])
def test_chunk_examples(seconds, expected):
    assert chunk_sizes(int(round(seconds * 100))) == expected


@given(st.integers(0, 20000))
def test_chunking_matches_oracle(n):
    sizes = chunk_sizes(n)
    assert sorted(sizes) == sorted(oracles.chunk_plan(n))
    if sizes:
        assert sum(sizes) == n
        assert max(sizes) - min(sizes) <= 1
        assert min(sizes) >= 1000


def test_make_chunks_contiguous():
    f0 = np.arange(3600, dtype=float)
    chunks = make_chunks("s", "p", f0, np.ones((3600, 4)))
    assert [c.duration_s for c in chunks] == pytest.approx([12.0, 12.0, 12.0])
    assert np.array_equal(np.concatenate([c.f0 for c in chunks]), f0)


def test_base_f0_examples():
    assert base_f0(np.full(1000, 200.0)) == (200.0, pytest.approx(12.0))
    hz, _ = base_f0(np.arange(100.0, 200.0, 10.0))
    assert hz == pytest.approx(163.0)
    with pytest.raises(EmptyChunk):
        base_f0(np.array([np.nan]))


def test_base_f0_matches_oracle_on_random_chunks():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        vals = rng.uniform(60, 500, rng.integers(1, 3000))
        assert base_f0(vals)[0] == oracles.decile7(vals)


@given(st.lists(st.floats(50, 1000), min_size=1, max_size=200), st.floats(0.1, 10))
def test_base_f0_homogeneous(vals, g):
    hz = base_f0(vals)[0]
    assert base_f0(np.asarray(vals) * g)[0] == pytest.approx(g * hz, rel=1e-12)
    assert min(vals) <= hz <= max(vals)


@given(st.lists(st.floats(50, 1000), min_size=1, max_size=200), st.floats(50, 400), st.floats(50, 400))
def test_semitone_reference_shifts_by_constant(vals, r1, r2):
    a = base_f0(vals, r1)[1]
    b = base_f0(vals, r2)[1]
    assert a - b == pytest.approx(12 * np.log2(r2 / r1), abs=1e-9)


def test_quantile_two_values():
    assert quantile_linear([15.0, 17.0], 0.5) == 16.0


@pytest.mark.parametrize("length", [12.0, 14.0, 15.0, 17.5])
def test_vtl_tube_identity(length):
    assert vtl_frame(oracles.tube_formants(length)) == pytest.approx(length, rel=1e-9)


def test_vtl_frame_errors():
    with pytest.raises(MissingFormant):
        vtl_frame([500, 1500, None, 3500])
    with pytest.raises(NonPositiveFormant):
        vtl_frame([500, -1500, 2500, 3500])


def test_vtl_chunk_median_and_alternation():
    rows = [oracles.tube_formants(15.0), oracles.tube_formants(17.0)] * 50
    assert vtl_chunk(np.array(rows)) == pytest.approx(16.0)
    with pytest.raises(NoFormantFrames):
        vtl_chunk(np.full((10, 4), np.nan))


@given(st.lists(st.floats(8, 25), min_size=1, max_size=50), st.floats(0.5, 2.0))
def test_vtl_inverse_scaling(lengths, g):
    fm = np.array([oracles.tube_formants(L) for L in lengths])
    v = vtl_chunk(fm)
    assert v == pytest.approx(oracles.median(lengths), rel=1e-9)
    assert vtl_chunk(fm * g) == pytest.approx(v / g, rel=1e-9)


@given(st.lists(st.tuples(st.floats(200, 1000), st.floats(1000, 2500), st.floats(2500, 3500), st.floats(3500, 4800)),
                min_size=1, max_size=20))
def test_vtl_frame_matches_oracle(frames):
    for f in frames:
        assert vtl_frame(list(f)) == pytest.approx(oracles.tube_length(f), rel=1e-12)


def test_vtl_model_weights():
    f = oracles.tube_formants(16.0)
    m = VtlModel(weights=(1.0, 0.0, 0.0, 0.0), intercept=1.0)
    assert vtl_frame(f, m) == pytest.approx(17.0)


def test_chunk_features_counts():
    fm = np.array([oracles.tube_formants(14.0)] * 1000)
    fm[:100] = np.nan
    c = make_chunks("s", "p", np.full(1000, 150.0), fm)[0]
    feats = chunk_features(c)
    assert (feats.n_frames_pitch, feats.n_frames_formant) == (1000, 900)
    assert feats.vtl_cm == pytest.approx(14.0)


def test_features_csv_round_trip(tmp_path):
    row = {"speaker_id": "s", "program_id": "p", "gender": "F", "age_years": 40.0, "period": "P1975",
           "chunk_idx": 0, "base_f0_hz": 163.25, "base_f0_st": 8.5, "vtl_cm": float("nan"),
           "n_frames_pitch": 1000, "n_frames_formant": 0}
    write_features_csv(tmp_path / "f.csv", [row])
    back = read_features_csv(tmp_path / "f.csv")[0]
    assert back["base_f0_hz"] == 163.25 and np.isnan(back["vtl_cm"]) and back["chunk_idx"] == 0
