"""Run every estimator on one synthetic voice and print what survives the consensus filter.

    python demos/single_voice.py [--f0 180] [--tube-cm 15] [--snr-db 20]
"""
import argparse

import numpy as np

from vocarch import consensus, features, formants, pitch
from vocarch.frontend import FrameGrid
from vocarch.synth import degrade, synth_voice


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--f0", type=float, default=180.0, help="mean F0 in Hz")
    ap.add_argument("--tube-cm", type=float, default=15.0, help="vocal tract length in cm")
    ap.add_argument("--snr-db", type=float, default=20.0, help="SNR of the noisy copy")
    ap.add_argument("--seconds", type=float, default=12.0)
    args = ap.parse_args()

    # slow +-1 st drift so the estimators see a moving contour
    contour = args.f0 * 2 ** (np.sin(np.linspace(0, 2 * np.pi, 50)) / 12)
    clean = synth_voice(contour, args.tube_cm, args.seconds)
    raw, separated = degrade(clean, args.snr_db, rng=np.random.default_rng(0))

    grid = FrameGrid.for_duration(raw.duration_s)
    cfg = formants.config_for_gender("F" if args.f0 > 150 else "M")
    ptracks, ftracks = {}, {}
    for src, sig in (("raw", raw), ("separated", separated)):
        for tr in pitch.run_all(sig, src, grid):
            ptracks[tr.tag] = tr
        ftracks[src] = formants.estimate_formants(sig, grid, cfg, src)

    print(f"{'track':<24}{'voiced':>8}{'median F0':>12}")
    for tag, tr in ptracks.items():
        med = np.nanmedian(tr.f0) if tr.voiced.any() else float("nan")
        print(f"{tag:<24}{tr.voiced.mean():>8.2f}{med:>12.1f}")

    seg = consensus.fuse_segment(ptracks, ftracks)
    r = seg.retention()
    print(f"\nretention: any voiced {r.fraction_voiced_any:.2f}, all six {r.fraction_after_voicing:.2f}, "
          f"F0 consensus {r.fraction_after_f0:.2f}, formant consensus {r.fraction_after_formants:.2f}")

    f0 = seg.consensus_f0[seg.valid_pitch]
    hz, st = features.base_f0(f0)
    fm = np.where(seg.valid_formants[:, None], seg.formants, np.nan)[seg.valid_pitch]
    print(f"base F0 {hz:.1f} Hz ({st:.2f} st re 100 Hz)")
    print(f"vocal tract length {features.vtl_chunk(fm):.2f} cm (synthesised {args.tube_cm} cm)")


if __name__ == "__main__":
    main()
