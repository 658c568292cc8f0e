import numpy as np
import pytest
from scipy.stats import norm

from neuroeq.channel import PAPER_TAPS, ChannelSpec
from neuroeq.classic import BcjrDetector
from neuroeq.montecarlo import BerRecord, SignDetector, evaluate_ber, wilson_interval


def test_wilson_examples():
    lo, hi = wilson_interval(0, 100)
    assert lo == 0.0 and 0.03 < hi < 0.04
    lo, hi = wilson_interval(50, 100)
    assert lo == pytest.approx(0.4038, abs=1e-4) and hi == pytest.approx(0.5962, abs=1e-4)
    with pytest.raises(ValueError):
        wilson_interval(1, 0)


def test_record_properties():
    r = BerRecord(3.0, "es_n0", 1000, 10)
    assert r.ber == 0.01
    lo, hi = r.wilson95
    assert lo < 0.01 < hi and r.wilson95_halfwidth == pytest.approx((hi - lo) / 2)


@pytest.mark.parametrize("snr", [0.0, 3.0, 6.0])
def test_uncoded_bpsk_matches_q_function(snr):
    rec = evaluate_ber(SignDetector(), ChannelSpec((1.0,)), [snr], 62_500, seed=11)[0]
    assert rec.bits_tested == 1_000_000
    expect = norm.sf(np.sqrt(2 * 10 ** (snr / 10)))
    lo, hi = rec.wilson95
    assert lo <= expect <= hi


def test_deterministic_and_thread_independent():
    spec = ChannelSpec(PAPER_TAPS)
    det = BcjrDetector()
    a = evaluate_ber(det, spec, [2, 4], 5000, seed=3, threads=1, chunk_frames=700)
    b = evaluate_ber(det, spec, [2, 4], 5000, seed=3, threads=3, chunk_frames=700)
    c = evaluate_ber(det, spec, [2, 4], 5000, seed=3, threads=1, chunk_frames=700)
    assert [r.bit_errors for r in a] == [r.bit_errors for r in b] == [r.bit_errors for r in c]
    d = evaluate_ber(det, spec, [2, 4], 5000, seed=4, chunk_frames=700)
    assert [r.bit_errors for r in a] != [r.bit_errors for r in d]


def test_frames_must_be_positive():
    with pytest.raises(ValueError):
        evaluate_ber(SignDetector(), ChannelSpec((1.0,)), [0], 0)
