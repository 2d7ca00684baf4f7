"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line (printed live and repeated in the pytest
terminal summary) before asserting, so a failing criterion still reports its
measured numbers.
"""
import math
import time

import numpy as np

from oracles import reference_lfsr
from reflectnet import backscatter_sim as bs
from reflectnet import demod as dm
from reflectnet import evaluation as ev
from reflectnet import phy_codec as pc
from reflectnet import pipeline as pl
from reflectnet import recover as rc
from reflectnet.phy_codec import Frame, ScramblerState

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def random_state(rng) -> ScramblerState:
    while True:
        s = ScramblerState.from_bits(rng.integers(0, 2, 11))
        if not s.is_zero:
            return s


# 1 ---------------------------------------------------------------------------

TABLE = {
    "11110": 0x0, "01001": 0x1, "10100": 0x2, "10101": 0x3, "01010": 0x4, "01011": 0x5, "01110": 0x6,
    "01111": 0x7, "10010": 0x8, "10011": 0x9, "10110": 0xA, "10111": 0xB, "11010": 0xC, "11011": 0xD,
    "11100": 0xE, "11101": 0xF, "11111": "idle", "11000": "J", "10001": "K", "01101": "T", "00111": "R",
}


def test_criterion_01_codec_golden_vectors():
    t = time.perf_counter()
    bad = []
    for c in range(32):
        want = TABLE.get(format(c, "05b"))
        got = pc.classify_code5(c)
        if want is None:
            ok = got.kind == "invalid"
        elif isinstance(want, int):
            ok = got.kind == "data" and got.nibble == want and pc.encode_4b5b(want) == c
        else:
            ok = got.kind == want
        if not ok:
            bad.append(format(c, "05b"))
    dt = time.perf_counter() - t
    record(1, not bad and dt < 1.0, f"{len(TABLE)} table rows, 32/32 codes classified, mismatches={bad}, {dt:.3f}s")


# 2 ---------------------------------------------------------------------------


def test_criterion_02_scrambler_period_and_oracle():
    rng = np.random.default_rng(2)
    periods, mismatches = set(), 0
    for _ in range(50):
        s0 = random_state(rng)
        s, seen = s0, {s0.register}
        for i in range(1, 2048):
            _, s = pc.scrambler_step(s)
            if s.register in seen:
                break
            seen.add(s.register)
        periods.add(i if s == s0 else -1)
        ref = np.array(reference_lfsr(str(s0), 10_000), np.uint8)
        mismatches += int(np.sum(pc.keystream(s0, 10_000) != ref))
    record(2, periods == {2047} and mismatches == 0,
           f"periods over 50 seeds={sorted(periods)}, oracle mismatches over 50x10^4 bits={mismatches}")


# 3 ---------------------------------------------------------------------------


def test_criterion_03_noiseless_end_to_end():
    rng = np.random.default_rng(3)
    t = time.perf_counter()
    payloads = [rng.integers(0, 256, rng.integers(1, 1501)).astype(np.uint8).tobytes() for _ in range(100)]
    exact, invalid = 0, 0
    for b in range(10):
        frames = [Frame(p) for p in payloads[10 * b : 10 * b + 10]]
        ws = pc.encode_frames(frames, seed=random_state(rng))
        cap = bs.synthesize_capture(ws.symbols, bs.ChannelParams(snr_db=math.inf, rise_fraction=0.0), seed=b)
        res = pl.decode_capture(cap)
        got = [f.payload for f in res.frames]
        exact += sum(g == f.payload for g, f in zip(got, frames)) if len(got) == len(frames) else 0
        invalid += res.stats["codes"]["invalid_uncorrectable"]
    dt = time.perf_counter() - t
    record(3, exact == 100 and invalid == 0 and dt < 30,
           f"{exact}/100 frames byte-exact, invalid codes={invalid}, {dt:.1f}s")


# 4 ---------------------------------------------------------------------------


def test_criterion_04_lfsr_recovery_robustness():
    rng = np.random.default_rng(4)
    wins = {1: 0, 2: 0, 11: 0}
    for _ in range(1000):
        s = random_state(rng)
        for n in wins:
            sym = pc.rectify(pc.mlt3_encode(pc.scramble(np.ones(11 * n + 1, np.uint8), s)))
            rb = rc.RecoveredBits.from_symbols(sym ^ (rng.random(len(sym)) < 0.02))
            try:
                # estimate refers to bit 11N of the received bits, i.e. wire bit 11N + 1
                wins[n] += rc.recover_lfsr_state(rb, n) == rc.state_at(s, 0, 11 * n + 1)
            except rc.LfsrRecoveryError:
                pass
    record(4, wins[11] > wins[1] and wins[2] <= wins[1],
           f"successes /1000 at SER 0.02: N=1 {wins[1]}, N=2 {wins[2]}, N=11 {wins[11]}")


# 5 ---------------------------------------------------------------------------


def test_criterion_05_correction_gain():
    t = time.perf_counter()
    pts = ev.correction_sweep(ev.default_grid(21), n_codes=20_000, seed=5)
    dt = time.perf_counter() - t
    at = {round(p.p_e, 6): p for p in pts}
    g10 = at[0.1].gain
    low = [p for p in pts if 0 < p.p_e < 0.3]
    ok = 0.05 <= g10 <= 0.15 and all(p.gain > 0 for p in low) and dt < 60
    record(5, ok, f"gain at p_e=0.1 {100 * g10:.2f} points, min gain on (0,0.3) "
                  f"{100 * min(p.gain for p in low):.2f} points, {len(pts)} points x 2e4 codes, {dt:.1f}s")


# 6 ---------------------------------------------------------------------------


def test_criterion_06_cer_adjudication():
    out = ev.adjudicate_cer(grid=(0.05, 0.1, 0.2, 0.5), n_windows=1_000_000, seed=6)
    v = out["matching_variant"]
    errs = {r["p_e"]: r[f"abs_err_{v}"] for r in out["rows"]}
    ok = all(errs[p] <= 0.002 for p in (0.05, 0.1, 0.2))
    at_half = next(r for r in out["rows"] if r["p_e"] == 0.5)
    record(6, ok, f"matching variant: {v}; |MC - model| at 0.05/0.1/0.2 = "
                  + "/".join(f"{errs[p]:.5f}" for p in (0.05, 0.1, 0.2))
                  + f"; at 0.5 MC={at_half['monte_carlo']:.4f} as-printed={at_half['as-printed']:.4f} "
                    f"exclusion={at_half['exclusion']:.4f}")


# 7 ---------------------------------------------------------------------------

# Channel operating point frozen after a scan for median SER near 0.10
# (default constellation, rise 0.1, 12.8 samples/symbol, no band-limit).
C7_SNR_DB = -10.5
C7_PAIRS = ((1, 2), (3, 4), (5, 6))


def idle_capture(state, seed, snr, n=20_000):
    sym = pc.encode_frames([], idle_prefix=n, idle_suffix=0, seed=ScramblerState.from_string(state)).symbols
    return sym, bs.synthesize_capture(sym, bs.ChannelParams(snr_db=snr), seed=seed)


def test_criterion_07_classifier_vs_median():
    med_err = cls_err = total = 0
    per_pair = []
    for tr, te in C7_PAIRS:
        _, train = idle_capture("10110011101", tr, C7_SNR_DB)
        truth, test = idle_capture("01100101011", te, C7_SNR_DB)
        model, _ = pl.train_from_idle(train)
        med = dm.demodulate(test)
        cls = dm.demodulate(test, model)
        sm = ev.compute_stats(truth, med.symbols.symbols, lag=med.first_symbol)
        sc = ev.compute_stats(truth, cls.symbols.symbols, lag=cls.first_symbol)
        n = len(med.symbols)
        med_err += sm.ser * n
        cls_err += sc.ser * n
        total += n
        per_pair.append((sm.ser, sc.ser))
    ser_m, ser_c = med_err / total, cls_err / total
    rel = 1 - ser_c / ser_m
    ok = 0.08 <= ser_m <= 0.12 and all(c <= m for m, c in per_pair) and rel >= 0.05
    record(7, ok, f"SNR {C7_SNR_DB} dB: median SER {ser_m:.4f}, classifier SER {ser_c:.4f}, "
                  f"relative improvement {100 * rel:.1f}%; per pair "
                  + ", ".join(f"{m:.3f}/{c:.3f}" for m, c in per_pair))


# 8 ---------------------------------------------------------------------------


def test_criterion_08_correlation_harness():
    sym = pc.encode_frames([], idle_prefix=3 * 4094, idle_suffix=0, seed=ScramblerState.from_string("11001010011"))
    cap = bs.synthesize_capture(sym.symbols, bs.ChannelParams(snr_db=20.0), seed=8)
    r_sig = ev.correlation_map(cap, seed=8).r
    rng = np.random.default_rng(8)
    noise = bs.IqCapture(rng.standard_normal(len(cap)) + 1j * rng.standard_normal(len(cap)),
                         cap.sample_rate_hz, dict(cap.meta))
    r_noise = ev.correlation_map(noise, seed=8).r
    record(8, r_sig >= 0.8 and abs(r_noise) <= 0.05, f"r(IDLE, 20 dB)={r_sig:.4f}, r(noise)={r_noise:+.4f}")


# 9 ---------------------------------------------------------------------------


def test_criterion_09_link_budget():
    lam = bs.wavelength(840e6)
    near = bs.link_budget(bs.LinkBudget(13.0, 0.0, lam, 0.01, 3.0))
    far = bs.link_budget(bs.LinkBudget(25.04, 0.0, lam, 0.01, 6.0))
    record(9, abs(near - far) <= 0.05, f"3 m/13 dBm {near:.3f} dBm vs 6 m/25.04 dBm {far:.3f} dBm, "
                                       f"diff {abs(near - far):.4f} dB")


# 10 --------------------------------------------------------------------------

C10_MAX_FRAME_BER = 0.01


def test_criterion_10_deadbeef_demo():
    payload = bytes.fromhex("deadbeef") * 64
    frames = [Frame(payload) for _ in range(10)]
    ws = pc.encode_frames(frames, seed=ScramblerState.from_string("10011100101"))
    cap = bs.synthesize_capture(ws.symbols, bs.ChannelParams(snr_db=20.0), seed=10)
    res = pl.decode_capture(cap)
    ber = ev.frame_ber([f.payload for f in frames], [f.payload for f in res.frames])
    record(10, ber < C10_MAX_FRAME_BER, f"0xDEADBEEF x64 x10 frames at 20 dB: {len(res.frames)} frames, "
                                        f"frame BER {ber:.2e}")
