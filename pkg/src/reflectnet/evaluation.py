"""Error statistics, the CER model and its Monte-Carlo check, IDLE correlation, correction sweep."""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, signal, stats

from . import demod as dm
from . import recover as rc
from .backscatter_sim import IqCapture, lowpass_taps
from .phy_codec import LFSR_PERIOD, ScramblerState, keystream, mlt3_encode, rectify

VARIANTS = ("as-printed", "exclusion")


# --------------------------------------------------------------------------
# CER model


def cer_model(p_e: float, variant: str = "as-printed") -> float:
    """Probability that a 6-symbol window decodes to the wrong 5-bit code."""
    if not 0 <= p_e <= 0.5:
        raise ValueError("p_e must lie in [0, 0.5]")
    base = 1 - (1 - p_e) ** 6
    if variant == "as-printed":
        return base + p_e ** 6
    if variant == "exclusion":
        return base - p_e ** 6
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def cer_monte_carlo(p_e: float, n_windows: int = 1_000_000, seed=0,
                    all_inverted_correct: bool = True) -> float:
    """Decode random 6-symbol windows with i.i.d. flips and count wrong codes.

    Transition decoding is blind to a flip of every symbol, so by default an
    all-inverted window decodes correctly; ``all_inverted_correct=False``
    counts any flipped symbol as an error instead.
    """
    rng = np.random.default_rng(seed)
    sym = rng.integers(0, 2, (n_windows, 6), dtype=np.uint8)
    flips = (rng.random((n_windows, 6)) < p_e).astype(np.uint8)
    if not all_inverted_correct:
        return float(np.mean(flips.any(axis=1)))
    rx = sym ^ flips
    sent = sym[:, 1:] ^ sym[:, :-1]
    got = rx[:, 1:] ^ rx[:, :-1]
    return float(np.mean((sent != got).any(axis=1)))


def adjudicate_cer(grid=(0.05, 0.1, 0.2, 0.5), n_windows: int = 1_000_000, seed=0) -> dict:
    """Compare both model variants with the oracle; the variant within tolerance everywhere wins."""
    rows = []
    for i, p in enumerate(grid):
        mc = cer_monte_carlo(p, n_windows, seed=[seed, i])
        rows.append({"p_e": p, "monte_carlo": mc,
                     **{v: cer_model(p, v) for v in VARIANTS},
                     **{f"abs_err_{v}": abs(mc - cer_model(p, v)) for v in VARIANTS}})
    worst = {v: max(r[f"abs_err_{v}"] for r in rows) for v in VARIANTS}
    winner = min(VARIANTS, key=lambda v: worst[v])
    return {"convention": "all-inverted window decodes correctly", "n_windows": n_windows,
            "rows": rows, "max_abs_err": worst, "matching_variant": winner}


# --------------------------------------------------------------------------
# statistics


@dataclass
class ErrorStats:
    ser: float | None
    cer: float | None
    ber: float | None
    counts: dict = field(default_factory=dict)
    lag: int = 0
    inverted: bool = False

    def __post_init__(self):
        for name in ("ser", "cer", "ber"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 1:
                raise ValueError(f"{name} outside [0, 1]")


def align_symbols(truth, decoded, max_lag: int = 16, allow_inversion: bool = True) -> tuple[int, bool]:
    """Lag (decoded[i] ~ truth[i + lag]) and polarity that minimize disagreement."""
    t = np.asarray(truth, dtype=np.uint8)
    d = np.asarray(decoded, dtype=np.uint8)
    best = None
    for lag in range(-max_lag, max_lag + 1):
        lo, hi = max(0, -lag), min(len(d), len(t) - lag)
        if hi - lo < 1:
            continue
        err = float(np.mean(d[lo:hi] != t[lo + lag : hi + lag]))
        for inv, e in ((False, err), (True, 1 - err)):
            if inv and not allow_inversion:
                continue
            if best is None or e < best[0]:
                best = (e, lag, inv)
    if best is None:
        raise ValueError("streams do not overlap")
    return best[1], best[2]


def compute_stats(truth_symbols, decoded_symbols, lag: int | None = None, inverted: bool | None = None,
                  code_offset: int = 0, tolerance: int = 16, counts: dict | None = None) -> ErrorStats:
    """SER, BER (transition bits) and CER (5-bit groups) of a decoded symbol stream against truth.

    When ``lag`` is omitted it is searched within ``tolerance`` symbols; the
    polarity is searched unless given, since rectified symbols are only
    meaningful up to inversion.
    """
    t = np.asarray(truth_symbols, dtype=np.uint8)
    d = np.asarray(decoded_symbols, dtype=np.uint8)
    if abs(len(t) - len(d)) > tolerance + (abs(lag) if lag else 0):
        raise ValueError(f"length mismatch {len(t)} vs {len(d)} exceeds tolerance")
    if lag is None or inverted is None:
        l2, i2 = align_symbols(t, d, tolerance, allow_inversion=inverted is None)
        lag = l2 if lag is None else lag
        inverted = i2 if inverted is None else inverted
    lo, hi = max(0, -lag), min(len(d), len(t) - lag)
    ds = d[lo:hi] ^ np.uint8(inverted)
    ts = t[lo + lag : hi + lag]
    if len(ds) < 2:
        raise ValueError("need at least two overlapping symbols")
    bit_err = (ds[1:] ^ ds[:-1]) != (ts[1:] ^ ts[:-1])
    n_codes = (len(bit_err) - code_offset) // 5
    cer = None
    if n_codes > 0:
        cer = float(bit_err[code_offset : code_offset + 5 * n_codes].reshape(n_codes, 5).any(axis=1).mean())
    return ErrorStats(float(np.mean(ds != ts)), cer, float(np.mean(bit_err)), counts or {}, lag, bool(inverted))


def idle_ber(bits) -> float:
    """Truth-free BER over descrambled IDLE: every bit should be 1."""
    bits = np.asarray(bits)
    if len(bits) == 0:
        raise ValueError("no bits")
    return float(1 - bits.mean())


def frame_ber(sent: list[bytes], received: list[bytes]) -> float:
    """Bit errors over all sent payload bits; missing bytes or frames count as fully wrong."""
    total = sum(8 * len(s) for s in sent)
    if total == 0:
        raise ValueError("nothing was sent")
    errors = 0
    for i, s in enumerate(sent):
        r = received[i] if i < len(received) else b""
        a = np.frombuffer(s, np.uint8)
        b = np.frombuffer(r[: len(s)], np.uint8)
        errors += int(np.unpackbits(a[: len(b)] ^ b).sum()) + 8 * (len(a) - len(b))
    return errors / total


# --------------------------------------------------------------------------
# correlation against the scrambler


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b / den) if den > 0 else 0.0


def principal_component(x: np.ndarray) -> np.ndarray:
    """Project complex samples onto their axis of largest variance."""
    z = x - x.mean()
    cov = np.cov(np.vstack([z.real, z.imag]))
    w, v = np.linalg.eigh(cov)
    u = v[:, np.argmax(w)]
    return z.real * u[0] + z.imag * u[1]


def _circular_lowpass(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    h = np.zeros(len(x))
    half = len(taps) // 2
    h[: half + 1] = taps[half:]
    h[-half:] = taps[:half]
    return np.fft.irfft(np.fft.rfft(x) * np.fft.rfft(h), len(x))


@dataclass
class CorrelationResult:
    r: float
    lag_samples: int
    sps: int
    n_compared: int


def idle_reference(seed: ScramblerState, sps: int, bandwidth_hz: float, sample_rate_hz: float) -> np.ndarray:
    """One period of the rectified, scrambled-IDLE waveform at ``sps``, low-passed circularly.

    The complemented keystream has odd weight, so the rectified waveform
    repeats after two keystream periods; shifting by one period negates it.
    """
    bits = 1 - keystream(seed, 2 * LFSR_PERIOD)
    sym = rectify(mlt3_encode(bits)).astype(np.float64)
    wave = np.repeat(2 * sym - 1, sps)
    if bandwidth_hz / 2 < 0.95 * sample_rate_hz / 2:
        wave = _circular_lowpass(wave, lowpass_taps(bandwidth_hz / 2, sample_rate_hz))
    return wave


def correlation_map(capture: IqCapture, seed=None, bandwidth_hz: float = 125e6) -> CorrelationResult:
    """Pearson correlation between a capture of an IDLE link and a keystream-derived reference.

    Both sides are band-limited to ``bandwidth_hz``.  The first reference
    period of the capture fixes the alignment (every keystream phase, sign and
    sub-symbol lag is tried through one circular cross-correlation); ``r`` is
    measured on the samples after it and oriented by the sign found there.
    """
    rng = np.random.default_rng(seed)
    reg = np.zeros(11, np.uint8)
    while not reg.any():
        reg = rng.integers(0, 2, 11).astype(np.uint8)
    cap, sps = dm.resample_integer_sps(capture)
    period = 2 * LFSR_PERIOD * sps
    if len(cap) < period + 10 * sps:
        raise ValueError(f"capture too short: need more than {period} samples at {sps} samples per symbol")
    ref = idle_reference(ScramblerState.from_bits(reg), sps, bandwidth_hz, cap.sample_rate_hz)
    x = principal_component(cap.samples)
    if bandwidth_hz / 2 < 0.95 * cap.sample_rate_hz / 2:
        x = signal.oaconvolve(x, lowpass_taps(bandwidth_hz / 2, cap.sample_rate_hz), mode="same")
    head = x[:period] - x[:period].mean()
    xc = np.fft.irfft(np.conj(np.fft.rfft(head)) * np.fft.rfft(ref - ref.mean()), period)
    lag = int(np.argmax(np.abs(xc)))
    sign = 1.0 if xc[lag] >= 0 else -1.0
    rest = x[period:]
    aligned = ref[(lag + period + np.arange(len(rest))) % period]
    return CorrelationResult(sign * pearson(rest, aligned), lag, sps, len(rest))


# --------------------------------------------------------------------------
# correction sweep


@dataclass
class SweepPoint:
    p_e: float
    measured_ser: float
    incorrect: float
    invalid: float
    uncorrupted_correct: float
    corrected_correct: float
    n_codes: int

    def __post_init__(self):
        for k in ("incorrect", "invalid", "uncorrupted_correct", "corrected_correct"):
            if not 0 <= getattr(self, k) <= 1:
                raise ValueError(f"{k} outside [0, 1]")
        if self.invalid > self.incorrect + 1e-12:
            raise ValueError("invalid codes are a subset of incorrect codes")

    @property
    def gain(self) -> float:
        return self.corrected_correct

    @property
    def correct_with_correction(self) -> float:
        return self.uncorrupted_correct + self.corrected_correct


def _soft_pool(p_e: float, discriminator: str, sps: int, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Confidences of correctly and wrongly decided symbols under a Gaussian per-sample model.

    Every sample is N(mu, 1) for a transmitted 1; mu is set so the
    discriminator's symbol error rate equals ``p_e``.
    """
    z = rng.standard_normal((n, sps))
    p = min(max(p_e, 1e-4), 0.5)
    if discriminator == "classifier":
        mu = stats.norm.isf(p) / math.sqrt(sps)
        dec = (z + mu).sum(axis=1)
        wrong = dec <= 0
        conf = np.clip(np.abs(dec) / np.percentile(np.abs(dec), 95), 0, 1)
    elif discriminator == "median":
        cal = z[: min(n, 20_000)]

        def err(m):
            return float(np.mean(dm.median_confidence(cal + m, 0.0, 1.0)[0] == 0)) - p

        mu = 0.0 if p >= 0.5 else optimize.brentq(err, 0.0, 10.0, xtol=1e-5)
        sym, conf, _ = dm.median_confidence(z + mu, 0.0)
        wrong = sym == 0
    else:
        raise ValueError("discriminator must be 'median' or 'classifier'")
    return conf[~wrong], conf[wrong]


def burst_flips(n: int, p_e: float, mean_burst: float, rng) -> np.ndarray:
    """Two-state Markov flips: every symbol in the bad state is flipped; stationary rate ``p_e``."""
    if p_e <= 0:
        return np.zeros(n, bool)
    leave_bad = 1.0 / mean_burst
    enter_bad = min(1.0, leave_bad * p_e / (1 - p_e))
    u = rng.random(n)
    out = np.empty(n, bool)
    bad = rng.random() < p_e
    for i in range(n):
        out[i] = bad
        bad = (u[i] >= leave_bad) if bad else (u[i] < enter_bad)
    return out


def sweep_point(p_e: float, n_codes: int = 20_000, discriminator: str = "median", seed=0, sps: int = 12,
                mask: int = 0b00001, error_model: str = "iid", mean_burst: float = 3.0) -> SweepPoint:
    """All-IDLE traffic through scrambler and MLT-3, symbol flips with confidences, decoded both ways."""
    if not 0 <= p_e <= 0.5:
        raise ValueError("p_e must lie in [0, 0.5]")
    rng = np.random.default_rng(seed)
    reg = np.zeros(11, np.uint8)
    while not reg.any():
        reg = rng.integers(0, 2, 11).astype(np.uint8)
    state = ScramblerState.from_bits(reg)
    n_sym = 5 * n_codes + 1
    plain = np.ones(n_sym, np.uint8)
    k = keystream(state, n_sym)
    sym = rectify(mlt3_encode(plain ^ k))
    if error_model == "iid":
        flips = rng.random(n_sym) < p_e
    elif error_model == "burst":
        flips = burst_flips(n_sym, p_e, mean_burst, rng)
    else:
        raise ValueError("error_model must be 'iid' or 'burst'")
    good, bad = _soft_pool(p_e, discriminator, sps, max(n_sym, 1000), rng)
    conf = np.empty(n_sym)
    nb = int(flips.sum())
    conf[~flips] = rng.choice(good, n_sym - nb) if len(good) else 1.0
    if nb:
        conf[flips] = rng.choice(bad if len(bad) else good, nb)
    rb = rc.RecoveredBits.from_symbols(sym ^ flips, conf)
    # bit i of rb is wire bit i + 1
    p = rc.RecoveredBits(rb.bits ^ k[1:], rb.conf, rb.symbols, rb.symbol_conf, k[1:].copy())
    table = rc.xor_shift_table(mask)
    target = table[0b11111] if 0b11111 in table else None
    off = rc.translate_stream(p, 0, correction=False, table=table)
    on = rc.translate_stream(p, 0, correction=True, table=table)
    n = len(off)
    right_off = (off.value == target) & (off.status != rc.Status.InvalidUncorrectable)
    invalid = off.status == rc.Status.InvalidUncorrectable
    fixed = invalid & (on.value == target) & (on.status != rc.Status.InvalidUncorrectable)
    return SweepPoint(p_e, float(flips.mean()), float(1 - right_off.mean()), float(invalid.mean()),
                      float(right_off.mean()), float(fixed.sum() / n), n)


def default_grid(points: int = 21) -> list[float]:
    return [round(x, 6) for x in np.linspace(0, 0.5, points)]


def thread_cap(default: int | None = None) -> int:
    env = os.environ.get("REFLECTNET_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("REFLECTNET_THREADS must be >= 1")
        return n
    return default or min(8, os.cpu_count() or 1)


def correction_sweep(grid=None, n_codes: int = 20_000, discriminator: str = "median", seed: int = 0,
                     threads: int | None = None, **kw) -> list[SweepPoint]:
    """One independent point per ``p_e``, each on its own substream of ``seed``."""
    grid = default_grid() if grid is None else list(grid)
    if any(not 0 <= g <= 0.5 for g in grid):
        raise ValueError("grid must lie within [0, 0.5]")
    seeds = np.random.SeedSequence(seed).spawn(len(grid))
    with ThreadPoolExecutor(max_workers=threads or thread_cap()) as ex:
        futs = [ex.submit(sweep_point, g, n_codes, discriminator, s, **kw) for g, s in zip(grid, seeds)]
        return [f.result() for f in futs]


SWEEP_COLUMNS = ("p_e", "measured_ser", "incorrect", "invalid", "uncorrupted_correct", "corrected_correct",
                 "correct_with_correction")


def write_sweep_csv(path, points: list[SweepPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for pt in points:
            w.writerow([f"{getattr(pt, c):.6f}" for c in SWEEP_COLUMNS])


def write_json(path, obj) -> None:
    def conv(o):
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if hasattr(o, "__dataclass_fields__"):
            return asdict(o)
        raise TypeError(type(o))
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=conv)
