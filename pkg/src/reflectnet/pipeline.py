"""Capture-to-frames receive chain and IDLE-based classifier training."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import demod as dm
from . import recover as rc
from .backscatter_sim import IqCapture
from .phy_codec import LFSR_BITS, LFSR_PERIOD, ScramblerState, keystream


@dataclass
class ScramblerSync:
    state: ScramblerState   # aligned to bit 0 of the stream
    method: str             # "average" or "search"
    n_seq: int
    region: tuple[int, int]
    idle_ones: float        # fraction of ones in the check window after descrambling


def sync_scrambler(rb: rc.RecoveredBits, n_seq: int = 11, check_bits: int = 256, min_ones: float = 0.95,
                   stride: int = LFSR_PERIOD, max_regions: int = 64, min_agree: float = 0.6) -> ScramblerSync:
    """Find an IDLE stretch and the scrambler state.

    Candidate regions start every ``stride`` bits.  The averaging estimator is
    tried first and accepted when the following ``check_bits`` descramble to
    at least ``min_ones`` ones; otherwise the exhaustive phase search is run
    and accepted above ``min_agree`` agreement.
    """
    need = LFSR_BITS * n_seq + check_bits
    starts = list(range(0, max(len(rb) - need, 0) + 1, stride))[:max_regions]
    if len(rb) < need:
        raise rc.InsufficientData(f"need {need} bits for scrambler sync, have {len(rb)}")
    for s in starts:
        end = s + LFSR_BITS * n_seq
        try:
            st = rc.recover_lfsr_state(rb.bits[s:end], n_seq)
        except rc.LfsrRecoveryError:
            continue
        ones = float(np.mean(rb.bits[end : end + check_bits] ^ keystream(st, check_bits)))
        if ones >= min_ones:
            return ScramblerSync(rc.state_at(st, end, 0), "average", n_seq, (s, end), ones)
    best = None
    for s in starts:
        end = min(len(rb), s + 2 * LFSR_PERIOD)
        st, agree = rc.search_lfsr_state(rb.bits[s:end])
        if best is None or agree > best[1]:
            best = (rc.state_at(st, s, 0), agree, (s, end))
        if agree >= min_agree:
            break
    if best is None or best[1] < min_agree:
        raise rc.LfsrRecoveryError("no IDLE region found for scrambler synchronisation")
    return ScramblerSync(best[0], "search", n_seq, best[2], best[1])


@dataclass
class DecodeResult:
    frames: list[rc.RecoveredFrame]
    sync: ScramblerSync
    offset: int
    alignment_method: str
    scan: rc.CodeStream
    bits: rc.RecoveredBits
    demod: dm.DemodResult | None = None
    stats: dict = field(default_factory=dict)

    @property
    def degraded(self) -> bool:
        return any(f.degraded for f in self.frames)


def align(p: rc.RecoveredBits) -> tuple[int, str]:
    try:
        return rc.recover_bit_alignment(p), "invalid-count"
    except rc.InsufficientData:
        o = rc.j_alignment(p)
        return (0, "none") if o is None else (o, "frame-start")


def decode_bits(rb: rc.RecoveredBits, correction: bool = True, n_seq: int = 11) -> DecodeResult:
    sync = sync_scrambler(rb, n_seq)
    p = rc.descramble(rb, sync.state)
    offset, how = align(p)
    scan = rc.translate_stream(p, offset, correction=False, table=rc.FULL_TABLE)

    def payload(lo, hi):
        return rc.translate_stream(p, offset, correction, rc.DATA_TABLE, lo, hi)

    frames = rc.extract_frames(scan, payload)
    res = DecodeResult(frames, sync, offset, how, scan, p)
    res.stats = decode_stats(res)
    return res


def decode_capture(capture: IqCapture, model: dm.LinearModel | None = None, correction: bool = True,
                   n_seq: int = 11) -> DecodeResult:
    d = dm.demodulate(capture, model)
    res = decode_bits(rc.RecoveredBits.from_symbols(d.symbols), correction, n_seq)
    res.demod = d
    return res


def decode_stats(res: DecodeResult) -> dict:
    """Truth-free figures: payload verdict counts and IDLE-mode error rates between frames."""
    counts = {s.name: 0 for s in rc.Status}
    for f in res.frames:
        for k, v in f.verdicts.counts().items():
            counts[k] += v
    in_frame = np.zeros(len(res.scan), bool)
    for f in res.frames:
        in_frame[f.start_index - res.scan.start : f.end_index - res.scan.start] = True
    idle_codes = res.scan.raw[~in_frame]
    idle_bits = ((idle_codes[:, None] >> np.arange(4, -1, -1)) & 1).ravel()
    n_payload = sum(counts.values())
    return {
        "ber": float(1 - idle_bits.mean()) if len(idle_bits) else None,
        "cer": float(np.mean(idle_codes != rc.IDLE)) if len(idle_codes) else None,
        "ser": None,
        "codes": {
            "uncorrupted": counts["UncorruptedValid"],
            "corrected": counts["CorrectedValid"],
            "valid_unknown": counts["ValidUnknown"],
            "invalid_uncorrectable": counts["InvalidUncorrectable"],
            "payload_total": n_payload,
        },
    }


def report(res: DecodeResult) -> dict:
    frames = []
    for i, f in enumerate(res.frames):
        entry = {"id": str(i), "hex": f.payload.hex(), "start_code": f.start_index, "end_code": f.end_index}
        if any(f.byte_error_mask):
            entry["byte_error_mask"] = [int(b) for b in f.byte_error_mask]
        if f.truncated:
            entry["truncated"] = True
        if f.unterminated:
            entry["unterminated"] = True
        frames.append(entry)
    return {
        "frames": frames,
        "stats": res.stats,
        "lfsr": {"state": str(res.sync.state), "N": res.sync.n_seq, "region": list(res.sync.region),
                 "method": res.sync.method, "idle_ones": res.sync.idle_ones},
        "alignment": {"offset": res.offset, "method": res.alignment_method},
    }


# --------------------------------------------------------------------------
# classifier training from an IDLE capture


def idle_truth_symbols(rb: rc.RecoveredBits, reference_symbols: np.ndarray) -> tuple[np.ndarray, float]:
    """Rebuild the transmitted rectified symbols of an IDLE capture.

    The keystream phase comes from the exhaustive search, every IDLE bit is
    the complemented keystream, and the symbols follow by running XOR.  The
    polarity that agrees best with ``reference_symbols`` is kept.  Returns the
    symbols and the search agreement.
    """
    st, agree = rc.search_lfsr_state(rb.bits)
    bits = 1 - keystream(st, len(rb))
    sym = np.concatenate([[0], np.bitwise_xor.accumulate(bits)]).astype(np.uint8)
    if np.mean(sym == reference_symbols) < 0.5:
        sym ^= 1
    return sym, agree


def train_from_idle(capture: IqCapture, c: float = 1.0) -> tuple[dm.LinearModel, dict]:
    d = dm.demodulate(capture)
    rb = rc.RecoveredBits.from_symbols(d.symbols)
    truth, agree = idle_truth_symbols(rb, d.symbols.symbols)
    win = d.features()
    n = min(len(win), len(truth))
    model = dm.train_classifier(win[:n], truth[:n], c=c)
    h = d.hotspots
    info = {"keystream_agreement": agree, "median_ser": float(np.mean(d.symbols.symbols[:n] != truth[:n])),
            "n_train": int(n), "sps": d.sps, "threshold": d.threshold,
            "hotspots": [[h.h0.real, h.h0.imag], [h.h1.real, h.h1.imag]], "hotspot_method": h.method}
    model.meta.update(info)
    return model, info
