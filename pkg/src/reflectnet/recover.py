"""Confident symbols to bytes: transition decoding, scrambler sync, 4B/5B, correction, framing.

Index conventions: bit ``i`` is the transition between symbols ``i`` and
``i + 1``.  With a bit alignment ``o``, code ``n`` covers bits
``[o + 5n, o + 5n + 5)`` and therefore the six symbols ``[o + 5n, o + 5n + 5]``;
neighbouring codes share one boundary symbol.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .phy_codec import (
    DATA_CODES, IDLE, J, K, LFSR_BITS, LFSR_PERIOD, R, T, ScramblerState, bits_to_codes, keystream,
)


class RecoveryError(ValueError):
    """Stage could not produce a result from the data it was given."""


class InsufficientData(RecoveryError):
    pass


class LfsrRecoveryError(RecoveryError):
    pass


# --------------------------------------------------------------------------
# bits with confidences


@dataclass
class RecoveredBits:
    """Transition bits plus the symbol view they came from.

    ``keystream`` is whatever has been XORed into ``bits`` since they were
    formed from ``symbols``, so ``transitions(symbols) ^ keystream == bits``.
    Correction needs this to judge candidate symbol windows.
    """

    bits: np.ndarray
    conf: np.ndarray
    symbols: np.ndarray | None = None
    symbol_conf: np.ndarray | None = None
    keystream: np.ndarray | None = None

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        self.conf = np.asarray(self.conf, dtype=np.float64)
        if self.bits.shape != self.conf.shape:
            raise ValueError("bits and conf lengths differ")
        if self.symbols is not None:
            self.symbols = np.asarray(self.symbols, dtype=np.uint8)
            self.symbol_conf = np.asarray(self.symbol_conf, dtype=np.float64)
            if len(self.symbols) != len(self.bits) + 1 or self.symbol_conf.shape != self.symbols.shape:
                raise ValueError("need exactly one more symbol than bits")
        if self.keystream is None:
            self.keystream = np.zeros(len(self.bits), dtype=np.uint8)
        self.keystream = np.asarray(self.keystream, dtype=np.uint8)
        if self.keystream.shape != self.bits.shape:
            raise ValueError("keystream length differs from bits")

    def __len__(self) -> int:
        return len(self.bits)

    @classmethod
    def from_symbols(cls, symbols, confidence=None) -> "RecoveredBits":
        """MLT-3 transition decoding; a bit keeps the weaker of its two symbol confidences."""
        if hasattr(symbols, "confidence"):
            symbols, confidence = symbols.symbols, symbols.confidence
        s = np.asarray(symbols, dtype=np.uint8)
        c = np.ones(len(s)) if confidence is None else np.asarray(confidence, dtype=np.float64)
        if len(s) < 2:
            raise InsufficientData("need at least two symbols")
        return cls(s[1:] ^ s[:-1], np.minimum(c[1:], c[:-1]), s, c)

    def slice(self, start: int, stop: int) -> "RecoveredBits":
        start, stop, _ = slice(start, stop).indices(len(self.bits))
        sym = sc = None
        if self.symbols is not None:
            sym, sc = self.symbols[start : stop + 1], self.symbol_conf[start : stop + 1]
        return RecoveredBits(self.bits[start:stop], self.conf[start:stop], sym, sc, self.keystream[start:stop])


# --------------------------------------------------------------------------
# scrambler synchronisation


@lru_cache(maxsize=None)
def _step_matrix_power(steps: int) -> np.ndarray:
    """GF(2) matrix taking a register to the register ``steps`` clocks later."""
    m = np.zeros((LFSR_BITS, LFSR_BITS), dtype=np.int64)
    m[0, 8] = m[0, 10] = 1
    for i in range(1, LFSR_BITS):
        m[i, i - 1] = 1
    out = np.eye(LFSR_BITS, dtype=np.int64)
    e = steps % LFSR_PERIOD
    while e:
        if e & 1:
            out = out @ m % 2
        m = m @ m % 2
        e >>= 1
    return out


def advance_register(reg: np.ndarray, steps: int) -> np.ndarray:
    """Clock one register (or a stack of registers, one per row) ``steps`` times."""
    reg = np.asarray(reg, dtype=np.int64)
    return (reg @ _step_matrix_power(steps).T % 2).astype(np.uint8)


def state_at(state: ScramblerState, index: int, target: int) -> ScramblerState:
    """Re-express a state valid at bit ``index`` as the state at bit ``target``."""
    return ScramblerState.from_bits(advance_register(state.as_array(), target - index))


def recover_lfsr_state(c, n_seq: int = 11) -> ScramblerState:
    """Scrambler state from ``n_seq`` consecutive 11-bit groups of received IDLE.

    Over IDLE the plaintext is all ones, so each complemented group is a copy of
    the keystream and hence a full register.  Group ``j`` is brought forward
    ``2047 - 11j`` clocks so every candidate describes the same instant, the
    candidates are averaged bit by bit (ties go to 1), and the result is
    returned aligned to bit ``11 * n_seq`` of the region, just past what was read.
    """
    bits = c.bits if isinstance(c, RecoveredBits) else np.asarray(c, dtype=np.uint8)
    if n_seq < 1:
        raise ValueError("n_seq must be >= 1")
    if len(bits) < LFSR_BITS * n_seq:
        raise InsufficientData(f"need {LFSR_BITS * n_seq} bits for {n_seq} sequences, have {len(bits)}")
    groups = 1 - bits[: LFSR_BITS * n_seq].reshape(n_seq, LFSR_BITS).astype(np.int64)
    regs = groups[:, ::-1]  # register[i] = k[n - i - 1]
    cands = np.array([advance_register(regs[j], LFSR_PERIOD - LFSR_BITS * j) for j in range(n_seq)])
    avg = (2 * cands.sum(axis=0) >= n_seq).astype(np.uint8)
    if not avg.any():
        raise LfsrRecoveryError("recovered the all-zero state")
    return ScramblerState.from_bits(advance_register(avg, LFSR_BITS * (n_seq - 1)))


def search_lfsr_state(c) -> tuple[ScramblerState, float]:
    """Exhaustive fallback: best of all 2047 keystream phases against complemented bits.

    Returns the state aligned to bit 0 of the region and the fraction of bits
    that agree with it.  Works at error rates where no 11-bit group is clean.
    """
    bits = c.bits if isinstance(c, RecoveredBits) else np.asarray(c, dtype=np.uint8)
    if len(bits) < 4 * LFSR_BITS:
        raise InsufficientData("region too short for a phase search")
    a = 2.0 * bits - 1.0  # +1 where the keystream estimate (complemented bit) is 0
    folded = np.bincount(np.arange(len(a)) % LFSR_PERIOD, weights=a, minlength=LFSR_PERIOD)
    ref = ScramblerState.all_ones()
    p = 1.0 - 2.0 * keystream(ref, LFSR_PERIOD)
    score = np.fft.irfft(np.conj(np.fft.rfft(folded)) * np.fft.rfft(p), LFSR_PERIOD)
    lag = int(np.argmax(score))
    st = state_at(ref, -lag, 0)
    return st, float(np.mean((1 - bits) == keystream(st, len(bits))))


def descramble(c: RecoveredBits, s: ScramblerState, index: int = 0) -> RecoveredBits:
    """XOR with the keystream, ``s`` being the state at bit ``index`` of ``c``."""
    s0 = state_at(s, index, 0) if index else s
    k = keystream(s0, len(c))
    return replace(c, bits=c.bits ^ k, keystream=c.keystream ^ k)


def idle_fraction(bits) -> float:
    bits = np.asarray(bits)
    return float(bits.mean()) if len(bits) else 0.0


# --------------------------------------------------------------------------
# translation tables

CONTROL_VALUES = {"I": 16, "J": 17, "K": 18, "T": 19, "R": 20}
V_IDLE, V_J, V_K, V_T, V_R = (CONTROL_VALUES[k] for k in "IJKTR")
INVALID = -1

DATA_TABLE: dict[int, int] = {c: n for n, c in enumerate(DATA_CODES)}
FULL_TABLE: dict[int, int] = {**DATA_TABLE, IDLE: V_IDLE, J: V_J, K: V_K, T: V_T, R: V_R}


def xor_shift_table(mask: int, base: dict[int, int] | None = None) -> dict[int, int]:
    """Every code of ``base`` (the 16 data codes by default) XORed with ``mask``."""
    if not 0 <= mask < 32:
        raise ValueError("mask must be a 5-bit code")
    base = DATA_TABLE if base is None else base
    return {c ^ mask: v for c, v in base.items()}


def _lut(table: dict[int, int]) -> np.ndarray:
    lut = np.full(32, INVALID, dtype=np.int64)
    for c, v in table.items():
        lut[c] = v
    return lut


# --------------------------------------------------------------------------
# verdicts


class Status(enum.IntEnum):
    UncorruptedValid = 0   # valid as received
    CorrectedValid = 1
    InvalidUncorrectable = 2
    ValidUnknown = 3       # became valid only through a neighbour's correction


@dataclass(frozen=True)
class CodeVerdict:
    raw5: int
    status: Status
    nibble: int | None = None
    code: int | None = None          # code after correction
    value: int = INVALID             # table value: nibble, control value or INVALID
    window: tuple[int, ...] | None = None

    def __post_init__(self):
        if (self.nibble is not None) != (0 <= self.value < 16 and self.status != Status.InvalidUncorrectable):
            raise ValueError("nibble must be present exactly for data codes")


@dataclass
class CodeStream:
    """Array form of a CodeVerdict sequence; indexing yields CodeVerdict objects."""

    raw: np.ndarray
    code: np.ndarray
    value: np.ndarray
    status: np.ndarray
    start: int = 0  # code index of element 0 in the full stream

    def __len__(self) -> int:
        return len(self.raw)

    def __getitem__(self, i: int) -> CodeVerdict:
        v = int(self.value[i])
        st = Status(int(self.status[i]))
        nib = v if 0 <= v < 16 and st != Status.InvalidUncorrectable else None
        return CodeVerdict(int(self.raw[i]), st, nib, int(self.code[i]), v)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def slice(self, lo: int, hi: int) -> "CodeStream":
        """Elements for absolute code indices ``[lo, hi)``."""
        a, b = lo - self.start, hi - self.start
        return CodeStream(self.raw[a:b], self.code[a:b], self.value[a:b], self.status[a:b], lo)

    def counts(self) -> dict[str, int]:
        return {s.name: int(np.sum(self.status == s)) for s in Status}


# all 64 six-symbol windows in lexicographic order (symbol 0 most significant)
_CAND = ((np.arange(64)[:, None] >> np.arange(5, -1, -1)) & 1).astype(np.uint8)
_CAND_CODE = ((_CAND[:, 1:] ^ _CAND[:, :-1]).astype(np.int64) @ (1 << np.arange(4, -1, -1)))
_PLACE = 1 << np.arange(4, -1, -1)


def _window_code(sym6: np.ndarray, k5: np.ndarray) -> int:
    return int(((sym6[1:] ^ sym6[:-1] ^ k5).astype(np.int64) * _PLACE).sum())


def correct_code(symbols6, conf6, table: dict[int, int], keystream5=None,
                 freeze_first: bool = False, freeze_last: bool = False) -> CodeVerdict:
    """Nearest valid 6-symbol window under confidence-weighted agreement.

    Each candidate scores sum(conf_i * (+1 if it keeps symbol i, else -1));
    the best valid candidate wins, ties going to the lexicographically
    smallest.  Frozen boundary symbols must be kept.
    """
    obs = np.asarray(symbols6, dtype=np.uint8)
    conf = np.asarray(conf6, dtype=np.float64)
    k5 = np.zeros(5, np.uint8) if keystream5 is None else np.asarray(keystream5, dtype=np.uint8)
    if obs.shape != (6,) or conf.shape != (6,) or k5.shape != (5,):
        raise ValueError("need 6 symbols, 6 confidences and 5 keystream bits")
    lut = _lut(table)
    raw = _window_code(obs, k5)
    if lut[raw] != INVALID:
        raise ValueError(f"code {raw:05b} is already valid")
    kcode = int((k5.astype(np.int64) * _PLACE).sum())
    codes = _CAND_CODE ^ kcode
    ok = lut[codes] != INVALID
    if freeze_first:
        ok &= _CAND[:, 0] == obs[0]
    if freeze_last:
        ok &= _CAND[:, 5] == obs[5]
    if not ok.any():
        return CodeVerdict(raw, Status.InvalidUncorrectable, None, raw, INVALID, tuple(int(x) for x in obs))
    score = (1.0 - 2.0 * (_CAND ^ obs)) @ conf
    score[~ok] = -np.inf
    best = int(np.argmax(score))  # first maximum, i.e. lexicographically smallest
    code = int(codes[best])
    v = int(lut[code])
    return CodeVerdict(raw, Status.CorrectedValid, v if v < 16 else None, code, v,
                       tuple(int(x) for x in _CAND[best]))


def translate_stream(p: RecoveredBits, offset: int, correction: bool = True,
                     table: dict[int, int] | None = None, start: int = 0,
                     stop: int | None = None) -> CodeStream:
    """4B/5B translation of codes ``[start, stop)`` at bit alignment ``offset``.

    With correction on, each code that is invalid as received is replaced by
    its best valid window.  Its leading symbol belongs to the already settled
    previous code and is frozen; its trailing symbol may only move when the
    next code was invalid as received too, so valid codes are never touched.
    """
    table = FULL_TABLE if table is None else table
    if not 0 <= offset < 5:
        raise ValueError("offset must lie in [0, 5)")
    lut = _lut(table)
    allc = bits_to_codes(p.bits, offset)
    stop = len(allc) if stop is None else min(stop, len(allc))
    start = max(0, min(start, stop))
    raw = allc[start:stop]
    value = lut[raw]
    code = raw.copy()
    valid0 = value != INVALID
    status = np.where(valid0, Status.UncorruptedValid, Status.InvalidUncorrectable).astype(np.int8)
    if correction and not valid0.all():
        if p.symbols is None:
            raise ValueError("correction needs the symbol view of the bits")
        sym = p.symbols.copy()
        ks = p.keystream
        conf = p.symbol_conf
        bad = np.flatnonzero(~valid0)
        for i in bad:
            s0 = offset + 5 * (start + i)
            win = sym[s0 : s0 + 6]
            k5 = ks[s0 : s0 + 5]
            cur = _window_code(win, k5)
            if lut[cur] != INVALID:
                value[i], code[i], status[i] = lut[cur], cur, Status.ValidUnknown
                continue
            next_bad = i + 1 < len(raw) and not valid0[i + 1]
            v = correct_code(win, conf[s0 : s0 + 6], table, k5, freeze_first=True, freeze_last=not next_bad)
            if v.status == Status.CorrectedValid:
                sym[s0 : s0 + 6] = v.window
                value[i], code[i], status[i] = v.value, v.code, Status.CorrectedValid
    return CodeStream(raw, code, value, status, start)


# --------------------------------------------------------------------------
# alignment


def count_invalid(bits, offset: int, table: dict[int, int] | None = None) -> tuple[int, int]:
    """(invalid codes, non-IDLE codes) at one alignment."""
    codes = bits_to_codes(bits, offset)
    lut = _lut(FULL_TABLE if table is None else table)
    return int(np.sum(lut[codes] == INVALID)), int(np.sum(codes != IDLE))


def recover_bit_alignment(p, min_codes: int = 200) -> int:
    """Alignment with the fewest invalid codes; smallest offset on ties."""
    bits = p.bits if isinstance(p, RecoveredBits) else np.asarray(p, dtype=np.uint8)
    counts = [count_invalid(bits, o) for o in range(5)]
    best = min(range(5), key=lambda o: (counts[o][0], o))
    if counts[best][1] < min_codes:
        raise InsufficientData(f"only {counts[best][1]} non-IDLE codes, need {min_codes}")
    return best


def j_alignment(p, min_idle: int = 20) -> int | None:
    """Alignment voted by frame starts: J = 11000 puts the first 0 after IDLE at code bit 2."""
    bits = p.bits if isinstance(p, RecoveredBits) else np.asarray(p, dtype=np.uint8)
    zeros = np.flatnonzero(bits == 0)
    if len(zeros) == 0:
        return None
    runs = np.diff(np.concatenate([[-1], zeros])) - 1
    starts = zeros[runs >= min_idle]
    if len(starts) == 0:
        return None
    return int(np.argmax(np.bincount((starts - 2) % 5, minlength=5)))


# --------------------------------------------------------------------------
# frames


@dataclass
class FrameSpan:
    start: int          # code index of the J (or what should have been J)
    body_start: int
    body_end: int
    end: int            # one past the last delimiter code consumed
    terminated: bool


@dataclass
class RecoveredFrame:
    payload: bytes
    verdicts: CodeStream
    start_index: int
    end_index: int
    byte_error_mask: list[bool] = field(default_factory=list)
    truncated: bool = False      # odd nibble count, last nibble dropped
    unterminated: bool = False   # no T/R found

    @property
    def degraded(self) -> bool:
        return self.truncated or self.unterminated or any(self.byte_error_mask)


def frame_spans(stream: CodeStream) -> list[FrameSpan]:
    """Delimit frames by J,K ... T,R, tolerating one corrupted code in either pair."""
    v = stream.value.tolist()
    n = len(v)
    out = []
    i = 0
    while i + 1 < n:
        a, b = v[i], v[i + 1]
        is_start = (a == V_J and b in (V_K, INVALID)) or (
            a == INVALID and b == V_K and i > 0 and v[i - 1] == V_IDLE)
        if not is_start:
            i += 1
            continue
        j = i + 2
        span = None
        while j < n:
            x = v[j]
            y = v[j + 1] if j + 1 < n else V_IDLE
            if (x == V_T and y in (V_R, INVALID, V_IDLE)) or (x == INVALID and y == V_R):
                span = FrameSpan(i, i + 2, j, min(j + 2, n), True)
                break
            if (x == V_IDLE and y == V_IDLE) or (x == V_J and y == V_K):
                span = FrameSpan(i, i + 2, j, j, False)
                break
            j += 1
        if span is None:
            span = FrameSpan(i, i + 2, n, n, False)
        out.append(span)
        i = max(span.end, i + 2)
    s0 = stream.start
    return [FrameSpan(f.start + s0, f.body_start + s0, f.body_end + s0, f.end + s0, f.terminated) for f in out]


def assemble_frame(body: CodeStream, span: FrameSpan) -> RecoveredFrame:
    """Nibble pairs, low nibble first.  Codes that are not data become nibble 0 and flag their byte."""
    val = body.value
    is_data = (val >= 0) & (val < 16) & (body.status != Status.InvalidUncorrectable)
    nib = np.where(is_data, val, 0)
    suspect = ~is_data | (body.status != Status.UncorruptedValid)
    n_bytes = len(nib) // 2
    lo, hi = nib[0 : 2 * n_bytes : 2], nib[1 : 2 * n_bytes : 2]
    payload = bytes((lo | (hi << 4)).astype(np.uint8).tolist())
    mask = (suspect[0 : 2 * n_bytes : 2] | suspect[1 : 2 * n_bytes : 2]).tolist()
    return RecoveredFrame(payload, body, span.start, span.end, mask,
                          truncated=bool(len(nib) % 2), unterminated=not span.terminated)


def extract_frames(stream: CodeStream, retranslate=None) -> list[RecoveredFrame]:
    """Frames from a boundary-scan stream.

    ``retranslate(lo, hi)`` may supply the payload verdicts for code range
    ``[lo, hi)`` (for instance decoded against the data-only table with
    correction); by default the scan's own verdicts are used.
    """
    frames = []
    for span in frame_spans(stream):
        body = stream.slice(span.body_start, span.body_end) if retranslate is None \
            else retranslate(span.body_start, span.body_end)
        frames.append(assemble_frame(body, span))
    return frames
