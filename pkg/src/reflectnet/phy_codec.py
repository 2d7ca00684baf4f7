"""100BASE-TX transmit/receive coding: 4B/5B, side-stream scrambler, MLT-3.

Bit vectors are ``numpy.uint8`` arrays of 0/1.  A 5-bit code is held as an
``int`` in [0, 32) whose most significant bit is the first bit on the wire,
matching the way the translation table is usually printed (``0b11110`` is
Data 0 and its leading ``1`` goes out first).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

SYMBOL_RATE_BAUD = 125_000_000
LFSR_BITS = 11
LFSR_PERIOD = 2 ** LFSR_BITS - 1
MIN_IPG_BITS = 96

# nibble -> 5-bit code
DATA_CODES = (
    0b11110, 0b01001, 0b10100, 0b10101,
    0b01010, 0b01011, 0b01110, 0b01111,
    0b10010, 0b10011, 0b10110, 0b10111,
    0b11010, 0b11011, 0b11100, 0b11101,
)
IDLE = 0b11111
J = 0b11000
K = 0b10001
T = 0b01101
R = 0b00111
CONTROL_CODES = {"J": J, "K": K, "T": T, "R": R}

_KIND_BY_CODE: dict[int, str] = {IDLE: "idle", **{v: k for k, v in CONTROL_CODES.items()}}
_NIBBLE_BY_CODE = {c: n for n, c in enumerate(DATA_CODES)}
_INVALID_REASON = {0b00000: "SLEEP", 0b00100: "H (force transmit error)"}


class Code5Class(NamedTuple):
    kind: str  # "data", "idle", "J", "K", "T", "R" or "invalid"
    nibble: int | None = None
    reason: str | None = None


def encode_4b5b(nibble: int) -> int:
    if not 0 <= nibble <= 15:
        raise ValueError(f"nibble out of range: {nibble}")
    return DATA_CODES[nibble]


def classify_code5(code: int) -> Code5Class:
    """Total classification of a 5-bit code against the translation table."""
    if not 0 <= code < 32:
        raise ValueError(f"not a 5-bit code: {code}")
    if code in _NIBBLE_BY_CODE:
        return Code5Class("data", _NIBBLE_BY_CODE[code])
    if code in _KIND_BY_CODE:
        return Code5Class(_KIND_BY_CODE[code])
    return Code5Class("invalid", reason=_INVALID_REASON.get(code, "invalid code"))


def code_to_bits(code: int) -> np.ndarray:
    return np.array([(code >> (4 - i)) & 1 for i in range(5)], dtype=np.uint8)


def bits_to_codes(bits: np.ndarray, offset: int = 0) -> np.ndarray:
    """Pack a bit stream into 5-bit codes starting at ``offset`` (tail dropped)."""
    bits = np.asarray(bits, dtype=np.uint8)[offset:]
    n = len(bits) // 5
    chunks = bits[: 5 * n].reshape(n, 5).astype(np.int64)
    return chunks @ np.array([16, 8, 4, 2, 1], dtype=np.int64)


def codes_to_bits(codes: Iterable[int]) -> np.ndarray:
    codes = np.asarray(list(codes), dtype=np.int64)
    shifts = np.array([4, 3, 2, 1, 0])
    return ((codes[:, None] >> shifts) & 1).astype(np.uint8).ravel()


# --------------------------------------------------------------------------
# side-stream scrambler


@dataclass(frozen=True)
class ScramblerState:
    """11-bit LFSR content; ``register[i]`` is the keystream bit k[n-i-1]."""

    register: tuple[int, ...]

    def __post_init__(self):
        if len(self.register) != LFSR_BITS or any(b not in (0, 1) for b in self.register):
            raise ValueError("register must hold exactly 11 bits")

    @classmethod
    def from_bits(cls, bits) -> "ScramblerState":
        return cls(tuple(int(b) for b in bits))

    @classmethod
    def from_string(cls, s: str) -> "ScramblerState":
        return cls(tuple(int(ch) for ch in s))

    @classmethod
    def all_ones(cls) -> "ScramblerState":
        return cls((1,) * LFSR_BITS)

    @classmethod
    def from_recent_keystream(cls, recent) -> "ScramblerState":
        """State following the 11 keystream bits ``recent`` (oldest first)."""
        recent = [int(b) for b in recent]
        if len(recent) != LFSR_BITS:
            raise ValueError("need exactly 11 keystream bits")
        return cls(tuple(reversed(recent)))

    @property
    def is_zero(self) -> bool:
        return not any(self.register)

    def as_array(self) -> np.ndarray:
        return np.array(self.register, dtype=np.uint8)

    def __str__(self) -> str:
        return "".join(str(b) for b in self.register)


def _check_nonzero(state: ScramblerState) -> None:
    if state.is_zero:
        raise ValueError("all-zero scrambler state is absorbing")


def scrambler_step(state: ScramblerState) -> tuple[int, ScramblerState]:
    _check_nonzero(state)
    reg = state.register
    k = reg[8] ^ reg[10]
    return k, ScramblerState((k,) + reg[:-1])


def _one_period(state: ScramblerState) -> np.ndarray:
    hist = list(reversed(state.register))  # k[-11] .. k[-1]
    for n in range(LFSR_PERIOD):
        hist.append(hist[n + 2] ^ hist[n])  # k[n] = k[n-9] ^ k[n-11]
    return np.array(hist[LFSR_BITS:], dtype=np.uint8)


def keystream(state: ScramblerState, n: int) -> np.ndarray:
    """First ``n`` keystream bits produced from ``state``."""
    _check_nonzero(state)
    if n <= 0:
        return np.zeros(0, dtype=np.uint8)
    return np.resize(_one_period(state), n)


def advance(state: ScramblerState, steps: int) -> ScramblerState:
    """State after ``steps`` clock cycles."""
    _check_nonzero(state)
    steps %= LFSR_PERIOD
    if steps == 0:
        return state
    full = np.concatenate([np.array(state.register[::-1], dtype=np.uint8), _one_period(state)[:steps]])
    return ScramblerState.from_recent_keystream(full[-LFSR_BITS:])


def scramble(bits, seed: ScramblerState) -> np.ndarray:
    """XOR ``bits`` with the free-running keystream; its own inverse."""
    bits = np.asarray(bits, dtype=np.uint8)
    return bits ^ keystream(seed, len(bits))


descramble_bits = scramble


# --------------------------------------------------------------------------
# MLT-3 line code

MLT3_CYCLE = (1, 0, -1, 0)
# Phase 3 is the 0 level that precedes +1 ("ascending").
DEFAULT_MLT3_PHASE = 3


def mlt3_encode(bits, phase: int = DEFAULT_MLT3_PHASE) -> np.ndarray:
    """Levels in {-1, 0, +1}; a 1 advances the cycle +1,0,-1,0 and a 0 stalls.

    ``phase`` is the cycle position of the level preceding the first bit.
    """
    if phase not in range(4):
        raise ValueError("phase must be a cycle index in 0..3")
    bits = np.asarray(bits, dtype=np.int64)
    pos = (phase + np.cumsum(bits)) % 4
    return np.asarray(MLT3_CYCLE, dtype=np.int8)[pos]


def rectify(levels) -> np.ndarray:
    return (np.asarray(levels) != 0).astype(np.uint8)


def transitions_to_bits(symbols) -> np.ndarray:
    symbols = np.asarray(symbols, dtype=np.uint8)
    if len(symbols) < 2:
        raise ValueError("need at least two symbols")
    return symbols[1:] ^ symbols[:-1]


# --------------------------------------------------------------------------
# framing


@dataclass
class Frame:
    payload: bytes
    id: str = ""

    def __post_init__(self):
        self.payload = bytes(self.payload)
        if not self.payload:
            raise ValueError("empty frame payload")


def byte_codes(payload: bytes) -> list[int]:
    out = []
    for b in payload:
        out.append(DATA_CODES[b & 0x0F])
        out.append(DATA_CODES[b >> 4])
    return out


def ipg_idle_codes(ipg_bits: int) -> int:
    """IDLE codes between T/R and the next J/K so the gap incl. delimiters is >= ipg_bits."""
    return max(0, math.ceil((ipg_bits - 20) / 5))


@dataclass
class WireStream:
    """Everything the transmitter produced, kept for ground truth."""

    plain: np.ndarray        # 4B/5B bit stream before scrambling
    keystream: np.ndarray
    levels: np.ndarray
    symbols: np.ndarray      # rectified, one per bit
    code_offset: int         # bit index of the first whole code
    frame_spans: list[tuple[int, int]] = field(default_factory=list)  # code index of J, index after R
    seed: ScramblerState = field(default_factory=ScramblerState.all_ones)

    @property
    def codes(self) -> np.ndarray:
        return bits_to_codes(self.plain, self.code_offset)


def encode_frames(
    frames: Sequence[Frame],
    ipg_bits: int = MIN_IPG_BITS,
    idle_prefix: int = 4096,
    idle_suffix: int = 256,
    seed: ScramblerState | None = None,
    phase: int = DEFAULT_MLT3_PHASE,
) -> WireStream:
    """Full transmit chain with ground truth retained."""
    if ipg_bits < MIN_IPG_BITS:
        raise ValueError(f"ipg_bits must be >= {MIN_IPG_BITS}")
    if idle_prefix < 0 or idle_suffix < 0:
        raise ValueError("idle runs must be non-negative")
    seed = seed or ScramblerState.all_ones()
    _check_nonzero(seed)

    gap = ipg_idle_codes(ipg_bits)
    codes: list[int] = []
    spans = []
    for i, fr in enumerate(frames):
        if i:
            codes.extend([IDLE] * gap)
        start = len(codes)
        codes += [J, K] + byte_codes(fr.payload) + [T, R]
        spans.append((start, len(codes)))
    if frames:
        codes.extend([IDLE] * gap)
    codes.extend([IDLE] * math.ceil(idle_suffix / 5))

    lead = np.ones(idle_prefix, dtype=np.uint8)
    plain = np.concatenate([lead, codes_to_bits(codes)]) if codes else lead
    k = keystream(seed, len(plain))
    levels = mlt3_encode(plain ^ k, phase)
    return WireStream(
        plain=plain,
        keystream=k,
        levels=levels,
        symbols=rectify(levels),
        code_offset=idle_prefix % 5,
        frame_spans=[(s + idle_prefix // 5, e + idle_prefix // 5) for s, e in spans],
        seed=seed,
    )


def frame_to_wire(frames: Sequence[Frame], ipg_bits: int = MIN_IPG_BITS, **kw) -> np.ndarray:
    return encode_frames(frames, ipg_bits, **kw).symbols


# --------------------------------------------------------------------------
# file formats


class FrameParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


def read_frames_jsonl(path) -> list[Frame]:
    frames = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                payload = bytes.fromhex(obj["hex"])
                frames.append(Frame(payload, str(obj.get("id", lineno))))
            except (ValueError, KeyError, TypeError) as exc:
                raise FrameParseError(path, lineno, str(exc)) from exc
    return frames


def write_frames_jsonl(path, frames: Iterable[Frame]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for fr in frames:
            fh.write(json.dumps({"id": fr.id, "hex": fr.payload.hex()}) + "\n")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_symbols(path, symbols, meta: dict | None = None) -> None:
    symbols = np.asarray(symbols, dtype=np.uint8)
    if np.any(symbols > 1):
        raise ValueError("symbols must be 0/1")
    Path(path).write_bytes(symbols.tobytes())
    side = {"symbol_rate_baud": SYMBOL_RATE_BAUD, **(meta or {})}
    sidecar_path(path).write_text(json.dumps(side, indent=2))


def read_symbols(path) -> tuple[np.ndarray, dict]:
    data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).copy()
    if np.any(data > 1):
        raise ValueError(f"{path}: symbol bytes must be 0x00 or 0x01")
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {"symbol_rate_baud": SYMBOL_RATE_BAUD}
    return data, meta
