"""Behavioral model of the diode implant and the interrogation channel.

The implant exposes ``|D+ - D-|``: a rectified symbol of 1 puts it in the
``gamma_on`` state and 0 in ``gamma_off``.  Everything is simulated at complex
baseband; the carrier only appears as metadata.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .phy_codec import SYMBOL_RATE_BAUD, sidecar_path

SPEED_OF_LIGHT = 299_792_458.0
CAPTURE_SAMPLE_RATE_HZ = 1.6e9
DEFAULT_SPS = CAPTURE_SAMPLE_RATE_HZ / SYMBOL_RATE_BAUD  # 12.8

# Plausible, not measured: a weak two-state perturbation on a strong static term.
DEFAULT_GAMMA_ON = 0.30 + 0.12j
DEFAULT_GAMMA_OFF = 0.06 - 0.04j
DEFAULT_BACKGROUND = 1.10 + 0.65j


@dataclass
class ChannelParams:
    gamma_on: complex = DEFAULT_GAMMA_ON
    gamma_off: complex = DEFAULT_GAMMA_OFF
    background: complex = DEFAULT_BACKGROUND
    snr_db: float = 20.0  # referenced to |gamma_on - gamma_off| / 2; inf disables noise
    samples_per_symbol: float = DEFAULT_SPS
    rise_fraction: float = 0.1

    def validate(self) -> None:
        if self.gamma_on == self.gamma_off:
            raise ValueError("gamma_on and gamma_off must differ")
        if not self.samples_per_symbol >= 2:
            raise ValueError("samples_per_symbol must be >= 2")
        if not 0 <= self.rise_fraction < 0.5:
            raise ValueError("rise_fraction must lie in [0, 0.5)")
        if math.isnan(self.snr_db):
            raise ValueError("snr_db is NaN")
        for v in (self.gamma_on, self.gamma_off, self.background):
            if not np.isfinite(v):
                raise ValueError("reflection values must be finite")

    @property
    def amplitude(self) -> float:
        return abs(self.gamma_on - self.gamma_off) / 2

    @property
    def noise_power(self) -> float:
        if math.isinf(self.snr_db) and self.snr_db > 0:
            return 0.0
        return self.amplitude ** 2 * 10 ** (-self.snr_db / 10)

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("gamma_on", "gamma_off", "background"):
            d[k] = [complex(d[k]).real, complex(d[k]).imag]
        d["snr_db"] = None if math.isinf(self.snr_db) else self.snr_db
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ChannelParams":
        d = dict(d)
        for k in ("gamma_on", "gamma_off", "background"):
            if k in d:
                d[k] = complex(*d[k])
        if d.get("snr_db", 0.0) is None:
            d["snr_db"] = math.inf
        return cls(**d)


@dataclass
class IqCapture:
    samples: np.ndarray
    sample_rate_hz: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("capture contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def samples_per_symbol(self) -> float:
        return self.sample_rate_hz / self.meta.get("symbols_per_second", SYMBOL_RATE_BAUD)


def _substreams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def synthesize_capture(symbols, p: ChannelParams | None = None, seed=0,
                       offset: float | None = None) -> IqCapture:
    """Map rectified symbols onto the two reflection states and add noise.

    ``offset`` is the (fractional) sample index where symbol 0 starts; when
    omitted it is drawn uniformly in ``[0, sps)``.  Symbol ``i`` then covers
    samples ``n`` with ``offset + i*sps <= n < offset + (i+1)*sps``; samples
    before ``offset`` repeat symbol 0.
    """
    p = p or ChannelParams()
    p.validate()
    symbols = np.asarray(symbols, dtype=np.uint8)
    if len(symbols) == 0:
        raise ValueError("no symbols to synthesize")
    sps = float(p.samples_per_symbol)
    offset_rng, noise_rng = _substreams(seed, 2)
    if offset is None:
        offset = float(offset_rng.uniform(0, sps))

    n = int(math.ceil(offset + len(symbols) * sps))
    t = (np.arange(n) - offset) / sps
    idx = np.clip(np.floor(t).astype(np.int64), 0, len(symbols) - 1)
    frac = np.where(t < 0, 1.0, t - np.floor(t))
    states = np.where(symbols.astype(bool), p.gamma_on, p.gamma_off).astype(np.complex128)
    cur = states[idx]
    if p.rise_fraction > 0:
        prev = states[np.maximum(idx - 1, 0)]
        w = np.clip(frac / p.rise_fraction, 0.0, 1.0)
        cur = prev + (cur - prev) * w
    x = cur + p.background
    if p.noise_power > 0:
        scale = math.sqrt(p.noise_power / 2)
        x = x + scale * (noise_rng.standard_normal(n) + 1j * noise_rng.standard_normal(n))

    meta = {
        "symbols_per_second": SYMBOL_RATE_BAUD,
        "sample_rate_hz": sps * SYMBOL_RATE_BAUD,
        "n_symbols": int(len(symbols)),
        "symbol_offset_samples": offset,
        "channel": p.to_json(),
        "seed": seed if isinstance(seed, (int, type(None))) else str(seed),
    }
    return IqCapture(x, sps * SYMBOL_RATE_BAUD, meta)


def lowpass_taps(cutoff_hz: float, sample_rate_hz: float, atten_db: float = 60.0) -> np.ndarray:
    """Kaiser-window FIR with its -6 dB point at ``cutoff_hz`` and a transition of +-25 %."""
    nyq = sample_rate_hz / 2
    width = min(0.5 * cutoff_hz, 2 * (nyq - cutoff_hz)) / nyq
    numtaps, beta = signal.kaiserord(atten_db, width)
    numtaps |= 1  # odd length: integer group delay
    return signal.firwin(numtaps, cutoff_hz / nyq, window=("kaiser", beta))


def bandlimit(capture: IqCapture, bandwidth_hz: float) -> IqCapture:
    """Baseband equivalent of a band-pass of ``bandwidth_hz`` around the carrier."""
    fs = capture.sample_rate_hz
    if not 0 < bandwidth_hz <= fs:
        raise ValueError("bandwidth must lie in (0, sample_rate]")
    meta = dict(capture.meta, bandwidth_hz=bandwidth_hz)
    cutoff = bandwidth_hz / 2
    if cutoff >= 0.95 * fs / 2:
        return IqCapture(capture.samples.copy(), fs, meta)
    taps = lowpass_taps(cutoff, fs)
    # symmetric taps, odd length: 'same' removes the group delay exactly
    y = signal.oaconvolve(capture.samples, taps, mode="same")
    return IqCapture(y, fs, meta)


# --------------------------------------------------------------------------
# link budget


@dataclass
class LinkBudget:
    pt_dbm: float
    gain_dbi: float
    wavelength_m: float
    rcs_m2: float
    range_m: float


def wavelength(freq_hz: float) -> float:
    if not freq_hz > 0:
        raise ValueError("frequency must be positive")
    return SPEED_OF_LIGHT / freq_hz


def link_budget(b: LinkBudget) -> float:
    """Monostatic radar equation, same antenna gain on both paths; returns dBm."""
    for name in ("wavelength_m", "rcs_m2", "range_m"):
        v = getattr(b, name)
        if not (v > 0 and math.isfinite(v)):
            raise ValueError(f"{name} must be positive and finite")
    return (b.pt_dbm + 2 * b.gain_dbi + 20 * math.log10(b.wavelength_m) + 10 * math.log10(b.rcs_m2)
            - 30 * math.log10(4 * math.pi) - 40 * math.log10(b.range_m))


# --------------------------------------------------------------------------
# .iq files


def write_iq(path, capture: IqCapture) -> None:
    inter = np.empty(2 * len(capture), dtype="<f4")
    inter[0::2] = capture.samples.real
    inter[1::2] = capture.samples.imag
    Path(path).write_bytes(inter.tobytes())
    side = {"sample_rate_hz": capture.sample_rate_hz,
            "symbols_per_second": capture.meta.get("symbols_per_second", SYMBOL_RATE_BAUD),
            **capture.meta}
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True))


def read_iq(path) -> IqCapture:
    side = sidecar_path(path)
    if not side.exists():
        raise FileNotFoundError(f"missing sidecar {side}")
    meta = json.loads(side.read_text())
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if len(raw) % 2:
        raise ValueError(f"{path}: odd number of float32 values")
    return IqCapture(raw[0::2] + 1j * raw[1::2].astype(np.float64), float(meta["sample_rate_hz"]), meta)
