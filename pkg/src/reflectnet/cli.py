"""Command line front end: encode, simulate, demod, decode, eval, budget.

Exit codes: 0 success, 1 frames recovered with errors, 2 bad input,
3 pipeline failure (no constellation, no scrambler lock, ...).

Seeds: each subcommand takes one ``--seed``.  ``encode`` draws the scrambler
state from ``default_rng(seed)``; ``simulate`` hands it to the channel, which
spawns an offset and a noise substream; ``eval --sweep`` spawns one substream
per grid point; ``eval --correlation`` seeds the reference keystream with
``[seed, 0]`` and the capture it synthesizes with ``[seed, 1]``.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import backscatter_sim as bs
from . import demod as dm
from . import evaluation as ev
from . import phy_codec as pc
from . import pipeline as pl
from . import recover as rc

log = logging.getLogger("reflectnet")

EXIT_OK, EXIT_DEGRADED, EXIT_INPUT, EXIT_PIPELINE = 0, 1, 2, 3


class InputError(Exception):
    pass


def _complex(s: str) -> complex:
    try:
        return complex(s.replace(" ", ""))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a complex number: {s!r}")


def _snr(s: str) -> float:
    v = float(s)
    if math.isnan(v):
        raise argparse.ArgumentTypeError("SNR is NaN")
    return v


def _scrambler_seed(seed: int) -> pc.ScramblerState:
    rng = np.random.default_rng(seed)
    while True:
        st = pc.ScramblerState.from_bits(rng.integers(0, 2, pc.LFSR_BITS))
        if not st.is_zero:
            return st


def _dump(obj, path=None) -> None:
    text = json.dumps(obj, indent=2, default=lambda o: o.item() if hasattr(o, "item") else str(o))
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


# --------------------------------------------------------------------------
# subcommands


def cmd_encode(a) -> int:
    try:
        frames = pc.read_frames_jsonl(a.frames)
    except pc.FrameParseError as exc:
        raise InputError(str(exc))
    state = _scrambler_seed(a.seed)
    ws = pc.encode_frames(frames, ipg_bits=a.ipg, idle_prefix=a.idle_prefix, idle_suffix=a.idle_suffix,
                          seed=state)
    pc.write_symbols(a.out, ws.symbols, {
        "seed": a.seed, "scrambler_state": str(state), "code_offset": ws.code_offset,
        "frame_spans": ws.frame_spans, "frame_ids": [f.id for f in frames], "n_symbols": len(ws.symbols)})
    log.info("wrote %d symbols, %d frames", len(ws.symbols), len(frames))
    return EXIT_OK


def cmd_simulate(a) -> int:
    sym, _ = pc.read_symbols(a.symbols)
    p = bs.ChannelParams(a.gamma_on, a.gamma_off, a.background, a.snr_db, a.sps, a.rise)
    p.validate()
    cap = bs.synthesize_capture(sym, p, seed=a.seed)
    if a.bandwidth:
        cap = bs.bandlimit(cap, a.bandwidth)
    bs.write_iq(a.out, cap)
    log.info("wrote %d samples at %.4g samples/symbol", len(cap), cap.samples_per_symbol)
    return EXIT_OK


def _load_model(a):
    if a.model is None:
        if a.discriminator == "model":
            raise InputError("--discriminator model needs --model")
        return None
    return dm.load_model(a.model)


def cmd_demod(a) -> int:
    cap = bs.read_iq(a.capture)
    res = dm.demodulate(cap, _load_model(a))
    dm.write_confident_symbols(a.out, res.symbols, {
        "sps": res.sps, "offset": res.offset, "threshold": res.threshold, "hotspot_method": res.hotspots.method,
        "hotspots": [[res.hotspots.h0.real, res.hotspots.h0.imag], [res.hotspots.h1.real, res.hotspots.h1.imag]]})
    return EXIT_OK


def cmd_decode(a) -> int:
    cap = bs.read_iq(a.capture)
    if a.train_idle:
        model, info = pl.train_from_idle(cap, c=a.c)
        dm.save_model(a.train_idle, model)
        log.info("trained on %d IDLE symbols, keystream agreement %.3f", info["n_train"],
                 info["keystream_agreement"])
    model = _load_model(a)
    res = pl.decode_capture(cap, model, correction=not a.no_correct)
    pc.write_frames_jsonl(a.out, [pc.Frame(f.payload, str(i)) for i, f in enumerate(res.frames)])
    rep = pl.report(res)
    rep["settings"] = {"discriminator": "model" if model else "median", "correction": not a.no_correct,
                       "model": a.model}
    if a.report:
        _dump(rep, a.report)
    log.info("%d frames", len(res.frames))
    return EXIT_DEGRADED if res.degraded else EXIT_OK


def cmd_eval(a) -> int:
    if a.sweep:
        grid = ev.default_grid(a.grid_points)
        pts = ev.correction_sweep(grid, a.n_codes, a.discriminator, a.seed, threads=a.threads,
                                  mask=a.mask, error_model=a.error_model)
        ev.write_sweep_csv(a.sweep, pts)
    elif a.correlation is not None:
        ref_seed, cap_seed = [a.seed, 0], [a.seed, 1]
        if a.correlation == "-":
            sym = pc.encode_frames([], idle_prefix=a.idle_symbols, idle_suffix=0,
                                   seed=_scrambler_seed(a.seed)).symbols
            cap = bs.synthesize_capture(sym, bs.ChannelParams(snr_db=a.snr_db), seed=cap_seed)
        else:
            cap = bs.read_iq(a.correlation)
        r = ev.correlation_map(cap, ref_seed, a.bandwidth)
        _dump({"r": r.r, "lag_samples": r.lag_samples, "sps": r.sps, "n_compared": r.n_compared}, a.out)
    elif a.cer_model:
        if a.pe is None:
            out = ev.adjudicate_cer(n_windows=a.n_windows, seed=a.seed)
        else:
            out = {"p_e": a.pe, "variant": a.variant, "cer": ev.cer_model(a.pe, a.variant)}
        _dump(out, a.out)
    return EXIT_OK


def cmd_budget(a) -> int:
    b = bs.LinkBudget(a.pt_dbm, a.gain_dbi, bs.wavelength(a.freq_mhz * 1e6), 10 ** (a.rcs_dbsm / 10), a.range_m)
    print(f"{bs.link_budget(b):.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="reflectnet", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("encode", help="frames.jsonl -> rectified symbol file")
    p.add_argument("frames")
    p.add_argument("out")
    p.add_argument("--ipg", type=int, default=pc.MIN_IPG_BITS, help="inter-packet gap in bits incl. delimiters")
    p.add_argument("--idle-prefix", type=int, default=4096, help="IDLE bits before the first frame")
    p.add_argument("--idle-suffix", type=int, default=256, help="IDLE bits after the last frame")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("simulate", help="symbol file -> .iq capture")
    p.add_argument("symbols")
    p.add_argument("out")
    p.add_argument("--snr-db", type=_snr, default=20.0, help="'inf' disables noise")
    p.add_argument("--sps", type=float, default=bs.DEFAULT_SPS)
    p.add_argument("--gamma-on", type=_complex, default=bs.DEFAULT_GAMMA_ON)
    p.add_argument("--gamma-off", type=_complex, default=bs.DEFAULT_GAMMA_OFF)
    p.add_argument("--background", type=_complex, default=bs.DEFAULT_BACKGROUND)
    p.add_argument("--rise", type=float, default=0.1, help="edge time as a fraction of a symbol")
    p.add_argument("--bandwidth", type=float, default=None, help="receiver bandwidth in Hz (off by default)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    def discriminator_args(p):
        p.add_argument("--discriminator", choices=("median", "model"), default="median")
        p.add_argument("--model", help="model file from decode --train-idle")

    p = sub.add_parser("demod", help=".iq capture -> confident symbols")
    p.add_argument("capture")
    p.add_argument("out")
    discriminator_args(p)
    p.set_defaults(func=cmd_demod)

    p = sub.add_parser("decode", help=".iq capture -> frames.jsonl (+ report)")
    p.add_argument("capture")
    p.add_argument("out")
    discriminator_args(p)
    p.add_argument("--train-idle", metavar="MODEL", help="train a classifier on this IDLE capture and write it")
    p.add_argument("--c", type=float, default=1.0, help="classifier regularization")
    p.add_argument("--no-correct", action="store_true", help="disable confidence-based code correction")
    p.add_argument("--report", help="write a JSON report here")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="correction sweep, IDLE correlation or CER model")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--sweep", metavar="CSV")
    mode.add_argument("--correlation", metavar="IQ", nargs="?", const="-",
                      help="correlate a capture (or a synthesized IDLE one) against the keystream")
    mode.add_argument("--cer-model", action="store_true")
    p.add_argument("--pe", type=float, help="with --cer-model; omit to adjudicate the variants by Monte Carlo")
    p.add_argument("--variant", choices=ev.VARIANTS, default="as-printed")
    p.add_argument("--n-windows", type=int, default=1_000_000)
    p.add_argument("--grid-points", type=int, default=21)
    p.add_argument("--n-codes", type=int, default=20_000)
    p.add_argument("--discriminator", choices=("median", "classifier"), default="median")
    p.add_argument("--error-model", choices=("iid", "burst"), default="iid")
    p.add_argument("--mask", type=lambda s: int(s, 2), default=0b00001, help="XOR shift of the code table, binary")
    p.add_argument("--threads", type=int, default=None, help="defaults to REFLECTNET_THREADS or the CPU count")
    p.add_argument("--snr-db", type=_snr, default=20.0, help="for the synthesized correlation capture")
    p.add_argument("--idle-symbols", type=int, default=3 * 2 * pc.LFSR_PERIOD)
    p.add_argument("--bandwidth", type=float, default=125e6)
    p.add_argument("--out", help="JSON output path (default stdout)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("budget", help="received backscatter power in dBm")
    p.add_argument("--pt-dbm", type=float, required=True)
    p.add_argument("--gain-dbi", type=float, default=0.0)
    p.add_argument("--freq-mhz", type=float, default=840.0)
    p.add_argument("--rcs-dbsm", type=float, required=True)
    p.add_argument("--range-m", type=float, required=True)
    p.set_defaults(func=cmd_budget)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        a = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return a.func(a)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (rc.RecoveryError, dm.DegenerateConstellation, dm.AlignmentError) as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
