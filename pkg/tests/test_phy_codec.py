import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import reference_lfsr, reference_mlt3
from reflectnet import phy_codec as pc
from reflectnet.phy_codec import Frame, ScramblerState

# rows as printed: code, name
TABLE_ROWS = [
    ("11110", "0"), ("01001", "1"), ("10100", "2"), ("10101", "3"),
    ("01010", "4"), ("01011", "5"), ("01110", "6"), ("01111", "7"),
    ("10010", "8"), ("10011", "9"), ("10110", "A"), ("10111", "B"),
    ("11010", "C"), ("11011", "D"), ("11100", "E"), ("11101", "F"),
    ("11111", "I"), ("11000", "J"), ("10001", "K"), ("01101", "T"), ("00111", "R"),
]
GREYED = ["00000", "00100", "00001", "00010", "00011", "00101", "00110",
          "01000", "01100", "10000", "11001"]


@pytest.mark.parametrize("code, name", TABLE_ROWS)
def test_table_rows(code, name):
    c = int(code, 2)
    cls = pc.classify_code5(c)
    if name in "0123456789ABCDEF" and len(name) == 1 and name != "I":
        assert cls.kind == "data"
        assert cls.nibble == int(name, 16)
        assert pc.encode_4b5b(int(name, 16)) == c
    elif name == "I":
        assert cls.kind == "idle"
    else:
        assert cls.kind == name


@pytest.mark.parametrize("code", GREYED)
def test_greyed_rows_invalid(code):
    assert pc.classify_code5(int(code, 2)).kind == "invalid"


def test_classification_is_total():
    kinds = [pc.classify_code5(c).kind for c in range(32)]
    assert kinds.count("data") == 16
    assert kinds.count("idle") == 1
    assert sum(kinds.count(k) for k in "JKTR") == 4
    assert kinds.count("invalid") == 11


def test_spot_examples():
    assert pc.encode_4b5b(0x0) == 0b11110
    assert pc.encode_4b5b(0x5) == 0b01011
    assert pc.encode_4b5b(0xF) == 0b11101
    assert pc.classify_code5(0b10010).nibble == 0x8
    assert pc.classify_code5(0b00100).reason.startswith("H")
    with pytest.raises(ValueError):
        pc.encode_4b5b(16)


def test_code_bit_roundtrip():
    codes = np.arange(32)
    bits = pc.codes_to_bits(codes)
    assert list(bits[:5]) == [0, 0, 0, 0, 0]
    assert list(pc.code_to_bits(0b10001)) == [1, 0, 0, 0, 1]
    np.testing.assert_array_equal(pc.bits_to_codes(bits), codes)


# ---- scrambler


def test_step_all_ones():
    k, s = pc.scrambler_step(ScramblerState.all_ones())
    assert k == 0
    assert s.register == (0,) + (1,) * 10


def test_step_rejects_zero():
    with pytest.raises(ValueError):
        pc.scrambler_step(ScramblerState((0,) * 11))


def test_seed_one_first_bits():
    # frozen from the reference LFSR oracle
    assert list(pc.keystream(ScramblerState.from_string("00000000001"), 11)) == [1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0]


def test_keystream_matches_step():
    s = ScramblerState.from_string("10110011101")
    ks = pc.keystream(s, 50)
    out = []
    for _ in range(50):
        k, s = pc.scrambler_step(s)
        out.append(k)
    assert list(ks) == out


@given(st.integers(1, 2047))
@settings(max_examples=40, deadline=None)
def test_keystream_vs_oracle(seed_int):
    seed = format(seed_int, "011b")
    ks = pc.keystream(ScramblerState.from_string(seed), 3000)
    assert list(ks) == reference_lfsr(seed, 3000)


def test_period_and_balance():
    ks = pc.keystream(ScramblerState.from_string("01000000000"), 2 * 2047)
    np.testing.assert_array_equal(ks[:2047], ks[2047:])
    assert ks[:2047].sum() == 1024
    # no shorter period divides 2047 = 23 * 89
    for p in (23, 89):
        assert not np.array_equal(ks[:p], ks[p : 2 * p])


def test_advance_matches_stepping():
    s = ScramblerState.from_string("11100010101")
    t = s
    for _ in range(37):
        _, t = pc.scrambler_step(t)
    assert pc.advance(s, 37) == t
    assert pc.advance(s, 2047) == s
    assert pc.advance(s, 5) == pc.advance(s, 5 + 2047)


@given(st.lists(st.integers(0, 1), min_size=0, max_size=300), st.integers(1, 2047))
def test_scramble_involution(bits, seed_int):
    seed = ScramblerState.from_string(format(seed_int, "011b"))
    x = np.array(bits, dtype=np.uint8)
    np.testing.assert_array_equal(pc.scramble(pc.scramble(x, seed), seed), x)


def test_scramble_idle_and_zero():
    seed = ScramblerState.from_string("00101100111")
    k = np.array(reference_lfsr("00101100111", 2047), dtype=np.uint8)
    np.testing.assert_array_equal(pc.scramble(np.ones(2047, np.uint8), seed), 1 - k)
    np.testing.assert_array_equal(pc.scramble(np.zeros(2047, np.uint8), seed), k)


def test_from_recent_keystream():
    seed = ScramblerState.from_string("10000000001")
    ks = pc.keystream(seed, 40)
    s = ScramblerState.from_recent_keystream(ks[10:21])
    np.testing.assert_array_equal(pc.keystream(s, 19), ks[21:40])


# ---- MLT-3


def test_mlt3_descending_from_plus_one():
    # phase 0 is +1 with 0 next, then -1
    assert list(pc.mlt3_encode([1, 1, 1, 1], phase=0)) == [0, -1, 0, 1]


def test_mlt3_stall():
    for phase in range(4):
        lv = pc.mlt3_encode([0, 0, 0, 0], phase)
        assert len(set(lv.tolist())) == 1


def test_mlt3_ones_period_four():
    lv = pc.mlt3_encode(np.ones(64, np.uint8))
    np.testing.assert_array_equal(lv[:-4], lv[4:])
    mag = np.abs(np.fft.rfft(lv.astype(float)))
    # bin 16 of 64 at 125 MBd is 31.25 MHz
    assert np.argmax(mag) == 16


@given(st.lists(st.integers(0, 1), min_size=1, max_size=200), st.integers(0, 3))
def test_mlt3_vs_oracle_and_no_jumps(bits, phase):
    start = pc.MLT3_CYCLE[phase]
    going_down = phase in (0, 1)
    lv = pc.mlt3_encode(bits, phase)
    assert lv.tolist() == reference_mlt3(bits, start, going_down)
    full = np.concatenate([[start], lv])
    assert np.all(np.abs(np.diff(full)) <= 1)


def test_rectify():
    assert list(pc.rectify([1, 0, -1, 0])) == [1, 0, 1, 0]
    assert not pc.rectify(np.zeros(10)).any()


def test_rectified_transition_exhaustive():
    # every (cycle state, bit) pair: rect XOR rect_prev equals the bit
    for phase in range(4):
        for b in (0, 1):
            prev = abs(pc.MLT3_CYCLE[phase])
            cur = pc.rectify(pc.mlt3_encode([b], phase))[0]
            assert prev ^ cur == b


def test_transitions():
    assert list(pc.transitions_to_bits([1, 0, 1, 0])) == [1, 1, 1]
    assert not pc.transitions_to_bits([1] * 9).any()
    with pytest.raises(ValueError):
        pc.transitions_to_bits([1])


@given(st.lists(st.integers(0, 1), min_size=2, max_size=300), st.integers(0, 3))
def test_mlt3_rectify_roundtrip(bits, phase):
    sym = pc.rectify(pc.mlt3_encode(bits, phase))
    np.testing.assert_array_equal(pc.transitions_to_bits(sym), np.array(bits[1:], np.uint8))


# ---- framing


def test_idle_only_stream():
    ws = pc.encode_frames([], idle_prefix=2047, idle_suffix=0)
    assert len(ws.symbols) == 2047
    assert ws.plain.all()
    bits = pc.transitions_to_bits(np.concatenate([[0], ws.symbols]))  # phase 3 starts at level 0
    np.testing.assert_array_equal(pc.scramble(bits, ws.seed), np.ones(2047, np.uint8))


def test_byte_nibble_order():
    assert pc.byte_codes(b"\xab") == [0b10111, 0b10110]


def test_frame_layout_and_ipg():
    frames = [Frame(b"\x01\x02", "a"), Frame(b"\xff", "b")]
    ws = pc.encode_frames(frames, ipg_bits=96, idle_prefix=4096)
    codes = ws.codes
    (s0, e0), (s1, e1) = ws.frame_spans
    assert list(codes[s0:e0]) == [pc.J, pc.K] + pc.byte_codes(b"\x01\x02") + [pc.T, pc.R]
    assert list(codes[s1:e1]) == [pc.J, pc.K] + pc.byte_codes(b"\xff") + [pc.T, pc.R]
    assert np.all(codes[e0:s1] == pc.IDLE)
    # T,R + idle + J,K
    gap_bits = 5 * ((s1 + 2) - (e0 - 2))
    assert gap_bits >= 96
    assert gap_bits - 5 < 96
    assert ws.code_offset == 4096 % 5


def test_ipg_precondition():
    with pytest.raises(ValueError):
        pc.encode_frames([Frame(b"x")], ipg_bits=95)
    with pytest.raises(ValueError):
        Frame(b"")


@given(st.lists(st.binary(min_size=1, max_size=40), min_size=1, max_size=4), st.integers(1, 2047),
       st.integers(0, 3), st.integers(0, 60))
@settings(max_examples=50, deadline=None)
def test_noiseless_codec_roundtrip(payloads, seed_int, phase, prefix_extra):
    seed = ScramblerState.from_string(format(seed_int, "011b"))
    frames = [Frame(p) for p in payloads]
    ws = pc.encode_frames(frames, idle_prefix=200 + prefix_extra, seed=seed, phase=phase)
    bits = pc.transitions_to_bits(ws.symbols)          # bit 0 lost
    plain = pc.scramble(bits, pc.advance(seed, 1))
    codes = pc.bits_to_codes(plain, (ws.code_offset - 1) % 5)
    shift = 1 if ws.code_offset == 0 else 0
    out = []
    for s, e in ws.frame_spans:
        nib = [pc.classify_code5(int(c)).nibble for c in codes[s + 2 - shift : e - 2 - shift]]
        out.append(bytes(lo | (hi << 4) for lo, hi in zip(nib[::2], nib[1::2])))
    assert out == payloads


def test_frames_jsonl(tmp_path):
    p = tmp_path / "f.jsonl"
    pc.write_frames_jsonl(p, [Frame(b"\xde\xad", "x")])
    assert p.read_text().strip() == '{"id": "x", "hex": "dead"}'
    assert pc.read_frames_jsonl(p)[0].payload == b"\xde\xad"
    p.write_text('{"id": "a", "hex": "00"}\n{"id": "b", "hex": "zz"}\n')
    with pytest.raises(pc.FrameParseError) as ei:
        pc.read_frames_jsonl(p)
    assert ei.value.lineno == 2


def test_symbol_file(tmp_path):
    p = tmp_path / "s.sym"
    pc.write_symbols(p, [0, 1, 1, 0])
    assert p.read_bytes() == b"\x00\x01\x01\x00"
    sym, meta = pc.read_symbols(p)
    assert meta["symbol_rate_baud"] == 125_000_000
    assert list(sym) == [0, 1, 1, 0]
