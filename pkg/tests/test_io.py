import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyngen.diffcore import SeededRng
from dyngen.io import (
    KEYS,
    ConfigError,
    FormatError,
    RunConfig,
    dump_config,
    export_frames,
    from_bytes,
    import_frames,
    load_config,
    parse_config,
    read_mask,
    read_pnm,
    read_sequence,
    to_bytes,
    write_mask,
    write_pnm,
    write_sequence,
)


def seq(shape=(3, 4, 5, 1), seed=0):
    return np.tanh(SeededRng(seed).standard_normal(shape))


# binary formats


def test_sequence_round_trip(tmp_path):
    X = seq().astype(np.float32).astype(np.float64)
    write_sequence(X, tmp_path / "a.dgsq")
    Y = read_sequence(tmp_path / "a.dgsq")
    assert Y.dtype == np.float64 and np.array_equal(X, Y)
    write_sequence(Y, tmp_path / "b.dgsq")
    assert (tmp_path / "a.dgsq").read_bytes() == (tmp_path / "b.dgsq").read_bytes()


def test_sequence_layout(tmp_path):
    X = np.arange(24, dtype=np.float64).reshape(2, 3, 2, 2) / 24
    write_sequence(X, tmp_path / "a.dgsq")
    raw = (tmp_path / "a.dgsq").read_bytes()
    assert raw[:4] == b"DGSQ"
    assert struct.unpack_from("<5I", raw, 4) == (1, 2, 3, 2, 2)
    np.testing.assert_array_equal(np.frombuffer(raw[24:], "<f4"), X.ravel().astype(np.float32))


def test_sequence_rejects_out_of_range(tmp_path):
    with pytest.raises(FormatError):
        write_sequence(np.full((1, 2, 2, 1), 1.5), tmp_path / "a.dgsq")
    with pytest.raises(FormatError):
        write_sequence(np.zeros((2, 2, 1)), tmp_path / "a.dgsq")


def test_sequence_read_errors(tmp_path):
    p = tmp_path / "a.dgsq"
    write_sequence(seq(), p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        read_sequence(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        read_sequence(p)
    p.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(FormatError):
        read_sequence(p)
    p.write_bytes(raw[:24] + np.full(60, 2.0, "<f4").tobytes())
    with pytest.raises(FormatError):
        read_sequence(p)


def test_mask_round_trip(tmp_path):
    M = SeededRng(1).uniform(3 * 4 * 5).reshape(3, 4, 5, 1) > 0.5
    write_mask(M, tmp_path / "m.dgmk")
    assert np.array_equal(read_mask(tmp_path / "m.dgmk"), M)
    raw = (tmp_path / "m.dgmk").read_bytes()
    assert raw[:4] == b"DGMK" and set(raw[24:]) <= {0, 1}


def test_mask_rejects_bad_bytes(tmp_path):
    p = tmp_path / "m.dgmk"
    write_mask(np.ones((1, 2, 2, 1), bool), p)
    raw = bytearray(p.read_bytes())
    raw[-1] = 7
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_mask(p)


# pixel mapping and frame files


def test_endpoint_mapping():
    assert from_bytes(255) == 1.0 and from_bytes(0) == -1.0
    np.testing.assert_array_equal(to_bytes([-1.0, 1.0, 0.0]), [0, 255, 128])


def test_rounding_is_half_to_even():
    # 0 maps to 127.5 exactly, the one representable tie; its neighbours round away from it
    assert to_bytes(0.0) == 128
    assert to_bytes(np.nextafter(0.0, -1.0)) == 128
    assert to_bytes(-0.5 / 127.5) == 127
    np.testing.assert_array_equal(to_bytes(from_bytes(np.arange(256))), np.arange(256))


def test_black_pgm_converts_to_minus_one(tmp_path):
    d = tmp_path / "frames"
    d.mkdir()
    write_pnm(np.zeros((2, 2), np.uint8), d / "f0.pgm")
    X = import_frames(d)
    assert X.shape == (1, 2, 2, 1) and np.all(X == -1.0)


def test_pnm_round_trip(tmp_path):
    rng = SeededRng(2)
    for c, name in ((1, "a.pgm"), (3, "a.ppm")):
        img = (rng.uniform(5 * 7 * c) * 256).astype(np.uint8).reshape(5, 7, c)
        write_pnm(img, tmp_path / name)
        assert np.array_equal(read_pnm(tmp_path / name), img)


def test_pnm_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n# another\n255\n" + bytes([0, 255]))
    assert read_pnm(p).ravel().tolist() == [0, 255]


def test_pnm_rejects_other_formats(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(FormatError):
        read_pnm(p)
    p.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(FormatError):
        read_pnm(p)
    p.write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(FormatError):
        read_pnm(p)


def test_mixed_dimensions_rejected(tmp_path):
    write_pnm(np.zeros((2, 2), np.uint8), tmp_path / "a.pgm")
    write_pnm(np.zeros((3, 2), np.uint8), tmp_path / "b.pgm")
    with pytest.raises(FormatError):
        import_frames(tmp_path)


@pytest.mark.parametrize("c", [1, 3])
def test_convert_export_convert(tmp_path, c):
    X = seq((4, 3, 5, c), seed=c)
    paths = export_frames(X, tmp_path / "a")
    assert [p.name for p in paths][:2] == [f"frame_00000.{'pgm' if c == 1 else 'ppm'}", f"frame_00001.{'pgm' if c == 1 else 'ppm'}"]
    Y = import_frames(tmp_path / "a")
    assert np.abs(Y - X).max() <= 1 / 255 + 1e-12
    export_frames(Y, tmp_path / "b")
    Z = import_frames(tmp_path / "b")
    assert np.array_equal(Y, Z)


# configuration


def test_defaults():
    cfg = parse_config("")
    assert isinstance(cfg, RunConfig) and cfg.preset == "desk"
    assert cfg.train.learning_rate == 0.002 and cfg.train.chunk_length == 30
    assert cfg.synth.burn_in == 60 and not cfg.model_explicit


def test_values_and_comments():
    text = """
    # comment
    model.d = 6   # trailing
    model.frame_shape = 8x8x3
    langevin.delta = 0.05
    langevin.mh = true
    train.variant = appearance
    model.d_appearance = 2
    synth.length = 12
    """
    cfg = parse_config(text)
    assert cfg.model.d == 6 and cfg.model.frame_shape == (8, 8, 3)
    assert cfg.train.langevin.step_size == 0.05 and cfg.train.langevin.mh_correct
    assert cfg.train.variant == "appearance" and cfg.synth.length == 12
    assert cfg.model_explicit


def test_order_independent():
    lines = ["model.d = 4", "model.preset = paper", "train.lr = 0.01", "langevin.steps = 3"]
    a = parse_config("\n".join(lines))
    b = parse_config("\n".join(reversed(lines)))
    assert dump_config(a) == dump_config(b)
    assert a.model.d == 4 and a.preset == "paper"


def test_dump_round_trip():
    cfg = parse_config("model.d = 7\ntrain.seed = 3\nlangevin.sigma = 0.5\nmodel.preset = paper")
    again = parse_config(dump_config(cfg))
    assert dump_config(again) == dump_config(cfg)
    assert again.model == cfg.model and again.train == cfg.train and again.synth == cfg.synth


@pytest.mark.parametrize(
    "text,line,key",
    [
        ("model.d = 4\nmodel.colour = 3", 2, "model.colour"),
        ("model.d = 4\n\nmodel.d = 5", 3, "model.d"),
        ("# x\nmodel.d 4", 2, None),
        ("train.lr =", 1, "train.lr"),
        ("model.d = four", 1, "model.d"),
        ("model.decoder = gan", 1, "model.decoder"),
        ("model.frame_shape = 3x3", 1, "model.frame_shape"),
        ("\n\ntrain.chunk = 0", 3, "train.chunk"),
        ("langevin.mh = maybe", 1, "langevin.mh"),
    ],
)
def test_errors_carry_line_numbers(text, line, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)
    if key is not None:
        assert info.value.key == key and key in str(info.value)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    (tmp_path / "bin.cfg").write_bytes(b"\xff\xfe\x00")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bin.cfg")


key_names = st.sampled_from(sorted(KEYS) + ["bogus", "model.", "train.lr.x", ""])
values = st.one_of(
    st.text(max_size=12),
    st.integers(-5, 100).map(str),
    st.floats(allow_nan=True, allow_infinity=True).map(repr),
    st.sampled_from(["mlp", "deconv", "desk", "paper", "plain", "4x4x1", "true", "0"]),
)
lines = st.one_of(
    st.tuples(key_names, values).map(lambda kv: f"{kv[0]} = {kv[1]}"),
    st.text(max_size=20),
)


@settings(max_examples=400, deadline=None)
@given(st.lists(lines, max_size=6))
def test_parsing_is_total(text_lines):
    text = "\n".join(text_lines)
    try:
        parse_config(text)
    except ConfigError:
        pass
