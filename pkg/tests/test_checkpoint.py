import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dccn import checkpoint
from dccn.config import ModelConfig
from dccn.errors import FormatError
from dccn.multimodal import DCCNModel


def small_model(variant="full"):
    cfg = ModelConfig(src_vocab=12, tgt_vocab=14, d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=16,
                      d_caps=8, variant=variant)
    return DCCNModel(cfg, seed=4)


def test_layout_of_single_entry():
    raw = checkpoint.dumps({"w": np.array([[1.0, 2.0]])}, {"a": 1})
    meta = b'{"a": 1}'
    expected = (b"DCCNCKPT" + struct.pack("<II", 1, len(meta)) + meta + struct.pack("<I", 1)
                + struct.pack("<HB", 1, 2) + b"w" + struct.pack("<2I", 1, 2) + struct.pack("<2d", 1.0, 2.0))
    assert raw == expected


arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                    elements=st.floats(allow_nan=False, width=64))


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=6), arrays, max_size=4))
def test_round_trip_is_bit_identical(state):
    back, meta = checkpoint.loads(checkpoint.dumps(state, {"k": [1, 2]}))
    assert meta == {"k": [1, 2]}
    assert set(back) == set(state)
    for k in state:
        assert back[k].shape == state[k].shape and back[k].tobytes() == state[k].tobytes()
    assert checkpoint.dumps(back, meta) == checkpoint.dumps(state, meta)


def test_model_round_trip_includes_routing_scale(tmp_path):
    model = small_model()
    net = model.last.extractors["global"]
    net.v_scale[0] = 0.125
    assert "last.dccn_global.v_scale" in model.state_dict()
    checkpoint.save_model(tmp_path / "m.ckpt", model, step=3)
    back, meta = checkpoint.load_model(tmp_path / "m.ckpt")
    assert meta["step"] == 3 and meta["model"]["variant"] == "full"
    assert back.last.extractors["global"].v_scale[0] == 0.125
    a, b = model.state_dict(), back.state_dict()
    assert set(a) == set(b) and all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_load_state_dict_rejects_mismatch():
    state = small_model().state_dict()
    target = small_model("text-only")
    with pytest.raises(Exception, match="dccn"):
        target.load_state_dict(state)


def _valid():
    return checkpoint.dumps({"ab": np.arange(3.0), "c": np.ones((2, 2))}, {"x": 1})


def test_truncation_positions():
    buf = _valid()
    # offsets are the start of the field that could not be read
    data_c = len(buf) - 4 * 8
    for cut, offset, what in ((4, 0, "magic"), (14, 12, "metadata length"), (len(buf) - 1, data_c, "data of c")):
        with pytest.raises(FormatError, match=f"truncated while reading {what}") as info:
            checkpoint.loads(buf[:cut])
        assert info.value.offset == offset


def test_bad_magic_version_trailing():
    buf = bytearray(_valid())
    with pytest.raises(FormatError, match="magic") as info:
        checkpoint.loads(b"X" + bytes(buf[1:]))
    assert info.value.offset == 0
    bad = bytearray(buf)
    bad[8:12] = struct.pack("<I", 9)
    with pytest.raises(FormatError, match="version 9") as info:
        checkpoint.loads(bytes(bad))
    assert info.value.offset == 8
    with pytest.raises(FormatError, match="trailing") as info:
        checkpoint.loads(bytes(buf) + b"\0\0")
    assert info.value.offset == len(buf)


def test_bad_metadata_and_duplicates():
    meta = b"{nope"
    raw = b"DCCNCKPT" + struct.pack("<II", 1, len(meta)) + meta + struct.pack("<I", 0)
    with pytest.raises(FormatError, match="JSON") as info:
        checkpoint.loads(raw)
    assert info.value.offset == 16
    entry = struct.pack("<HB", 1, 1) + b"w" + struct.pack("<I", 1) + struct.pack("<d", 0.0)
    raw = b"DCCNCKPT" + struct.pack("<II", 1, 2) + b"{}" + struct.pack("<I", 2) + entry + entry
    with pytest.raises(FormatError, match="duplicate"):
        checkpoint.loads(raw)


def test_load_names_path(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"DCCN")
    with pytest.raises(FormatError, match="bad.ckpt"):
        checkpoint.load(p)
