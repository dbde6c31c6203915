import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from daffnet import fileio
from daffnet.errors import BadMagicError, TruncatedPayloadError, VersionMismatchError, VolumeFormatError


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=5), elements=st.floats(-1e6, 1e6, width=32)))
def test_intensity_round_trip_bit_exact(arr):
    rec = fileio.decode_volume(fileio.encode_volume(arr, "intensity", (1.0, 0.5, 2.0)))
    assert rec.kind == "intensity" and rec.spacing == (1.0, 0.5, 2.0)
    assert rec.data.tobytes() == arr.tobytes()


def test_field_and_label_round_trip(tmp_path, rng):
    u = rng.standard_normal((3, 4, 5, 6)).astype(np.float32)
    fileio.write_volume(tmp_path / "u.dvol", u, "field")
    back = fileio.read_volume(tmp_path / "u.dvol")
    assert back.kind == "field" and back.data.tobytes() == u.tobytes()
    lab = rng.integers(0, 4, (4, 4, 4))
    fileio.write_volume(tmp_path / "l.dvol", lab, "labels")
    back = fileio.read_volume(tmp_path / "l.dvol")
    assert back.data.dtype == np.int64 and np.array_equal(back.data, lab)


def test_header_layout():
    blob = fileio.encode_volume(np.zeros((2, 3, 4), np.float32))
    magic, version, kind, ch, d, h, w = struct.unpack_from("<4sHHH3I", blob)
    assert (magic, version, kind, ch, d, h, w) == (b"DVOL", 1, 1, 1, 2, 3, 4)
    assert len(blob) == 34 + 2 * 3 * 4 * 4


def test_bad_magic():
    blob = fileio.encode_volume(np.zeros((2, 2, 2), np.float32))
    with pytest.raises(BadMagicError, match="bad magic"):
        fileio.decode_volume(b"NOPE" + blob[4:])
    with pytest.raises(BadMagicError):
        fileio.decode_volume(b"")


def test_truncated_payload():
    blob = fileio.encode_volume(np.zeros((2, 2, 2), np.float32))
    with pytest.raises(TruncatedPayloadError, match="truncated payload"):
        fileio.decode_volume(blob[:-1])
    with pytest.raises(TruncatedPayloadError):
        fileio.decode_volume(blob + b"\0\0\0\0")
    with pytest.raises(TruncatedPayloadError):
        fileio.decode_volume(blob[:10])


def test_version_mismatch():
    blob = bytearray(fileio.encode_volume(np.zeros((2, 2, 2), np.float32)))
    struct.pack_into("<H", blob, 4, 7)
    with pytest.raises(VersionMismatchError, match="version mismatch"):
        fileio.decode_volume(bytes(blob))


def test_errors_are_distinct_classes():
    kinds = {BadMagicError, TruncatedPayloadError, VersionMismatchError}
    assert len(kinds) == 3 and all(issubclass(k, VolumeFormatError) for k in kinds)


def test_wrong_shapes_rejected():
    with pytest.raises(VolumeFormatError):
        fileio.encode_volume(np.zeros((2, 2)), "intensity")
    with pytest.raises(VolumeFormatError):
        fileio.encode_volume(np.zeros((2, 2, 2, 2)), "field")


def test_checkpoint_round_trip(rng):
    params = {"a.weight": rng.standard_normal((2, 3)).astype(np.float32), "b": np.float32(rng.standard_normal(4))}
    m = {k: np.ones_like(v) for k, v in params.items()}
    blob = fileio.encode_checkpoint({"x": 1}, params, 9, (3, m, m))
    meta, back, it, opt = fileio.decode_checkpoint(blob)
    assert meta == {"x": 1} and it == 9 and opt[0] == 3
    for k in params:
        assert np.asarray(back[k]).tobytes() == np.asarray(params[k]).tobytes()
    with pytest.raises(BadMagicError):
        fileio.decode_checkpoint(b"DVOL" + blob[4:])
    with pytest.raises(TruncatedPayloadError):
        fileio.decode_checkpoint(blob[:-3])
    with pytest.raises(TruncatedPayloadError):
        fileio.decode_checkpoint(blob + b"\0")
    bad = bytearray(blob)
    struct.pack_into("<H", bad, 4, 2)
    with pytest.raises(VersionMismatchError):
        fileio.decode_checkpoint(bytes(bad))


def _ckpt_with_meta(meta_bytes: bytes) -> bytes:
    blob = fileio.encode_checkpoint({}, {}, 0, None)
    (n,) = struct.unpack_from("<I", blob, 6)
    return blob[:6] + struct.pack("<I", len(meta_bytes)) + meta_bytes + blob[10 + n :]


@pytest.mark.parametrize("meta", [b"{bad json", b"\xff\xfe", b"[1, 2]"])
def test_corrupt_checkpoint_metadata(meta):
    with pytest.raises(VolumeFormatError, match="corrupt checkpoint metadata"):
        fileio.decode_checkpoint(_ckpt_with_meta(meta))


def test_absurd_tensor_rank_rejected():
    blob = fileio.encode_checkpoint({}, {"w": np.zeros(2, np.float32)}, 0, None)
    ndim_at = blob.index(b"w") + 1
    bad = blob[:ndim_at] + struct.pack("<B100I", 100, *[1] * 100) + blob[ndim_at + 5 :]
    with pytest.raises(VolumeFormatError, match="dimensions"):
        fileio.decode_checkpoint(bad)
