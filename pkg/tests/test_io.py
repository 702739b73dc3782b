from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import pytest

from abra.checkpoint import ModelCheckpoint
from abra.errors import (
    ArtifactIOError,
    CorruptionError,
    FormatError,
    SerializationError,
    ValidationError,
    VersionError,
)
from abra.io import decode_artifact, encode_artifact, load_checkpoint, read_report, save_checkpoint, write_report
from abra.spectral import AdapterModel, BandSpec, SpectralResidual, make_adapter, residual_param_count
from abra.transport import TransportMap, build_transport_map
from helpers import random_orthonormal, tiny_network


def sample_artifacts(rng):
    net = tiny_network(rng, width=5, name="expert")
    backbone = net.copy(name="theta0", kind="backbone", stage="pretrain", seed=3)
    band = BandSpec(1)
    adapter = make_adapter(net, ["layer0.weight", "layer1.weight"], band, name="cls")
    adapter = adapter.with_residuals(
        {l: SpectralResidual(5, band, rng.standard_normal(residual_param_count(5, band))) for l in adapter.adapted_layers}
    )
    tmap = build_transport_map(net, tiny_network(rng, width=5), ["layer0.weight"])
    return {"backbone": backbone, "domain_expert": net, "adapter": adapter, "transport_map": tmap}


def same_artifact(a, b) -> bool:
    if isinstance(a, AdapterModel):
        return (
            a.name == b.name
            and a.base == b.base
            and a.adapted_layers == b.adapted_layers
            and all(a.residuals[l] == b.residuals[l] for l in a.adapted_layers)
            and all(
                a.factors[l].u.tobytes() == b.factors[l].u.tobytes()
                and a.factors[l].sigma.tobytes() == b.factors[l].sigma.tobytes()
                and a.factors[l].v_t.tobytes() == b.factors[l].v_t.tobytes()
                for l in a.adapted_layers
            )
        )
    if isinstance(a, TransportMap):
        return a.layers == b.layers and all(
            x.tobytes() == y.tobytes() for l in a.layers for x, y in zip(a[l], b[l])
        )
    return a == b


@pytest.mark.parametrize("kind", ["backbone", "domain_expert", "adapter", "transport_map"])
def test_round_trip_is_bit_exact(rng, tmp_path, kind):
    art = sample_artifacts(rng)[kind]
    path = tmp_path / f"{kind}.abra"
    save_checkpoint(art, path)
    back = load_checkpoint(path)
    assert type(back) is type(art)
    assert same_artifact(art, back)
    # saving the loaded artifact reproduces the file byte for byte
    assert encode_artifact(back) == path.read_bytes()


def test_encoding_is_deterministic(rng):
    arts = sample_artifacts(rng)
    for art in arts.values():
        assert encode_artifact(art) == encode_artifact(art)


def test_golden_identity_file(tmp_path):
    """A 2x2 identity backbone assembled by hand with struct and hashlib."""
    payload = struct.pack("<4d", 1.0, 0.0, 0.0, 1.0)
    entry = {"byte_length": 32, "byte_offset": 0, "dtype": "f64", "name": "w", "shape": [2, 2]}
    body = {"kind": "backbone", "metadata": {}, "name": "eye", "tensors": [entry]}

    def dumps(obj):
        return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()

    body["checksum"] = "sha256:" + hashlib.sha256(dumps(body) + payload).hexdigest()
    header = dumps(body)
    header += b" " * ((-(16 + len(header))) % 8)
    golden = b"ABRA" + struct.pack("<IQ", 1, len(header)) + header + payload

    ck = ModelCheckpoint("eye", {"w": np.eye(2)})
    assert encode_artifact(ck) == golden
    path = tmp_path / "eye.abra"
    path.write_bytes(golden)
    assert load_checkpoint(path) == ck
    assert (16 + len(header)) % 8 == 0


def _eye_bytes() -> bytes:
    return encode_artifact(ModelCheckpoint("eye", {"w": np.eye(2)}))


def test_bad_magic_is_format_error():
    raw = bytearray(_eye_bytes())
    raw[3:4] = b"B"
    with pytest.raises(FormatError):
        decode_artifact(bytes(raw))


def test_unknown_version_is_version_error():
    raw = bytearray(_eye_bytes())
    raw[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionError, match="version 2"):
        decode_artifact(bytes(raw))


def test_truncation_and_trailing_bytes_are_corruption():
    raw = _eye_bytes()
    with pytest.raises(CorruptionError, match="truncated"):
        decode_artifact(raw[:-1])
    with pytest.raises(CorruptionError, match="trailing"):
        decode_artifact(raw + b"\0" * 8)
    with pytest.raises(CorruptionError):
        decode_artifact(raw[:10])


def test_payload_flip_is_checksum_mismatch():
    raw = bytearray(_eye_bytes())
    raw[-3] ^= 0x01
    with pytest.raises(CorruptionError, match="checksum"):
        decode_artifact(bytes(raw))


def test_every_error_is_an_artifact_io_error():
    for cls in (FormatError, CorruptionError, VersionError, ValidationError, SerializationError):
        assert issubclass(cls, ArtifactIOError)


def _resign(header: dict, payload: bytes) -> bytes:
    """Re-encode a tampered header with a valid checksum and padding."""
    header = dict(header)
    header.pop("checksum", None)

    def dumps(obj):
        return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()

    header["checksum"] = "sha256:" + hashlib.sha256(dumps(header) + payload).hexdigest()
    text = dumps(header)
    text += b" " * ((-(16 + len(text))) % 8)
    return b"ABRA" + struct.pack("<IQ", 1, len(text)) + text + payload


def _split(raw: bytes) -> tuple[dict, bytes]:
    (n,) = struct.unpack_from("<Q", raw, 8)
    return json.loads(raw[16 : 16 + n]), raw[16 + n :]


def test_non_orthogonal_map_is_validation_error(rng):
    tmap = TransportMap({"layer0.weight": (random_orthonormal(rng, 3), random_orthonormal(rng, 3))})
    header, payload = _split(encode_artifact(tmap))
    bad = bytearray(payload)
    bad[0:8] = struct.pack("<d", 1.5)
    with pytest.raises(ValidationError, match="layer0.weight/l"):
        decode_artifact(_resign(header, bytes(bad)))


def test_adapter_with_foreign_factors_is_validation_error(rng):
    adapter = sample_artifacts(rng)["adapter"]
    header, payload = _split(encode_artifact(adapter))
    entry = next(e for e in header["tensors"] if e["name"] == "layer0.weight/sigma")
    bad = bytearray(payload)
    off = entry["byte_offset"]
    (first,) = struct.unpack_from("<d", bad, off)
    bad[off : off + 8] = struct.pack("<d", first + 0.5)
    with pytest.raises(ValidationError, match="reconstruct"):
        decode_artifact(_resign(header, bytes(bad)))


def test_schema_violations_are_validation_errors():
    header, payload = _split(_eye_bytes())
    broken = dict(header, kind="optimizer")
    with pytest.raises(ValidationError, match="kind"):
        decode_artifact(_resign(broken, payload))
    entry = dict(header["tensors"][0], dtype="f32")
    with pytest.raises(ValidationError, match="dtype"):
        decode_artifact(_resign(dict(header, tensors=[entry]), payload))
    nan_payload = struct.pack("<4d", 1.0, float("nan"), 0.0, 1.0)
    with pytest.raises(ValidationError, match="non-finite"):
        decode_artifact(_resign(header, nan_payload))


def test_non_canonical_header_is_rejected():
    raw = _eye_bytes()
    (n,) = struct.unpack_from("<Q", raw, 8)
    text = raw[16 : 16 + n].rstrip(b" ")
    pretty = json.dumps(json.loads(text), indent=1).encode()
    pretty += b" " * ((-(16 + len(pretty))) % 8)
    with pytest.raises(CorruptionError, match="canonical"):
        decode_artifact(b"ABRA" + struct.pack("<IQ", 1, len(pretty)) + pretty + raw[16 + n :])


def test_non_finite_tensors_are_not_written(tmp_path):
    with pytest.raises(SerializationError):
        save_checkpoint(ModelCheckpoint("x", {"w": np.array([np.inf])}), tmp_path / "x.abra")
    assert not (tmp_path / "x.abra").exists()


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(ArtifactIOError, match="does not exist"):
        load_checkpoint(tmp_path / "nope.abra")


def test_report_round_trip(tmp_path):
    report = {"b": [1.0 / 3.0, 2], "a": {"z": np.float64(0.1) + 0.2, "n": np.int64(4)}}
    path = tmp_path / "r.json"
    write_report(report, path)
    text = path.read_text()
    assert text.index('"a"') < text.index('"b"')
    back = read_report(path)
    assert back == {"a": {"n": 4, "z": 0.3}, "b": [0.333333333333, 2]}
    write_report(back, tmp_path / "r2.json")
    assert (tmp_path / "r2.json").read_text() == text
    with pytest.raises(SerializationError):
        write_report({"x": float("nan")}, tmp_path / "bad.json")
