"""Binary container for checkpoints, adapters and transport maps, plus JSON reports.

File layout (all integers little-endian)::

    magic       4 bytes   b"ABRA"
    version     u32       FORMAT_VERSION
    header_len  u64       length of the header field in bytes
    header      UTF-8 JSON, canonical (sorted keys, no whitespace), right-padded
                with ASCII spaces so the payload starts on an 8-byte boundary
    payload     raw little-endian f64 tensor bytes, back to back

The header object has the keys ``kind``, ``name``, ``metadata``, ``tensors``
and ``checksum``.  ``tensors`` lists ``{name, dtype, shape, byte_offset,
byte_length}`` entries with offsets relative to the payload start.
``checksum`` is ``"sha256:" + hex`` over the canonical header without the
checksum key, followed by the payload bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

from .checkpoint import CHECKPOINT_KINDS, ModelCheckpoint
from .errors import (
    ArtifactIOError,
    CorruptionError,
    DimensionError,
    FormatError,
    SerializationError,
    ValidationError,
    VersionError,
)
from .linalg import ORTHONORMAL_TOL, SvdFactors, is_orthogonal, orthogonality_residual
from .spectral import AdapterModel, BandSpec, SpectralResidual, materialize
from .transport import MAP_TOL, TransportMap

MAGIC = b"ABRA"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct("<4sIQ")
ALIGN = 8
MAX_HEADER = 1 << 28

Artifact = Union[ModelCheckpoint, AdapterModel, TransportMap]

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "save_checkpoint",
    "load_checkpoint",
    "encode_artifact",
    "decode_artifact",
    "artifact_kind",
    "write_report",
    "read_report",
    "dump_report",
    "atomic_write",
]


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")


def atomic_write(path, data: bytes) -> None:
    """Write to a temporary sibling, fsync, then rename over ``path``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write '{path}': {exc.strerror or exc}") from None
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise ArtifactIOError(f"cannot write '{path}': {exc.strerror or exc}") from None


# ---------------------------------------------------------------- artifact <-> tensors


def artifact_kind(artifact: Artifact) -> str:
    if isinstance(artifact, AdapterModel):
        return "adapter"
    if isinstance(artifact, TransportMap):
        return "transport_map"
    if isinstance(artifact, ModelCheckpoint):
        if artifact.kind not in ("backbone", "domain_expert"):
            raise SerializationError(f"checkpoint '{artifact.name}' has unknown kind '{artifact.kind}'")
        return artifact.kind
    raise SerializationError(f"cannot serialise object of type {type(artifact).__name__}")


def _flatten(artifact: Artifact) -> tuple[str, str, dict, list[tuple[str, np.ndarray]]]:
    kind = artifact_kind(artifact)
    if kind in ("backbone", "domain_expert"):
        return kind, artifact.name, artifact.metadata, list(artifact.tensors.items())
    if kind == "adapter":
        a: AdapterModel = artifact
        tensors = [(f"base/{k}", v) for k, v in a.base.tensors.items()]
        for layer in a.adapted_layers:
            f = a.factors[layer]
            tensors += [
                (f"{layer}/u", f.u),
                (f"{layer}/sigma", f.sigma),
                (f"{layer}/v_t", f.v_t),
                (f"{layer}/residual", a.residuals[layer].values),
            ]
        meta = {
            "adapter": a.metadata,
            "adapted_layers": list(a.adapted_layers),
            "band_half_width": a.band.half_width if a.adapted_layers else 0,
            "base": {"name": a.base.name, "kind": a.base.kind, "metadata": a.base.metadata},
        }
        return kind, a.name, meta, tensors
    m: TransportMap = artifact
    tensors = []
    for layer, (l, r) in m.entries.items():
        tensors += [(f"{layer}/l", l), (f"{layer}/r", r)]
    meta = {"layers": m.layers, "degenerate": list(m.degenerate), "map": m.metadata}
    return kind, m.metadata.get("name", "transport_map"), meta, tensors


def encode_artifact(artifact: Artifact) -> bytes:
    kind, name, metadata, tensors = _flatten(artifact)
    names = [n for n, _ in tensors]
    if len(set(names)) != len(names):
        raise SerializationError(f"artifact '{name}' has duplicate tensor names")
    entries, chunks, offset = [], [], 0
    for tname, value in tensors:
        arr = np.ascontiguousarray(value, dtype="<f8")
        if not np.all(np.isfinite(arr)):
            raise SerializationError(f"tensor '{tname}' of '{name}' has non-finite entries")
        data = arr.tobytes()
        entries.append(
            {"name": tname, "dtype": "f64", "shape": list(arr.shape), "byte_offset": offset, "byte_length": len(data)}
        )
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {"kind": kind, "name": name, "metadata": metadata, "tensors": entries}
    try:
        body = canonical_json(header)
    except (TypeError, ValueError) as exc:
        raise SerializationError(f"metadata of '{name}' is not JSON-serialisable: {exc}") from None
    header["checksum"] = "sha256:" + hashlib.sha256(body + payload).hexdigest()
    text = canonical_json(header)
    pad = (-(PREAMBLE.size + len(text))) % ALIGN
    text += b" " * pad
    return PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(text)) + text + payload


def save_checkpoint(artifact: Artifact, path) -> None:
    """Serialise ``artifact`` and write it atomically to ``path``."""
    atomic_write(path, encode_artifact(artifact))


# ---------------------------------------------------------------- decoding


def _require(cond: bool, exc, msg: str):
    if not cond:
        raise exc(msg)


def _parse_header(raw: bytes, where: str) -> tuple[dict, int]:
    _require(len(raw) >= PREAMBLE.size, CorruptionError, f"{where}: file too short for the preamble ({len(raw)} bytes)")
    magic, version, header_len = PREAMBLE.unpack_from(raw)
    _require(magic == MAGIC, FormatError, f"{where}: bad magic {magic!r}, expected {MAGIC!r}")
    _require(version == FORMAT_VERSION, VersionError, f"{where}: unsupported format version {version}")
    _require(header_len <= MAX_HEADER, CorruptionError, f"{where}: implausible header length {header_len}")
    start = PREAMBLE.size
    _require(len(raw) >= start + header_len, CorruptionError, f"{where}: header truncated")
    _require((start + header_len) % ALIGN == 0, CorruptionError, f"{where}: header length {header_len} breaks payload alignment")
    text = raw[start : start + header_len]
    body = text.rstrip(b" ")
    _require(len(text) - len(body) < ALIGN, CorruptionError, f"{where}: header padding is malformed")
    try:
        header = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{where}: header is not valid JSON ({exc})") from None
    _require(isinstance(header, dict), CorruptionError, f"{where}: header is not a JSON object")
    try:
        canonical = canonical_json(header)
    except (TypeError, ValueError):
        raise CorruptionError(f"{where}: header holds non-canonical values") from None
    _require(canonical == body, CorruptionError, f"{where}: header is not in canonical form")
    return header, start + header_len


def _check_schema(header: dict, payload_len: int, where: str) -> list[dict]:
    keys = {"kind", "name", "metadata", "tensors", "checksum"}
    _require(set(header) == keys, ValidationError, f"{where}: header keys {sorted(header)} != {sorted(keys)}")
    _require(header["kind"] in CHECKPOINT_KINDS, ValidationError, f"{where}: unknown kind {header['kind']!r}")
    _require(isinstance(header["name"], str), ValidationError, f"{where}: 'name' must be a string")
    _require(isinstance(header["metadata"], dict), ValidationError, f"{where}: 'metadata' must be an object")
    entries = header["tensors"]
    _require(isinstance(entries, list), ValidationError, f"{where}: 'tensors' must be a list")
    seen, expected_offset = set(), 0
    for i, e in enumerate(entries):
        ok = isinstance(e, dict) and set(e) == {"name", "dtype", "shape", "byte_offset", "byte_length"}
        _require(ok, ValidationError, f"{where}: tensor entry {i} has a malformed schema")
        tname = e["name"]
        _require(isinstance(tname, str) and tname not in seen, ValidationError, f"{where}: tensor name {tname!r} invalid or repeated")
        seen.add(tname)
        _require(e["dtype"] == "f64", ValidationError, f"{where}: tensor '{tname}' has dtype {e['dtype']!r}, expected 'f64'")
        shape = e["shape"]
        ok = isinstance(shape, list) and all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape)
        _require(ok, ValidationError, f"{where}: tensor '{tname}' has an invalid shape {shape!r}")
        off, length = e["byte_offset"], e["byte_length"]
        ok = all(isinstance(v, int) and not isinstance(v, bool) for v in (off, length))
        _require(ok, ValidationError, f"{where}: tensor '{tname}' has non-integer offsets")
        _require(length == 8 * math.prod(shape), ValidationError, f"{where}: tensor '{tname}' byte_length {length} != 8 x {shape}")
        _require(off % ALIGN == 0, ValidationError, f"{where}: tensor '{tname}' offset {off} is not 8-byte aligned")
        _require(off == expected_offset, ValidationError, f"{where}: tensor '{tname}' offset {off}, expected {expected_offset}")
        expected_offset = off + length
    if payload_len < expected_offset:
        raise CorruptionError(f"{where}: payload truncated ({payload_len} of {expected_offset} bytes)")
    if payload_len > expected_offset:
        raise CorruptionError(f"{where}: {payload_len - expected_offset} trailing bytes after the last tensor")
    return entries


def decode_artifact(raw: bytes, where: str = "<bytes>") -> Artifact:
    header, start = _parse_header(raw, where)
    payload = raw[start:]
    entries = _check_schema(header, len(payload), where)
    unsigned = dict(header)
    checksum = unsigned.pop("checksum")
    digest = "sha256:" + hashlib.sha256(canonical_json(unsigned) + payload).hexdigest()
    _require(checksum == digest, CorruptionError, f"{where}: checksum mismatch (file content altered)")
    tensors = {}
    for e in entries:
        arr = np.frombuffer(payload, dtype="<f8", count=math.prod(e["shape"]), offset=e["byte_offset"])
        arr = arr.astype(np.float64).reshape(e["shape"])
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{where}: tensor '{e['name']}' has non-finite entries")
        tensors[e["name"]] = arr
    kind, name, meta = header["kind"], header["name"], header["metadata"]
    try:
        if kind in ("backbone", "domain_expert"):
            return ModelCheckpoint(name, tensors, kind=kind, metadata=meta)
        if kind == "adapter":
            return _build_adapter(name, meta, tensors, where)
        return _build_map(meta, tensors, where)
    except ValidationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: {kind} artifact fails validation: {exc}") from None


def _build_adapter(name: str, meta: dict, tensors: dict, where: str) -> AdapterModel:
    base_meta = meta["base"]
    base = ModelCheckpoint(
        base_meta["name"],
        {k[len("base/"):]: v for k, v in tensors.items() if k.startswith("base/")},
        kind=base_meta["kind"],
        metadata=base_meta["metadata"],
    )
    band = BandSpec(int(meta["band_half_width"]))
    factors, residuals = {}, {}
    for layer in meta["adapted_layers"]:
        for part in ("u", "sigma", "v_t", "residual"):
            if f"{layer}/{part}" not in tensors:
                raise ValidationError(f"{where}: adapter lacks tensor '{layer}/{part}'")
        if layer not in base.tensors:
            raise ValidationError(f"{where}: adapted layer '{layer}' missing from the stored base")
        f = SvdFactors(tensors[f"{layer}/u"], tensors[f"{layer}/sigma"], tensors[f"{layer}/v_t"])
        for part, q in (("u", f.u), ("v_t", f.v_t.T)):
            res = orthogonality_residual(q)
            if res > ORTHONORMAL_TOL:
                raise ValidationError(f"{where}: tensor '{layer}/{part}' is not orthonormal ({res:.3e})")
        w = base.tensors[layer]
        if f.shape != w.shape:
            raise ValidationError(f"{where}: factors of '{layer}' describe {f.shape}, base weight is {w.shape}")
        err = float(np.linalg.norm(materialize(f, np.zeros((f.k, f.k))) - w))
        if err > 1e-9 * max(1.0, float(np.linalg.norm(w))):
            raise ValidationError(f"{where}: factors of '{layer}' do not reconstruct the base weight ({err:.3e})")
        try:
            residuals[layer] = SpectralResidual(f.k, band, tensors[f"{layer}/residual"])
        except DimensionError as exc:
            raise ValidationError(f"{where}: tensor '{layer}/residual': {exc}") from None
        factors[layer] = f
    expected = {f"base/{k}" for k in base.tensors} | {
        f"{layer}/{part}" for layer in meta["adapted_layers"] for part in ("u", "sigma", "v_t", "residual")
    }
    extra = sorted(set(tensors) - expected)
    if extra:
        raise ValidationError(f"{where}: unexpected adapter tensors {extra}")
    return AdapterModel(base, factors, residuals, list(meta["adapted_layers"]), name=name, metadata=meta["adapter"])


def _build_map(meta: dict, tensors: dict, where: str) -> TransportMap:
    entries = {}
    for layer in meta["layers"]:
        pair = []
        for tag in ("l", "r"):
            key = f"{layer}/{tag}"
            if key not in tensors:
                raise ValidationError(f"{where}: transport map lacks tensor '{key}'")
            q = tensors[key]
            if q.ndim != 2 or q.shape[0] != q.shape[1] or not is_orthogonal(q, MAP_TOL):
                detail = f"{orthogonality_residual(q):.3e}" if q.ndim == 2 else f"shape {q.shape}"
                raise ValidationError(f"{where}: tensor '{key}' is not an orthogonal matrix ({detail})")
            pair.append(q)
        entries[layer] = tuple(pair)
    extra = sorted(set(tensors) - {f"{l}/{t}" for l in meta["layers"] for t in ("l", "r")})
    if extra:
        raise ValidationError(f"{where}: unexpected transport-map tensors {extra}")
    return TransportMap(entries, degenerate=list(meta["degenerate"]), metadata=dict(meta["map"]))


def load_checkpoint(path) -> Artifact:
    """Read and fully validate an artifact file; the header ``kind`` picks the type."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ArtifactIOError(f"'{path}' does not exist") from None
    except OSError as exc:
        raise ArtifactIOError(f"cannot read '{path}': {exc.strerror or exc}") from None
    return decode_artifact(raw, str(path))


# ---------------------------------------------------------------- reports

REPORT_DIGITS = 12


def _round_floats(obj):
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return obj
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise SerializationError(f"report value {x} is not finite")
        return float(f"{x:.{REPORT_DIGITS}g}")
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    raise SerializationError(f"report holds a value of type {type(obj).__name__}")


def dump_report(report: dict) -> bytes:
    """Canonical report text: sorted keys, 2-space indent, floats at 12 significant digits."""
    text = json.dumps(_round_floats(report), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False)
    return (text + "\n").encode("utf-8")


def write_report(report: dict, path) -> None:
    atomic_write(path, dump_report(report))


def read_report(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ArtifactIOError(f"report '{path}' does not exist") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise ArtifactIOError(f"cannot read report '{path}': {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"report '{path}' is not valid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise CorruptionError(f"report '{path}' is not a JSON object")
    return doc
