"""File formats shared by checkpoints, centroid caches and perturbations.

Every artifact written by this package is a single file with a small text
header followed by a raw blob of little-endian 32-bit floats:

    #xmodal-artifact v1
    kind: checkpoint
    <key>: <value>          (one per line, order fixed by the writer)
    blob_bytes: <N>
    ---
    <N raw bytes>

Headers are ASCII key/value pairs; the blob carries the numbers. Datasets use
a two-file variant (text manifest + raw pixel file) defined in synthdata but
built on the same helpers. Fingerprints are truncated SHA-256 digests over
the raw bytes, used to detect mismatched artifact combinations early.
"""

import hashlib
import os

import numpy as np

from .errors import StorageError

MAGIC = "#xmodal-artifact v1"
_SEP = "---\n"


def fingerprint_bytes(data: bytes) -> str:
    """16-hex-digit fingerprint of a byte string."""
    return hashlib.sha256(data).hexdigest()[:16]


def canonical_kv_text(mapping: dict) -> str:
    """Canonical text rendering of a flat mapping, for hashing configs."""
    lines = []
    for key in sorted(mapping):
        value = mapping[key]
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def config_hash(mapping: dict) -> str:
    return fingerprint_bytes(canonical_kv_text(mapping).encode("utf-8"))


def floats_to_bytes(arr: np.ndarray) -> bytes:
    """Serialize an array as little-endian float32, C order."""
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def bytes_to_floats(data: bytes, count: int, offset_hint: int = 0) -> np.ndarray:
    expected = 4 * count
    if len(data) != expected:
        raise StorageError(
            f"float blob truncated: expected {expected} bytes, "
            f"got {len(data)} (blob starts at offset {offset_hint})"
        )
    return np.frombuffer(data, dtype="<f4").astype(np.float64)


def write_artifact(path: str, kind: str, header: dict, blob: bytes) -> None:
    """Write header + blob atomically (via a temp file in the same dir)."""
    lines = [MAGIC, f"kind: {kind}"]
    for key, value in header.items():
        key = str(key)
        value = str(value)
        if ":" in key or "\n" in key or "\n" in value:
            raise StorageError(f"illegal header entry {key!r}: {value!r}")
        lines.append(f"{key}: {value}")
    lines.append(f"blob_bytes: {len(blob)}")
    text = "\n".join(lines) + "\n" + _SEP
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(text.encode("ascii"))
        fh.write(blob)
    os.replace(tmp, path)


def read_artifact(path: str, expected_kind: str):
    """Read header + blob, validating structure. Returns (header dict, blob)."""
    if not os.path.exists(path):
        raise StorageError(f"no such file: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = _SEP.encode("ascii")
    head_end = raw.find(sep)
    if not raw.startswith(MAGIC.encode("ascii")) or head_end < 0:
        raise StorageError(
            f"{path}: not an artifact file (bad magic or missing '---' "
            f"separator in first {min(len(raw), 4096)} bytes)"
        )
    header_text = raw[:head_end].decode("ascii", errors="replace")
    blob = raw[head_end + len(sep):]
    header = {}
    for lineno, line in enumerate(header_text.splitlines()[1:], start=2):
        if ": " not in line:
            raise StorageError(f"{path}: malformed header line {lineno}: {line!r}")
        key, value = line.split(": ", 1)
        header[key] = value
    kind = header.pop("kind", None)
    if kind != expected_kind:
        raise StorageError(
            f"{path}: artifact kind is {kind!r}, expected {expected_kind!r}"
        )
    declared = header.pop("blob_bytes", None)
    if declared is None or not declared.isdigit():
        raise StorageError(f"{path}: missing or bad blob_bytes in header")
    declared = int(declared)
    if len(blob) != declared:
        raise StorageError(
            f"{path}: blob truncated at offset {head_end + len(sep)}: "
            f"declared {declared} bytes, found {len(blob)}"
        )
    return header, blob
