"""Checkpoint files: JSON manifest plus raw float32 tensors, sealed by a digest.

Layout::

    b"DVD1" | manifest length (u64 LE) | UTF-8 JSON manifest | tensor payload | SHA-256 (32 bytes)

The payload is every tensor's little-endian float32 bytes concatenated in
manifest order. The trailing digest covers everything before it; the manifest
also records the payload digest and the per-part parameter hashes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .denoiser import (
    PART_NAMES,
    ContentUNet,
    ModelBundle,
    ModelConfig,
    MotionModule,
    SignatureMismatchError,
    StructureAdapter,
    named_tensors,
    parameter_hash,
)

MAGIC = b"DVD1"
FORMAT_VERSION = 1
_PART_CLASSES = {"content": ContentUNet, "structure": StructureAdapter, "motion": MotionModule}


class CheckpointCorruptError(ValueError):
    pass


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _signature_digest(bundle: ModelBundle) -> str:
    return hashlib.sha256(_canonical_json(bundle.signature())).hexdigest()


def checkpoint_bytes(bundle: ModelBundle) -> bytes:
    tensors, chunks = [], []
    for part, module in bundle.parts().items():
        for name, t in named_tensors(module):
            tensors.append({"part": part, "name": name, "shape": list(t.shape)})
            chunks.append(t.to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": bundle.config.to_dict(),
        "architecture_signature": _signature_digest(bundle),
        "parts": {
            part: {"hash": parameter_hash(m), "frozen": bool(bundle.frozen.get(part, False))}
            for part, m in bundle.parts().items()
        },
        "tensors": tensors,
        "reports": bundle.reports,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    manifest_bytes = _canonical_json(manifest)
    body = MAGIC + struct.pack("<Q", len(manifest_bytes)) + manifest_bytes + payload
    return body + hashlib.sha256(body).digest()


def save_checkpoint(bundle: ModelBundle, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(bundle)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def read_manifest(data: bytes) -> tuple[dict, bytes]:
    """Validate framing and digests; return the manifest and the raw payload."""
    if len(data) < len(MAGIC) + 8 + 32 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError("not a checkpoint (bad magic or too short)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointCorruptError("checkpoint digest mismatch (truncated or corrupted)")
    (length,) = struct.unpack("<Q", body[4:12])
    if 12 + length > len(body):
        raise CheckpointCorruptError("manifest length exceeds file size")
    try:
        manifest = json.loads(body[12 : 12 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f"unreadable manifest: {e}") from e
    payload = body[12 + length :]
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise CheckpointCorruptError("payload digest does not match the manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointCorruptError(f"unsupported format version {manifest.get('format_version')}")
    return manifest, payload


def load_checkpoint(
    path: Union[str, Path], require: Sequence[str] = (), signature: Optional[str] = None
) -> ModelBundle:
    """Load a bundle, verifying every digest and part hash before returning it.

    ``require`` names parts that must be present; ``signature`` is an expected
    architecture-signature digest (see :func:`architecture_digest`).
    """
    manifest, payload = read_manifest(Path(path).read_bytes())
    config = ModelConfig.from_dict(manifest["config"])
    states: dict[str, dict[str, torch.Tensor]] = {}
    offset = 0
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        raw = payload[offset : offset + 4 * count]
        if len(raw) != 4 * count:
            raise CheckpointCorruptError(f"payload ends inside tensor {entry['part']}.{entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        states.setdefault(entry["part"], {})[entry["name"]] = torch.from_numpy(arr)
        offset += 4 * count
    if offset != len(payload):
        raise CheckpointCorruptError("trailing bytes after the last tensor")
    parts = {}
    for part in PART_NAMES:
        if part not in manifest["parts"]:
            continue
        module = _PART_CLASSES[part](config)
        module.load_state_dict(states.get(part, {}), strict=True)
        module.requires_grad_(False)
        if parameter_hash(module) != manifest["parts"][part]["hash"]:
            raise CheckpointCorruptError(f"{part} parameters do not match their recorded hash")
        parts[part] = module
    if "content" not in parts:
        raise CheckpointCorruptError("checkpoint has no content weights")
    frozen = {p: bool(v["frozen"]) for p, v in manifest["parts"].items()}
    bundle = ModelBundle(parts["content"], parts.get("structure"), parts.get("motion"), frozen, manifest["reports"])
    if signature is not None and manifest["architecture_signature"] != signature:
        raise SignatureMismatchError("checkpoint architecture differs from the expected signature")
    bundle.require(*require)
    return bundle


def architecture_digest(bundle: ModelBundle) -> str:
    return _signature_digest(bundle)
