"""Single-file checkpoint container.

Layout: 8-byte little-endian unsigned header length, then a UTF-8 JSON
header {"config": {...}, "manifest": {name: {"shape", "offset", "length"}}},
then the raw little-endian float32 payloads back to back. Offsets are
relative to the end of the header. Integrity is checked through per-array
element counts and the total payload size.

write_container/read_container handle the raw format for any named float32
arrays plus a JSON metadata dict; save_checkpoint/load_checkpoint specialize
them to a model's parameters keyed by the model config.
"""

from __future__ import annotations

import json
import os
import struct
from math import prod
from typing import Iterable

import numpy as np
import torch

from ..errors import CheckpointError
from .config import ModelConfig
from .network import MixedExposureFormer

_LEN_FMT = "<Q"
_LEN_SIZE = struct.calcsize(_LEN_FMT)


def write_container(path: str | os.PathLike, meta: dict, arrays: Iterable[tuple[str, np.ndarray]]) -> None:
    """Write named float32 arrays plus metadata; byte-stable for equal inputs."""
    manifest: dict[str, dict] = {}
    payloads: list[bytes] = []
    offset = 0
    for name, value in arrays:
        arr = np.asarray(value).astype("<f4")  # astype copies into C order
        raw = arr.tobytes()
        manifest[name] = {"shape": list(arr.shape), "offset": offset, "length": len(raw)}
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": meta, "manifest": manifest},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack(_LEN_FMT, len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)


def read_container(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back metadata and arrays, verifying structural integrity."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < _LEN_SIZE:
        raise CheckpointError(f"checkpoint {path} is truncated (no header length)")
    (header_len,) = struct.unpack_from(_LEN_FMT, blob)
    if _LEN_SIZE + header_len > len(blob):
        raise CheckpointError(f"checkpoint {path} is truncated (header length {header_len})")
    try:
        header = json.loads(blob[_LEN_SIZE : _LEN_SIZE + header_len].decode("utf-8"))
        meta = header["config"]
        manifest = header["manifest"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {exc}") from exc

    payload = blob[_LEN_SIZE + header_len :]
    total = sum(entry["length"] for entry in manifest.values())
    if total != len(payload):
        raise CheckpointError(
            f"checkpoint {path} payload is {len(payload)} bytes but manifest claims {total}"
        )

    arrays: dict[str, np.ndarray] = {}
    for name, entry in manifest.items():
        shape = tuple(entry["shape"])
        elements = prod(shape) if shape else 1
        if entry["length"] != 4 * elements:
            raise CheckpointError(
                f"integrity failure in {path}: array {name} claims shape {shape} "
                f"({elements} elements) but stores {entry['length']} bytes"
            )
        start = entry["offset"]
        raw = payload[start : start + entry["length"]]
        if len(raw) != entry["length"]:
            raise CheckpointError(f"integrity failure in {path}: array {name} is truncated")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"integrity failure in {path}: array {name} has non-finite values")
        arrays[name] = arr
    return meta, arrays


def save_checkpoint(model: MixedExposureFormer, path: str | os.PathLike) -> None:
    """Write all parameters plus the model config; byte-stable for equal inputs."""
    write_container(
        path,
        model.config.to_dict(),
        ((name, param.detach().cpu().numpy()) for name, param in model.named_parameters()),
    )


def load_checkpoint(
    path: str | os.PathLike, expected_config: ModelConfig | None = None
) -> MixedExposureFormer:
    """Rebuild a model from a checkpoint file.

    If expected_config is given it must equal the stored config exactly;
    a mismatch is refused rather than silently reshaping anything.
    """
    meta, arrays = read_container(path)
    try:
        config = ModelConfig.from_dict(meta)
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {exc}") from exc

    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"checkpoint {path} was saved with config {config.to_dict()}, "
            f"which does not match the requested config {expected_config.to_dict()}"
        )

    model = MixedExposureFormer(config)
    apply_arrays(model, arrays, path)
    return model


def apply_arrays(model: MixedExposureFormer, arrays: dict[str, np.ndarray], origin: str) -> None:
    """Copy named arrays into matching model parameters, refusing drift."""
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(arrays))
    unexpected = sorted(set(arrays) - set(params))
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint {origin} arrays do not match the model: missing {missing}, unexpected {unexpected}"
        )
    with torch.no_grad():
        for name, arr in arrays.items():
            target = params[name]
            if tuple(target.shape) != arr.shape:
                raise CheckpointError(
                    f"integrity failure in {origin}: array {name} shape {arr.shape} "
                    f"does not match model shape {tuple(target.shape)}"
                )
            target.copy_(torch.from_numpy(arr))
