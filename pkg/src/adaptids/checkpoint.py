"""Single-file model checkpoints.

Layout: a 4-byte little-endian header length, a JSON header, then one
contiguous blob of little-endian float32 parameter data.  The header
records the architecture, class list, head settings, per-array byte
offsets, and the SHA-256 of the blob so corruption is detected on
load.  Fitted tail models and label centroids ride along in the
header since they are small.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError
from .heads import OpenMaxConfig, OpenSetModel, WeibullTailModel
from .model import Architecture, ModelParams, PARAM_ORDER

FORMAT_VERSION = 1


def save_checkpoint(model: OpenSetModel, path: str | Path) -> str:
    """Write the model; returns the SHA-256 of the whole file."""
    path = Path(path)
    arrays = []
    blob = bytearray()
    for name, arr in zip(PARAM_ORDER, model.params.arrays()):
        data = np.ascontiguousarray(arr, dtype="<f4")
        arrays.append({"name": name, "shape": list(data.shape),
                       "offset": len(blob), "nbytes": data.nbytes})
        blob.extend(data.tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": model.arch.to_dict(),
        "class_list": list(model.class_list),
        "head_kind": model.head_kind,
        "threshold": model.threshold,
        "rng_seed": model.params.rng_seed,
        "generation": model.generation,
        "arrays": arrays,
        "blob_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
    }
    if model.openmax_cfg is not None:
        header["openmax"] = {"tail_size": model.openmax_cfg.tail_size,
                             "alpha": model.openmax_cfg.alpha,
                             "distance": model.openmax_cfg.distance,
                             "threshold": model.openmax_cfg.threshold}
    if model.weibull:
        header["weibull"] = {label: m.to_dict()
                             for label, m in model.weibull.items()}
    if model.centroids:
        header["centroids"] = {label: np.asarray(c).tolist()
                               for label, c in model.centroids.items()}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(blob))
    tmp.replace(path)
    return file_digest(path)


def load_checkpoint(path: str | Path) -> OpenSetModel:
    """Read a checkpoint back, verifying blob integrity and layout."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<I", raw[:4])
    if len(raw) < 4 + hlen:
        raise DataError(f"{path}: header runs past end of file")
    try:
        header = json.loads(raw[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: bad checkpoint header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version "
                        f"{header.get('format_version')!r}")
    blob = raw[4 + hlen:]
    digest = hashlib.sha256(blob).hexdigest()
    if digest != header.get("blob_sha256"):
        raise DataError(f"{path}: parameter blob checksum mismatch")
    arch = Architecture.from_dict(header["architecture"])
    slots = {}
    names = [a["name"] for a in header["arrays"]]
    if names != list(PARAM_ORDER):
        raise DataError(f"{path}: unexpected array layout {names}")
    for spec in header["arrays"]:
        start, n = spec["offset"], spec["nbytes"]
        if start + n > len(blob):
            raise DataError(f"{path}: array {spec['name']} out of bounds")
        arr = np.frombuffer(blob[start:start + n], dtype="<f4")
        slots[spec["name"]] = arr.reshape(spec["shape"]).copy()
    params = ModelParams(**slots, rng_seed=int(header.get("rng_seed", 0)))
    threshold = header["threshold"]
    openmax_cfg: Optional[OpenMaxConfig] = None
    if "openmax" in header:
        openmax_cfg = OpenMaxConfig(**header["openmax"])
    weibull = None
    if "weibull" in header:
        weibull = {label: WeibullTailModel.from_dict(d)
                   for label, d in header["weibull"].items()}
    centroids = None
    if "centroids" in header:
        centroids = {label: np.asarray(c, dtype=np.float32)
                     for label, c in header["centroids"].items()}
    return OpenSetModel(arch=arch, params=params,
                        class_list=list(header["class_list"]),
                        head_kind=header["head_kind"],
                        threshold=threshold, openmax_cfg=openmax_cfg,
                        weibull=weibull, centroids=centroids,
                        generation=int(header.get("generation", 0)))


def file_digest(path: str | Path) -> str:
    """SHA-256 of the file as stored on disk."""
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
