"""Bit-exact checkpoint serialization.

Layout: the magic line ``FLAGCKPT1``, an 8-byte little-endian manifest length,
the UTF-8 JSON manifest, then the payload of concatenated little-endian
float64 parameter blocks. The manifest's named-parameter table carries shapes
and element offsets; offsets must tile the payload exactly. save(load(f))
reproduces f byte for byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..flow import FlowModel
from ..lra import LatentRegionModel
from ..training import MlpBaseline

MAGIC = b"FLAGCKPT1\n"
_F8 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, arrays: dict, config_echo: dict,
                    skeleton_hash: str, model_meta: dict | None = None) -> None:
    """Write named float64 arrays with a manifest; deterministic bytes."""
    names = sorted(arrays)
    table = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        table.append({"name": name, "shape": list(arr.shape),
                      "offset": offset, "size": int(arr.size)})
        offset += arr.size
        blobs.append(arr.astype(_F8, copy=False).tobytes())
    manifest = {
        "version": 1,
        "kind": kind,
        "config": config_echo,
        "skeleton_hash": skeleton_hash,
        "model": model_meta or {},
        "params": table,
        "payload_elements": offset,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read (manifest, arrays); verifies magic, offsets, and payload coverage."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint magic")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise CheckpointError(f"{path}: truncated manifest length")
        (mlen,) = struct.unpack("<Q", raw_len)
        mbytes = fh.read(mlen)
        if len(mbytes) != mlen:
            raise CheckpointError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(mbytes.decode("utf-8"))
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: manifest is not valid JSON: {e}") from None
        payload = fh.read()
    expected = manifest["payload_elements"] * 8
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, manifest expects {expected}"
        )
    flat = np.frombuffer(payload, dtype=_F8)
    arrays = {}
    cursor = 0
    for entry in manifest["params"]:
        if entry["offset"] != cursor:
            raise CheckpointError(f"{path}: parameter offsets overlap or leave gaps")
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if size != entry["size"]:
            raise CheckpointError(f"{path}: shape/size mismatch for {entry['name']}")
        arrays[entry["name"]] = flat[cursor:cursor + size].reshape(entry["shape"]).copy()
        cursor += size
    if cursor != manifest["payload_elements"]:
        raise CheckpointError(f"{path}: manifest does not cover the payload")
    return manifest, arrays


def _check_skeleton(manifest, skeleton_hash, path):
    if skeleton_hash is not None and manifest["skeleton_hash"] != skeleton_hash:
        raise CheckpointError(
            f"{path}: checkpoint skeleton hash {manifest['skeleton_hash']} does not "
            f"match {skeleton_hash}"
        )


# -- model adapters -----------------------------------------------------------------


def save_flow(path, model: FlowModel, config_echo: dict, skeleton_hash: str) -> None:
    arrays = {name: p.data for name, p in model.params().items()}
    arrays["cond_mean"] = model.cond_mean
    arrays["cond_std"] = model.cond_std
    meta = {
        "dim": model.dim,
        "cond_dim": model.cond_dim,
        "blocks": model.block_count,
        "hidden": model.hidden,
        "taps": list(model.taps),
        "flatten_order": "joint-major",
    }
    save_checkpoint(path, "flow", arrays, config_echo, skeleton_hash, meta)


def load_flow(path, skeleton_hash: str | None = None) -> FlowModel:
    manifest, arrays = load_checkpoint(path)
    if manifest["kind"] != "flow":
        raise CheckpointError(f"{path}: expected a flow checkpoint, got {manifest['kind']}")
    _check_skeleton(manifest, skeleton_hash, path)
    meta = manifest["model"]
    model = FlowModel(dim=meta["dim"], cond_dim=meta["cond_dim"], blocks=meta["blocks"],
                      hidden=meta["hidden"], taps=tuple(meta["taps"]))
    for name, p in model.params().items():
        p.data = arrays[name]
    model.cond_mean = arrays["cond_mean"]
    model.cond_std = arrays["cond_std"]
    return model


def save_lra(path, model: LatentRegionModel, config_echo: dict, skeleton_hash: str) -> None:
    arrays = {name: p.data for name, p in model.params().items()}
    arrays["cond_mean"] = model.cond_mean
    arrays["cond_std"] = model.cond_std
    meta = {
        "joints": model.joints,
        "pose_dim": model.pose_dim,
        "cond_dim": model.cond_dim,
        "embed": model.embed,
        "layers": model.layers,
        "heads": model.heads,
        "ff": model.ff,
        "groups": model.groups,
        "modes": model.modes,
        "head_hidden": model.head_hidden,
        "tau": model.tau,
        "tracked": list(model.tracked),
    }
    save_checkpoint(path, "lra", arrays, config_echo, skeleton_hash, meta)


def load_lra(path, skeleton_hash: str | None = None) -> LatentRegionModel:
    manifest, arrays = load_checkpoint(path)
    if manifest["kind"] != "lra":
        raise CheckpointError(f"{path}: expected an lra checkpoint, got {manifest['kind']}")
    _check_skeleton(manifest, skeleton_hash, path)
    meta = manifest["model"]
    model = LatentRegionModel(
        joints=meta["joints"], pose_dim=meta["pose_dim"], cond_dim=meta["cond_dim"],
        embed=meta["embed"], layers=meta["layers"], heads=meta["heads"], ff=meta["ff"],
        groups=meta["groups"], modes=meta["modes"], head_hidden=meta["head_hidden"],
        tau=meta["tau"], tracked=tuple(meta["tracked"]),
    )
    for name, p in model.params().items():
        p.data = arrays[name]
    model.cond_mean = arrays["cond_mean"]
    model.cond_std = arrays["cond_std"]
    return model


def save_mlp(path, model: MlpBaseline, config_echo: dict, skeleton_hash: str) -> None:
    arrays = {name: p.data for name, p in model.params().items()}
    arrays["cond_mean"] = model.cond_mean
    arrays["cond_std"] = model.cond_std
    meta = {"cond_dim": model.cond_dim, "out_dim": model.out_dim, "hidden": model.hidden}
    save_checkpoint(path, "mlp", arrays, config_echo, skeleton_hash, meta)


def load_mlp(path, skeleton_hash: str | None = None) -> MlpBaseline:
    manifest, arrays = load_checkpoint(path)
    if manifest["kind"] != "mlp":
        raise CheckpointError(f"{path}: expected an mlp checkpoint, got {manifest['kind']}")
    _check_skeleton(manifest, skeleton_hash, path)
    meta = manifest["model"]
    model = MlpBaseline(meta["cond_dim"], meta["out_dim"], hidden=meta["hidden"])
    for name, p in model.params().items():
        p.data = arrays[name]
    model.cond_mean = arrays["cond_mean"]
    model.cond_std = arrays["cond_std"]
    return model


def load_any(path, skeleton_hash: str | None = None):
    """Load a checkpoint of any kind; returns (kind, model)."""
    manifest, _ = load_checkpoint(path)
    kind = manifest["kind"]
    loader = {"flow": load_flow, "lra": load_lra, "mlp": load_mlp}.get(kind)
    if loader is None:
        raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")
    return kind, loader(path, skeleton_hash)
