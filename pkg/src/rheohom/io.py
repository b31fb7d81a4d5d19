"""Flat-binary field containers with JSON headers, plus hashing helpers.

A container is a pair <prefix>.json / <prefix>.bin: the header carries the
metadata and an index of (name, dtype, shape, offset) entries; the binary
file is the concatenation of the row-major array payloads.  Headers are
canonical (sorted keys), so identical data produces identical bytes.
"""

import hashlib
import json
import os

import numpy as np

from .media import MediumRealization, TorusGrid, regenerate


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def write_container(prefix, meta: dict, arrays: dict):
    """Write <prefix>.json + <prefix>.bin; returns the two paths."""
    index = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        blob = arr.tobytes()
        index.append({"name": name, "dtype": str(arr.dtype),
                      "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header = {"meta": meta, "arrays": index, "format": "rheohom-container-v1"}
    json_path = f"{prefix}.json"
    bin_path = f"{prefix}.bin"
    with open(json_path, "w") as fh:
        fh.write(canonical_json(header))
    with open(bin_path, "wb") as fh:
        for blob in blobs:
            fh.write(blob)
    return json_path, bin_path


def read_container(prefix):
    with open(f"{prefix}.json") as fh:
        header = json.load(fh)
    if header.get("format") != "rheohom-container-v1":
        raise ValueError(f"{prefix}.json is not a field container")
    arrays = {}
    bin_path = f"{prefix}.bin"
    if header["arrays"]:
        with open(bin_path, "rb") as fh:
            raw = fh.read()
        for entry in header["arrays"]:
            arr = np.frombuffer(raw[entry["offset"]:entry["offset"] + entry["nbytes"]],
                                dtype=np.dtype(entry["dtype"]))
            arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header["meta"], arrays


def save_medium(medium: MediumRealization, prefix, with_fields=True):
    """Persist a realization; fields are a cache, metadata regenerates them."""
    meta = {
        "kind": "medium",
        "grid": medium.grid.to_meta(),
        "seed": medium.seed,
        "provenance": medium.provenance,
        "params": medium.params,
        "info": medium.info,
    }
    arrays = {"a": medium.a, "p": medium.p} if with_fields else {}
    return write_container(prefix, meta, arrays)


def load_medium(prefix) -> MediumRealization:
    meta, arrays = read_container(prefix)
    if meta.get("kind") != "medium":
        raise ValueError(f"{prefix} does not hold a medium realization")
    grid = TorusGrid(L=meta["grid"]["L"], n=meta["grid"]["n"])
    if "a" in arrays and "p" in arrays:
        return MediumRealization(grid=grid, a=arrays["a"], p=arrays["p"],
                                 seed=meta["seed"], provenance=meta["provenance"],
                                 params=meta["params"], info=meta.get("info", {}))
    return regenerate(meta["params"], grid)


def save_corrector(sol, prefix, with_fields=False):
    meta = {"kind": "corrector", **sol.to_record()}
    arrays = {}
    if with_fields:
        arrays = {"psi": sol.psi, "v": sol.v}
    return write_container(prefix, meta, arrays)


def save_trajectory(traj, prefix):
    """Manifest + per-output-time stream-function snapshots."""
    meta = {"kind": "trajectory", **traj.to_manifest()}
    arrays = {"snapshots": np.stack(traj.psis)}
    arrays.update({f"ledger_{k}": np.asarray(v) for k, v in traj.ledger.items()})
    return write_container(prefix, meta, arrays)


def ensure_writable_dir(path):
    """Create the directory and verify writability; raises eagerly."""
    os.makedirs(path, exist_ok=True)
    probe = os.path.join(path, ".write_probe")
    try:
        with open(probe, "w") as fh:
            fh.write("ok")
        os.remove(probe)
    except OSError as exc:
        raise OSError(f"output directory {path!r} is not writable: {exc}") from exc
