"""On-disk formats: datasets, checkpoints and run artifacts.

Dataset: ``manifest.json`` plus one JSON file per episode (nested arrays,
transforms as row-major 3x4). Checkpoint: 8-byte little-endian header
length, a JSON header (names, shapes, config), then all tensors as
little-endian float64 in header order. JSON is written with sorted keys
and no timestamps so identical inputs give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from . import geometry as geo
from .geometry import CameraIntrinsics

FORMAT_VERSION = 1
MAGIC = b"TPCK"


def dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def blob_hash(data: bytes):
    """Same digest ``git hash-object`` gives for a file with these bytes."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_hash(path):
    return blob_hash(Path(path).read_bytes())


def tree_hash(paths):
    """Order-independent digest over several files (or directories)."""
    entries = []
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            rel = f.relative_to(p).as_posix() if p.is_dir() else f.name
            entries.append(f"{file_hash(f)} {rel}")
    return hashlib.sha1("\n".join(sorted(entries)).encode()).hexdigest()


# ---------------------------------------------------------------- episodes


def episode_to_dict(ep):
    return {
        "episode_id": ep.episode_id,
        "split": ep.split,
        "intrinsics": ep.intrinsics.to_dict(),
        "points3d": ep.points3d.tolist(),
        "object_mask": ep.object_mask.astype(int).tolist(),
        "gt_transforms": [geo.transform_to_list(T) for T in ep.gt_transforms],
        "gt_tracks": ep.gt_tracks.tolist(),
        "out_of_frame": ep.out_of_frame.astype(int).tolist(),
        "initial_raster": ep.initial_raster.tolist(),
        "goal_raster": ep.goal_raster.tolist(),
        "shape": ep.shape,
        "shape_params": list(ep.shape_params),
        "family": ep.family,
        "seed": int(ep.seed),
    }


def episode_from_dict(d):
    from .synth import Episode

    return Episode(
        episode_id=d["episode_id"],
        split=d["split"],
        intrinsics=CameraIntrinsics.from_dict(d["intrinsics"]),
        points3d=np.asarray(d["points3d"], dtype=np.float64),
        object_mask=np.asarray(d["object_mask"], dtype=bool),
        gt_transforms=[geo.transform_from_list(m) for m in d["gt_transforms"]],
        gt_tracks=np.asarray(d["gt_tracks"], dtype=np.float64),
        out_of_frame=np.asarray(d["out_of_frame"], dtype=bool),
        initial_raster=np.asarray(d["initial_raster"], dtype=np.float64),
        goal_raster=np.asarray(d["goal_raster"], dtype=np.float64),
        shape=d.get("shape", ""),
        shape_params=tuple(d.get("shape_params", ())),
        family=d.get("family", ""),
        seed=int(d.get("seed", 0)),
    )


def write_dataset(cfg, episodes, out_dir):
    """Write every episode plus the manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "episodes").mkdir(parents=True, exist_ok=True)
    entries = []
    for ep in episodes:
        rel = f"episodes/{ep.episode_id}.json"
        write_json(out / rel, episode_to_dict(ep))
        entries.append({"episode_id": ep.episode_id, "split": ep.split, "file": rel,
                        "hash": file_hash(out / rel)})
    manifest = {"format_version": FORMAT_VERSION, "config": cfg.to_dict(), "episodes": entries}
    return write_json(out / "manifest.json", manifest)


def read_manifest(root):
    root = Path(root)
    path = root / "manifest.json" if root.is_dir() else root
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return read_json(path)


def load_dataset(root, splits=None):
    root = Path(root)
    if not root.is_dir():
        root = root.parent
    m = read_manifest(root)
    eps = []
    for e in m["episodes"]:
        if splits is None or e["split"] in splits:
            eps.append(episode_from_dict(read_json(root / e["file"])))
    return eps


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, kind, config, params, opt_state=None, extra=None):
    """Self-describing binary checkpoint (parameters and optional Adam state)."""
    tensors = [("param/" + k, params[k]) for k in sorted(params)]
    meta = {"kind": kind, "config": config, "format_version": FORMAT_VERSION,
            "extra": extra or {}}
    if opt_state is not None:
        meta["adam_step"] = int(opt_state["step"])
        tensors += [("adam_m/" + k, opt_state["m"][k]) for k in sorted(opt_state["m"])]
        tensors += [("adam_v/" + k, opt_state["v"][k]) for k in sorted(opt_state["v"])]
    meta["tensors"] = [{"name": n, "shape": list(np.shape(a))} for n, a in tensors]
    header = dumps(meta).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in tensors)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<Q", len(header)) + header + payload)
    return path


def load_checkpoint(path):
    """Returns (meta, params, opt_state or None)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<Q", raw[4:12])
    meta = json.loads(raw[12:12 + n].decode())
    buf = memoryview(raw)[12 + n:]
    off = 0
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for t in meta["tensors"]:
        size = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(buf[off:off + 8 * size], dtype="<f8").astype(np.float64)
        off += 8 * size
        group, name = t["name"].split("/", 1)
        groups[group][name] = arr.reshape(t["shape"])
    if off != len(buf):
        raise ValueError("checkpoint payload size does not match its header")
    opt = None
    if "adam_step" in meta:
        opt = {"step": meta["adam_step"], "m": groups["adam_m"], "v": groups["adam_v"]}
    return meta, groups["param"], opt


# ---------------------------------------------------------------- run artifacts


def write_artifact(out_dir, name, config, seed, inputs, outputs):
    """Record the exact config, master seed, input digests and outputs of a stage."""
    art = {
        "stage": name,
        "config": config,
        "seed": seed,
        "inputs": {str(k): tree_hash([v]) for k, v in sorted(inputs.items()) if os.path.exists(v)},
        "outputs": outputs,
    }
    return write_json(Path(out_dir) / f"{name}.artifact.json", art)
