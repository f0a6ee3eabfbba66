"""Bit-exact scene persistence.

Layout (little endian):
  magic "RPRL" | u32 version | u32 N | u32 D | u32 sh_degree |
  float32 blocks in declared order (mu4, q_left, q_right, log_scales,
  opacity_logit, sh, identity) | u32 metadata length | UTF-8 JSON metadata |
  u32 CRC32 of everything before it.

Metadata holds groups, labels, cameras, head parameters, time range and
background. float32 scalars survive the JSON round trip bit-exactly
(every float32 is a float64, and Python's float repr round-trips).
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from . import core_math
from .core_math import Camera
from .errors import (SceneChecksumError, SceneFormatError, SceneTruncatedError,
                     SceneVersionError)
from .scene import PARAM_BLOCKS, Group, SceneModel, SemanticHead

MAGIC = b"RPRL"
VERSION = 1


def _meta_dict(scene):
    return {
        "time_range": [float(scene.time_range[0]), float(scene.time_range[1])],
        "background": [float(v) for v in scene.background],
        "next_group_id": int(scene.next_group_id),
        "deleted_group_ids": sorted(int(g) for g in scene.deleted_group_ids),
        "groups": [
            {
                "gid": int(g.gid),
                "label": g.label,
                "class_id": int(g.class_id),
                "attributes": g.attributes,
                "indices": [int(i) for i in g.indices],
            }
            for gid, g in sorted(scene.groups.items())
        ],
        "head": {
            "weight": [[float(v) for v in row] for row in scene.head.weight],
            "bias": [float(v) for v in scene.head.bias],
        },
        "cameras": [c.to_dict() for c in scene.cameras],
    }


def scene_bytes(scene):
    """Serialize a scene to bytes (save_scene writes these to a file)."""
    out = [MAGIC, struct.pack("<IIII", VERSION, scene.n,
                              scene.identity_dim, scene.sh_degree)]
    for name in PARAM_BLOCKS:
        arr = np.ascontiguousarray(getattr(scene, name), dtype="<f4")
        out.append(arr.tobytes())
    meta = json.dumps(_meta_dict(scene), sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(meta)))
    out.append(meta)
    payload = b"".join(out)
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def save_scene(scene, path):
    with open(path, "wb") as fh:
        fh.write(scene_bytes(scene))


def _block_shapes(n, d, sh_degree):
    k = core_math.sh_coeff_count(sh_degree)
    return {
        "mu4": (n, 4), "q_left": (n, 4), "q_right": (n, 4), "log_scales": (n, 4),
        "opacity_logit": (n,), "sh": (n, k, 3), "identity": (n, d),
    }


def scene_from_bytes(data):
    if len(data) < 4 or data[:4] != MAGIC:
        raise SceneFormatError("bad magic bytes, not a scene file")
    if len(data) < 20 + 4:
        raise SceneTruncatedError("file too short for header")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise SceneChecksumError("CRC32 mismatch")
    version, n, d, sh_degree = struct.unpack("<IIII", data[4:20])
    if version != VERSION:
        raise SceneVersionError("scene file version %d, reader supports %d"
                                % (version, VERSION))
    try:
        shapes = _block_shapes(n, d, sh_degree)
    except Exception as exc:
        raise SceneFormatError("bad header fields: %s" % exc)
    pos = 20
    blocks = {}
    for name in PARAM_BLOCKS:
        shape = shapes[name]
        nbytes = int(np.prod(shape)) * 4
        if pos + nbytes > len(data) - 4:
            raise SceneTruncatedError("file ends inside block %s" % name)
        blocks[name] = np.frombuffer(data[pos:pos + nbytes], dtype="<f4").reshape(shape).copy()
        pos += nbytes
    if pos + 4 > len(data) - 4:
        raise SceneTruncatedError("file ends before metadata length")
    (meta_len,) = struct.unpack("<I", data[pos:pos + 4])
    pos += 4
    if pos + meta_len > len(data) - 4:
        raise SceneTruncatedError("file ends inside metadata")
    try:
        meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SceneFormatError("metadata is not valid JSON: %s" % exc)
    pos += meta_len
    if pos != len(data) - 4:
        raise SceneFormatError("trailing bytes after metadata")

    scene = SceneModel(sh_degree=sh_degree, time_range=tuple(meta["time_range"]),
                       background=np.array(meta["background"], dtype=np.float32),
                       **blocks)
    scene.next_group_id = int(meta["next_group_id"])
    scene.deleted_group_ids = set(int(g) for g in meta["deleted_group_ids"])
    for g in meta["groups"]:
        scene.groups[int(g["gid"])] = Group(
            gid=int(g["gid"]), label=g["label"], class_id=int(g["class_id"]),
            attributes=dict(g["attributes"]),
            indices=np.array(g["indices"], dtype=np.int64),
        )
    head = meta["head"]
    weight = np.array(head["weight"], dtype=np.float32).reshape(len(head["bias"]), d)
    scene.head = SemanticHead(weight, np.array(head["bias"], dtype=np.float32))
    scene.cameras = [Camera.from_dict(c) for c in meta["cameras"]]
    return scene


def load_scene(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return scene_from_bytes(data)
