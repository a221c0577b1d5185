"""World persistence: the ``.fgsw`` binary container.

Layout (all little-endian):

    magic   4 bytes  b"FGSW"
    u32     format version (currently 1)
    u32     scene count
    per scene:
        u32 x3      layer sizes (sky, background, foreground)
        f32 x12     camera extrinsics: rotation row-major then translation
        f32 x6      camera intrinsics/size: fx, fy, cx, cy, width, height
        u32 + utf8  prompt
        f32 x13 per surfel (position, quaternion wxyz, scales, opacity, color),
        layers stored back-to-front
    u32 + utf8  trailing JSON block (graph metadata, schema below)

The JSON block holds everything that is not a fixed-width record::

    {"version": <active world version>,
     "ground_height": <float or null>,
     "scenes": [{"id": int, "frozen": [bool, bool, bool]}, ...],
     "edges": [{"a": int, "b": int,
                "position": [x, y, z], "quat": [w, x, y, z]}, ...]}

Fixed-width records keep the surfel payload memory-mappable.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .core import Camera, LayeredScene, SurfelCloud, WorldEdge, WorldGraph

MAGIC = b"FGSW"
FORMAT_VERSION = 1
SURFEL_FLOATS = 13


class WorldFileError(Exception):
    """Base class for .fgsw container problems."""


class WorldVersionError(WorldFileError):
    """Bad magic bytes or unsupported format version."""


class WorldTruncatedError(WorldFileError):
    """File ended before the declared payload was complete."""


def _pack_cloud(cloud: SurfelCloud) -> bytes:
    rec = np.empty((len(cloud), SURFEL_FLOATS), dtype="<f4")
    rec[:, 0:3] = cloud.positions
    rec[:, 3:7] = cloud.quaternions
    rec[:, 7:9] = cloud.scales
    rec[:, 9] = cloud.opacities
    rec[:, 10:13] = cloud.colors
    return rec.tobytes()


def _unpack_cloud(buf: memoryview, count: int) -> SurfelCloud:
    rec = np.frombuffer(buf, dtype="<f4", count=count * SURFEL_FLOATS)
    rec = rec.reshape(count, SURFEL_FLOATS)
    return SurfelCloud(rec[:, 0:3], rec[:, 3:7], rec[:, 7:9], rec[:, 9],
                       rec[:, 10:13], validate=False)


def save_world(world: WorldGraph, path) -> None:
    """Serialize a world; the write is atomic (temp file + rename)."""
    chunks: list[bytes] = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(world.scenes))]
    for scene in world.scenes:
        cam = scene.generation_camera
        chunks.append(struct.pack("<III", len(scene.sky), len(scene.background),
                                  len(scene.foreground)))
        ext = np.concatenate([cam.rotation.reshape(9), cam.translation]).astype("<f4")
        intr = np.array([cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height],
                        dtype="<f4")
        chunks.append(ext.tobytes())
        chunks.append(intr.tobytes())
        prompt = scene.prompt.encode("utf-8")
        chunks.append(struct.pack("<I", len(prompt)))
        chunks.append(prompt)
        for cloud in scene.clouds_back_to_front():
            chunks.append(_pack_cloud(cloud))
    meta = {
        "version": world.active_version,
        "ground_height": world.ground_height,
        "scenes": [{"id": s.scene_id, "frozen": list(s.frozen)} for s in world.scenes],
        "edges": [{"a": e.scene_a, "b": e.scene_b,
                   "position": e.relative_position.tolist(),
                   "quat": e.relative_quat.tolist()} for e in world.edges],
    }
    meta_raw = json.dumps(meta).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta_raw)))
    chunks.append(meta_raw)

    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".fgsw.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.view = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.view):
            raise WorldTruncatedError(
                f"needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.view)}")
        out = self.view[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4", count=count)


def load_world(path) -> WorldGraph:
    """Parse a ``.fgsw`` file back into a WorldGraph."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    magic = bytes(r.take(4))
    if magic != MAGIC:
        raise WorldVersionError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise WorldVersionError(f"unsupported format version {version}")
    scene_count = r.u32()

    raw_scenes = []
    for _ in range(scene_count):
        sizes = [r.u32() for _ in range(3)]
        ext = r.f32(12).astype(np.float64)
        intr = r.f32(6).astype(np.float64)
        prompt_len = r.u32()
        prompt = bytes(r.take(prompt_len)).decode("utf-8")
        clouds = [_unpack_cloud(r.take(n * SURFEL_FLOATS * 4), n) for n in sizes]
        camera = Camera(fx=float(intr[0]), fy=float(intr[1]),
                        cx=float(intr[2]), cy=float(intr[3]),
                        rotation=ext[:9].reshape(3, 3), translation=ext[9:12],
                        width=int(round(intr[4])), height=int(round(intr[5])))
        raw_scenes.append((clouds, camera, prompt))

    meta_len = r.u32()
    meta = json.loads(bytes(r.take(meta_len)).decode("utf-8"))

    scene_meta = meta.get("scenes", [])
    if len(scene_meta) != scene_count:
        raise WorldFileError("JSON scene metadata disagrees with scene count")
    scenes = []
    for (clouds, camera, prompt), sm in zip(raw_scenes, scene_meta):
        scenes.append(LayeredScene(
            sky=clouds[0], background=clouds[1], foreground=clouds[2],
            frozen=tuple(bool(f) for f in sm["frozen"]),
            generation_camera=camera, prompt=prompt,
            scene_id=int(sm["id"])))
    edges = [WorldEdge(scene_a=int(e["a"]), scene_b=int(e["b"]),
                       relative_position=e["position"], relative_quat=e["quat"])
             for e in meta.get("edges", [])]
    return WorldGraph(scenes=scenes, edges=edges,
                      active_version=int(meta.get("version", 0)),
                      ground_height=meta.get("ground_height"))
