"""On-disk formats: field checkpoints, scene-bundle directories, PLY, PNG.

Checkpoint layout (little-endian): magic ``DSGW``, u32 format version, then
length-prefixed sections (4-byte name, u64 payload size, payload). Unknown
sections are skipped, so future writers stay readable. Float arrays are
stored as float64 so a save/load round trip is bit-exact against the
in-memory training state.

Scene bundle directory::

    cameras.json       intrinsics/extrinsics for train and test splits
    state1/, state2/   rgb_XXX.png (8-bit) + mask_XXX.png (16-bit gray)
    points1.ply, points2.ply   binary little-endian, x y z r g b label
    transforms.json    per-object state transition (quat wxyz + translation)
    test/              oracle float renders (.npy) + quantized .png + masks
    manifest.json      index of all of the above

Transform JSON example (object 1 rotated 90 deg about z, then shifted)::

    {"1": {"quat_wxyz": [0.7071, 0.0, 0.0, 0.7071], "translation": [0.3, -0.1, 0.0]}}
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .core import Camera, GaussianField, Observation, RigidTransform, SceneTransform
from .scenegen import DualSceneBundle, PointCloud, SceneSpec, TestState
from .segmentation import Classifier

MAGIC = b"DSGW"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    def __init__(self, section: str):
        super().__init__(f"file truncated inside section '{section}'")
        self.section = section


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def write_png(path: str, image: np.ndarray) -> None:
    """8-bit RGB PNG with round-half-to-even quantization from [0, 1] floats."""
    arr = np.asarray(image, dtype=np.float64)
    quant = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    _atomic(path, lambda tmp: Image.fromarray(quant, mode="RGB").save(tmp, format="PNG"))


def read_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def write_mask_png(path: str, mask: np.ndarray) -> None:
    """16-bit grayscale PNG of raw label ids."""
    arr = np.asarray(mask).astype(np.uint16)
    _atomic(path, lambda tmp: Image.fromarray(arr).save(tmp, format="PNG"))


def read_mask_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.int64)


def _atomic(path: str, writer) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


# ---------------------------------------------------------------------------
# PLY point clouds
# ---------------------------------------------------------------------------

def write_ply(path: str, cloud: PointCloud) -> None:
    n = len(cloud)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float r\nproperty float g\nproperty float b\n"
        "property int label\n"
        "end_header\n"
    )
    rec = np.empty(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                             ("r", "<f4"), ("g", "<f4"), ("b", "<f4"), ("label", "<i4")])
    for i, name in enumerate("xyz"):
        rec[name] = cloud.positions[:, i].astype("<f4")
    for i, name in enumerate("rgb"):
        rec[name] = cloud.colors[:, i].astype("<f4")
    rec["label"] = cloud.labels.astype("<i4")

    def _write(tmp):
        with open(tmp, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(rec.tobytes())

    _atomic(path, _write)


def read_ply(path: str) -> PointCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise CheckpointError(f"not a PLY file: {path}")
    header = data[:end].decode("ascii").splitlines()
    n = next(int(line.split()[-1]) for line in header if line.startswith("element vertex"))
    props = [line.split()[2] for line in header if line.startswith("property")]
    if props != ["x", "y", "z", "r", "g", "b", "label"]:
        raise CheckpointError(f"unexpected PLY properties {props}")
    rec = np.frombuffer(data[end + len(b"end_header\n"):],
                        dtype=[(p, "<f4") for p in "xyzrgb"] + [("label", "<i4")], count=n)
    return PointCloud(
        positions=np.stack([rec[p].astype(np.float64) for p in "xyz"], axis=1),
        colors=np.stack([rec[p].astype(np.float64) for p in "rgb"], axis=1),
        labels=rec["label"].astype(np.int64),
    )


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def rigid_to_json(rt: RigidTransform) -> dict:
    return {"quat_wxyz": [float(v) for v in rt.rotation],
            "translation": [float(v) for v in rt.translation]}


def rigid_from_json(obj: dict) -> RigidTransform:
    return RigidTransform(np.array(obj["quat_wxyz"]), np.array(obj["translation"]))


def scene_transform_to_json(t: SceneTransform) -> dict:
    return {str(label): rigid_to_json(rt) for label, rt in sorted(t.per_object.items())}


def scene_transform_from_json(obj: dict) -> SceneTransform:
    return SceneTransform({int(k): rigid_from_json(v) for k, v in obj.items()})


def camera_to_json(cam: Camera, split: str) -> dict:
    return {
        "split": split, "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "world_to_cam": rigid_to_json(cam.world_to_cam),
    }


def camera_from_json(obj: dict) -> Camera:
    return Camera(fx=obj["fx"], fy=obj["fy"], cx=obj["cx"], cy=obj["cy"],
                  width=obj["width"], height=obj["height"],
                  world_to_cam=rigid_from_json(obj["world_to_cam"]))


# ---------------------------------------------------------------------------
# field checkpoints
# ---------------------------------------------------------------------------

_FIELD_ARRAYS = ("centers", "rotations", "log_scales", "opacity_logits", "colors", "identities")


def _pack_section(name: bytes, payload: bytes) -> bytes:
    return name + struct.pack("<Q", len(payload)) + payload


def _array_bytes(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f8" if arr.dtype.kind == "f" else "<i8")
    return a.tobytes()


def save_field(path: str, field: GaussianField, classifier: Classifier,
               optimizer: Optional[object] = None) -> None:
    """Write a field + classifier checkpoint; optimizer state optional."""
    n = len(field)
    geom = struct.pack("<QI", n, field.object_count)
    for name in _FIELD_ARRAYS:
        geom += _array_bytes(getattr(field, name))
    geom += _array_bytes(field.object_labels)

    clsf = _array_bytes(classifier.weights) + _array_bytes(classifier.bias)

    blob = MAGIC + struct.pack("<I", FORMAT_VERSION)
    blob += _pack_section(b"GEOM", geom)
    blob += _pack_section(b"CLSF", clsf)
    if optimizer is not None:
        opt = struct.pack("<Q", optimizer.step)
        for store in (optimizer.m, optimizer.v):
            for key in sorted(store):
                arr = store[key]
                meta = json.dumps({"key": key, "shape": list(arr.shape)}).encode()
                opt += struct.pack("<I", len(meta)) + meta + _array_bytes(arr)
        blob += _pack_section(b"OPTS", opt)

    _atomic(path, lambda tmp: open(tmp, "wb").write(blob))


@dataclass
class FieldCheckpoint:
    field: GaussianField
    classifier: Classifier
    version: int
    optimizer_raw: Optional[bytes] = None


def load_field(path: str) -> FieldCheckpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic in {path}")
    version = struct.unpack("<I", data[4:8])[0]
    if version > FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version} is newer than supported {FORMAT_VERSION}")

    sections: Dict[str, bytes] = {}
    pos = 8
    while pos < len(data):
        if pos + 12 > len(data):
            raise TruncatedFileError("header")
        name = data[pos:pos + 4].decode("ascii", errors="replace")
        size = struct.unpack("<Q", data[pos + 4:pos + 12])[0]
        payload = data[pos + 12:pos + 12 + size]
        if len(payload) < size:
            raise TruncatedFileError(name)
        sections[name] = payload
        pos += 12 + size

    if "GEOM" not in sections:
        raise TruncatedFileError("GEOM")
    geom = sections["GEOM"]
    if len(geom) < 12:
        raise TruncatedFileError("GEOM")
    n, object_count = struct.unpack("<QI", geom[:12])
    shapes = [(n, 3), (n, 4), (n, 3), (n,), (n, 3), (n, 16)]
    offset = 12
    arrays = []
    for name, shape in zip(_FIELD_ARRAYS, shapes):
        count = int(np.prod(shape))
        nbytes = count * 8
        if offset + nbytes > len(geom):
            raise TruncatedFileError(f"GEOM:{name}")
        arrays.append(np.frombuffer(geom[offset:offset + nbytes], dtype="<f8").reshape(shape).copy())
        offset += nbytes
    if offset + n * 8 > len(geom):
        raise TruncatedFileError("GEOM:object_labels")
    labels = np.frombuffer(geom[offset:offset + n * 8], dtype="<i8").copy()

    clsf = sections.get("CLSF")
    if clsf is None or len(clsf) < (256 * 16 + 256) * 8:
        raise TruncatedFileError("CLSF")
    weights = np.frombuffer(clsf[:256 * 16 * 8], dtype="<f8").reshape(256, 16).copy()
    bias = np.frombuffer(clsf[256 * 16 * 8:(256 * 16 + 256) * 8], dtype="<f8").copy()

    field = GaussianField(
        centers=arrays[0], rotations=arrays[1], log_scales=arrays[2],
        opacity_logits=arrays[3], colors=arrays[4], identities=arrays[5],
        object_labels=labels, object_count=object_count,
    )
    return FieldCheckpoint(field=field, classifier=Classifier(weights, bias),
                           version=version, optimizer_raw=sections.get("OPTS"))


# ---------------------------------------------------------------------------
# scene bundle directories
# ---------------------------------------------------------------------------

def save_bundle(bundle: DualSceneBundle, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    cams = [camera_to_json(c, "train") for c in bundle.cameras]
    cams += [camera_to_json(c, "test") for c in bundle.test_cameras]
    _write_json(os.path.join(out_dir, "cameras.json"), {"cameras": cams})

    states = {}
    for tag, obs_list in (("state1", bundle.observations_1), ("state2", bundle.observations_2)):
        views = []
        for i, obs in enumerate(obs_list):
            rgb = f"{tag}/rgb_{i:03d}.png"
            msk = f"{tag}/mask_{i:03d}.png"
            write_png(os.path.join(out_dir, rgb), obs.image)
            write_mask_png(os.path.join(out_dir, msk), obs.mask)
            views.append({"image": rgb, "mask": msk, "camera": i})
        states[tag] = views

    write_ply(os.path.join(out_dir, "points1.ply"), bundle.points_1)
    write_ply(os.path.join(out_dir, "points2.ply"), bundle.points_2)

    _write_json(os.path.join(out_dir, "transforms.json"), {
        "t_12": scene_transform_to_json(bundle.t_12),
        "test_state": {"t_1t": scene_transform_to_json(bundle.test_state.transform)},
    })

    test_views = []
    for i, (img, msk) in enumerate(zip(bundle.test_state.images, bundle.test_state.masks)):
        rgb = f"test/rgb_{i:03d}.png"
        raw = f"test/rgb_{i:03d}.npy"
        m = f"test/mask_{i:03d}.png"
        write_png(os.path.join(out_dir, rgb), img)
        np.save(os.path.join(out_dir, raw), img)
        write_mask_png(os.path.join(out_dir, m), msk)
        test_views.append({"image": rgb, "float_image": raw, "mask": m, "camera": i})

    _write_json(os.path.join(out_dir, "manifest.json"), {
        "cameras": "cameras.json",
        "states": states,
        "points": {"state1": "points1.ply", "state2": "points2.ply"},
        "transforms": "transforms.json",
        "test": test_views,
        "bounds": bundle.bounds.tolist(),
        "spec": dataclasses.asdict(bundle.spec),
    })


def load_bundle(scene_dir: str) -> DualSceneBundle:
    manifest = _read_json(os.path.join(scene_dir, "manifest.json"))
    for rel in _manifest_files(manifest):
        if not os.path.exists(os.path.join(scene_dir, rel)):
            raise FileNotFoundError(f"manifest references missing file {rel}")

    cams_json = _read_json(os.path.join(scene_dir, manifest["cameras"]))["cameras"]
    cameras = tuple(camera_from_json(c) for c in cams_json if c["split"] == "train")
    test_cameras = tuple(camera_from_json(c) for c in cams_json if c["split"] == "test")

    def _load_state(tag: str) -> Tuple[Observation, ...]:
        obs = []
        for view in manifest["states"][tag]:
            obs.append(Observation(
                image=read_png(os.path.join(scene_dir, view["image"])),
                mask=read_mask_png(os.path.join(scene_dir, view["mask"])),
            ))
        return tuple(obs)

    transforms = _read_json(os.path.join(scene_dir, manifest["transforms"]))
    t_12 = scene_transform_from_json(transforms["t_12"])
    t_1t = scene_transform_from_json(transforms["test_state"]["t_1t"])

    test_images, test_masks = [], []
    for view in manifest["test"]:
        test_images.append(np.load(os.path.join(scene_dir, view["float_image"])))
        test_masks.append(read_mask_png(os.path.join(scene_dir, view["mask"])))

    return DualSceneBundle(
        cameras=cameras, test_cameras=test_cameras,
        observations_1=_load_state("state1"), observations_2=_load_state("state2"),
        points_1=read_ply(os.path.join(scene_dir, manifest["points"]["state1"])),
        points_2=read_ply(os.path.join(scene_dir, manifest["points"]["state2"])),
        t_12=t_12,
        test_state=TestState(transform=t_1t, images=tuple(test_images), masks=tuple(test_masks)),
        bounds=np.array(manifest["bounds"]),
        spec=SceneSpec(**manifest["spec"]),
    )


def _manifest_files(manifest: dict) -> List[str]:
    files = [manifest["cameras"], manifest["transforms"]]
    files += list(manifest["points"].values())
    for views in manifest["states"].values():
        for v in views:
            files += [v["image"], v["mask"]]
    for v in manifest["test"]:
        files += [v["image"], v["float_image"], v["mask"]]
    return files


def _write_json(path: str, obj) -> None:
    _atomic(path, lambda tmp: open(tmp, "w").write(json.dumps(obj, indent=2, sort_keys=True)))


def _read_json(path: str):
    with open(path) as fh:
        return json.load(fh)
