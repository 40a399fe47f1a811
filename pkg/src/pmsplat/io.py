"""On-disk formats used by the command-line tool.

* cameras: JSON objects ``{"fx","fy","cx","cy","width","height","R","t"}``
  with ``R`` row-major; a rig file (``cams.json``) holds a list of them.
* point maps: little-endian binary PLY with double ``x y z`` and uchar
  ``red green blue`` for every valid pixel in raster order, plus a sidecar
  PNG mask (``<name>.mask.png``) giving the pixel layout.
* depth: PFM, single channel, little-endian (scale -1), rows stored
  bottom-up; invalid pixels are written as 0.
* Gaussian planes: 8-byte magic, u32 count, then 14 little-endian float32
  per primitive (position, rgb, quaternion wxyz, scale, opacity).
* images: 8-bit RGB PNG.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .gaussians import DepthMap, GaussianPlane
from .geometry import CameraModel, PointMap, Space

PLANE_MAGIC = b"GPLANE01"
PLANE_FIELDS = 14


class FormatError(ValueError):
    """A file exists but does not follow the expected layout."""


# --- cameras -------------------------------------------------------------------------


def camera_to_dict(cam: CameraModel) -> dict:
    return {
        "fx": float(cam.fx),
        "fy": float(cam.fy),
        "cx": float(cam.cx),
        "cy": float(cam.cy),
        "width": int(cam.width),
        "height": int(cam.height),
        "R": [float(x) for x in cam.rotation.ravel()],
        "t": [float(x) for x in cam.translation],
    }


def camera_from_dict(d: dict) -> CameraModel:
    try:
        return CameraModel(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            rotation=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["t"], dtype=np.float64).reshape(3),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"camera entry missing or malformed field: {exc}") from None


def save_cameras(path, cams) -> None:
    Path(path).write_text(json.dumps([camera_to_dict(c) for c in cams], indent=1) + "\n")


def load_cameras(path) -> list:
    """Read a rig file; a bare camera object is returned as a one-element list."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data.get("cameras", [data])
    return [camera_from_dict(d) for d in data]


# --- images ----------------------------------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def load_image(path) -> np.ndarray:
    """RGB image as float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


# --- depth (PFM) ---------------------------------------------------------------------


def save_pfm(path, depth: DepthMap | np.ndarray) -> None:
    if isinstance(depth, DepthMap):
        data = np.where(depth.valid, depth.depth, 0.0)
    else:
        data = np.nan_to_num(np.asarray(depth, dtype=np.float64))
    H, W = data.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{W} {H}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data[::-1], dtype="<f4").tobytes())


def load_pfm(path) -> DepthMap:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header != b"Pf":
            raise FormatError(f"{path}: only single-channel PFM is supported")
        W, H = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(W * H * 4), dtype=dtype)
    if data.size != W * H:
        raise FormatError(f"{path}: truncated PFM payload")
    depth = data.reshape(H, W)[::-1].astype(np.float64)
    return DepthMap(depth, depth > 0)


# --- point maps (PLY + mask) ---------------------------------------------------------


def mask_path_for(ply_path) -> Path:
    p = Path(ply_path)
    return p.with_name(p.stem + ".mask.png")


def save_pointmap(path, pmap: PointMap, image: np.ndarray | None = None) -> None:
    """Write the valid points of ``pmap`` (colours from ``image``) and the mask."""
    pts = pmap.points[pmap.valid]
    rgb = to_uint8(image[pmap.valid]) if image is not None else np.zeros((len(pts), 3), np.uint8)
    vertex = np.empty(len(pts), dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("r", "u1"), ("g", "u1"), ("b", "u1")])
    vertex["x"], vertex["y"], vertex["z"] = pts.T
    vertex["r"], vertex["g"], vertex["b"] = rgb.T
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"comment space {pmap.space.name.lower()}\n"
        f"comment grid {pmap.width} {pmap.height}\n"
        f"element vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vertex.tobytes())
    save_mask(mask_path_for(path), pmap.valid)


def _read_ply(path):
    comments, count = {}, None
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise FormatError(f"{path}: not a PLY file")
        while True:
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: missing end_header")
            words = line.decode("ascii").split()
            if words[:1] == ["end_header"]:
                break
            if words[:1] == ["format"] and words[1] != "binary_little_endian":
                raise FormatError(f"{path}: expected binary_little_endian")
            if words[:1] == ["comment"] and len(words) > 2:
                comments[words[1]] = words[2:]
            if words[:2] == ["element", "vertex"]:
                count = int(words[2])
        dtype = [("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("r", "u1"), ("g", "u1"), ("b", "u1")]
        vertex = np.frombuffer(fh.read(), dtype=dtype, count=count)
    xyz = np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1)
    rgb = np.stack([vertex["r"], vertex["g"], vertex["b"]], axis=1) / 255.0
    return xyz, rgb, comments


def load_points(path) -> tuple[np.ndarray, np.ndarray]:
    """Flat ``(N, 3)`` positions and colours, no mask needed."""
    xyz, rgb, _ = _read_ply(path)
    return xyz, rgb


def load_pointmap(path, space: Space | None = None) -> tuple[PointMap, np.ndarray]:
    """Point map and its per-pixel colours, laid out by the sidecar mask."""
    xyz, rgb, comments = _read_ply(path)
    mpath = mask_path_for(path)
    if not mpath.exists():
        raise FileNotFoundError(f"missing validity mask {mpath}")
    mask = load_mask(mpath)
    if mask.sum() != len(xyz):
        raise FormatError(f"{path}: {len(xyz)} vertices but mask has {mask.sum()} valid pixels")
    if space is None:
        space = Space[comments.get("space", ["metric"])[0].upper()]
    H, W = mask.shape
    points = np.zeros((H, W, 3))
    colors = np.zeros((H, W, 3))
    points[mask] = xyz
    colors[mask] = rgb
    return PointMap(points, mask, space), colors


# --- Gaussian planes ----------------------------------------------------------------


def save_plane(path, plane: GaussianPlane) -> None:
    rows = np.concatenate(
        [plane.positions, plane.colors, plane.rotations, plane.scales, plane.opacities[:, None]], axis=1
    )
    with open(path, "wb") as fh:
        fh.write(PLANE_MAGIC)
        fh.write(struct.pack("<I", plane.count))
        fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())


def load_plane(path) -> GaussianPlane:
    with open(path, "rb") as fh:
        if fh.read(8) != PLANE_MAGIC:
            raise FormatError(f"{path}: bad magic, not a Gaussian plane file")
        (count,) = struct.unpack("<I", fh.read(4))
        rows = np.frombuffer(fh.read(), dtype="<f4")
    if rows.size != count * PLANE_FIELDS:
        raise FormatError(f"{path}: expected {count} primitives, payload holds {rows.size / PLANE_FIELDS:g}")
    rows = rows.reshape(count, PLANE_FIELDS).astype(np.float64)
    quats = rows[:, 6:10]
    # float32 storage breaks exact unit norm
    quats = quats / np.linalg.norm(quats, axis=1, keepdims=True) if count else quats
    return GaussianPlane(rows[:, 0:3], rows[:, 3:6], quats, rows[:, 10:13], np.clip(rows[:, 13], 1e-7, 1.0))


# --- registration result ----------------------------------------------------------------


def save_registration(path, reg, extra: dict | None = None) -> None:
    """Scale, shared offset and both translation fields as JSON.

    ``extra`` entries (file references, image sizes) are stored alongside.
    """
    data = {
        "scale": [float(x) for x in reg.scale.scale],
        "offset": [float(x) for x in reg.scale.offset],
        "height": int(reg.transform_l.translation.shape[0]),
        "width": int(reg.transform_l.translation.shape[1]),
        "T_left": np.round(reg.transform_l.translation, 12).tolist(),
        "T_right": np.round(reg.transform_r.translation, 12).tolist(),
    }
    data.update(extra or {})
    Path(path).write_text(json.dumps(data) + "\n")


def load_registration(path) -> dict:
    """The JSON record with ``T_left``/``T_right`` as ``(H, W, 3)`` arrays."""
    data = json.loads(Path(path).read_text())
    for key in ("scale", "T_left", "T_right"):
        if key not in data:
            raise FormatError(f"{path}: missing {key!r}")
    data["scale"] = np.asarray(data["scale"], dtype=np.float64)
    data["T_left"] = np.asarray(data["T_left"], dtype=np.float64)
    data["T_right"] = np.asarray(data["T_right"], dtype=np.float64)
    return data
