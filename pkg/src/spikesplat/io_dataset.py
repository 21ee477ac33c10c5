"""File formats: spike streams (.dat), poses (.json), point clouds (.ply), images, checkpoints."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import (
    BadMagicError,
    FormatError,
    SpikeSplatError,
    TruncatedFileError,
    UnsupportedFormatError,
    ValidationError,
    VersionMismatchError,
)
from .gaussian_field import CameraView
from .spike_core import NonUniformityMap, SpikeStream

DAT_MAGIC = b"SPK1"
DAT_VERSION = 1
DAT_HEADER = struct.Struct("<4sIIIIdd")
POSE_VERSION = 1
ORTHO_TOL = 1e-4
CKPT_MAGIC = b"SGCK"
CKPT_VERSION = 1
CKPT_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror or exc}") from exc


# ---------------------------------------------------------------------------
# Spike streams
# ---------------------------------------------------------------------------

def row_bytes(width: int) -> int:
    return (width + 7) // 8


def pack_frames(frames: np.ndarray) -> bytes:
    """``(N, H, W)`` binary frames to the row-padded payload (LSB = leftmost pixel)."""
    return np.packbits(np.asarray(frames, dtype=np.uint8), axis=-1, bitorder="little").tobytes()


def unpack_frames(payload: bytes, width: int, height: int, window: int) -> np.ndarray:
    rows = np.frombuffer(payload, dtype=np.uint8).reshape(window, height, row_bytes(width))
    return np.unpackbits(rows, axis=-1, count=width, bitorder="little")


def encode_spike_dat(stream: SpikeStream) -> bytes:
    header = DAT_HEADER.pack(DAT_MAGIC, DAT_VERSION, stream.width, stream.height, stream.window,
                             float(stream.threshold), float(stream.timestep_hz))
    return header + pack_frames(stream.frames())


def write_spike_dat(stream: SpikeStream, path) -> None:
    data = encode_spike_dat(stream)
    with open(path, "wb") as f:
        f.write(data)


def decode_spike_dat(data: bytes) -> SpikeStream:
    if len(data) < 4 or data[:4] != DAT_MAGIC:
        raise BadMagicError(f"not a spike stream file (magic {data[:4]!r})")
    if len(data) < DAT_HEADER.size:
        raise TruncatedFileError("header is truncated")
    _, version, width, height, window, threshold, hz = DAT_HEADER.unpack_from(data)
    if version != DAT_VERSION:
        raise VersionMismatchError(f"unsupported .dat version {version} (expected {DAT_VERSION})")
    if width == 0 or height == 0:
        raise FormatError("stream dimensions must be positive")
    if not (threshold > 0 and hz > 0):
        raise FormatError("threshold and timestep_hz must be positive")
    expected = window * height * row_bytes(width)
    payload = data[DAT_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedFileError(f"payload has {len(payload)} bytes, header implies {expected}")
    if len(payload) > expected:
        raise FormatError(f"{len(payload) - expected} trailing bytes after the payload")
    frames = unpack_frames(payload, width, height, window)
    return SpikeStream.from_dense(frames, threshold, hz, time_major=True)


def read_spike_dat(path, raw: bool = False, width: Optional[int] = None,
                   height: Optional[int] = None, window: Optional[int] = None,
                   threshold: float = 1.0, timestep_hz: float = 20000.0) -> SpikeStream:
    """Read a stream file.

    With ``raw`` the file is a headerless payload; ``width`` and ``height``
    are required and ``window`` is inferred from the size when omitted.
    """
    data = _read_bytes(path)
    if not raw:
        return decode_spike_dat(data)
    if not width or not height or width <= 0 or height <= 0:
        raise ValidationError("raw mode needs positive width and height")
    frame = height * row_bytes(width)
    if window is None:
        if len(data) % frame:
            raise TruncatedFileError(f"{len(data)} bytes is not a whole number of {frame}-byte frames")
        window = len(data) // frame
    if len(data) < window * frame:
        raise TruncatedFileError(f"raw file has {len(data)} bytes, need {window * frame}")
    if len(data) > window * frame:
        raise FormatError("raw file is longer than width * height * window implies")
    frames = unpack_frames(data, width, height, window)
    return SpikeStream.from_dense(frames, threshold, timestep_hz, time_major=True)


# ---------------------------------------------------------------------------
# Poses
# ---------------------------------------------------------------------------

def _rigid_inverse(m: np.ndarray) -> np.ndarray:
    rot = m[:3, :3]
    out = np.eye(4)
    out[:3, :3] = rot.T
    out[:3, 3] = -rot.T @ m[:3, 3]
    return out


def _check_rigid(m: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"{where}: non-finite matrix entries")
    if np.abs(m[3] - [0, 0, 0, 1]).max() > ORTHO_TOL:
        raise ValidationError(f"{where}: last row must be [0, 0, 0, 1]")
    rot = m[:3, :3]
    err = np.abs(rot @ rot.T - np.eye(3)).max()
    if err > ORTHO_TOL:
        raise ValidationError(f"{where}: rotation block is not orthonormal (error {err:.2e})")
    if np.linalg.det(rot) < 0:
        raise ValidationError(f"{where}: rotation block is a reflection")
    if err > 1e-9:
        # snap small drift back onto SO(3)
        u, _, vt = np.linalg.svd(rot)
        m = m.copy()
        m[:3, :3] = u @ vt
    m = m.copy()
    m[3] = [0, 0, 0, 1]
    return m


def poses_to_json(views: Sequence[CameraView]) -> dict:
    if not views:
        raise ValidationError("no views to write")
    v0 = views[0]
    doc = {"version": POSE_VERSION,
           "intrinsics": {"width": v0.width, "height": v0.height, "fx": v0.fx, "fy": v0.fy,
                          "cx": v0.cx, "cy": v0.cy, "near": v0.near, "far": v0.far},
           "frames": []}
    for v in views:
        fr = {"camera_to_world": _rigid_inverse(v.world_to_camera).tolist()}
        own = {"width": v.width, "height": v.height, "fx": v.fx, "fy": v.fy, "cx": v.cx,
               "cy": v.cy, "near": v.near, "far": v.far}
        diff = {k: val for k, val in own.items() if doc["intrinsics"][k] != val}
        if diff:
            fr["intrinsics"] = diff
        doc["frames"].append(fr)
    return doc


def write_poses(views: Sequence[CameraView], path) -> None:
    with open(path, "w") as f:
        json.dump(poses_to_json(views), f, indent=1)
        f.write("\n")


def poses_from_json(doc) -> List[CameraView]:
    if not isinstance(doc, dict):
        raise FormatError("pose document must be a JSON object")
    if doc.get("version", POSE_VERSION) != POSE_VERSION:
        raise VersionMismatchError(f"unsupported pose version {doc.get('version')}")
    try:
        base = dict(doc["intrinsics"])
        frames = list(doc["frames"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"pose document is missing {exc}") from exc
    views = []
    for i, fr in enumerate(frames):
        try:
            intr = {**base, **fr.get("intrinsics", {})}
            m = np.array(fr["camera_to_world"], dtype=np.float64)
            if m.size != 16:
                raise FormatError(f"frame {i}: camera_to_world needs 16 entries")
            c2w = _check_rigid(m.reshape(4, 4), f"frame {i}")
            views.append(CameraView(int(intr["width"]), int(intr["height"]), float(intr["fx"]),
                                    float(intr["fy"]), float(intr["cx"]), float(intr["cy"]),
                                    _rigid_inverse(c2w), float(intr.get("near", 0.01)),
                                    float(intr.get("far", 100.0))))
        except SpikeSplatError:
            raise
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise FormatError(f"frame {i}: {exc}") from exc
    return views


def read_poses(path) -> List[CameraView]:
    """Camera-to-world JSON poses to world-to-camera views (camera looks down -z)."""
    data = _read_bytes(path)
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return poses_from_json(doc)


# ---------------------------------------------------------------------------
# PLY point clouds
# ---------------------------------------------------------------------------

PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class PointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None    # (n, 3) in [0, 1]

    def __len__(self) -> int:
        return self.points.shape[0]


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply"):
        raise BadMagicError("not a PLY file")
    if end < 0:
        raise TruncatedFileError("PLY header has no end_header")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    try:
        lines = data[:end].decode("ascii").splitlines()[1:]
    except UnicodeDecodeError as exc:
        raise FormatError("PLY header is not ASCII") from exc
    fmt = None
    elements = []
    for line in lines:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2:
                raise FormatError("malformed format line")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise FormatError(f"malformed element line {line!r}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise FormatError("property before any element")
            if len(tok) == 5 and tok[1] == "list":
                elements[-1][2].append((tok[4], "list", tok[2], tok[3]))
            elif len(tok) == 3:
                if tok[1] not in PLY_TYPES:
                    raise FormatError(f"unknown PLY type {tok[1]!r}")
                elements[-1][2].append((tok[2], PLY_TYPES[tok[1]]))
            else:
                raise FormatError(f"malformed property line {line!r}")
        else:
            raise FormatError(f"unexpected PLY header line {line!r}")
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise FormatError(f"missing or unknown PLY format {fmt!r}")
    if fmt == "binary_big_endian":
        raise UnsupportedFormatError("big-endian PLY is not supported")
    return fmt, elements, body_start


def decode_ply(data: bytes) -> PointCloud:
    fmt, elements, start = _parse_ply_header(data)
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise FormatError("PLY has no vertex element")
    vi = names.index("vertex")
    _, count, props = elements[vi]
    pnames = [p[0] for p in props]
    for axis in "xyz":
        if axis not in pnames:
            raise FormatError(f"vertex element lacks property {axis!r}")
    if any(p[1] == "list" for p in props):
        raise UnsupportedFormatError("list properties on vertices are not supported")
    for e in elements[:vi]:
        if e[1] and any(p[1] == "list" for p in e[2]):
            raise UnsupportedFormatError("list-valued elements before the vertices are not supported")

    if fmt == "ascii":
        lines = data[start:].decode("ascii", errors="replace").split("\n")
        skip = sum(e[1] for e in elements[:vi])
        rows = [ln.split() for ln in lines[skip:skip + count]]
        if len(rows) < count or any(len(r) < len(props) for r in rows):
            raise TruncatedFileError("PLY vertex data is truncated")
        try:
            table = np.array([[float(v) for v in r[:len(props)]] for r in rows],
                             dtype=np.float64).reshape(count, len(props))
        except ValueError as exc:
            raise FormatError(f"bad ASCII vertex value: {exc}") from exc
        col = {n: table[:, i] for i, n in enumerate(pnames)}
    else:
        offset = start
        for e in elements[:vi]:
            offset += e[1] * np.dtype([(p[0], "<" + p[1]) for p in e[2]]).itemsize
        dt = np.dtype([(p[0], "<" + p[1]) for p in props])
        need = offset + count * dt.itemsize
        if len(data) < need:
            raise TruncatedFileError(f"PLY vertex data is truncated ({len(data)} < {need} bytes)")
        rec = np.frombuffer(data, dtype=dt, count=count, offset=offset)
        col = {n: rec[n].astype(np.float64) for n in pnames}

    pts = np.stack([col["x"], col["y"], col["z"]], axis=1) if count else np.zeros((0, 3))
    colors = None
    if all(c in col for c in ("red", "green", "blue")):
        colors = np.stack([col["red"], col["green"], col["blue"]], axis=1) / 255.0 if count \
            else np.zeros((0, 3))
    return PointCloud(pts, colors)


def read_ply_points(path) -> PointCloud:
    """Vertex positions (and u8 colors if present) from an ASCII or little-endian PLY."""
    return decode_ply(_read_bytes(path))


def write_ply_points(path, points, colors=None, binary: bool = True) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
            f"element vertex {len(pts)}", "property double x", "property double y",
            "property double z"]
    cols = None
    if colors is not None:
        cols = np.clip(np.floor(np.asarray(colors, dtype=np.float64) * 255 + 0.5), 0, 255).astype(np.uint8)
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    head.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(head) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
            if cols is not None:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            rec = np.zeros(len(pts), dtype=fields)
            rec["x"], rec["y"], rec["z"] = pts.T
            if cols is not None:
                rec["red"], rec["green"], rec["blue"] = cols.T
            f.write(rec.tobytes())
        else:
            for i, p in enumerate(pts):
                vals = [repr(float(v)) for v in p]
                if cols is not None:
                    vals += [str(int(c)) for c in cols[i]]
                f.write((" ".join(vals) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def to_u8(img) -> np.ndarray:
    """Linear [0, 1] to bytes: ``round(255 * clamp(x))`` with halves rounded up."""
    img = np.asarray(img, dtype=np.float64)
    return np.floor(np.clip(np.nan_to_num(img), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(img, path) -> None:
    """Write ``(H, W)``/``(H, W, 1)`` as PGM or PNG, ``(H, W, 3)`` as PPM or PNG."""
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise ValidationError(f"cannot write image of shape {arr.shape}")
    u8 = to_u8(arr)
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pgm":
        if u8.ndim != 2:
            raise ValidationError("PGM holds single-channel images; use .ppm or .png")
        magic = b"P5"
    elif ext == ".ppm":
        if u8.ndim != 3:
            raise ValidationError("PPM holds RGB images; use .pgm or .png")
        magic = b"P6"
    elif ext == ".png":
        Image.fromarray(u8, mode="L" if u8.ndim == 2 else "RGB").save(path, format="PNG")
        return
    else:
        raise UnsupportedFormatError(f"unknown image extension {ext!r}")
    h, w = u8.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode("ascii") + u8.tobytes())


def _pnm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TruncatedFileError("PNM header is truncated")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_image(path) -> np.ndarray:
    """Read a PGM/PPM/PNG written by :func:`write_image` as float ``(H, W)`` or ``(H, W, 3)``."""
    data = _read_bytes(path)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            with Image.open(path) as im:
                im.load()
                arr = np.asarray(im.convert("L" if im.mode in ("L", "1", "I", "I;16") else "RGB"))
        except (OSError, ValueError, SyntaxError, EOFError) as exc:
            # Pillow reports some corrupt chunks as SyntaxError
            raise FormatError(f"{path}: {exc}") from exc
        return arr.astype(np.float64) / 255.0
    if data[:2] not in (b"P5", b"P6"):
        raise BadMagicError(f"{path}: unsupported image signature {data[:2]!r}")
    channels = 1 if data[:2] == b"P5" else 3
    tokens, pos = _pnm_tokens(data[2:], 3)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: bad PNM header") from exc
    if maxval != 255 or w <= 0 or h <= 0:
        raise UnsupportedFormatError(f"{path}: only 8-bit PNM images are supported")
    body = data[2 + pos:]
    need = w * h * channels
    if len(body) < need:
        raise TruncatedFileError(f"{path}: pixel data is truncated")
    arr = np.frombuffer(body[:need], dtype=np.uint8).reshape((h, w, channels) if channels == 3 else (h, w))
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    arrays: Dict[str, np.ndarray]
    meta: dict
    dtype: np.dtype = CKPT_DTYPES[1]


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """Header ``SGCK | u32 version | u32 dtype code | u32 block count | u32 meta length``,
    UTF-8 JSON metadata, then one block per array: ``u16 name length, name,
    u32 ndim, u32 dims..., data``. Everything little-endian.
    """
    dtype = np.dtype(ckpt.dtype).newbyteorder("<")
    code = {v.str: k for k, v in CKPT_DTYPES.items()}.get(dtype.str)
    if code is None:
        raise ValidationError(f"checkpoint dtype must be float32 or float64, got {dtype}")
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    out = [CKPT_MAGIC, struct.pack("<IIII", CKPT_VERSION, code, len(ckpt.arrays), len(meta)), meta]
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name])
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(out)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != CKPT_MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {data[:4]!r})")
    if len(data) < 20:
        raise TruncatedFileError("checkpoint header is truncated")
    version, code, count, meta_len = struct.unpack_from("<IIII", data, 4)
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}")
    if code not in CKPT_DTYPES:
        raise FormatError(f"unknown checkpoint dtype code {code}")
    dtype = CKPT_DTYPES[code]
    pos = 20

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedFileError("checkpoint is truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    try:
        meta = json.loads(take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint metadata is not valid JSON ({exc})") from exc
    arrays = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2))
        try:
            name = take(klen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("checkpoint block name is not UTF-8") from exc
        (ndim,) = struct.unpack("<I", take(4))
        if ndim > 8:
            raise FormatError(f"block {name!r} has implausible rank {ndim}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(take(size), dtype=dtype).reshape(shape).astype(np.float64)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes in checkpoint")
    return Checkpoint(arrays, meta, dtype)


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    data = encode_checkpoint(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(_read_bytes(path))


# ---------------------------------------------------------------------------
# Non-uniformity maps
# ---------------------------------------------------------------------------

def save_rnu(rnu: NonUniformityMap, path) -> None:
    """Store ``R`` as ``.npy``; dead pixels keep their ``inf``."""
    np.save(path, rnu.R, allow_pickle=False)


def load_rnu(path) -> NonUniformityMap:
    try:
        R = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read response map {path}: {exc}") from exc
    if R.ndim != 2 or not np.issubdtype(R.dtype, np.floating):
        raise FormatError("response map must be a 2-D float array")
    finite = np.where(np.isfinite(R), R, np.nan)
    if np.all(np.isnan(finite)):
        raise FormatError("response map has no live pixels")
    ref = np.unravel_index(np.nanargmin(np.abs(finite - 1.0)), R.shape)
    try:
        return NonUniformityMap(R, ref)
    except SpikeSplatError as exc:
        raise FormatError(f"invalid response map: {exc}") from exc


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

DATASET_KIND = "spikesplat-dataset"
IMAGE_EXTS = (".pgm", ".ppm", ".png")


def sha256_file(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def list_images(directory) -> List[str]:
    if not os.path.isdir(directory):
        raise ValidationError(f"{directory} is not a directory")
    return sorted(os.path.join(directory, n) for n in os.listdir(directory)
                  if os.path.splitext(n)[1].lower() in IMAGE_EXTS)


def save_dataset_dir(out_dir, views, streams, gt_images=None, rnu=None, test_views=None,
                     test_images=None, true_rnu=None, config: Optional[dict] = None) -> dict:
    """Write a training directory and return its manifest (also saved as manifest.json).

    Layout: ``poses.json``, ``streams/view_###.dat``, ``gt/view_###.pgm``,
    ``rnu.npy`` (calibrated map), ``test_poses.json`` and ``test_gt/`` when
    held-out views exist. The manifest stores relative paths and content
    hashes only, so identical inputs give identical manifests.
    """
    os.makedirs(os.path.join(out_dir, "streams"), exist_ok=True)
    write_poses(views, os.path.join(out_dir, "poses.json"))
    manifest = {"kind": DATASET_KIND, "version": 1, "config": config or {}, "views": []}
    for i, s in enumerate(streams):
        rel = f"streams/view_{i:03d}.dat"
        write_spike_dat(s, os.path.join(out_dir, rel))
        entry = {"stream": rel, "sha256": sha256_file(os.path.join(out_dir, rel)),
                 "spikes": int(s.counts().sum())}
        if gt_images is not None:
            os.makedirs(os.path.join(out_dir, "gt"), exist_ok=True)
            rel_gt = f"gt/view_{i:03d}.pgm"
            write_image(gt_images[i], os.path.join(out_dir, rel_gt))
            entry["gt"] = rel_gt
        manifest["views"].append(entry)
    manifest["poses"] = {"file": "poses.json", "sha256": sha256_file(os.path.join(out_dir, "poses.json"))}
    for name, m in (("rnu", rnu), ("rnu_true", true_rnu)):
        if m is not None:
            save_rnu(m, os.path.join(out_dir, f"{name}.npy"))
            manifest[name] = {"file": f"{name}.npy", "sha256": sha256_file(os.path.join(out_dir, f"{name}.npy"))}
    if test_views:
        write_poses(test_views, os.path.join(out_dir, "test_poses.json"))
        os.makedirs(os.path.join(out_dir, "test_gt"), exist_ok=True)
        files = []
        for i, img in enumerate(test_images or []):
            rel = f"test_gt/view_{i:03d}.pgm"
            write_image(img, os.path.join(out_dir, rel))
            files.append({"file": rel, "sha256": sha256_file(os.path.join(out_dir, rel))})
        manifest["test"] = {"poses": "test_poses.json", "images": files}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest


def load_dataset_dir(data_dir, use_rnu: bool = True):
    """Load a directory written by :func:`save_dataset_dir` into a ``SceneDataset``.

    ``points.ply`` is picked up as the initial point cloud when present.
    """
    from .trainer import SceneDataset

    poses = os.path.join(data_dir, "poses.json")
    if not os.path.exists(poses):
        raise ValidationError(f"{data_dir} has no poses.json")
    views = read_poses(poses)
    stream_dir = os.path.join(data_dir, "streams")
    names = sorted(n for n in os.listdir(stream_dir) if n.endswith(".dat")) if os.path.isdir(stream_dir) else []
    if len(names) != len(views):
        raise ValidationError(f"{len(views)} poses but {len(names)} streams in {stream_dir}")
    streams = [read_spike_dat(os.path.join(stream_dir, n)) for n in names]
    rnu = None
    if use_rnu and os.path.exists(os.path.join(data_dir, "rnu.npy")):
        rnu = load_rnu(os.path.join(data_dir, "rnu.npy"))
    points = colors = None
    if os.path.exists(os.path.join(data_dir, "points.ply")):
        cloud = read_ply_points(os.path.join(data_dir, "points.ply"))
        points, colors = cloud.points, cloud.colors
    test_views, test_images = [], []
    if os.path.exists(os.path.join(data_dir, "test_poses.json")):
        test_views = read_poses(os.path.join(data_dir, "test_poses.json"))
        test_images = [read_image(p) for p in list_images(os.path.join(data_dir, "test_gt"))]
        if len(test_images) != len(test_views):
            raise ValidationError("test_gt image count does not match test_poses.json")
    return SceneDataset(views, streams, points=points, point_colors=colors, rnu=rnu,
                        test_views=test_views, test_images=test_images)
