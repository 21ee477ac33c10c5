"""Randomized valid files and a malformed-file corpus for the I/O tests."""

import json
import os
import struct

import numpy as np

from spikesplat import io_dataset as io
from spikesplat.gaussian_field import CameraView
from spikesplat.spike_core import SpikeStream


def random_stream(rng, max_side=13, max_window=9):
    h, w, n = (int(v) for v in rng.integers(1, [max_side, max_side, max_window]))
    frames = (rng.random((n, h, w)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
    return SpikeStream.from_dense(frames, float(rng.uniform(0.1, 4.0)),
                                  float(rng.uniform(100, 40000)), time_major=True)


def random_views(rng, count=None):
    count = count or int(rng.integers(1, 6))
    w, h = (int(v) for v in rng.integers(4, 200, 2))
    views = []
    for _ in range(count):
        eye = rng.normal(size=3)
        eye *= rng.uniform(1, 10) / np.linalg.norm(eye)
        up = [0, 1, 0] if abs(eye[1]) < 0.9 * np.linalg.norm(eye) else [1, 0, 0]
        views.append(CameraView.look_at(eye, rng.normal(size=3) * 0.1, up, w, h,
                                        float(rng.uniform(20, 90))))
    return views


def random_points(rng, with_colors=True):
    n = int(rng.integers(0, 40))
    pts = rng.normal(scale=rng.uniform(0.1, 100), size=(n, 3))
    cols = rng.integers(0, 256, (n, 3)) / 255.0 if with_colors else None
    return pts, cols


def random_checkpoint(rng, dtype="<f8"):
    arrays = {}
    for i in range(int(rng.integers(0, 5))):
        shape = tuple(int(v) for v in rng.integers(0, 5, int(rng.integers(0, 4))))
        arrays[f"block_{i}"] = rng.normal(size=shape).astype(dtype).astype(np.float64)
    meta = {"iteration": int(rng.integers(0, 10000)), "note": "x" * int(rng.integers(0, 5))}
    return io.Checkpoint(arrays, meta, np.dtype(dtype))


def _valid_samples(tmp):
    """One valid file per format, written to ``tmp``; returns ``{name: (path, reader)}``."""
    rng = np.random.default_rng(0)
    out = {}
    p = os.path.join(tmp, "ok.dat")
    io.write_spike_dat(random_stream(rng), p)
    out["dat"] = (p, io.read_spike_dat)
    p = os.path.join(tmp, "ok.json")
    io.write_poses(random_views(rng, 2), p)
    out["poses"] = (p, io.read_poses)
    for binary in (True, False):
        p = os.path.join(tmp, f"ok_{'bin' if binary else 'ascii'}.ply")
        pts, cols = random_points(rng)
        io.write_ply_points(p, pts[:5], cols[:5], binary=binary)
        out[f"ply_{'bin' if binary else 'ascii'}"] = (p, io.read_ply_points)
    p = os.path.join(tmp, "ok.ckpt")
    io.write_checkpoint(io.Checkpoint({"a": np.arange(6.0).reshape(2, 3)}, {"k": 1}), p)
    out["ckpt"] = (p, io.read_checkpoint)
    for ext in (".pgm", ".ppm", ".png"):
        p = os.path.join(tmp, "ok" + ext)
        shape = (3, 4, 3) if ext == ".ppm" else (3, 4)
        io.write_image(rng.random(shape), p)
        out["img" + ext] = (p, io.read_image)
    return out


def _handwritten(tmp):
    """Hand-built broken files, each paired with its reader."""
    head = io.DAT_HEADER.pack(b"SPK1", 1, 2, 2, 1, 1.0, 20000.0)
    dat = {
        "empty.dat": b"",
        "magic.dat": b"SPK2" + head[4:] + b"\x01\x02",
        "short_header.dat": head[:10],
        "version.dat": io.DAT_HEADER.pack(b"SPK1", 9, 2, 2, 1, 1.0, 20000.0) + b"\x01\x02",
        "truncated.dat": head + b"\x01",
        "trailing.dat": head + b"\x01\x02\x03",
        "zero_dim.dat": io.DAT_HEADER.pack(b"SPK1", 1, 0, 2, 1, 1.0, 20000.0),
        "bad_threshold.dat": io.DAT_HEADER.pack(b"SPK1", 1, 2, 2, 1, -1.0, 20000.0) + b"\x01\x02",
        "nan_rate.dat": io.DAT_HEADER.pack(b"SPK1", 1, 2, 2, 1, 1.0, float("nan")) + b"\x01\x02",
    }
    eye = np.eye(4).tolist()
    intr = {"width": 4, "height": 4, "fx": 3.0, "fy": 3.0, "cx": 2.0, "cy": 2.0}
    skew = np.eye(4)
    skew[0, 1] = 0.01
    refl = np.diag([1.0, 1.0, -1.0, 1.0])
    poses = {
        "not_json.json": b"{frames",
        "list.json": b"[1, 2]",
        "no_frames.json": json.dumps({"intrinsics": intr}).encode(),
        "no_intr.json": json.dumps({"frames": [{"camera_to_world": eye}]}).encode(),
        "version.json": json.dumps({"version": 7, "intrinsics": intr, "frames": []}).encode(),
        "short_matrix.json": json.dumps({"intrinsics": intr,
                                         "frames": [{"camera_to_world": [1, 0, 0]}]}).encode(),
        "skew.json": json.dumps({"intrinsics": intr,
                                 "frames": [{"camera_to_world": skew.tolist()}]}).encode(),
        "reflection.json": json.dumps({"intrinsics": intr,
                                       "frames": [{"camera_to_world": refl.tolist()}]}).encode(),
        "nan.json": b'{"intrinsics": {"width": 4, "height": 4, "fx": 3, "fy": 3, "cx": 2, "cy": 2},'
                    b' "frames": [{"camera_to_world": [[NaN,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}]}',
        "text_width.json": json.dumps({"intrinsics": {**intr, "width": "wide"},
                                       "frames": [{"camera_to_world": eye}]}).encode(),
        "neg_width.json": json.dumps({"intrinsics": {**intr, "width": -4},
                                      "frames": [{"camera_to_world": eye}]}).encode(),
        "frame_str.json": json.dumps({"intrinsics": intr, "frames": ["abc"]}).encode(),
        "bad_row.json": json.dumps({"intrinsics": intr, "frames": [
            {"camera_to_world": [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 1, 1]]}]}).encode(),
    }
    ply_head = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
    ply = {
        "magic.ply": b"plx\nend_header\n",
        "no_end.ply": b"ply\nformat ascii 1.0\nelement vertex 1\n",
        "no_format.ply": b"ply\nelement vertex 0\nproperty float x\nend_header\n",
        "big_endian.ply": b"ply\nformat binary_big_endian 1.0\nelement vertex 0\n"
                          b"property float x\nproperty float y\nproperty float z\nend_header\n",
        "missing_z.ply": (ply_head + "end_header\n1 2\n3 4\n").encode(),
        "no_vertex.ply": b"ply\nformat ascii 1.0\nelement face 0\n"
                         b"property list uchar int vertex_index\nend_header\n",
        "short_ascii.ply": (ply_head + "property float z\nend_header\n1 2 3\n").encode(),
        "bad_value.ply": (ply_head + "property float z\nend_header\n1 2 q\n4 5 6\n").encode(),
        "short_binary.ply": b"ply\nformat binary_little_endian 1.0\nelement vertex 3\n"
                            b"property float x\nproperty float y\nproperty float z\nend_header\n"
                            + b"\x00" * 20,
        "bad_type.ply": b"ply\nformat ascii 1.0\nelement vertex 1\nproperty quux x\nend_header\n",
        "bad_count.ply": b"ply\nformat ascii 1.0\nelement vertex many\nend_header\n",
        "orphan_prop.ply": b"ply\nformat ascii 1.0\nproperty float x\nend_header\n",
        "list_vertex.ply": b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n"
                           b"property float y\nproperty float z\nproperty list uchar int n\nend_header\n",
        "junk_line.ply": b"ply\nformat ascii 1.0\nwhatever\nend_header\n",
        "binary_header.ply": b"ply\nformat ascii 1.0\n\xff\xfe\nend_header\n",
    }
    ck_head = io.CKPT_MAGIC + struct.pack("<IIII", 1, 1, 1, 2) + b"{}"
    block = struct.pack("<H", 1) + b"a" + struct.pack("<I", 1) + struct.pack("<I", 2)
    ckpt = {
        "magic.ckpt": b"XXXX" + b"\x00" * 16,
        "short.ckpt": io.CKPT_MAGIC + b"\x01\x00",
        "version.ckpt": io.CKPT_MAGIC + struct.pack("<IIII", 5, 1, 0, 0),
        "dtype.ckpt": io.CKPT_MAGIC + struct.pack("<IIII", 1, 7, 0, 0),
        "bad_meta.ckpt": io.CKPT_MAGIC + struct.pack("<IIII", 1, 1, 0, 3) + b"{x]",
        "truncated_block.ckpt": ck_head + block + b"\x00" * 9,
        "trailing.ckpt": ck_head + block + b"\x00" * 17,
        "rank.ckpt": ck_head + struct.pack("<H", 1) + b"a" + struct.pack("<I", 99),
        "bad_name.ckpt": ck_head + struct.pack("<H", 2) + b"\xff\xfe" + struct.pack("<I", 0)
                         + b"\x00" * 8,
        "huge_shape.ckpt": ck_head + struct.pack("<H", 1) + b"a" + struct.pack("<I", 2)
                           + struct.pack("<II", 2 ** 31, 2 ** 31),
    }
    img = {
        "magic.pgm": b"P2\n1 1\n255\n\x00",
        "empty.pgm": b"",
        "header.pgm": b"P5\n1",
        "depth.pgm": b"P5\n1 1\n65535\n\x00\x00",
        "text.pgm": b"P5\nx 1\n255\n\x00",
        "pixels.ppm": b"P6\n2 2\n255\n\x00\x00\x00",
        "zero.pgm": b"P5\n0 1\n255\n",
        "broken.png": b"\x89PNG\r\n\x1a\n" + b"\x00" * 30,
    }
    out = {}
    for group, reader in ((dat, io.read_spike_dat), (poses, io.read_poses), (ply, io.read_ply_points),
                          (ckpt, io.read_checkpoint), (img, io.read_image)):
        for name, data in group.items():
            p = os.path.join(tmp, name)
            with open(p, "wb") as f:
                f.write(data)
            out[name] = (p, reader)
    return out


def malformed_corpus(tmp):
    """Yield ``(label, path, reader)`` for every broken file: hand-built cases,
    every truncation of each valid sample and seeded single-byte corruptions."""
    os.makedirs(tmp, exist_ok=True)
    for name, (path, reader) in _handwritten(tmp).items():
        yield name, path, reader
    rng = np.random.default_rng(1)
    for name, (path, reader) in _valid_samples(tmp).items():
        with open(path, "rb") as f:
            data = f.read()
        variants = [("cut%d" % k, data[:k]) for k in range(0, len(data), max(1, len(data) // 40))]
        for j in range(25):
            b = bytearray(data)
            pos = int(rng.integers(0, len(b)))
            b[pos] = int(rng.integers(0, 256))
            variants.append(("flip%d" % j, bytes(b)))
        variants.append(("missing", None))
        for tag, blob in variants:
            p = os.path.join(tmp, f"{name}_{tag}{os.path.splitext(path)[1]}")
            if blob is not None:
                with open(p, "wb") as f:
                    f.write(blob)
            yield f"{name}:{tag}", p, reader
