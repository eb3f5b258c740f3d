"""On-disk interchange formats.

Text encodings use explicit float formats so identical inputs always
serialise to identical bytes:

* ``frames.csv``     16 columns per frame, camera centre + quaternion
                     for the optional position prior.
* ``tracks.txt``     one observation per line: track frame u v.
* ``.sdepth``        sparse anchor depths (two text header lines + rows).
* ``.fdepth``        dense float32 raster, little-endian, NaN = no data.
* ``.hdr``           4-line georeferencing sidecar for a DSM .fdepth.
* ``camera.txt``     16 numbers over 3 lines: intrinsics, rotation,
                     translation; the request format handed to external
                     densifier processes.
* ``.ppm``           binary P6, the only image format used anywhere.
* ``.csv`` variants  tie-points, marker truth, marker evaluation pairs.
* ``report.txt``     sorted key = value metric lines.
* ``manifest.json``  run provenance, with a sha256 over the canonical
                     JSON encoding of the configuration.

All readers raise InputFormatError naming the file and 1-based line (or
byte) position of the first problem.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputFormatError
from .fusion import HeightRaster
from .geometry import CameraIntrinsics, Frame, Pose, quat_to_rot, rot_to_quat
from .metrics import MarkerPair

_FDEPTH_MAGIC = b"FDEPTH 1\n"
_SDEPTH_MAGIC = "SDEPTH 1"


def _g12(x) -> str:
    return format(float(x), ".12g")


def _g17(x) -> str:
    return format(float(x), ".17g")


def _fail(path, line, msg):
    raise InputFormatError(f"{path}:{line}: {msg}")


# -- frames ----------------------------------------------------------------

_FRAME_COLUMNS = ("frame_id,timestamp_s,fx,fy,cx,cy,width,height,"
                  "gnss_x,gnss_y,gnss_z,gnss_qw,gnss_qx,gnss_qy,gnss_qz,"
                  "gnss_sigma_m")


def write_frames_csv(path, frames: list[Frame]):
    """16-column frame table; prior columns are empty when absent."""
    with open(path, "w") as fh:
        fh.write(_FRAME_COLUMNS + "\n")
        for f in frames:
            k = f.intrinsics
            row = [str(f.frame_id), _g17(f.timestamp), _g17(k.fx), _g17(k.fy),
                   _g17(k.cx), _g17(k.cy), str(k.width), str(k.height)]
            if f.gnss_prior is not None:
                q = rot_to_quat(f.gnss_prior.rotation)
                c = f.gnss_prior.center
                row += [_g17(v) for v in (*c, *q, f.gnss_sigma)]
            else:
                row += [""] * 8
            fh.write(",".join(row) + "\n")


def read_frames_csv(path) -> list[Frame]:
    frames = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        _fail(path, 1, "empty file")
    if lines[0].strip() != _FRAME_COLUMNS:
        _fail(path, 1, f"expected header '{_FRAME_COLUMNS}'")
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != 16:
            _fail(path, ln, f"expected 16 columns, got {len(parts)}")
        try:
            fid = int(parts[0])
            ts = float(parts[1])
            fx, fy, cx, cy = (float(p) for p in parts[2:6])
            w, h = int(parts[6]), int(parts[7])
        except ValueError as exc:
            _fail(path, ln, f"bad frame fields: {exc}")
        try:
            intr = CameraIntrinsics(fx, fy, cx, cy, w, h)
        except ValueError as exc:
            _fail(path, ln, str(exc))
        prior = None
        sigma = None
        prior_fields = [p.strip() for p in parts[8:16]]
        if any(prior_fields):
            if not all(prior_fields):
                _fail(path, ln, "prior columns must be all set or all empty")
            try:
                vals = [float(p) for p in prior_fields]
            except ValueError as exc:
                _fail(path, ln, f"bad prior fields: {exc}")
            c = np.array(vals[0:3])
            R = quat_to_rot(np.array(vals[3:7]))
            sigma = vals[7]
            if sigma <= 0:
                _fail(path, ln, f"prior sigma must be positive, got {sigma}")
            prior = Pose(R, -R @ c)
        try:
            frames.append(Frame(frame_id=fid, timestamp=ts, intrinsics=intr,
                                gnss_prior=prior, gnss_sigma=sigma))
        except ValueError as exc:
            _fail(path, ln, str(exc))
    if not frames:
        _fail(path, len(lines), "no frame rows")
    return frames


# -- tracks ----------------------------------------------------------------

def write_tracks_txt(path, tracks):
    """One observation per line, grouped by track then frame id."""
    with open(path, "w") as fh:
        fh.write("# track_id frame_id u v\n")
        for t in sorted(tracks, key=lambda t: t.track_id):
            for fid in sorted(t.obs):
                u, v = t.obs[fid]
                fh.write(f"{t.track_id} {fid} {_g17(u)} {_g17(v)}\n")


def read_tracks_txt(path):
    from .ba.problem import Track

    tracks: dict[int, Track] = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            s = raw.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 4:
                _fail(path, ln, f"expected 4 fields, got {len(parts)}")
            try:
                tid, fid = int(parts[0]), int(parts[1])
                u, v = float(parts[2]), float(parts[3])
            except ValueError as exc:
                _fail(path, ln, f"bad observation: {exc}")
            try:
                tracks.setdefault(tid, Track(track_id=tid)).add(fid, u, v)
            except ValueError as exc:
                _fail(path, ln, str(exc))
    return [tracks[tid] for tid in sorted(tracks)]


# -- sparse and dense depth ------------------------------------------------

def write_sdepth(path, amap):
    """Sparse anchor depths: magic, 'width height', then one
    'u v depth sigma' row per anchor, sorted by (v, u)."""
    u, v, d, s = amap.arrays()
    with open(path, "w") as fh:
        fh.write(_SDEPTH_MAGIC + "\n")
        fh.write(f"{amap.width} {amap.height}\n")
        for i in range(len(u)):
            fh.write(f"{u[i]} {v[i]} {_g12(d[i])} {_g12(s[i])}\n")


def read_sdepth(path):
    """Returns (width, height, u, v, depth, sigma) arrays."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != _SDEPTH_MAGIC:
        _fail(path, 1, f"missing '{_SDEPTH_MAGIC}' signature")
    try:
        w, h = (int(p) for p in lines[1].split())
    except (IndexError, ValueError):
        _fail(path, 2, "expected 'width height'")
    rows = [(ln, s) for ln, s in enumerate(lines[2:], start=3) if s.strip()]
    n = len(rows)
    u = np.empty(n, dtype=np.int32)
    v = np.empty(n, dtype=np.int32)
    d = np.empty(n)
    s = np.empty(n)
    for i, (ln, raw) in enumerate(rows):
        parts = raw.split()
        if len(parts) != 4:
            _fail(path, ln, f"expected 4 fields, got {len(parts)}")
        try:
            u[i], v[i] = int(parts[0]), int(parts[1])
            d[i], s[i] = float(parts[2]), float(parts[3])
        except ValueError as exc:
            _fail(path, ln, f"bad anchor row: {exc}")
    return w, h, u, v, d, s


def write_fdepth(path, data: np.ndarray):
    """Dense float32 raster; little-endian, row-major, NaN = no data."""
    a = np.asarray(data)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d raster, got shape {a.shape}")
    with open(path, "wb") as fh:
        fh.write(_FDEPTH_MAGIC)
        fh.write(f"{a.shape[1]} {a.shape[0]}\n".encode())
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_fdepth(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_FDEPTH_MAGIC):
        _fail(path, 1, "missing FDEPTH signature")
    off = len(_FDEPTH_MAGIC)
    nl = blob.find(b"\n", off)
    if nl < 0:
        _fail(path, 2, "truncated header")
    try:
        w, h = (int(p) for p in blob[off:nl].split())
    except ValueError:
        _fail(path, 2, "expected 'width height'")
    need = nl + 1 + 4 * w * h
    if len(blob) != need:
        _fail(path, 2, f"expected {need} bytes for {w}x{h}, got {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=nl + 1).reshape(h, w).copy()


# -- camera request file ---------------------------------------------------

def write_camera_txt(path, intr: CameraIntrinsics, pose: Pose):
    """Three lines: 'fx fy cx cy', rotation row-major, translation."""
    with open(path, "w") as fh:
        fh.write(" ".join(_g12(x) for x in (intr.fx, intr.fy, intr.cx, intr.cy)) + "\n")
        fh.write(" ".join(_g12(x) for x in pose.rotation.ravel()) + "\n")
        fh.write(" ".join(_g12(x) for x in pose.translation) + "\n")


def read_camera_txt(path, width: int, height: int) -> tuple[CameraIntrinsics, Pose]:
    """Parse a camera request; image size comes from the matching sdepth."""
    with open(path) as fh:
        lines = [ln.split() for ln in fh.read().splitlines() if ln.strip()]
    if len(lines) != 3 or [len(l) for l in lines] != [4, 9, 3]:
        _fail(path, 1, "expected 3 lines of 4, 9 and 3 numbers")
    try:
        fx, fy, cx, cy = (float(x) for x in lines[0])
        R = np.array([float(x) for x in lines[1]]).reshape(3, 3)
        t = np.array([float(x) for x in lines[2]])
    except ValueError as exc:
        _fail(path, 1, f"bad number: {exc}")
    return CameraIntrinsics(fx, fy, cx, cy, width, height), Pose(R, t)


# -- images ----------------------------------------------------------------

def write_ppm(path, image: np.ndarray):
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected uint8 (h, w, 3), got {img.dtype} {img.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # then a single whitespace byte before the pixel block.
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(blob):
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if blob[i : i + 1] == b"#":
            while i < len(blob) and blob[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(blob) and not blob[j : j + 1].isspace():
            j += 1
        tokens.append(blob[i:j])
        i = j
    if len(tokens) != 4 or tokens[0] != b"P6":
        _fail(path, 1, "not a binary P6 ppm")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        _fail(path, 1, "bad ppm header numbers")
    if maxval != 255:
        _fail(path, 1, f"only maxval 255 supported, got {maxval}")
    data = blob[i + 1 : i + 1 + 3 * w * h]
    if len(data) != 3 * w * h:
        _fail(path, 1, f"expected {3 * w * h} pixel bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


# -- products --------------------------------------------------------------

def write_point_cloud(path, points: np.ndarray):
    """Plain xyz text, one point per line, fixed 6 decimals."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w") as fh:
        for x, y, z in pts:
            fh.write(f"{x:.6f} {y:.6f} {z:.6f}\n")


def read_point_cloud(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            s = raw.strip()
            if not s:
                continue
            parts = s.split()
            if len(parts) != 3:
                _fail(path, ln, f"expected 3 fields, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                _fail(path, ln, f"bad point: {exc}")
    return np.asarray(rows, dtype=float).reshape(-1, 3)


def write_dsm(path, raster: HeightRaster):
    """DSM as .fdepth plus a 4-line .hdr sidecar next to it."""
    path = Path(path)
    write_fdepth(path, raster.data)
    with open(path.with_suffix(".hdr"), "w") as fh:
        fh.write(f"origin_x {_g17(raster.origin_x)}\n")
        fh.write(f"origin_y {_g17(raster.origin_y)}\n")
        fh.write(f"cell_size {_g17(raster.cell_size)}\n")
        fh.write("nodata nan\n")


def read_dsm(path) -> HeightRaster:
    path = Path(path)
    data = read_fdepth(path).astype(np.float64)
    hdr = path.with_suffix(".hdr")
    fields = {}
    with open(hdr) as fh:
        for ln, raw in enumerate(fh, start=1):
            s = raw.strip()
            if not s:
                continue
            parts = s.split()
            if len(parts) != 2:
                _fail(hdr, ln, f"expected 'key value', got {s!r}")
            fields[parts[0]] = parts[1]
    for key in ("origin_x", "origin_y", "cell_size"):
        if key not in fields:
            _fail(hdr, 1, f"missing '{key}'")
    try:
        return HeightRaster(float(fields["origin_x"]), float(fields["origin_y"]),
                            float(fields["cell_size"]), data)
    except ValueError as exc:
        _fail(hdr, 1, f"bad header value: {exc}")


# -- tie-points and markers ------------------------------------------------

def write_tiepoints_csv(path, rows):
    """rows: iterable of (cluster_index, track_id, xyz array, sigma)."""
    with open(path, "w") as fh:
        fh.write("cluster,track_id,x,y,z,sigma\n")
        for ci, tid, p, s in rows:
            fh.write(f"{ci},{tid},{_g17(p[0])},{_g17(p[1])},{_g17(p[2])},{_g17(s)}\n")


def read_tiepoints_csv(path):
    """Returns list of (cluster, track_id, position (3,), sigma)."""
    out = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "cluster,track_id,x,y,z,sigma":
        _fail(path, 1, "expected tie-point header")
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != 6:
            _fail(path, ln, f"expected 6 columns, got {len(parts)}")
        try:
            out.append((int(parts[0]), int(parts[1]),
                        np.array([float(p) for p in parts[2:5]]), float(parts[5])))
        except ValueError as exc:
            _fail(path, ln, f"bad tie-point row: {exc}")
    return out


def write_marker_truth_csv(path, pairs):
    """pairs: iterable of (id_a, id_b, xy separation m, dz m)."""
    with open(path, "w") as fh:
        fh.write("id_a,id_b,gt_xy_m,gt_z_m\n")
        for a, b, xy, z in pairs:
            fh.write(f"{a},{b},{_g17(xy)},{_g17(z)}\n")


def read_marker_truth_csv(path):
    out = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "id_a,id_b,gt_xy_m,gt_z_m":
        _fail(path, 1, "expected marker truth header")
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != 4:
            _fail(path, ln, f"expected 4 columns, got {len(parts)}")
        try:
            out.append((int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])))
        except ValueError as exc:
            _fail(path, ln, f"bad marker row: {exc}")
    return out


_MARKER_PAIR_HEADER = "id_a,id_b,ax,ay,az,bx,by,bz,gt_xy_m,gt_z_m"


def write_marker_pairs_csv(path, pairs: list[MarkerPair]):
    """Evaluation rows: reconstructed endpoints plus surveyed truth."""
    with open(path, "w") as fh:
        fh.write(_MARKER_PAIR_HEADER + "\n")
        for p in pairs:
            a = np.asarray(p.measured_a, dtype=float)
            b = np.asarray(p.measured_b, dtype=float)
            fh.write(",".join([str(p.id_a), str(p.id_b)]
                              + [_g17(x) for x in (*a, *b, p.truth_xy, p.truth_z)]) + "\n")


def read_marker_pairs_csv(path) -> list[MarkerPair]:
    out = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != _MARKER_PAIR_HEADER:
        _fail(path, 1, f"expected header '{_MARKER_PAIR_HEADER}'")
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != 10:
            _fail(path, ln, f"expected 10 columns, got {len(parts)}")
        try:
            vals = [float(p) for p in parts[2:]]
            out.append(MarkerPair(int(parts[0]), int(parts[1]),
                                  np.array(vals[0:3]), np.array(vals[3:6]),
                                  vals[6], vals[7]))
        except ValueError as exc:
            _fail(path, ln, f"bad marker pair: {exc}")
    return out


# -- reports, config, manifest ----------------------------------------------

def write_report_txt(path, report: dict):
    """Sorted 'key = value' lines; floats use 9 significant digits."""
    with open(path, "w") as fh:
        for key in sorted(report):
            val = report[key]
            if isinstance(val, float):
                fh.write(f"{key} = {val:.9g}\n")
            else:
                fh.write(f"{key} = {val}\n")


def read_config_json(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg


def config_hash(cfg: dict) -> str:
    """sha256 over the canonical (sorted, compact) JSON encoding."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def write_manifest_json(path, manifest: dict):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
