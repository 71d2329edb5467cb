"""Scene and checkpoint I/O.

Formats:
  - cameras.txt: one camera per line: id w h fx fy cx cy, 9 row-major
    rotation entries, 3 translation entries (world-to-camera).
  - images/<id>.png or .ppm: 8-bit RGB.
  - depth/<id>.pfm: single-channel PFM ("Pf"), ray-depth convention
    (Euclidean distance from the camera center), 0 = invalid.
  - normal/<id>.pfm: 3-channel PFM ("PF"), world-frame unit normals,
    (0,0,0) = invalid.
  - points.ply: sparse points (ASCII or binary little-endian PLY), with a
    sidecar tracks.txt (line i: "<k> id_1 ... id_k" of observing cameras).
  - gt/points_gt.ply: optional ground-truth surface samples.
  - test_views.txt: optional held-out camera ids, one per line.
  - Soup checkpoints: binary "HGS1" container (little-endian float32
    arrays in declared order, then a uint64 id table).

PFM rows are stored bottom-to-top; a negative scale marks little-endian
data. All readers name the offending path in their errors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import PinholeCamera
from .errors import DimensionMismatch, MalformedHeader, MissingFile
from .soup import AppearanceModel, DEFAULT_K_OFFSETS, FEATURE_DIM, TriangleSoup

CHECKPOINT_MAGIC = b"HGS1"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------


def write_pfm(path, data: np.ndarray) -> None:
    """Write float32 PFM (little-endian, bottom-to-top rows)."""
    path = Path(path)
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
        h, w = data.shape
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
        h, w = data.shape[:2]
    else:
        raise ValueError(f"PFM supports (H,W) or (H,W,3), got {data.shape}")
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read PFM, handling both endiannesses; returns float64 (H,W[,3])."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    with open(path, "rb") as f:
        raw = f.read()
    # Header: magic, width, height, scale as whitespace-separated tokens.
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedHeader(f"{path}: truncated PFM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after the scale
    magic = tokens[0]
    if magic not in (b"PF", b"Pf"):
        raise MalformedHeader(f"{path}: bad PFM magic {magic!r}")
    try:
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError as exc:
        raise MalformedHeader(f"{path}: unparsable PFM header") from exc
    channels = 3 if magic == b"PF" else 1
    count = w * h * channels
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    if data.size != count:
        raise MalformedHeader(f"{path}: PFM payload shorter than header implies")
    img = data.reshape(h, w, channels)[::-1].astype(np.float64)
    return img[..., 0] if channels == 1 else img


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------


def write_ply(path, points: np.ndarray, labels: np.ndarray | None = None,
              binary: bool = True) -> None:
    """Write points (and optional int32 'plane' labels) as float32 PLY."""
    path = Path(path)
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    fmt = "binary_little_endian" if binary else "ascii"
    lines = [
        "ply",
        f"format {fmt} 1.0",
        f"element vertex {pts.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if labels is not None:
        lines.append("property int plane")
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode()
    with open(path, "wb") as f:
        f.write(header)
        if binary:
            if labels is None:
                f.write(np.ascontiguousarray(pts).astype("<f4").tobytes())
            else:
                rec = np.zeros(
                    pts.shape[0],
                    dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("plane", "<i4")],
                )
                rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
                rec["plane"] = np.asarray(labels, dtype=np.int32)
                f.write(rec.tobytes())
        else:
            lab = None if labels is None else np.asarray(labels, dtype=np.int32)
            out = []
            for i in range(pts.shape[0]):
                row = f"{pts[i, 0]:.9g} {pts[i, 1]:.9g} {pts[i, 2]:.9g}"
                if lab is not None:
                    row += f" {int(lab[i])}"
                out.append(row)
            f.write(("\n".join(out) + ("\n" if out else "")).encode())


_PLY_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "int": ("<i4", 4), "int32": ("<i4", 4),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
    "uchar": ("<u1", 1), "uint8": ("<u1", 1),
    "short": ("<i2", 2), "ushort": ("<u2", 2),
}


def read_ply(path) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Read an ASCII or binary-little-endian PLY vertex element.

    Returns (points (N,3) float64, extras dict of any non-xyz properties).
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise MalformedHeader(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii", "replace").splitlines()
    body = raw[end:]
    body = body[body.find(b"\n") + 1 :]

    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise MalformedHeader(f"{path}: list properties unsupported")
            props.append((parts[2], parts[1]))
    if fmt is None or count is None:
        raise MalformedHeader(f"{path}: missing format or vertex element")
    names = [n for n, _ in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise MalformedHeader(f"{path}: vertex element lacks '{axis}'")

    if fmt == "ascii":
        rows = body.decode("ascii", "replace").split()
        vals = np.array(rows[: count * len(props)], dtype=np.float64)
        if vals.size != count * len(props):
            raise MalformedHeader(f"{path}: ASCII PLY payload too short")
        table = vals.reshape(count, len(props))
        cols = {name: table[:, i] for i, (name, _) in enumerate(props)}
    elif fmt == "binary_little_endian":
        dtype = np.dtype([(n, _PLY_TYPES[t][0]) for n, t in props])
        rec = np.frombuffer(body, dtype=dtype, count=count)
        if rec.size != count:
            raise MalformedHeader(f"{path}: binary PLY payload too short")
        cols = {n: rec[n].astype(np.float64) for n, _ in props}
    else:
        raise MalformedHeader(f"{path}: unsupported PLY format {fmt}")
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    extras = {n: v for n, v in cols.items() if n not in ("x", "y", "z")}
    return pts, extras


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """Write an 8-bit P6 PPM from a float image in [0, 1]."""
    img8 = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    h, w = img8.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img8.tobytes())


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    with open(path, "rb") as f:
        raw = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment to end of line
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise MalformedHeader(f"{path}: not a P6 PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise MalformedHeader(f"{path}: only maxval 255 supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    if data.size != w * h * 3:
        raise MalformedHeader(f"{path}: PPM payload too short")
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_image(path, image: np.ndarray) -> None:
    """Write a float [0,1] RGB image as PNG (or PPM by extension)."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, image)
        return
    img8 = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(img8).save(path)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# Cameras and tracks
# ---------------------------------------------------------------------------


def write_cameras(path, cameras: list[PinholeCamera]) -> None:
    lines = []
    for c in cameras:
        vals = [c.id, c.width, c.height, c.fx, c.fy, c.cx, c.cy]
        vals += list(c.R.reshape(-1)) + list(c.t)
        lines.append(" ".join(f"{v:.17g}" if isinstance(v, float) else str(v) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path) -> list[PinholeCamera]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    cameras = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 19:
            raise MalformedHeader(f"{path}:{ln}: expected 19 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise MalformedHeader(f"{path}:{ln}: unparsable number") from exc
        try:
            cameras.append(
                PinholeCamera(
                    id=int(vals[0]), width=int(vals[1]), height=int(vals[2]),
                    fx=vals[3], fy=vals[4], cx=vals[5], cy=vals[6],
                    R=np.array(vals[7:16]).reshape(3, 3),
                    t=np.array(vals[16:19]),
                )
            )
        except (MalformedHeader, ValueError) as exc:
            raise MalformedHeader(f"{path}:{ln}: {exc}") from exc
    return cameras


def write_tracks(path, tracks: list[np.ndarray]) -> None:
    lines = []
    for t in tracks:
        ids = [str(int(v)) for v in np.asarray(t).ravel()]
        lines.append(" ".join([str(len(ids))] + ids))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tracks(path) -> list[np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    tracks = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        k = int(parts[0])
        if len(parts) != k + 1:
            raise MalformedHeader(f"{path}:{ln}: track count mismatch")
        tracks.append(np.array([int(p) for p in parts[1:]], dtype=np.int64))
    return tracks


# ---------------------------------------------------------------------------
# Scene bundle
# ---------------------------------------------------------------------------


@dataclass
class SceneBundle:
    cameras: list[PinholeCamera]
    images: dict[int, np.ndarray]    # cam id -> (H, W, 3) in [0, 1]
    depths: dict[int, np.ndarray]    # cam id -> (H, W) ray depth, 0 invalid
    normals: dict[int, np.ndarray]   # cam id -> (H, W, 3) world frame
    points: np.ndarray               # (P, 3) sparse points
    tracks: list[np.ndarray]         # per point: observing camera ids
    gt_points: np.ndarray | None = None
    test_ids: list[int] = field(default_factory=list)

    def camera_by_id(self, cam_id: int) -> PinholeCamera:
        for c in self.cameras:
            if c.id == cam_id:
                return c
        raise KeyError(f"no camera with id {cam_id}")

    def depth_mask(self, cam_id: int) -> np.ndarray:
        return self.depths[cam_id] > 0

    def train_cameras(self) -> list[PinholeCamera]:
        held = set(self.test_ids)
        return [c for c in self.cameras if c.id not in held]

    def test_cameras(self) -> list[PinholeCamera]:
        held = set(self.test_ids)
        return [c for c in self.cameras if c.id in held]


def save_scene(bundle: SceneBundle, root) -> None:
    root = Path(root)
    for sub in ("images", "depth", "normal", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_cameras(root / "cameras.txt", bundle.cameras)
    for cam in bundle.cameras:
        write_image(root / "images" / f"{cam.id}.png", bundle.images[cam.id])
        write_pfm(root / "depth" / f"{cam.id}.pfm", bundle.depths[cam.id])
        write_pfm(root / "normal" / f"{cam.id}.pfm", bundle.normals[cam.id])
    write_ply(root / "points.ply", bundle.points)
    write_tracks(root / "tracks.txt", bundle.tracks)
    if bundle.gt_points is not None:
        write_ply(root / "gt" / "points_gt.ply", bundle.gt_points)
    if bundle.test_ids:
        (root / "test_views.txt").write_text(
            "\n".join(str(i) for i in bundle.test_ids) + "\n"
        )


def load_scene(root) -> SceneBundle:
    """Load and validate a scene directory.

    Raises MissingFile / MalformedHeader / DimensionMismatch naming the
    offending path. Depth rasters use the ray-depth convention.
    """
    root = Path(root)
    cameras = read_cameras(root / "cameras.txt")
    if not cameras:
        raise MalformedHeader(f"{root / 'cameras.txt'}: no cameras")
    images, depths, normals = {}, {}, {}
    for cam in cameras:
        img_path = root / "images" / f"{cam.id}.png"
        if not img_path.exists():
            img_path = root / "images" / f"{cam.id}.ppm"
        images[cam.id] = read_image(img_path)
        depths[cam.id] = read_pfm(root / "depth" / f"{cam.id}.pfm")
        normals[cam.id] = read_pfm(root / "normal" / f"{cam.id}.pfm")
        for name, arr, want in (
            (img_path, images[cam.id], 3),
            (root / "depth" / f"{cam.id}.pfm", depths[cam.id], 2),
            (root / "normal" / f"{cam.id}.pfm", normals[cam.id], 3),
        ):
            if arr.shape[:2] != (cam.height, cam.width):
                raise DimensionMismatch(
                    f"{name}: raster {arr.shape[:2]} vs camera {cam.id} "
                    f"({cam.height}, {cam.width})"
                )
            if arr.ndim != (3 if want == 3 else 2):
                raise MalformedHeader(f"{name}: expected {want}-channel raster")
    points, _ = read_ply(root / "points.ply")
    tracks = read_tracks(root / "tracks.txt")
    if len(tracks) != points.shape[0]:
        raise DimensionMismatch(
            f"{root / 'tracks.txt'}: {len(tracks)} tracks for {points.shape[0]} points"
        )
    cam_ids = {c.id for c in cameras}
    for i, t in enumerate(tracks):
        for cid in t:
            if int(cid) not in cam_ids:
                raise MalformedHeader(
                    f"{root / 'tracks.txt'}: point {i} references unknown camera {cid}"
                )
    gt_path = root / "gt" / "points_gt.ply"
    gt_points = read_ply(gt_path)[0] if gt_path.exists() else None
    test_path = root / "test_views.txt"
    test_ids = (
        [int(s) for s in test_path.read_text().split()] if test_path.exists() else []
    )
    return SceneBundle(
        cameras=cameras, images=images, depths=depths, normals=normals,
        points=points, tracks=tracks, gt_points=gt_points, test_ids=test_ids,
    )


# ---------------------------------------------------------------------------
# Soup checkpoints
# ---------------------------------------------------------------------------


def write_checkpoint(path, soup: TriangleSoup) -> None:
    """Serialize a soup to the binary container (float32 payload)."""
    app = soup.appearance
    n = len(soup)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", n))
        for arr in (
            soup.vertices, soup.opacity_logit, soup.sharpness_log,
            soup.smoothness_log, app.features, app.offset_scale, app.offsets,
            app.color_logit, app.opacity_logit, app.scale_log, app.rotation,
        ):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(soup.ids, dtype="<u8").tobytes())


def read_checkpoint(path) -> TriangleSoup:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise MalformedHeader(f"{path}: bad checkpoint magic")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise MalformedHeader(f"{path}: unsupported checkpoint version {version}")
    n = struct.unpack("<Q", raw[8:16])[0]
    if n == 0:
        return TriangleSoup.empty()
    payload = len(raw) - 16 - 8 * n
    if payload < 0 or payload % (4 * n):
        raise MalformedHeader(f"{path}: truncated checkpoint payload")
    per_tri = payload // (4 * n)
    # float32 count per triangle: 47 fixed + 10 per offset.
    if per_tri < 47 or (per_tri - 47) % 10:
        raise MalformedHeader(f"{path}: inconsistent per-triangle layout ({per_tri})")
    k = (per_tri - 47) // 10
    if k < 1:
        raise MalformedHeader(f"{path}: appearance offset count must be >= 1")

    off = 16

    def take(shape):
        nonlocal off
        cnt = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=cnt, offset=off)
        off += 4 * cnt
        return arr.reshape(shape).astype(np.float64)

    vertices = take((n, 3, 3))
    opacity_logit = take((n,))
    sharpness_log = take((n,))
    smoothness_log = take((n,))
    features = take((n, FEATURE_DIM))
    offset_scale = take((n, 3))
    offsets = take((n, k, 3))
    color_logit = take((n, k, 3))
    gauss_opacity = take((n, k))
    scale_log = take((n, k, 2))
    rotation = take((n, k))
    ids = np.frombuffer(raw, dtype="<u8", count=n, offset=off).astype(np.int64)
    return TriangleSoup(
        vertices=vertices,
        opacity_logit=opacity_logit,
        sharpness_log=sharpness_log,
        smoothness_log=smoothness_log,
        ids=ids,
        parent_ids=np.full(n, -1, dtype=np.int64),
        appearance=AppearanceModel(
            features=features, offset_scale=offset_scale, offsets=offsets,
            color_logit=color_logit, opacity_logit=gauss_opacity,
            scale_log=scale_log, rotation=rotation,
        ),
    )
