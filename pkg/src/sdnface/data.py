"""Dataset I/O: pts annotations, manifests, and normalized 64x64 gray crops.

Coordinate conventions
----------------------
Continuous image coordinates put integer (x, y) at the center of pixel
[row=y][col=x].  A crop box (x0, y0, w, h) is axis-aligned; output crop
pixel (row i, col j) samples the box at unit coordinates
u = ((j+0.5)/side, (i+0.5)/side).  Sampling is bilinear with edge
replication outside the image, and each crop is scaled to [0, 1] and then
has its own mean subtracted.

Manifest grammar (UTF-8, line oriented)
---------------------------------------
Header lines::

    #n_landmarks=68
    #left_eye=36
    #right_eye=45
    #mirror_perm=0,1,2,...   (optional; involution; identity when absent)

then one record per line::

    sample_id <TAB> image_path <TAB> x,y,w,h <TAB> landmark_source <TAB> tags

``landmark_source`` is either a .pts path or inline coordinates
``inline:x,y;x,y;...``.  ``tags`` is ``-`` or ``key=value`` pairs joined
with ``;``; the keys angle/sx/sy/mirror describe an extra geometric warp
applied about the box center when the crop is rendered.
"""
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateGeometryError,
    ImageLoadError,
    ManifestError,
    PtsParseError,
    SpecValidationError,
)
from .model import CoordFrame, LandmarkSet

__all__ = [
    "CropTransform", "WarpParams", "FaceSample", "ManifestEntry",
    "DatasetManifest", "NormalizedInput", "parse_pts", "write_pts",
    "load_image", "load_gray_crop", "to_crop_frame", "to_image_frame",
    "read_manifest", "write_manifest", "tight_box",
]

GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # ITU-R 601 luminance


@dataclass(frozen=True)
class CropTransform:
    """Affine map between crop-relative unit coordinates and image pixels."""
    box: tuple  # (x0, y0, w, h)
    out_side: int = 64

    def __post_init__(self):
        x0, y0, w, h = self.box
        if not (w > 0 and h > 0):
            raise DegenerateGeometryError(f"crop box must have positive size, got {self.box}")
        object.__setattr__(self, "box", (float(x0), float(y0), float(w), float(h)))

    def unit_to_image(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        x0, y0, w, h = self.box
        return pts * np.array([w, h]) + np.array([x0, y0])

    def image_to_unit(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        x0, y0, w, h = self.box
        return (pts - np.array([x0, y0])) / np.array([w, h])


@dataclass(frozen=True)
class WarpParams:
    """Rotation, anisotropic stretch and mirroring about a box center.

    Points map source -> warped as mirror(stretch(rotate(p))); all three
    stages fix the center, so an axis-aligned box centered there keeps its
    place while its content moves.
    """
    angle_deg: float = 0.0
    sx: float = 1.0
    sy: float = 1.0
    mirrored: bool = False

    def __post_init__(self):
        if not (self.sx > 0 and self.sy > 0):
            raise SpecValidationError(f"stretch factors must be positive, got "
                                      f"sx={self.sx}, sy={self.sy}")

    @property
    def is_identity(self):
        return self.angle_deg == 0.0 and self.sx == 1.0 and self.sy == 1.0 \
            and not self.mirrored

    def _matrix(self):
        t = math.radians(self.angle_deg)
        c, s = math.cos(t), math.sin(t)
        rot = np.array([[c, -s], [s, c]])
        m = np.diag([-self.sx if self.mirrored else self.sx, self.sy])
        return m @ rot

    def apply(self, pts, center):
        pts = np.asarray(pts, dtype=np.float64)
        center = np.asarray(center, dtype=np.float64)
        return (pts - center) @ self._matrix().T + center

    def apply_inverse(self, pts, center):
        pts = np.asarray(pts, dtype=np.float64)
        center = np.asarray(center, dtype=np.float64)
        inv = np.linalg.inv(self._matrix())
        return (pts - center) @ inv.T + center

    def to_tags(self):
        tags = {}
        if self.angle_deg != 0.0:
            tags["angle"] = repr(float(self.angle_deg))
        if self.sx != 1.0 or self.sy != 1.0:
            tags["sx"] = repr(float(self.sx))
            tags["sy"] = repr(float(self.sy))
        if self.mirrored:
            tags["mirror"] = "1"
        return tags

    @classmethod
    def from_tags(cls, tags):
        return cls(
            angle_deg=float(tags.get("angle", 0.0)),
            sx=float(tags.get("sx", 1.0)),
            sy=float(tags.get("sy", 1.0)),
            mirrored=tags.get("mirror", "0") not in ("0", "", "false"),
        )


@dataclass
class FaceSample:
    """One face: image reference, bounding box and image-frame landmarks."""
    image_ref: object  # path or 2-d grayscale array
    bbox: tuple
    landmarks: LandmarkSet = None
    meta: dict = field(default_factory=dict)


@dataclass
class ManifestEntry:
    sample_id: str
    image_path: str
    bbox: tuple
    landmark_path: str = None
    landmarks: LandmarkSet = None  # inline, takes precedence over the path
    tags: dict = field(default_factory=dict)

    def warp(self):
        return WarpParams.from_tags(self.tags)


@dataclass
class DatasetManifest:
    entries: list
    n_landmarks: int
    left_eye: int
    right_eye: int
    mirror_perm: np.ndarray = None
    root: str = ""           # directory paths are resolved against
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if self.n_landmarks < 1:
            raise ManifestError(f"n_landmarks must be >= 1, got {self.n_landmarks}")
        for name, idx in (("left_eye", self.left_eye), ("right_eye", self.right_eye)):
            if not 0 <= idx < self.n_landmarks:
                raise ManifestError(f"{name} index {idx} out of range "
                                    f"[0, {self.n_landmarks})")
        if self.left_eye == self.right_eye:
            raise ManifestError("left_eye and right_eye must differ")
        if self.mirror_perm is None:
            self.mirror_perm = np.arange(self.n_landmarks)
        self.mirror_perm = np.asarray(self.mirror_perm, dtype=np.int64)
        if self.mirror_perm.shape != (self.n_landmarks,):
            raise ManifestError(
                f"mirror_perm has {self.mirror_perm.size} entries, "
                f"expected {self.n_landmarks}")
        if np.any(self.mirror_perm < 0) or np.any(self.mirror_perm >= self.n_landmarks):
            raise ManifestError("mirror_perm indices out of range")
        if not np.array_equal(self.mirror_perm[self.mirror_perm],
                              np.arange(self.n_landmarks)):
            raise ManifestError("mirror_perm is not an involution")

    def resolve_landmarks(self, entry: ManifestEntry) -> LandmarkSet:
        if entry.landmarks is not None:
            lms = entry.landmarks
        elif entry.landmark_path:
            lms = parse_pts(os.path.join(self.root, entry.landmark_path))
        else:
            raise ManifestError(f"entry {entry.sample_id!r} has no landmark source")
        if len(lms) != self.n_landmarks:
            raise ManifestError(
                f"entry {entry.sample_id!r} has {len(lms)} landmarks, "
                f"manifest declares {self.n_landmarks}")
        return lms

    def to_sample(self, entry: ManifestEntry) -> FaceSample:
        return FaceSample(
            image_ref=os.path.join(self.root, entry.image_path),
            bbox=entry.bbox,
            landmarks=self.resolve_landmarks(entry),
            meta={"sample_id": entry.sample_id, "tags": dict(entry.tags)},
        )


@dataclass
class NormalizedInput:
    """Zero-mean [1, side, side] float32 crop plus its geometry."""
    pixels: np.ndarray
    subtracted_mean: float
    crop_transform: CropTransform
    warp: WarpParams = WarpParams()


# --- pts files ---------------------------------------------------------

def parse_pts(path) -> LandmarkSet:
    """Parse the standard 300-W pts grammar (version/n_points header, braces)."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise PtsParseError(f"cannot read {path}: {exc}")
    n_points = None
    points = []
    state = "header"
    for no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if state == "header":
            if line.startswith("version:"):
                continue
            if line.startswith("n_points:"):
                value = line.split(":", 1)[1].strip()
                try:
                    n_points = int(value)
                except ValueError:
                    raise PtsParseError(f"bad n_points value {value!r}", line=no)
                continue
            if line == "{":
                if n_points is None:
                    raise PtsParseError("'{' before n_points header", line=no)
                state = "points"
                continue
            raise PtsParseError(f"unexpected header line {line!r}", line=no)
        if state == "points":
            if line == "}":
                state = "done"
                continue
            parts = line.split()
            if len(parts) != 2:
                raise PtsParseError(f"expected 'x y', got {line!r}", line=no)
            try:
                points.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise PtsParseError(f"non-numeric coordinate in {line!r}", line=no)
            continue
        raise PtsParseError(f"content after closing brace: {line!r}", line=no)
    if state == "header":
        raise PtsParseError(f"{path}: missing '{{' section")
    if state == "points":
        raise PtsParseError(f"{path}: missing closing '}}'")
    if len(points) != n_points:
        raise PtsParseError(
            f"{path}: n_points declares {n_points} but {len(points)} were listed")
    return LandmarkSet(points=np.array(points, dtype=np.float64), frame=CoordFrame.IMAGE)


def write_pts(path, landmarks: LandmarkSet):
    lines = ["version: 1", f"n_points: {len(landmarks)}", "{"]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in landmarks.points]
    lines.append("}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


# --- images and crops --------------------------------------------------

def _to_gray(arr):
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    elif arr.dtype == np.uint16:
        arr = arr.astype(np.float32) / 65535.0
    else:
        arr = arr.astype(np.float32)
    if arr.ndim == 3:
        if arr.shape[2] not in (3, 4):
            raise ImageLoadError(f"unsupported channel count {arr.shape[2]}")
        r, g, b = GRAY_WEIGHTS
        arr = r * arr[:, :, 0] + g * arr[:, :, 1] + b * arr[:, :, 2]
        arr = arr.astype(np.float32)
    elif arr.ndim != 2:
        raise ImageLoadError(f"expected a 2-d or 3-d image, got {arr.ndim}-d")
    return np.ascontiguousarray(arr)


def load_image(ref):
    """Load a grayscale float32 image in [0, 1] from a path or array."""
    if isinstance(ref, np.ndarray):
        return _to_gray(ref)
    path = os.fspath(ref)
    if path.endswith(".npy"):
        try:
            return _to_gray(np.load(path))
        except (OSError, ValueError) as exc:
            raise ImageLoadError(f"cannot read {path}: {exc}")
    try:
        from PIL import Image
        with Image.open(path) as im:
            return _to_gray(np.asarray(im))
    except (OSError, ValueError) as exc:
        raise ImageLoadError(f"cannot read {path}: {exc}")


def load_gray_crop(sample: FaceSample, box, out_side=64,
                   warp: WarpParams = None) -> NormalizedInput:
    """Render the (optionally warped) box as a zero-mean grayscale crop.

    The warp rotates/stretches/mirrors image content about the box center;
    pixels are pulled in a single bilinear pass directly from the source,
    with edge replication outside the frame.
    """
    gray = load_image(sample.image_ref)
    h_img, w_img = gray.shape
    x0, y0, w, h = (float(v) for v in box)
    if not (w > 0 and h > 0):
        raise DegenerateGeometryError(f"crop box must have positive size, got {box}")
    if x0 >= w_img - 0.5 or y0 >= h_img - 0.5 or x0 + w <= -0.5 or y0 + h <= -0.5:
        raise DegenerateGeometryError(
            f"crop box {box} does not intersect the {w_img}x{h_img} image")
    warp = warp or WarpParams()
    ct = CropTransform(box=(x0, y0, w, h), out_side=out_side)
    units = (np.arange(out_side, dtype=np.float64) + 0.5) / out_side
    xs = x0 + units * w
    ys = y0 + units * h
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    if not warp.is_identity:
        center = (x0 + w / 2.0, y0 + h / 2.0)
        pts = warp.apply_inverse(pts, center)
    coords = np.stack([pts[:, 1], pts[:, 0]])  # row, col order
    crop = ndimage.map_coordinates(gray.astype(np.float64), coords, order=1,
                                   mode="nearest").reshape(out_side, out_side)
    crop = crop.astype(np.float32)
    mean = float(crop.mean(dtype=np.float64))
    crop -= np.float32(mean)
    return NormalizedInput(pixels=crop[None], subtracted_mean=mean,
                           crop_transform=ct, warp=warp)


def to_crop_frame(landmarks: LandmarkSet, ct: CropTransform) -> LandmarkSet:
    """Image-pixel landmarks -> crop-relative unit frame through ct^-1."""
    if landmarks.frame is not CoordFrame.IMAGE:
        raise SpecValidationError("to_crop_frame expects image-frame landmarks")
    return LandmarkSet(points=ct.image_to_unit(landmarks.points),
                       frame=CoordFrame.CROP_UNIT)


def to_image_frame(landmarks: LandmarkSet, ct: CropTransform) -> LandmarkSet:
    if landmarks.frame is not CoordFrame.CROP_UNIT:
        raise SpecValidationError("to_image_frame expects crop-unit landmarks")
    return LandmarkSet(points=ct.unit_to_image(landmarks.points),
                       frame=CoordFrame.IMAGE)


def tight_box(landmarks: LandmarkSet, margin=0.05):
    """Landmark bounding box grown by ``margin`` of its size on every side.

    Fallback for datasets that ship no detector boxes.
    """
    pts = landmarks.points
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise DegenerateGeometryError("landmarks are collinear; no usable box")
    return (x0 - margin * w, y0 - margin * h, w * (1 + 2 * margin), h * (1 + 2 * margin))


# --- manifests ---------------------------------------------------------

def _format_floats(values):
    return ",".join(repr(float(v)) for v in values)


def _encode_landmark_source(entry: ManifestEntry):
    if entry.landmarks is not None:
        pairs = ";".join(f"{float(x)!r},{float(y)!r}"
                         for x, y in entry.landmarks.points)
        return f"inline:{pairs}"
    if entry.landmark_path:
        return entry.landmark_path
    raise ManifestError(f"entry {entry.sample_id!r} has no landmark source")


def _decode_landmark_source(text, sample_id):
    if text.startswith("inline:"):
        body = text[len("inline:"):]
        try:
            pts = [tuple(float(c) for c in pair.split(",")) for pair in body.split(";") if pair]
        except ValueError:
            raise ManifestError(f"entry {sample_id!r}: bad inline landmarks")
        if not pts or any(len(p) != 2 for p in pts):
            raise ManifestError(f"entry {sample_id!r}: bad inline landmarks")
        return None, LandmarkSet(points=np.array(pts), frame=CoordFrame.IMAGE)
    return text, None


def _encode_tags(tags):
    if not tags:
        return "-"
    return ";".join(f"{k}={v}" for k, v in tags.items())


def _decode_tags(text, sample_id):
    if text == "-" or text == "":
        return {}
    tags = {}
    for item in text.split(";"):
        if "=" not in item:
            raise ManifestError(f"entry {sample_id!r}: bad tag {item!r}")
        k, v = item.split("=", 1)
        tags[k] = v
    return tags


def write_manifest(path, manifest: DatasetManifest):
    """Whole-file atomic write (temp file + rename)."""
    lines = [
        f"#n_landmarks={manifest.n_landmarks}",
        f"#left_eye={manifest.left_eye}",
        f"#right_eye={manifest.right_eye}",
        "#mirror_perm=" + ",".join(str(i) for i in manifest.mirror_perm),
    ]
    for e in manifest.entries:
        lines.append("\t".join([
            e.sample_id,
            e.image_path,
            _format_floats(e.bbox),
            _encode_landmark_source(e),
            _encode_tags(e.tags),
        ]))
    text = "\n".join(lines) + "\n"
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".manifest-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_manifest(path, lenient=False, check_files=True) -> DatasetManifest:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise ManifestError(f"cannot read {path}: {exc}")
    root = os.path.dirname(os.path.abspath(path))
    headers = {}
    entries = []
    warnings = []
    seen_ids = set()

    def problem(msg):
        if lenient:
            warnings.append(msg)
        else:
            raise ManifestError(msg)

    for no, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        if raw.startswith("#"):
            if "=" in raw:
                k, v = raw[1:].split("=", 1)
                headers[k.strip()] = v.strip()
            continue
        fields = raw.split("\t")
        if len(fields) != 5:
            raise ManifestError(f"{path}:{no}: expected 5 tab-separated fields, "
                                f"got {len(fields)}")
        sample_id, image_path, bbox_text, lm_text, tag_text = fields
        try:
            bbox = tuple(float(v) for v in bbox_text.split(","))
        except ValueError:
            raise ManifestError(f"{path}:{no}: bad bbox {bbox_text!r}")
        if len(bbox) != 4:
            raise ManifestError(f"{path}:{no}: bbox needs 4 values, got {len(bbox)}")
        lm_path, lms = _decode_landmark_source(lm_text, sample_id)
        if sample_id in seen_ids:
            problem(f"duplicate sample id {sample_id!r}")
        seen_ids.add(sample_id)
        entries.append(ManifestEntry(
            sample_id=sample_id, image_path=image_path, bbox=bbox,
            landmark_path=lm_path, landmarks=lms,
            tags=_decode_tags(tag_text, sample_id)))
    for key in ("n_landmarks", "left_eye", "right_eye"):
        if key not in headers:
            raise ManifestError(f"{path}: missing #{key}= header")
    perm = None
    if "mirror_perm" in headers:
        try:
            perm = np.array([int(v) for v in headers["mirror_perm"].split(",")])
        except ValueError:
            raise ManifestError(f"{path}: bad #mirror_perm header")
    manifest = DatasetManifest(
        entries=entries,
        n_landmarks=int(headers["n_landmarks"]),
        left_eye=int(headers["left_eye"]),
        right_eye=int(headers["right_eye"]),
        mirror_perm=perm,
        root=root,
        warnings=warnings,
    )
    if check_files:
        for e in entries:
            img = os.path.join(root, e.image_path)
            if not os.path.exists(img):
                problem(f"entry {e.sample_id!r}: missing image file {e.image_path}")
            if e.landmark_path:
                lm = os.path.join(root, e.landmark_path)
                if not os.path.exists(lm):
                    problem(f"entry {e.sample_id!r}: missing landmark file "
                            f"{e.landmark_path}")
    return manifest
