"""Three-stage geometric augmentation: expand, rotate, stretch, mirror.

Each derived sample is purely geometric until load time: it references the
source image, an expanded crop box, warped landmark coordinates, and tags
describing the content warp (angle/sx/sy/mirror about the box center).
dataset-io resamples pixels in one bilinear pass when the crop is loaded,
so augmentation itself never touches pixels and stays cheap.

Stage recipes:
  stage 1: ratios U[0.1, 0.5] of the inter-pupil distance, angles -50..+50
           step 3 (34 angles), mirrored
  stage 2: ratios U[0.1, 0.3], angles -20..+20 step 5, four stretch variants
           plus identity, mirrored
  stage 3: hard examples only (per-image error > 0.02 under the current
           model), angles -10..+10 step 2, mirrored

A derived sample is discarded when any transformed landmark leaves its box;
mirroring preserves containment, so survivors are mirrored unconditionally.
"""
import enum
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as dataio
from .data import DatasetManifest, ManifestEntry, WarpParams
from .errors import (
    DegenerateGeometryError,
    ShapeMismatchError,
    SpecValidationError,
)
from .evaluate import nrmse
from .model import CoordFrame, LandmarkSet, predict_landmarks

__all__ = [
    "AugmentStage", "AugmentStageConfig", "AugmentedSample",
    "inter_pupil_distance", "expand_box", "rotate_sample", "mirror_sample",
    "stretch_sample", "run_stage", "select_hard_examples", "write_provenance",
]

log = logging.getLogger(__name__)

DEFAULT_STRETCHES = ((0.85, 1.0), (1.0, 0.85), (1.15, 1.0), (1.0, 1.15))


class AugmentStage(enum.IntEnum):
    S1 = 1
    S2 = 2
    S3 = 3


@dataclass(frozen=True)
class AugmentStageConfig:
    stage: AugmentStage
    expand_ratio_range: tuple = (0.1, 0.5)
    angle_range_deg: float = 50.0
    angle_step_deg: float = 3.0
    mirror: bool = True
    stretch_factors: tuple = ()  # (sx, sy) pairs tried on top of identity
    hard_threshold: float = None
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage", AugmentStage(self.stage))
        lo, hi = self.expand_ratio_range
        if not (0 <= lo <= hi):
            raise SpecValidationError(f"expand_ratio_range must satisfy "
                                      f"0 <= lo <= hi, got {self.expand_ratio_range}")
        if self.angle_step_deg < 1:
            raise SpecValidationError(f"angle_step_deg must be >= 1, "
                                      f"got {self.angle_step_deg}")
        if self.angle_range_deg < 0:
            raise SpecValidationError("angle_range_deg must be >= 0")
        for sx, sy in self.stretch_factors:
            if not (sx > 0 and sy > 0):
                raise SpecValidationError(f"stretch factors must be positive, "
                                          f"got ({sx}, {sy})")
        if self.hard_threshold is not None and self.hard_threshold < 0:
            raise SpecValidationError("hard_threshold must be >= 0")

    def angles(self):
        """Grid -a, -a+step, ... while <= +a (includes +a only when step divides 2a)."""
        vals = []
        k = 0
        while True:
            v = -self.angle_range_deg + k * self.angle_step_deg
            if v > self.angle_range_deg:
                break
            vals.append(float(v))
            k += 1
        return tuple(vals)

    @classmethod
    def stage1(cls, rng_seed=0):
        return cls(stage=AugmentStage.S1, expand_ratio_range=(0.1, 0.5),
                   angle_range_deg=50, angle_step_deg=3, rng_seed=rng_seed)

    @classmethod
    def stage2(cls, rng_seed=0):
        return cls(stage=AugmentStage.S2, expand_ratio_range=(0.1, 0.3),
                   angle_range_deg=20, angle_step_deg=5,
                   stretch_factors=DEFAULT_STRETCHES, rng_seed=rng_seed)

    @classmethod
    def stage3(cls, rng_seed=0, hard_threshold=0.02):
        # Expansion is not re-randomized for hard examples; only slight
        # rotations around the existing framing.
        return cls(stage=AugmentStage.S3, expand_ratio_range=(0.0, 0.0),
                   angle_range_deg=10, angle_step_deg=2,
                   hard_threshold=hard_threshold, rng_seed=rng_seed)


@dataclass
class AugmentedSample:
    """A derived crop: source reference, box, warped landmarks, provenance."""
    source_id: str
    image_path: str
    box: tuple
    landmarks: LandmarkSet
    warp: WarpParams = WarpParams()
    ratio: float = 0.0

    @property
    def center(self):
        x0, y0, w, h = self.box
        return (x0 + w / 2.0, y0 + h / 2.0)


def inter_pupil_distance(landmarks: LandmarkSet, left_idx, right_idx):
    pts = landmarks.points
    n = pts.shape[0]
    if not (0 <= left_idx < n and 0 <= right_idx < n):
        raise SpecValidationError(f"eye indices ({left_idx}, {right_idx}) out of "
                                  f"range for {n} landmarks")
    d = math.hypot(pts[left_idx, 0] - pts[right_idx, 0],
                   pts[left_idx, 1] - pts[right_idx, 1])
    if d == 0.0:
        raise DegenerateGeometryError("eye points coincide; face is degenerate")
    return d


def expand_box(bbox, ratio, ipd):
    """Grow every side by ratio*ipd, keeping the center fixed."""
    if ratio < 0:
        raise SpecValidationError(f"expansion ratio must be >= 0, got {ratio}")
    x0, y0, w, h = (float(v) for v in bbox)
    g = ratio * ipd
    return (x0 - g, y0 - g, w + 2.0 * g, h + 2.0 * g)


def rotate_sample(sample: AugmentedSample, angle_deg) -> AugmentedSample:
    """Rotate content and landmarks about the box center.

    Rotation must come before stretch and mirror; the warp parametrization
    composes as mirror(stretch(rotate(p))), which is the pipeline order.
    """
    w = sample.warp
    if w.sx != 1.0 or w.sy != 1.0 or w.mirrored:
        raise SpecValidationError("rotation must be applied before stretch/mirror")
    step = WarpParams(angle_deg=angle_deg)
    pts = step.apply(sample.landmarks.points, sample.center)
    return replace(sample,
                   warp=WarpParams(angle_deg=w.angle_deg + angle_deg),
                   landmarks=LandmarkSet(points=pts, frame=sample.landmarks.frame))


def stretch_sample(sample: AugmentedSample, sx, sy) -> AugmentedSample:
    if not (sx > 0 and sy > 0):
        raise SpecValidationError(f"stretch factors must be positive, got ({sx}, {sy})")
    if sample.warp.mirrored:
        raise SpecValidationError("stretch must be applied before mirror")
    cx, cy = sample.center
    pts = sample.landmarks.points.copy()
    pts[:, 0] = (pts[:, 0] - cx) * sx + cx
    pts[:, 1] = (pts[:, 1] - cy) * sy + cy
    new_warp = replace(sample.warp, sx=sample.warp.sx * sx, sy=sample.warp.sy * sy)
    return replace(sample, warp=new_warp,
                   landmarks=LandmarkSet(points=pts, frame=sample.landmarks.frame))


def mirror_sample(sample: AugmentedSample, permutation) -> AugmentedSample:
    """Flip horizontally about the box center and relabel left/right points.

    ``permutation`` is the manifest's involution; output point i is the
    flipped input point permutation[i].
    """
    perm = np.asarray(permutation, dtype=np.int64)
    pts = sample.landmarks.points
    if perm.shape != (pts.shape[0],):
        raise ShapeMismatchError(f"permutation has {perm.size} entries for "
                                 f"{pts.shape[0]} landmarks")
    cx, _ = sample.center
    flipped = pts.copy()
    flipped[:, 0] = 2.0 * cx - flipped[:, 0]
    flipped = flipped[perm]
    new_warp = replace(sample.warp, mirrored=not sample.warp.mirrored)
    return replace(sample, warp=new_warp,
                   landmarks=LandmarkSet(points=flipped, frame=sample.landmarks.frame))


def _contained(points, box):
    x0, y0, w, h = box
    return bool(np.all((points[:, 0] > x0) & (points[:, 0] < x0 + w)
                       & (points[:, 1] > y0) & (points[:, 1] < y0 + h)))


def _derived_entry(sample: AugmentedSample, stage, index) -> ManifestEntry:
    tags = {"src": sample.source_id, "stage": str(int(stage))}
    tags.update(sample.warp.to_tags())
    tags["ratio"] = repr(float(sample.ratio))
    return ManifestEntry(
        sample_id=f"{sample.source_id}.s{int(stage)}.{index:05d}",
        image_path=sample.image_path,
        bbox=sample.box,
        landmarks=sample.landmarks,
        tags=tags,
    )


def run_stage(manifest: DatasetManifest, cfg: AugmentStageConfig,
              weights=None) -> DatasetManifest:
    """Derive an augmented manifest from a source manifest.

    Per source sample: one uniform expansion-ratio draw per grid angle
    (shared by that angle's stretch variants), the containment discard on
    each candidate, then a mirrored copy of every survivor.  Output order is
    the deterministic source order, so a fixed seed gives a byte-identical
    manifest.

    When cfg.hard_threshold is set (stage 3), the source manifest is first
    reduced to hard examples, which requires ``weights``.
    """
    if cfg.hard_threshold is not None:
        if weights is None:
            raise SpecValidationError(
                "hard-example selection needs model weights; pass weights=")
        manifest = select_hard_examples(weights, manifest, cfg.hard_threshold)
    lo, hi = cfg.expand_ratio_range
    variants = ((1.0, 1.0),) + tuple(cfg.stretch_factors)
    out_entries = []
    for src_idx, entry in enumerate(manifest.entries):
        lms = manifest.resolve_landmarks(entry)
        ipd = inter_pupil_distance(lms, manifest.left_eye, manifest.right_eye)
        rng = np.random.default_rng([cfg.rng_seed, int(cfg.stage), src_idx])
        emitted = 0
        for angle in cfg.angles():
            ratio = float(rng.uniform(lo, hi))
            box = expand_box(entry.bbox, ratio, ipd)
            base = AugmentedSample(source_id=entry.sample_id,
                                   image_path=entry.image_path,
                                   box=box, landmarks=lms, ratio=ratio)
            rotated = rotate_sample(base, angle)
            for sx, sy in variants:
                cand = rotated if sx == 1.0 and sy == 1.0 \
                    else stretch_sample(rotated, sx, sy)
                if not _contained(cand.landmarks.points, cand.box):
                    continue
                out_entries.append(_derived_entry(cand, cfg.stage, emitted))
                emitted += 1
                if cfg.mirror:
                    mirrored = mirror_sample(cand, manifest.mirror_perm)
                    out_entries.append(_derived_entry(mirrored, cfg.stage, emitted))
                    emitted += 1
    if manifest.entries and not out_entries:
        log.warning("stage %d discarded every candidate; output manifest is empty",
                    int(cfg.stage))
    return DatasetManifest(
        entries=out_entries,
        n_landmarks=manifest.n_landmarks,
        left_eye=manifest.left_eye,
        right_eye=manifest.right_eye,
        mirror_perm=manifest.mirror_perm.copy(),
        root=manifest.root,
    )


def select_hard_examples(weights, manifest: DatasetManifest,
                         threshold) -> DatasetManifest:
    """Keep samples whose per-image normalized error exceeds the threshold."""
    if manifest.n_landmarks != weights.spec.n_landmarks:
        raise ShapeMismatchError(
            f"manifest has {manifest.n_landmarks} landmarks, "
            f"model expects {weights.spec.n_landmarks}")
    keep = []
    for entry in manifest.entries:
        sample = manifest.to_sample(entry)
        crop = dataio.load_gray_crop(sample, entry.bbox, weights.spec.input_side,
                                     entry.warp())
        pred_unit = predict_landmarks(weights, crop.pixels)
        pred_img = dataio.to_image_frame(pred_unit, crop.crop_transform)
        err = nrmse(pred_img, sample.landmarks, manifest.left_eye,
                    manifest.right_eye)
        if err > threshold:
            keep.append(entry)
    return DatasetManifest(
        entries=keep,
        n_landmarks=manifest.n_landmarks,
        left_eye=manifest.left_eye,
        right_eye=manifest.right_eye,
        mirror_perm=manifest.mirror_perm.copy(),
        root=manifest.root,
    )


def write_provenance(path, manifest: DatasetManifest):
    """One tab-separated line per derived sample, decoded from its tags."""
    lines = ["sample_id\tsource\tangle\tratio\tsx\tsy\tmirrored"]
    for e in manifest.entries:
        warp = e.warp()
        lines.append("\t".join([
            e.sample_id,
            e.tags.get("src", "-"),
            repr(warp.angle_deg),
            e.tags.get("ratio", "0.0"),
            repr(warp.sx),
            repr(warp.sy),
            "1" if warp.mirrored else "0",
        ]))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
