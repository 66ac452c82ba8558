"""Shared synthetic-face fixtures.

Faces are procedural: a smooth low-contrast background plus one Gaussian
blob per landmark, so the mapping from pixels to coordinates is learnable
and every landmark has a visible marker for geometric checks.  Landmark
layout is a 5-point template (two eyes, nose, two mouth corners) jittered
per sample; the mirror permutation swaps eyes and mouth corners.

The terminal-summary hook at the bottom prints one pass/fail line per
release criterion whenever tests from test_acceptance.py were collected.
"""
import math
import os
import re

import numpy as np
import pytest

from sdnface.data import DatasetManifest, ManifestEntry, write_manifest
from sdnface.model import CoordFrame, LandmarkSet

# unit-square landmark template: left eye, right eye, nose, mouth corners
TEMPLATE = np.array([
    [0.30, 0.35],
    [0.70, 0.35],
    [0.50, 0.55],
    [0.35, 0.75],
    [0.65, 0.75],
])
MIRROR_PERM_5 = (1, 0, 2, 4, 3)
LEFT_EYE, RIGHT_EYE = 0, 1


def jittered_points(rng, max_shift=0.06, max_angle=10.0, scale_lo=0.9, scale_hi=1.1):
    """Template points under a small random rotation/scale/shift, unit frame."""
    ang = math.radians(rng.uniform(-max_angle, max_angle))
    c, s = math.cos(ang), math.sin(ang)
    rot = np.array([[c, -s], [s, c]])
    scale = rng.uniform(scale_lo, scale_hi)
    shift = rng.uniform(-max_shift, max_shift, 2)
    return (TEMPLATE - 0.5) @ rot.T * scale + 0.5 + shift


def render_face(points_px, side, rng, blob_sigma=2.0):
    """Background texture plus one bright blob per landmark, in [0, 1]."""
    yy, xx = np.mgrid[0:side, 0:side]
    img = 0.15 + 0.1 * np.sin(xx / 9.0 + rng.uniform(0, 6)) \
        * np.cos(yy / 11.0 + rng.uniform(0, 6))
    for (x, y), amp in zip(points_px, np.linspace(1.0, 0.6, len(points_px))):
        img = img + amp * np.exp(-((xx - x) ** 2 + (yy - y) ** 2)
                                 / (2.0 * blob_sigma ** 2))
    return (np.clip(img, 0.0, 1.6) / 1.6).astype(np.float32)


def build_corpus(root, n_faces, side=160, box_side=64, seed=99,
                 spread=0.28, jitter=0.05):
    """Write n_faces .npy images + a manifest under ``root``.

    Landmarks sit within ``spread`` of the box center (fraction of the box
    side), so with the default spread every stage-1 rotation keeps them
    inside the expanded box.  Larger spreads push points toward the box
    corners, which makes extreme rotations violate containment.
    """
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_faces):
        cx = rng.uniform(side * 0.40, side * 0.60)
        cy = rng.uniform(side * 0.40, side * 0.60)
        unit = jittered_points(rng, max_shift=jitter)
        pts = (unit - 0.5) * (2 * spread * box_side) + (cx, cy)
        img = render_face(pts, side, rng)
        name = f"face{i:03d}.npy"
        np.save(os.path.join(root, name), img)
        bbox = (cx - box_side / 2.0, cy - box_side / 2.0,
                float(box_side), float(box_side))
        entries.append(ManifestEntry(
            sample_id=f"face{i:03d}", image_path=name, bbox=bbox,
            landmarks=LandmarkSet(points=pts, frame=CoordFrame.IMAGE)))
    manifest = DatasetManifest(entries=entries, n_landmarks=5,
                               left_eye=LEFT_EYE, right_eye=RIGHT_EYE,
                               mirror_perm=np.array(MIRROR_PERM_5), root=str(root))
    path = os.path.join(root, "train.tsv")
    write_manifest(path, manifest)
    return path, manifest


def build_overfit_corpus(root, n_faces=20, side=64, seed=123):
    """Small fully-visible faces: bbox covers the whole frame."""
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_faces):
        pts = jittered_points(rng) * side
        img = render_face(pts, side, rng)
        name = f"tiny{i:03d}.npy"
        np.save(os.path.join(root, name), img)
        entries.append(ManifestEntry(
            sample_id=f"tiny{i:03d}", image_path=name,
            bbox=(0.0, 0.0, float(side), float(side)),
            landmarks=LandmarkSet(points=pts, frame=CoordFrame.IMAGE)))
    manifest = DatasetManifest(entries=entries, n_landmarks=5,
                               left_eye=LEFT_EYE, right_eye=RIGHT_EYE,
                               mirror_perm=np.array(MIRROR_PERM_5), root=str(root))
    path = os.path.join(root, "train.tsv")
    write_manifest(path, manifest)
    return path, manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def face_corpus(tmp_path_factory):
    """8 faces whose landmarks survive every stage-1 rotation."""
    root = tmp_path_factory.mktemp("faces")
    return build_corpus(str(root), 8)


@pytest.fixture(scope="session")
def overfit_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinyfaces")
    return build_overfit_corpus(str(root))


# --- release-criteria summary ------------------------------------------

_CRITERIA = {}  # base test name -> (number, first docstring line)


def pytest_collection_modifyitems(items):
    for item in items:
        if "test_acceptance" not in str(getattr(item, "fspath", "")):
            continue
        m = re.match(r"test_c(\d+)_", item.name)
        if not m:
            continue
        doc = (getattr(item, "function", None).__doc__ or "").strip()
        label = doc.splitlines()[0] if doc else item.name
        _CRITERIA[item.name.split("[")[0]] = (int(m.group(1)), label)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    outcomes = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = rep.location[2].split("[")[0]
            if name in _CRITERIA:
                outcomes[name] = outcomes.get(name, True) and outcome == "passed"
    if not outcomes:
        return
    terminalreporter.section("release criteria")
    for name, (num, label) in sorted(_CRITERIA.items(), key=lambda kv: kv[1][0]):
        if name not in outcomes:
            continue
        word = "PASS" if outcomes[name] else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d}: {word}  {label}")
