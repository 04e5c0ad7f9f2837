"""Landmark-based morph generation.

Covers frontal filtering, similarity-based pairing of key and accomplice
images, Delaunay warping/blending, and a simulated print-scan
re-digitization operator.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import cv2
import numpy as np
from scipy import ndimage
from scipy.spatial import Delaunay, QhullError

logger = logging.getLogger(__name__)

MAX_ASYMMETRY = 0.05
MIN_EYE_DISTANCE = 90.0


class LandmarkError(ValueError):
    """Landmarks are unusable (degenerate, out of bounds, mismatched)."""


class InsufficientPoolError(RuntimeError):
    """The accomplice pool ran out before every key was served."""


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray  # (n, 2) float, x/y in pixels
    eye_left: tuple[float, float]
    eye_right: tuple[float, float]
    nose_top: tuple[float, float]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)
        for name in ("eye_left", "eye_right", "nose_top"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    def __len__(self):
        return len(self.points)

    def validate(self, image_size: tuple[int, int] | None = None) -> None:
        if self.eye_left[0] >= self.eye_right[0]:
            raise LandmarkError("eye_left must lie left of eye_right")
        if image_size is not None:
            w, h = image_size
            allpts = np.vstack([self.points, [self.eye_left, self.eye_right, self.nose_top]])
            if np.any(allpts < 0) or np.any(allpts[:, 0] > w) or np.any(allpts[:, 1] > h):
                raise LandmarkError(f"landmarks fall outside the {w}x{h} image")

    def to_json(self, image_id: str) -> dict:
        return {
            "image_id": image_id,
            "points": self.points.tolist(),
            "eye_left": list(self.eye_left),
            "eye_right": list(self.eye_right),
            "nose_top": list(self.nose_top),
        }

    @classmethod
    def from_json(cls, record: Mapping) -> LandmarkSet:
        return cls(
            points=np.asarray(record["points"], dtype=np.float64),
            eye_left=record["eye_left"],
            eye_right=record["eye_right"],
            nose_top=record["nose_top"],
        )


def read_landmark_cache(path: str | Path) -> dict[str, LandmarkSet]:
    """Read a JSON-lines landmark cache into ``{image_id: LandmarkSet}``."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["image_id"]] = LandmarkSet.from_json(rec)
    return out


def write_landmark_cache(path: str | Path, landmarks: Mapping[str, LandmarkSet]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(json.dumps(landmarks[image_id].to_json(image_id)) + "\n" for image_id in sorted(landmarks))


# ---------------------------------------------------------------- frontality


@dataclass(frozen=True)
class FrontalityReport:
    d_left: float
    d_right: float
    asymmetry_ratio: float
    eye_distance: float
    passed: bool


def frontality_from_distances(
    d_left: float,
    d_right: float,
    eye_distance: float,
    max_asymmetry: float = MAX_ASYMMETRY,
    min_eye_distance: float = MIN_EYE_DISTANCE,
    denominator: str = "min",
) -> FrontalityReport:
    """Apply the frontal-pose rule to precomputed eye-nose distances.

    ``denominator`` picks which distance the asymmetry is relative to:
    ``"min"`` (strict, default) or ``"max"`` (lenient).
    """
    if d_left <= 0 or d_right <= 0:
        raise LandmarkError("eye-to-nose distance is zero; landmark detection unusable")
    if denominator == "min":
        ref = min(d_left, d_right)
    elif denominator == "max":
        ref = max(d_left, d_right)
    else:
        raise ValueError(f"unknown denominator {denominator!r}")
    ratio = abs(d_left - d_right) / ref
    passed = ratio <= max_asymmetry and eye_distance >= min_eye_distance
    return FrontalityReport(float(d_left), float(d_right), float(ratio), float(eye_distance), bool(passed))


def assess_frontality(landmarks: LandmarkSet, **kwargs) -> FrontalityReport:
    """Frontality check from eye centres and the upper nose point."""
    el, er, nose = (np.asarray(p) for p in (landmarks.eye_left, landmarks.eye_right, landmarks.nose_top))
    d_left = float(np.linalg.norm(el - nose))
    d_right = float(np.linalg.norm(er - nose))
    eye_distance = float(np.linalg.norm(el - er))
    return frontality_from_distances(d_left, d_right, eye_distance, **kwargs)


# ------------------------------------------------------------------- pairing


class EmbeddingProvider(Protocol):
    dimensionality: int

    def embed(self, image: np.ndarray) -> np.ndarray: ...


class ThumbnailEmbedding:
    """Deterministic stand-in embedding: a normalised grayscale thumbnail.

    Real experiments plug in a face-recognition network; this provider only
    exists so pipelines run without external weights.
    """

    def __init__(self, size: int = 16):
        self.size = size
        self.dimensionality = size * size

    def embed(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image)
        if img.ndim == 3:
            img = cv2.cvtColor(img.astype(np.uint8), cv2.COLOR_RGB2GRAY)
        thumb = cv2.resize(img.astype(np.float32), (self.size, self.size), interpolation=cv2.INTER_AREA)
        v = thumb.ravel().astype(np.float64)
        v -= v.mean()
        n = np.linalg.norm(v)
        return v / n if n > 0 else v


def select_pairs(
    key_ids: Sequence[str],
    pool: Sequence[str],
    provider: EmbeddingProvider,
    pairs_per_key: int,
    identities: Mapping[str, str],
    load_image: Callable[[str], np.ndarray],
) -> list[tuple[str, str]]:
    """Pair each key image with its most similar accomplices.

    Keys are served in ascending id order. For every key the closest pool
    images (Euclidean embedding distance, ties by image id) are taken,
    skipping images of the key's own identity, identities already chosen for
    that key, and non-key images already given to an earlier key.
    """
    if pairs_per_key < 0:
        raise ValueError("pairs_per_key must be >= 0")
    if pairs_per_key == 0:
        return []
    keys = sorted(set(key_ids))
    key_set = set(keys)
    cache: dict[str, np.ndarray] = {}

    def emb(image_id):
        if image_id not in cache:
            cache[image_id] = np.asarray(provider.embed(load_image(image_id)), dtype=np.float64)
        return cache[image_id]

    used: set[str] = set()
    pairs = []
    for key in keys:
        key_identity = identities[key]
        cands = []
        for cid in pool:
            if cid == key or identities[cid] == key_identity:
                continue
            cands.append((float(np.linalg.norm(emb(key) - emb(cid))), cid))
        cands.sort()
        chosen_ids: set[str] = set()
        picked = []
        for _, cid in cands:
            if cid in used or identities[cid] in chosen_ids:
                continue
            picked.append(cid)
            chosen_ids.add(identities[cid])
            if len(picked) == pairs_per_key:
                break
        if len(picked) < pairs_per_key:
            raise InsufficientPoolError(
                f"key {key!r} got {len(picked)} of {pairs_per_key} accomplices; pool exhausted"
            )
        for cid in picked:
            if cid not in key_set:
                used.add(cid)
            pairs.append((key, cid))
    return pairs


# ---------------------------------------------------------- geometry / warp


def average_landmarks(a: LandmarkSet, b: LandmarkSet, alpha: float = 0.5) -> LandmarkSet:
    if len(a) != len(b):
        raise LandmarkError(f"landmark count mismatch: {len(a)} vs {len(b)}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")

    def mix(p, q):
        return (1.0 - alpha) * np.asarray(p, dtype=np.float64) + alpha * np.asarray(q, dtype=np.float64)

    return LandmarkSet(
        points=mix(a.points, b.points),
        eye_left=mix(a.eye_left, b.eye_left),
        eye_right=mix(a.eye_right, b.eye_right),
        nose_top=mix(a.nose_top, b.nose_top),
    )


def border_anchors(image_size: tuple[int, int], midpoints: bool = True) -> np.ndarray:
    """Image corners, optionally with the four edge midpoints (8 points)."""
    w, h = image_size
    pts = [(0, 0), (w, 0), (w, h), (0, h)]
    if midpoints:
        pts += [(w / 2, 0), (w, h / 2), (w / 2, h), (0, h / 2)]
    return np.asarray(pts, dtype=np.float64)


def with_anchors(points: np.ndarray, image_size: tuple[int, int], midpoints: bool = True) -> np.ndarray:
    return np.vstack([np.asarray(points, dtype=np.float64).reshape(-1, 2), border_anchors(image_size, midpoints)])


def triangle_areas(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)[np.asarray(triangles)]
    return 0.5 * np.abs(
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
    )


def triangulate(
    landmarks: LandmarkSet | np.ndarray,
    image_size: tuple[int, int],
    midpoints: bool = True,
) -> np.ndarray:
    """Delaunay triangles over landmarks plus image-border anchors.

    Returned index triples refer to ``with_anchors(points, image_size)``:
    landmark indices first, then the anchors.
    """
    pts = landmarks.points if isinstance(landmarks, LandmarkSet) else np.asarray(landmarks, dtype=np.float64)
    pts = pts.reshape(-1, 2)
    w, h = image_size
    if np.any(pts < 0) or np.any(pts[:, 0] > w) or np.any(pts[:, 1] > h):
        raise LandmarkError("landmarks must lie inside the image rectangle")
    allpts = with_anchors(pts, image_size, midpoints)

    # Duplicates (including landmarks on an anchor) collapse onto the first occurrence.
    _, first, inverse = np.unique(allpts, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    if len(first) < len(allpts):
        logger.warning("triangulate: %d duplicate points removed", len(allpts) - len(first))
    order = np.sort(first)
    uniq = allpts[order]
    try:
        tri = Delaunay(uniq)
    except QhullError as exc:
        raise LandmarkError("points are colinear; cannot triangulate") from exc
    simplices = order[tri.simplices]
    simplices = simplices[triangle_areas(allpts, simplices) > 1e-12]
    # Sort for determinism independent of qhull's output order.
    simplices = np.sort(simplices, axis=1)
    simplices = simplices[np.lexsort(simplices.T[::-1])]
    return simplices.astype(np.int64)


def _affine(src_tri: np.ndarray, dst_tri: np.ndarray) -> np.ndarray:
    """2x3 affine matrix taking dst_tri vertices to src_tri vertices."""
    dst_h = np.hstack([dst_tri, np.ones((3, 1))])
    return np.linalg.solve(dst_h, src_tri).T


def _cover(points: np.ndarray, triangles: np.ndarray, shape: tuple[int, int]):
    """Assign every pixel centre to one triangle of ``points`` (or -1)."""
    h, w = shape
    owner = np.full((h, w), -1, dtype=np.int64)
    for t, (i, j, k) in enumerate(triangles):
        a, b, c = points[i], points[j], points[k]
        x0 = max(int(math.floor(min(a[0], b[0], c[0]))), 0)
        x1 = min(int(math.ceil(max(a[0], b[0], c[0]))), w - 1)
        y0 = max(int(math.floor(min(a[1], b[1], c[1]))), 0)
        y1 = min(int(math.ceil(max(a[1], b[1], c[1]))), h - 1)
        if x1 < x0 or y1 < y0:
            continue
        ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
        if abs(det) < 1e-12:
            continue
        l1 = ((b[1] - c[1]) * (xs - c[0]) + (c[0] - b[0]) * (ys - c[1])) / det
        l2 = ((c[1] - a[1]) * (xs - c[0]) + (a[0] - c[0]) * (ys - c[1])) / det
        l3 = 1.0 - l1 - l2
        eps = -1e-9
        inside = (l1 >= eps) & (l2 >= eps) & (l3 >= eps)
        region = owner[y0 : y1 + 1, x0 : x1 + 1]
        region[inside & (region < 0)] = t
    return owner


def warp_blend(
    img_a: np.ndarray,
    img_b: np.ndarray,
    lms_a: LandmarkSet,
    lms_b: LandmarkSet,
    alpha: float = 0.5,
    triangles: np.ndarray | None = None,
) -> np.ndarray:
    """Warp both images onto the averaged geometry and alpha-blend them."""
    img_a = np.asarray(img_a)
    img_b = np.asarray(img_b)
    if img_a.shape != img_b.shape:
        raise ValueError(f"image shapes differ: {img_a.shape} vs {img_b.shape}")
    h, w = img_a.shape[:2]
    size = (w, h)
    avg = average_landmarks(lms_a, lms_b, alpha)
    dst = with_anchors(avg.points, size)
    src_a = with_anchors(lms_a.points, size)
    src_b = with_anchors(lms_b.points, size)
    if triangles is None:
        triangles = triangulate(avg, size)

    usable = []
    for tri in triangles:
        if min(triangle_areas(g, tri[None])[0] for g in (dst, src_a, src_b)) <= 1e-9:
            logger.warning("warp_blend: degenerate triangle %s skipped", tuple(int(v) for v in tri))
            continue
        usable.append(tri)
    usable = np.asarray(usable, dtype=np.int64).reshape(-1, 3)

    owner = _cover(dst, usable, (h, w))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    maps = []
    for src in (src_a, src_b):
        mx = np.zeros((h, w), np.float64)
        my = np.zeros((h, w), np.float64)
        for t, tri in enumerate(usable):
            m = owner == t
            if not m.any():
                continue
            A = _affine(src[tri], dst[tri])
            mx[m] = A[0, 0] * xs[m] + A[0, 1] * ys[m] + A[0, 2]
            my[m] = A[1, 0] * xs[m] + A[1, 1] * ys[m] + A[1, 2]
        maps.append((mx.astype(np.float32), my.astype(np.float32)))

    wa = cv2.remap(img_a, *maps[0], cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)
    wb = cv2.remap(img_b, *maps[1], cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)
    out = (1.0 - alpha) * wa.astype(np.float64) + alpha * wb.astype(np.float64)

    holes = owner < 0
    if holes.any():
        logger.warning("warp_blend: filling %d uncovered pixels from neighbours", int(holes.sum()))
        if holes.all():
            raise LandmarkError("no usable triangles")
        _, (iy, ix) = ndimage.distance_transform_edt(holes, return_indices=True)
        out = out[iy, ix]

    if np.issubdtype(img_a.dtype, np.integer):
        info = np.iinfo(img_a.dtype)
        return np.clip(np.rint(out), info.min, info.max).astype(img_a.dtype)
    return np.clip(out, 0.0, 1.0).astype(img_a.dtype)


@dataclass
class MorphJob:
    key_image_id: str
    accomplice_image_id: str
    alpha: float = 0.5
    triangulation: np.ndarray | None = None

    @property
    def morph_id(self) -> str:
        return f"{self.key_image_id}+{self.accomplice_image_id}"

    def run(self, img_key, img_acc, lms_key: LandmarkSet, lms_acc: LandmarkSet) -> np.ndarray:
        if self.triangulation is None:
            h, w = np.asarray(img_key).shape[:2]
            self.triangulation = triangulate(average_landmarks(lms_key, lms_acc, self.alpha), (w, h))
        return warp_blend(img_key, img_acc, lms_key, lms_acc, self.alpha, self.triangulation)


# ---------------------------------------------------------- re-digitization


@dataclass
class RedigitizationProfile:
    """Ordered chain of simulated print/scan degradations plus a seed.

    Each step is ``{"name": ..., **params}``. Known steps: ``gaussian_blur``
    (sigma), ``color_shift`` (gain, bias: per-channel lists), ``gamma``
    (gamma), ``grain_noise`` (sigma), ``resample`` (scale),
    ``jpeg`` (quality).
    """

    steps: list[dict] = field(default_factory=list)
    seed: int = 0

    @classmethod
    def default(cls, seed: int = 0) -> RedigitizationProfile:
        return cls(
            steps=[
                {"name": "gaussian_blur", "sigma": 0.8},
                {"name": "color_shift", "gain": [1.04, 1.0, 0.95], "bias": [4.0, 1.0, -3.0]},
                {"name": "gamma", "gamma": 1.1},
                {"name": "grain_noise", "sigma": 3.0},
                {"name": "resample", "scale": 0.6},
                {"name": "jpeg", "quality": 85},
            ],
            seed=seed,
        )

    def to_json(self) -> dict:
        return {"steps": [dict(s) for s in self.steps], "seed": int(self.seed)}

    @classmethod
    def from_json(cls, data: Mapping) -> RedigitizationProfile:
        return cls(steps=[dict(s) for s in data.get("steps", [])], seed=int(data.get("seed", 0)))


def _to_uint8(x):
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _blur(img, rng, sigma):
    return cv2.GaussianBlur(img, (0, 0), sigmaX=float(sigma), borderType=cv2.BORDER_REFLECT_101)


def _color_shift(img, rng, gain=(1.0, 1.0, 1.0), bias=(0.0, 0.0, 0.0)):
    x = img.astype(np.float64)
    if x.ndim == 2:
        return _to_uint8(x * float(np.mean(gain)) + float(np.mean(bias)))
    return _to_uint8(x * np.asarray(gain, np.float64) + np.asarray(bias, np.float64))


def _gamma(img, rng, gamma):
    return _to_uint8(255.0 * (img.astype(np.float64) / 255.0) ** float(gamma))


def _grain(img, rng, sigma):
    return _to_uint8(img.astype(np.float64) + rng.normal(0.0, float(sigma), size=img.shape))


def _resample(img, rng, scale):
    h, w = img.shape[:2]
    small = cv2.resize(img, (max(1, round(w * scale)), max(1, round(h * scale))), interpolation=cv2.INTER_AREA)
    return cv2.resize(small, (w, h), interpolation=cv2.INTER_LINEAR)


def _jpeg(img, rng, quality):
    ok, buf = cv2.imencode(".jpg", img, [cv2.IMWRITE_JPEG_QUALITY, int(quality)])
    if not ok:
        raise RuntimeError("JPEG encoding failed")
    return cv2.imdecode(buf, cv2.IMREAD_UNCHANGED)


REDIGITIZATION_STEPS: dict[str, Callable] = {
    "gaussian_blur": _blur,
    "color_shift": _color_shift,
    "gamma": _gamma,
    "grain_noise": _grain,
    "resample": _resample,
    "jpeg": _jpeg,
}


def simulate_redigitization(img: np.ndarray, profile: RedigitizationProfile) -> np.ndarray:
    """Simulated print-and-scan. Deterministic for a given profile and seed."""
    out = np.asarray(img)
    if not profile.steps:
        return out.copy()
    if out.dtype != np.uint8:
        raise TypeError("simulate_redigitization expects uint8 images")
    rng = np.random.default_rng(profile.seed)
    for step in profile.steps:
        params = {k: v for k, v in step.items() if k != "name"}
        try:
            fn = REDIGITIZATION_STEPS[step["name"]]
        except KeyError:
            raise ValueError(f"unknown re-digitization step {step.get('name')!r}") from None
        out = fn(out, rng, **params)
    return out


def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG/JPEG as RGB uint8."""
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(path)
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def save_image(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), img):
        raise OSError(f"could not write {path}")


def frontal_images(
    landmarks: Mapping[str, LandmarkSet], **kwargs
) -> tuple[list[str], dict[str, FrontalityReport]]:
    """Run the frontality filter over a landmark cache; rejected detections fail."""
    reports = {}
    passed = []
    for image_id in sorted(landmarks):
        try:
            rep = assess_frontality(landmarks[image_id], **kwargs)
        except LandmarkError as exc:
            logger.warning("frontality: %s rejected (%s)", image_id, exc)
            continue
        reports[image_id] = rep
        if rep.passed:
            passed.append(image_id)
    return passed, reports

