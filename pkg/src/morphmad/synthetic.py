"""Synthetic data for tests and demos: cartoon faces with known landmarks and
toy images with a planted high-frequency artifact."""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .morphgen import LandmarkSet, save_image, write_landmark_cache


def _arc(cx, cy, rx, ry, a0, a1, n):
    t = np.linspace(a0, a1, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def face_landmarks(params: dict) -> LandmarkSet:
    """68 points in the usual jaw/brows/nose/eyes/mouth order."""
    cx, cy = params["cx"], params["cy"]
    fw, fh = params["face_w"], params["face_h"]
    half_eye = params["eye_dist"] / 2
    ey = params["eye_y"]
    er = params["eye_r"]
    nose_dx = params.get("nose_dx", 0.0)

    jaw = _arc(cx, cy, fw, fh, np.pi * 0.05, np.pi * 0.95, 17)[::-1]
    brow_l = _arc(cx - half_eye, ey - 1.6 * er, 1.4 * er, 0.5 * er, np.pi * 1.1, np.pi * 1.9, 5)
    brow_r = _arc(cx + half_eye, ey - 1.6 * er, 1.4 * er, 0.5 * er, np.pi * 1.1, np.pi * 1.9, 5)
    nose_top_y = ey + 0.25 * er
    nose_tip_y = ey + params["nose_len"]
    bridge = np.stack([np.full(4, cx + nose_dx), np.linspace(nose_top_y, nose_tip_y, 4)], axis=1)
    base = np.stack([cx + nose_dx + np.linspace(-0.8, 0.8, 5) * er, np.full(5, nose_tip_y + 0.3 * er)], axis=1)
    eye_l = _arc(cx - half_eye, ey, er, 0.55 * er, np.pi, 3 * np.pi, 7)[:-1]
    eye_r = _arc(cx + half_eye, ey, er, 0.55 * er, np.pi, 3 * np.pi, 7)[:-1]
    my, mw = params["mouth_y"], params["mouth_w"]
    mouth_out = _arc(cx, my, mw, 0.35 * mw, np.pi, 3 * np.pi, 13)[:-1]
    mouth_in = _arc(cx, my, 0.7 * mw, 0.15 * mw, np.pi, 3 * np.pi, 9)[:-1]
    pts = np.vstack([jaw, brow_l, brow_r, bridge, base, eye_l, eye_r, mouth_out, mouth_in])
    assert len(pts) == 68
    return LandmarkSet(
        points=pts,
        eye_left=(cx - half_eye, ey),
        eye_right=(cx + half_eye, ey),
        nose_top=(cx + nose_dx, nose_top_y),
    )


def identity_params(rng: np.random.Generator, size: int) -> dict:
    s = size / 256
    return {
        "skin": rng.uniform([120, 90, 70], [235, 200, 180]),
        "bg": rng.uniform(40, 220, size=3),
        "iris": rng.uniform(20, 140, size=3),
        "cx": size / 2,
        "cy": size * rng.uniform(0.50, 0.54),
        "face_w": s * rng.uniform(82, 96),
        "face_h": s * rng.uniform(105, 118),
        "eye_dist": s * rng.uniform(96, 108),
        "eye_y": size * rng.uniform(0.40, 0.44),
        "eye_r": s * rng.uniform(12, 15),
        "nose_len": s * rng.uniform(30, 40),
        "mouth_y": size * rng.uniform(0.68, 0.71),
        "mouth_w": s * rng.uniform(20, 28),
        "texture_seed": int(rng.integers(1 << 31)),
    }


def render_face(params: dict, size: int, rng: np.random.Generator, jitter: float = 2.0):
    """Draw one cartoon face; returns (RGB uint8 image, LandmarkSet)."""
    p = dict(params)
    for k in ("cx", "cy", "eye_y", "mouth_y"):
        p[k] = p[k] + rng.uniform(-jitter, jitter)
    lms = face_landmarks(p)

    yy = np.mgrid[0:size, 0:size][0] / size
    img = np.empty((size, size, 3), np.float64)
    img[:] = p["bg"] * (0.85 + 0.3 * yy[..., None])
    sh = 16
    tex = cv2.resize(np.random.default_rng(p["texture_seed"]).normal(0, 12, (sh, sh, 3)), (size, size))
    lw = max(1, size // 128)

    face = np.zeros((size, size), np.uint8)
    cv2.ellipse(face, (int(p["cx"]), int(p["cy"])), (int(p["face_w"]), int(p["face_h"])), 0, 0, 360, 255, -1, cv2.LINE_AA)
    m = face[..., None] / 255.0
    img = img * (1 - m) + (p["skin"] + tex) * m
    img = np.clip(img, 0, 255).astype(np.uint8)

    pts = lms.points
    for eye in (pts[36:42], pts[42:48]):
        c = eye.mean(axis=0)
        cv2.fillPoly(img, [np.round(eye).astype(np.int32)], (245, 245, 245), cv2.LINE_AA)
        cv2.circle(img, (int(round(c[0])), int(round(c[1]))), int(p["eye_r"] * 0.45), tuple(float(v) for v in p["iris"]), -1, cv2.LINE_AA)
    dark = tuple(float(v) for v in p["skin"] * 0.45)
    for seg in (pts[17:22], pts[22:27], pts[27:31], pts[31:36]):
        cv2.polylines(img, [np.round(seg).astype(np.int32)], False, dark, lw + 1, cv2.LINE_AA)
    cv2.fillPoly(img, [np.round(pts[48:60]).astype(np.int32)], (150, 60, 70), cv2.LINE_AA)
    cv2.polylines(img, [np.round(pts[0:17]).astype(np.int32)], False, dark, lw, cv2.LINE_AA)
    return img, lms


def make_face_corpus(
    out_dir,
    n_identities: int = 20,
    images_per_identity: int = 2,
    size: int = 256,
    seed: int = 0,
    non_frontal: int = 0,
) -> dict:
    """Write a synthetic face corpus.

    Layout: ``images/<image_id>.png``, ``landmarks.jsonl`` (landmark cache)
    and ``metadata.json`` (``{image_id: [identity]}``). The first
    ``non_frontal`` images get a sideways nose so the frontality filter
    rejects them.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    landmarks, metadata = {}, {}
    count = 0
    for i in range(n_identities):
        ident = f"id{i:03d}"
        params = identity_params(rng, size)
        for j in range(images_per_identity):
            p = dict(params)
            if count < non_frontal:
                p["nose_dx"] = 0.12 * p["eye_dist"]
            img, lms = render_face(p, size, rng)
            image_id = f"{ident}_{j}"
            save_image(out / "images" / f"{image_id}.png", img)
            landmarks[image_id] = lms
            metadata[image_id] = [ident]
            count += 1
    write_landmark_cache(out / "landmarks.jsonl", landmarks)
    (out / "metadata.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"images_dir": str(out / "images"), "landmarks": str(out / "landmarks.jsonl"), "metadata": str(out / "metadata.json")}


def make_artifact_set(n: int, size: int = 32, seed: int = 0, amplitude: float = 40.0):
    """Smooth random RGB images; the attack half carries a +/- checkerboard.

    Returns (uint8 images of shape (n, size, size, 3), labels with 1 = attack).
    Labels alternate so any prefix is balanced.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    checker = (np.indices((size, size)).sum(axis=0) % 2) * 2.0 - 1.0
    images = []
    for y in labels:
        low = rng.normal(128, 40, size=(4, 4, 3))
        img = cv2.resize(low, (size, size), interpolation=cv2.INTER_CUBIC)
        if y:
            img = img + amplitude * checker[..., None]
        images.append(np.clip(img, 0, 255).astype(np.uint8))
    return np.stack(images), labels
