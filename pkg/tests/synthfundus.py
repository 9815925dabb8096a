"""Synthetic fundus images for tests: a bright circular field of view on a
dark background, curvilinear dark vessels, and a paired annotation mask.

Real datasets cannot ship with the repository, so tests exercise the full
pipeline on images with the same gross structure: vessels are thin, darker
than their surroundings, and confined to the FOV disk.
"""

import json
import os

import numpy as np
from scipy import ndimage

from retinaforge.data import save_png


def _draw_vessel_tree(rng, h, w, cy, cx, radius):
    gt = np.zeros((h, w), bool)
    yy, xx = np.mgrid[:h, :w]
    n_roots = int(rng.integers(5, 8))
    for root in range(n_roots):
        angle = 2 * np.pi * (root + rng.random() * 0.6) / n_roots
        pos = np.array([cy + 3.0 * np.sin(angle), cx + 3.0 * np.cos(angle)])
        heading = angle
        width = 1.6 + rng.random()
        steps = int(radius * (1.2 + 0.5 * rng.random()))
        for _ in range(steps):
            heading += 0.25 * (rng.random() - 0.5)
            pos += np.array([np.sin(heading), np.cos(heading)])
            if not (0 <= pos[0] < h and 0 <= pos[1] < w):
                break
            if (pos[0] - cy) ** 2 + (pos[1] - cx) ** 2 > radius**2:
                break
            rr = max(0.7, width)
            stamp = (yy - pos[0]) ** 2 + (xx - pos[1]) ** 2 <= rr**2
            gt |= stamp
            width *= 0.997
            if rng.random() < 0.015:  # branch
                heading += (rng.random() - 0.5) * 1.5
    return gt


def make_fundus(rng, height=128, width=144):
    """One synthetic sample: (rgb uint8, gt1 {0,1}, gt2 {0,1}, fov bool)."""
    cy, cx = height / 2, width / 2
    radius = 0.46 * min(height, width)
    yy, xx = np.mgrid[:height, :width]
    fov = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2

    dist2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / radius**2
    base = 165.0 - 55.0 * dist2
    base += ndimage.gaussian_filter(rng.standard_normal((height, width)) * 18.0, 4)
    base += rng.standard_normal((height, width)) * 3.0

    gt1 = _draw_vessel_tree(rng, height, width, cy, cx, radius)
    gt1 &= fov
    soft = ndimage.gaussian_filter(gt1.astype(np.float64), 0.6)
    soft /= max(soft.max(), 1e-9)
    lum = base - 70.0 * soft
    lum = np.clip(lum, 0, 255)
    lum[~fov] = rng.integers(3, 10)

    rgb = np.stack(
        [lum, lum * 0.55 + 10.0 * fov, lum * 0.30], axis=2
    ).clip(0, 255).astype(np.uint8)

    # second rater: same vessels seen slightly differently
    if rng.random() < 0.5:
        gt2 = ndimage.binary_dilation(gt1, iterations=1)
    else:
        gt2 = ndimage.binary_erosion(gt1, iterations=1)
    gt2 = (gt2 | _draw_vessel_tree(rng, height, width, cy, cx, radius * 0.3)) & fov
    return rgb, gt1.astype(np.uint8), gt2.astype(np.uint8), fov


def write_dataset(root, n_images, seed=0, height=128, width=144, split=None,
                  name="synthetic", with_fov=True, with_gt2=True):
    """Write PNGs plus a manifest; returns the manifest path."""
    rng = np.random.default_rng(seed)
    os.makedirs(root, exist_ok=True)
    recs = []
    for i in range(n_images):
        rgb, gt1, gt2, fov = make_fundus(rng, height, width)
        sid = f"s{i:02d}"
        save_png(rgb, os.path.join(root, f"{sid}_img.png"))
        save_png(gt1 * 255, os.path.join(root, f"{sid}_gt1.png"))
        rec = {"id": sid, "image": f"{sid}_img.png", "gt1": f"{sid}_gt1.png"}
        if with_gt2:
            save_png(gt2 * 255, os.path.join(root, f"{sid}_gt2.png"))
            rec["gt2"] = f"{sid}_gt2.png"
        if with_fov:
            save_png(fov.astype(np.uint8) * 255, os.path.join(root, f"{sid}_fov.png"))
            rec["fov"] = f"{sid}_fov.png"
        recs.append(rec)
    if split is None:
        k = max(1, n_images // 2)
        split = {
            "kind": "fixed",
            "train": [r["id"] for r in recs[:k]],
            "test": [r["id"] for r in recs[k:]],
        }
    manifest = {"name": name, "samples": recs, "split": split}
    path = os.path.join(root, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path
