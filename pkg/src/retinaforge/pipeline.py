"""Preprocessing chain, FOV masks, patch sampling, and tiled inference.

The chain runs grayscale -> dataset normalization -> CLAHE -> gamma, each
stage mapping [0,1] into [0,1]. Training patches are 48x48 cuts at random
centers over the zero-padded canvas; inference tiles the image on a
stride-5 grid and averages overlapping predictions back together.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import ConfigError, DegenerateInputError, ShapeError, StateError

PATCH = 48
HALF = PATCH // 2

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def rgb_to_gray(rgb):
    """ITU-R 601 luma of an 8-bit RGB image, scaled to [0,1] float32."""
    r = rgb[..., 0].astype(np.float64)
    g = rgb[..., 1].astype(np.float64)
    b = rgb[..., 2].astype(np.float64)
    luma = (GRAY_WEIGHTS[0] * r + GRAY_WEIGHTS[1] * g + GRAY_WEIGHTS[2] * b) / 255.0
    return np.clip(luma, 0.0, 1.0).astype(np.float32)


def normalize_dataset(images):
    """Z-score with statistics pooled over the whole list, then rescale the
    pooled value range to [0,1]."""
    if not images:
        raise ConfigError("normalize_dataset needs at least one image")
    flat = np.concatenate([img.astype(np.float64).ravel() for img in images])
    std = flat.std()
    if std == 0:
        raise DegenerateInputError("dataset is constant; cannot normalize")
    mean = flat.mean()
    z = [(img.astype(np.float64) - mean) / std for img in images]
    lo = min(zi.min() for zi in z)
    hi = max(zi.max() for zi in z)
    return [((zi - lo) / (hi - lo)).astype(np.float32) for zi in z]


def _tile_edges(size, tiles):
    # np.array_split boundaries: sizes differ by at most one
    base, extra = divmod(size, tiles)
    edges = [0]
    for i in range(tiles):
        edges.append(edges[-1] + base + (1 if i < extra else 0))
    return edges


def _interp_coords(size, centers):
    # per-pixel pair of neighbouring tile-center indices plus blend weight,
    # clamped to the nearest center outside the center grid
    lo = np.zeros(size, np.intp)
    wt = np.zeros(size, np.float64)
    if len(centers) == 1:
        return lo, wt
    pos = np.arange(size, dtype=np.float64)
    for i in range(len(centers) - 1):
        c0, c1 = centers[i], centers[i + 1]
        sel = (pos >= c0) & (pos < c1)
        lo[sel] = i
        wt[sel] = (pos[sel] - c0) / (c1 - c0)
    lo[pos >= centers[-1]] = len(centers) - 2
    wt[pos >= centers[-1]] = 1.0
    return lo, wt


def clahe(img, clip=2.0, tiles=(8, 8), bins=256):
    """Contrast-limited adaptive histogram equalization.

    Per-tile histograms are clipped at ``clip`` times the uniform bin
    height with the excess spread evenly over all bins; tile mappings are
    blended bilinearly between tile centers.
    """
    h, w = img.shape
    th, tw = tiles
    if th < 1 or tw < 1:
        raise ConfigError(f"tile grid must be at least 1x1, got {tiles}")
    if th > h or tw > w:
        raise ConfigError(f"tile grid {tiles} larger than image {img.shape}")
    q = np.minimum((img * bins).astype(np.int64), bins - 1)
    np.maximum(q, 0, out=q)

    row_edges = _tile_edges(h, th)
    col_edges = _tile_edges(w, tw)
    maps = np.empty((th, tw, bins), np.float64)
    for i in range(th):
        for j in range(tw):
            tile = q[row_edges[i]:row_edges[i + 1], col_edges[j]:col_edges[j + 1]]
            n = tile.size
            hist = np.bincount(tile.ravel(), minlength=bins).astype(np.float64)
            limit = clip * n / bins
            excess = np.maximum(hist - limit, 0.0).sum()
            hist = np.minimum(hist, limit) + excess / bins
            maps[i, j] = np.cumsum(hist) / n

    rc = [(row_edges[i] + row_edges[i + 1] - 1) / 2.0 for i in range(th)]
    cc = [(col_edges[j] + col_edges[j + 1] - 1) / 2.0 for j in range(tw)]
    ri, rw = _interp_coords(h, rc)
    ci, cw = _interp_coords(w, cc)

    ri0 = ri[:, None]
    ci0 = ci[None, :]
    ri1 = np.minimum(ri0 + 1, th - 1)
    ci1 = np.minimum(ci0 + 1, tw - 1)
    rw2 = rw[:, None]
    cw2 = cw[None, :]
    out = (
        (1 - rw2) * (1 - cw2) * maps[ri0, ci0, q]
        + (1 - rw2) * cw2 * maps[ri0, ci1, q]
        + rw2 * (1 - cw2) * maps[ri1, ci0, q]
        + rw2 * cw2 * maps[ri1, ci1, q]
    )
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def gamma_correct(img, gamma=1.2):
    """Elementwise power law; endpoints 0 and 1 are fixed."""
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    return np.power(img, gamma, dtype=np.float32)


def generate_fov_mask(rgb, threshold=30 / 255):
    """Field-of-view surrogate: channel-mean threshold, hole fill, largest
    connected component."""
    mean = rgb.astype(np.float64).mean(axis=2) / 255.0
    mask = mean > threshold
    if not mask.any():
        raise DegenerateInputError("FOV mask is empty; threshold too high for this image")
    mask = ndimage.binary_fill_holes(mask)
    labels, count = ndimage.label(mask)
    if count > 1:
        sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, count + 1))
        mask = labels == (1 + int(np.argmax(sizes)))
    return mask


@dataclass
class PipelineParams:
    clahe_clip: float = 2.0
    clahe_tiles: int = 8
    gamma: float = 1.2
    fov_threshold: float = 30 / 255

    def to_dict(self):
        return {
            "clahe_clip": self.clahe_clip,
            "clahe_tiles": self.clahe_tiles,
            "gamma": self.gamma,
            "fov_threshold": self.fov_threshold,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def preprocess_images(rgbs, params=None):
    """Full chain over a dataset: gray -> pooled normalize -> CLAHE -> gamma."""
    params = params or PipelineParams()
    grays = [rgb_to_gray(rgb) for rgb in rgbs]
    grays = normalize_dataset(grays)
    tiles = (params.clahe_tiles, params.clahe_tiles)
    return [
        gamma_correct(clahe(g, clip=params.clahe_clip, tiles=tiles), params.gamma)
        for g in grays
    ]


@dataclass
class PatchSet:
    """48x48 patches plus everything needed to map them back to the image."""

    patches: np.ndarray            # (k, 48, 48, 1) float32
    origins: np.ndarray            # (k, 2) top-left corners in padded coords
    source_shape: tuple            # (h, w) before padding
    pad: tuple                     # (top, left) zero padding applied
    role: str                      # train | val | tile
    labels: np.ndarray = None      # (k, 48, 48, 1) float32 in {0,1}, if cut

    def __len__(self):
        return self.patches.shape[0]


def patch_rng(seed, image_id):
    """Per-image stream keyed by (seed, image id); stable across runs."""
    digest = hashlib.sha256(image_id.encode()).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def _cut(windows, ys, xs):
    return windows[ys, xs][..., None].astype(np.float32)


def sample_training_patches(image, gt, n, seed, image_id="img"):
    """n random-center 48x48 patches from a preprocessed image.

    The canvas is zero-padded by 24px on every side first, so any center
    over the original extent yields a full patch; patches near the border
    deliberately reach outside the field of view. Groundtruth is cut at
    identical coordinates.
    """
    h, w = image.shape
    rng = seed if isinstance(seed, np.random.Generator) else patch_rng(seed, image_id)
    padded = np.pad(image, HALF).astype(np.float32)
    padded_gt = np.pad(gt.astype(np.float32), HALF)
    ys = rng.integers(0, h, size=n)   # top-left in padded coords == center in original
    xs = rng.integers(0, w, size=n)
    win_img = sliding_window_view(padded, (PATCH, PATCH))
    win_gt = sliding_window_view(padded_gt, (PATCH, PATCH))
    return PatchSet(
        patches=_cut(win_img, ys, xs),
        labels=_cut(win_gt, ys, xs),
        origins=np.stack([ys, xs], axis=1),
        source_shape=(h, w),
        pad=(HALF, HALF),
        role="train",
    )


def split_train_val(patchset, val_count=1000):
    """Last ``val_count`` sampled patches become validation; rest train."""
    n = len(patchset)
    if val_count < 1:
        raise ConfigError(f"val_count must be >= 1, got {val_count}")
    if n < val_count:
        raise ConfigError(f"cannot split {n} patches with val_count={val_count}")

    def take(sl, role):
        return PatchSet(
            patches=patchset.patches[sl],
            labels=None if patchset.labels is None else patchset.labels[sl],
            origins=patchset.origins[sl],
            source_shape=patchset.source_shape,
            pad=patchset.pad,
            role=role,
        )

    return take(slice(0, n - val_count), "train"), take(slice(n - val_count, n), "val")


def concat_patchsets(sets):
    if not sets:
        raise ConfigError("no patch sets to concatenate")
    role = sets[0].role
    return PatchSet(
        patches=np.concatenate([s.patches for s in sets]),
        labels=None if sets[0].labels is None else np.concatenate([s.labels for s in sets]),
        origins=np.concatenate([s.origins for s in sets]),
        source_shape=sets[0].source_shape,
        pad=sets[0].pad,
        role=role,
    )


def _padded_extent(size, stride):
    if size <= PATCH:
        return PATCH
    return PATCH + -(-(size - PATCH) // stride) * stride


def extract_overlapping_patches(image, stride=5):
    """Tile the image on a full stride grid, zero-padding bottom/right so
    the grid covers it exactly."""
    h, w = image.shape
    hp = _padded_extent(h, stride)
    wp = _padded_extent(w, stride)
    padded = np.pad(image, ((0, hp - h), (0, wp - w))).astype(np.float32)
    windows = sliding_window_view(padded, (PATCH, PATCH))[::stride, ::stride]
    gh, gw = windows.shape[:2]
    oy, ox = np.meshgrid(
        np.arange(0, gh * stride, stride), np.arange(0, gw * stride, stride), indexing="ij"
    )
    return PatchSet(
        patches=windows.reshape(gh * gw, PATCH, PATCH)[..., None].astype(np.float32),
        origins=np.stack([oy.ravel(), ox.ravel()], axis=1),
        source_shape=(h, w),
        pad=(0, 0),
        role="tile",
    )


def tile_grid_count(h, w, stride=5):
    """Number of tiles the stride grid produces for an h x w image."""
    hp = _padded_extent(h, stride)
    wp = _padded_extent(w, stride)
    return ((hp - PATCH) // stride + 1) * ((wp - PATCH) // stride + 1)


def recompose(predictions, patchset):
    """Average overlapping patch predictions back into an (h, w) map."""
    preds = np.asarray(predictions)
    if preds.ndim == 4:
        preds = preds[..., 0]
    if preds.shape[0] != len(patchset):
        raise ShapeError(
            f"got {preds.shape[0]} predictions for {len(patchset)} tiles"
        )
    h, w = patchset.source_shape
    hp = int(patchset.origins[:, 0].max()) + PATCH
    wp = int(patchset.origins[:, 1].max()) + PATCH
    total = np.zeros((hp, wp), np.float64)
    count = np.zeros((hp, wp), np.float64)
    for (oy, ox), p in zip(patchset.origins, preds):
        total[oy:oy + PATCH, ox:ox + PATCH] += p
        count[oy:oy + PATCH, ox:ox + PATCH] += 1.0
    if (count == 0).any():
        raise StateError("tile grid incomplete: some canvas pixels were never covered")
    out = (total / count)[:h, :w]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def training_patch_totals(n_train_images, per_image=10000, val_per_image=1000):
    """(train, validation) patch totals for a split of the given size."""
    return n_train_images * (per_image - val_per_image), n_train_images * val_per_image
