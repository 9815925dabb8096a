"""Dataset manifests, image codecs, the weight archive, and output maps.

Datasets are described by a JSON manifest (paths relative to the manifest
file) and are expected as 8-bit PNG or binary PPM/PGM; native TIFF/GIF
sources need a one-time conversion. Weights serialize to a small binary
archive with a checksummed float32 payload.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .architectures import ArchitectureSpec, build_model
from .errors import (
    ChecksumError,
    ConfigError,
    DataError,
    SpecMismatchError,
    StorageError,
    TruncatedArchiveError,
)
from .pipeline import generate_fov_mask

MAGIC = b"IMIU1"


# ---------------------------------------------------------------- images

def load_image(path):
    """Decode an 8-bit grayscale or RGB image to a numpy array."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                if im.mode in ("P", "RGBA", "1", "I;16", "I", "F"):
                    raise StorageError(
                        f"{path}: unsupported mode {im.mode}; convert to 8-bit gray or RGB first"
                    )
                im = im.convert("RGB")
            return np.asarray(im)
    except FileNotFoundError:
        raise
    except UnidentifiedImageError as exc:
        raise StorageError(f"{path}: cannot decode image ({exc})") from exc
    except OSError as exc:
        raise StorageError(f"{path}: cannot decode image ({exc})") from exc


def save_png(arr, path):
    """Write an 8-bit array (gray (h,w) or RGB (h,w,3)) as PNG."""
    arr = np.asarray(arr, np.uint8)
    mode = "L" if arr.ndim == 2 else "RGB"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(arr, mode).save(path, format="PNG")


def write_probability_map(prob, path):
    """Probability map in [0,1] as 8-bit grayscale; 0.5 quantizes to 128."""
    q = np.floor(np.asarray(prob, np.float64) * 255.0 + 0.5).astype(np.uint8)
    save_png(q, path)


def write_binary_map(prob, threshold, path):
    """Thresholded map as a {0,255} PNG; p >= threshold counts as vessel."""
    save_png(np.where(np.asarray(prob) >= threshold, 255, 0).astype(np.uint8), path)


def _binarize(arr, path):
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (arr >= 128).astype(np.uint8)


# ---------------------------------------------------------------- manifest

@dataclass
class FundusSample:
    """One dataset record: image, expert annotations, field-of-view mask."""

    id: str
    rgb: np.ndarray          # (h, w, 3) uint8
    gt1: np.ndarray          # (h, w) uint8 in {0,1}
    fov: np.ndarray          # (h, w) bool
    gt2: np.ndarray = None   # optional second expert annotation


@dataclass
class Fold:
    train_ids: list
    test_ids: list


@dataclass
class SplitPlan:
    kind: str          # fixed | leave_one_out | first_k
    folds: list

    def test_union(self):
        seen, out = set(), []
        for fold in self.folds:
            for sid in fold.test_ids:
                if sid not in seen:
                    seen.add(sid)
                    out.append(sid)
        return out


def _build_split(split_cfg, ids):
    kind = split_cfg.get("kind")
    if kind == "fixed":
        train = list(split_cfg["train"])
        test = list(split_cfg["test"])
        if set(train) & set(test):
            raise DataError("split train/test lists overlap")
        if set(train) | set(test) != set(ids):
            raise DataError("split lists do not cover every sample exactly once")
        return SplitPlan("fixed", [Fold(train, test)])
    if kind == "leave_one_out":
        folds = [Fold([s for s in ids if s != sid], [sid]) for sid in ids]
        return SplitPlan("leave_one_out", folds)
    if kind == "first_k":
        k = int(split_cfg["k"])
        if not 0 < k < len(ids):
            raise DataError(f"first_k split needs 0 < k < {len(ids)}, got {k}")
        return SplitPlan("first_k", [Fold(list(ids[:k]), list(ids[k:]))])
    raise DataError(f"unknown split kind {kind!r}")


def load_manifest(path):
    """Parse a manifest without decoding any images."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid manifest JSON ({exc})") from exc
    for key in ("name", "samples", "split"):
        if key not in doc:
            raise DataError(f"{path}: manifest missing {key!r}")
    ids = [s["id"] for s in doc["samples"]]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate sample ids")
    plan = _build_split(doc["split"], ids)
    return doc, plan


def load_dataset(path, fov_threshold=30 / 255):
    """Load every sample named by a manifest.

    Groundtruth planes binarize at 128; the FOV mask is loaded when a path
    is given and generated from the RGB image (at ``fov_threshold``)
    otherwise.

    Returns (name, samples, split plan).
    """
    doc, plan = load_manifest(path)
    root = os.path.dirname(os.path.abspath(path))

    def resolve(rel):
        return rel if os.path.isabs(rel) else os.path.join(root, rel)

    samples = []
    for rec in doc["samples"]:
        sid = rec["id"]
        rgb = load_image(resolve(rec["image"]))
        if rgb.ndim != 3:
            rgb = np.repeat(rgb[..., None], 3, axis=2)
        gt1 = _binarize(load_image(resolve(rec["gt1"])), rec["gt1"])
        gt2 = None
        if rec.get("gt2"):
            gt2 = _binarize(load_image(resolve(rec["gt2"])), rec["gt2"])
        if rec.get("fov"):
            fov = _binarize(load_image(resolve(rec["fov"])), rec["fov"]).astype(bool)
        else:
            fov = generate_fov_mask(rgb, threshold=fov_threshold)
        shapes = {arr.shape[:2] for arr in (rgb, gt1, fov) if arr is not None}
        if gt2 is not None:
            shapes.add(gt2.shape[:2])
        if len(shapes) != 1:
            raise DataError(f"sample {sid!r}: plane dimensions disagree: {sorted(shapes)}")
        samples.append(FundusSample(id=sid, rgb=rgb, gt1=gt1, gt2=gt2, fov=fov))
    return doc["name"], samples, plan


# ---------------------------------------------------------------- weights

def _payload_checksum(payload):
    return hashlib.blake2b(payload, digest_size=8).digest()


def serialize_weights(model, seed=None, epoch=None):
    """Archive bytes: magic, JSON header, float32 payload, 8-byte checksum."""
    entries = [(name, list(t.data.shape)) for name, t in model.store.items()]
    header = json.dumps(
        {
            "arch": model.spec.to_dict(),
            "seed": seed,
            "epoch": epoch,
            "entries": entries,
        },
        sort_keys=True,
    ).encode()
    payload = b"".join(
        np.ascontiguousarray(t.data, dtype="<f4").tobytes() for _, t in model.store.items()
    )
    return MAGIC + struct.pack("<I", len(header)) + header + payload + _payload_checksum(payload)


def save_weights(model, path, seed=None, epoch=None):
    """Atomic write of the model's weight archive; returns its byte size."""
    blob = serialize_weights(model, seed=seed, epoch=epoch)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return len(blob)


def _parse_archive(blob, origin):
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise TruncatedArchiveError(f"{origin}: not a weight archive (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    off = len(MAGIC) + 4
    if len(blob) < off + hlen + 8:
        raise TruncatedArchiveError(f"{origin}: archive truncated inside header")
    header = json.loads(blob[off:off + hlen].decode())
    off += hlen
    payload_len = sum(4 * int(np.prod(shape)) for _, shape in header["entries"])
    if len(blob) != off + payload_len + 8:
        raise TruncatedArchiveError(
            f"{origin}: payload is {len(blob) - off - 8} bytes, expected {payload_len}"
        )
    payload = blob[off:off + payload_len]
    if _payload_checksum(payload) != blob[-8:]:
        raise ChecksumError(f"{origin}: payload checksum mismatch")
    return header, payload


def load_weights(path, expected_spec=None):
    """Rebuild the archived model; returns (model, header dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header, payload = _parse_archive(blob, path)
    spec = ArchitectureSpec.from_dict(header["arch"])
    if expected_spec is not None and spec != expected_spec:
        raise SpecMismatchError(
            f"{path}: archive holds {spec.kind!r} {spec.to_dict()}, "
            f"expected {expected_spec.to_dict()}"
        )
    model = build_model(spec, seed=0)
    values = {}
    off = 0
    for name, shape in header["entries"]:
        size = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=off).reshape(shape)
        values[name] = arr.astype(np.float32)
        off += 4 * size
    try:
        model.store.set_values(values)
    except (KeyError, ConfigError) as exc:
        raise SpecMismatchError(f"{path}: entry list does not match the architecture ({exc})")
    return model, header


# ---------------------------------------------------------------- cache

CACHE_META = "cache.json"


@dataclass
class CachedSample:
    id: str
    image: np.ndarray        # (h, w) float32 in [0,1], preprocessed
    gt1: np.ndarray          # (h, w) uint8 {0,1}
    fov: np.ndarray          # (h, w) bool
    gt2: np.ndarray = None


def write_cache(cache_dir, name, samples, preprocessed, plan_doc, pipeline_params):
    """Persist preprocessed images and masks as 8-bit PNGs plus metadata."""
    os.makedirs(cache_dir, exist_ok=True)
    for sample, img in zip(samples, preprocessed):
        q = np.floor(img.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
        save_png(q, os.path.join(cache_dir, "images", f"{sample.id}.png"))
        save_png(sample.fov.astype(np.uint8) * 255, os.path.join(cache_dir, "fov", f"{sample.id}.png"))
        save_png(sample.gt1 * 255, os.path.join(cache_dir, "gt1", f"{sample.id}.png"))
        if sample.gt2 is not None:
            save_png(sample.gt2 * 255, os.path.join(cache_dir, "gt2", f"{sample.id}.png"))
    meta = {
        "name": name,
        "ids": [s.id for s in samples],
        "has_gt2": [s.id for s in samples if s.gt2 is not None],
        "split": plan_doc,
        "pipeline": pipeline_params.to_dict(),
    }
    with open(os.path.join(cache_dir, CACHE_META), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_cache(cache_dir):
    """Read a prepare cache back; returns (name, samples, plan, pipeline dict)."""
    meta_path = os.path.join(cache_dir, CACHE_META)
    if not os.path.exists(meta_path):
        raise ConfigError(f"no prepared cache at {cache_dir}; run the prepare command first")
    with open(meta_path) as fh:
        meta = json.load(fh)
    plan = _build_split(meta["split"], meta["ids"])
    samples = []
    for sid in meta["ids"]:
        img = load_image(os.path.join(cache_dir, "images", f"{sid}.png")).astype(np.float32) / 255.0
        gt1 = _binarize(load_image(os.path.join(cache_dir, "gt1", f"{sid}.png")), sid)
        fov = _binarize(load_image(os.path.join(cache_dir, "fov", f"{sid}.png")), sid).astype(bool)
        gt2 = None
        if sid in meta["has_gt2"]:
            gt2 = _binarize(load_image(os.path.join(cache_dir, "gt2", f"{sid}.png")), sid)
        samples.append(CachedSample(id=sid, image=img, gt1=gt1, fov=fov, gt2=gt2))
    return meta["name"], samples, plan, meta["pipeline"]
