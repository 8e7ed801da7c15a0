"""Dataset ingestion: manifests, splitting, patch extraction, and filtering.

A dataset is driven entirely by a line-oriented manifest (one scene per
line: ``id, category, path_l, path_r, path_b, path_s, aperture[, split]``);
no directory structure is guessed. Training patches are cut from the four
views at identical coordinates with a sliding window, ranked by the
sharpness energy of the sharp-view patch, and the flattest fraction is
discarded.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import cv2
import numpy as np
from scipy import ndimage

from .color import luma709
from .container import read_container, write_container

VIEW_KEYS = ("l", "r", "b", "s")
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T

PATCH_CACHE_KIND = "patch-cache"


class DataError(ValueError):
    """Raised for malformed manifests, missing files, or bad image data."""


@dataclass(frozen=True)
class SceneRecord:
    scene_id: str
    category: str  # indoor | outdoor
    paths: dict[str, str]  # view key -> path relative to the manifest
    aperture: str
    split: str | None = None


@dataclass
class PatchRecord:
    """One window position cut from all four views of a scene."""

    scene_id: str
    y: int
    x: int
    patches: dict[str, np.ndarray]
    sharpness_energy: float  # computed on the sharp view only


def load_image(path, expect_bit_depth: int | None = None) -> tuple[np.ndarray, int]:
    """Load an 8/16-bit PNG as float in [0, 1]; returns (image, bit_depth).

    Values are normalized by 2^depth - 1. Grayscale images come back as
    (H, W, 1); color as (H, W, 3) RGB.
    """
    raw = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DataError(f"cannot read image {path}")
    if raw.dtype == np.uint8:
        depth = 8
    elif raw.dtype == np.uint16:
        depth = 16
    else:
        raise DataError(f"{path}: unsupported sample type {raw.dtype}")
    if expect_bit_depth is not None and depth != expect_bit_depth:
        raise DataError(f"{path}: bit depth {depth} does not match declared "
                        f"{expect_bit_depth}")
    if raw.ndim == 2:
        raw = raw[:, :, None]
    elif raw.shape[2] == 4:
        raw = raw[:, :, :3]
    if raw.shape[2] == 3:
        raw = raw[:, :, ::-1]  # BGR -> RGB
    return raw.astype(np.float64) / float(2 ** depth - 1), depth


def save_image(path, image: np.ndarray, bit_depth: int = 16) -> None:
    """Save a float image in [0, 1] as an 8- or 16-bit PNG (lossless)."""
    if bit_depth not in (8, 16):
        raise DataError(f"unsupported bit depth {bit_depth}")
    peak = 2 ** bit_depth - 1
    arr = np.rint(np.clip(image, 0.0, 1.0) * peak)
    arr = arr.astype(np.uint8 if bit_depth == 8 else np.uint16)
    if arr.ndim == 3 and arr.shape[2] == 3:
        arr = arr[:, :, ::-1]  # RGB -> BGR
    elif arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if not cv2.imwrite(os.fspath(path), arr):
        raise DataError(f"cannot write image {path}")


def load_manifest(path) -> list[SceneRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) not in (7, 8):
                raise DataError(f"{path}:{lineno}: expected 7 or 8 fields, got {len(parts)}")
            split = parts[7] if len(parts) == 8 else None
            if split is not None and split not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            if parts[1] not in ("indoor", "outdoor"):
                raise DataError(f"{path}:{lineno}: unknown category {parts[1]!r}")
            records.append(SceneRecord(
                scene_id=parts[0], category=parts[1],
                paths=dict(zip(VIEW_KEYS, parts[2:6])),
                aperture=parts[6], split=split))
    return records


def save_manifest(path, records: list[SceneRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fields = [r.scene_id, r.category] + [r.paths[k] for k in VIEW_KEYS] + [r.aperture]
            if r.split is not None:
                fields.append(r.split)
            fh.write(",".join(fields) + "\n")


def load_scene_views(manifest_path, record: SceneRecord,
                     bit_depth: int | None = None) -> dict[str, np.ndarray]:
    """Load the four views of a scene, enforcing identical dimensions."""
    base = os.path.dirname(os.fspath(manifest_path))
    views = {}
    for key in VIEW_KEYS:
        img, _ = load_image(os.path.join(base, record.paths[key]), bit_depth)
        views[key] = img
    shapes = {v.shape for v in views.values()}
    if len(shapes) != 1:
        raise DataError(f"scene {record.scene_id}: view dimensions differ: {shapes}")
    return views


def split(records: list[SceneRecord], seed: int) -> list[SceneRecord]:
    """Assign 70/15/15 train/val/test per category, at scene granularity.

    Per category: train takes floor(0.70 n), val floor(0.15 n), test the
    remainder. Deterministic for a given seed; no scene appears in more
    than one split.
    """
    by_cat: dict[str, list[SceneRecord]] = {}
    for r in records:
        by_cat.setdefault(r.category, []).append(r)
    assigned: dict[str, str] = {}
    rng = np.random.default_rng(seed)
    for cat in sorted(by_cat):
        scenes = sorted(by_cat[cat], key=lambda r: r.scene_id)
        n = len(scenes)
        if n < 3:
            raise DataError(f"category {cat!r} has {n} scenes; need at least 3 to split")
        order = rng.permutation(n)
        n_train = int(SPLIT_FRACTIONS[0] * n)
        n_val = int(SPLIT_FRACTIONS[1] * n)
        for rank, idx in enumerate(order):
            if rank < n_train:
                part = "train"
            elif rank < n_train + n_val:
                part = "val"
            else:
                part = "test"
            assigned[scenes[idx].scene_id] = part
    return [replace(r, split=assigned[r.scene_id]) for r in records]


def downscale(image: np.ndarray, target: tuple[int, int] = (1680, 1120)) -> np.ndarray:
    """Area-average (box) downscaling to ``target`` = (width, height).

    The source must be at least the target size and share its aspect ratio.
    Integer reduction factors average exact pixel blocks; otherwise OpenCV's
    area resampling is used (same semantics, fractional boxes).
    """
    tw, th = target
    h, w = image.shape[:2]
    if w < tw or h < th:
        raise DataError(f"source {w}x{h} smaller than target {tw}x{th}")
    if abs(w / h - tw / th) > 1e-6:
        raise DataError(f"aspect ratio mismatch: source {w}x{h} vs target {tw}x{th}")
    if w % tw == 0 and h % th == 0:
        fx, fy = w // tw, h // th
        squeezed = image.reshape(th, fy, tw, fx, -1).mean(axis=(1, 3))
        return squeezed[:, :, 0] if image.ndim == 2 else squeezed
    return cv2.resize(image, (tw, th), interpolation=cv2.INTER_AREA)


def window_starts(length: int, size: int, stride: int) -> list[int]:
    """Window origins: 0, stride, ... plus a final edge-flush window."""
    if size > length:
        raise DataError(f"window size {size} exceeds extent {length}")
    starts = list(range(0, length - size + 1, stride))
    if starts[-1] != length - size:
        starts.append(length - size)
    return starts


def patch_stride(patch_size: int, overlap: float) -> int:
    if not 0.0 <= overlap < 1.0:
        raise DataError(f"overlap must be in [0, 1), got {overlap}")
    return max(1, int(patch_size * (1.0 - overlap)))


def sharpness_energy(patch: np.ndarray) -> float:
    """Mean Sobel gradient magnitude of the patch's luma channel.

    Reflect boundary handling, so constant patches score exactly zero; the
    mean (rather than sum) keeps scores comparable across patch sizes.
    """
    y = luma709(np.asarray(patch, dtype=np.float64))
    gx = ndimage.correlate(y, SOBEL_X, mode="reflect")
    gy = ndimage.correlate(y, SOBEL_Y, mode="reflect")
    return float(np.hypot(gx, gy).mean())


def extract_patches(scene_id: str, views: dict[str, np.ndarray], patch_size: int,
                    overlap: float = 0.6) -> list[PatchRecord]:
    """Slide a square window over all views at identical coordinates.

    Stride is floor(patch_size * (1 - overlap)); a final row/column of
    windows flush with the image edge is added so border content is kept.
    Records are ordered by (row, col).
    """
    shapes = {v.shape for v in views.values()}
    if len(shapes) != 1:
        raise DataError(f"scene {scene_id}: view dimensions differ: {shapes}")
    h, w = next(iter(shapes))[:2]
    stride = patch_stride(patch_size, overlap)
    records = []
    for y in window_starts(h, patch_size, stride):
        for x in window_starts(w, patch_size, stride):
            patches = {k: v[y : y + patch_size, x : x + patch_size].copy()
                       for k, v in views.items()}
            records.append(PatchRecord(
                scene_id=scene_id, y=y, x=x, patches=patches,
                sharpness_energy=sharpness_energy(patches["s"])))
    return records


def filter_patches(records: list[PatchRecord], discard_fraction: float = 0.30
                   ) -> list[PatchRecord]:
    """Drop the floor(fraction * n) flattest patches by sharp-view energy.

    Ties break on (scene id, coordinates) so survivor sets nest across
    fractions. Original record order is preserved among survivors.
    """
    if not 0.0 <= discard_fraction < 1.0:
        raise DataError(f"discard fraction must be in [0, 1), got {discard_fraction}")
    n_drop = int(discard_fraction * len(records))
    if n_drop == 0:
        return list(records)
    order = sorted(records, key=lambda r: (r.sharpness_energy, r.scene_id, r.y, r.x))
    dropped = {id(r) for r in order[:n_drop]}
    return [r for r in records if id(r) not in dropped]


def save_patch_cache(path, records: list[PatchRecord], patch_size: int,
                     config: dict | None = None) -> None:
    """Write patches to a binary cache with a (version, patch_size, count) header."""
    if any(r.patches["s"].shape[0] != patch_size for r in records):
        raise DataError("patch cache: record size differs from declared patch_size")
    meta = {
        "patch_size": int(patch_size),
        "count": len(records),
        "views": list(VIEW_KEYS),
        "scene_ids": [r.scene_id for r in records],
        "config": config or {},
    }
    tensors: dict[str, np.ndarray] = {
        "coords": np.array([[r.y, r.x] for r in records], dtype=np.int64).reshape(-1, 2),
        "energy": np.array([r.sharpness_energy for r in records], dtype=np.float64),
    }
    for key in VIEW_KEYS:
        tensors[f"view.{key}"] = np.stack(
            [r.patches[key] for r in records]).astype(np.float32) if records else \
            np.zeros((0, patch_size, patch_size, 3), dtype=np.float32)
    write_container(path, PATCH_CACHE_KIND, meta, tensors)


def load_patch_cache(path) -> tuple[list[PatchRecord], dict]:
    """Read a patch cache; returns (records, meta)."""
    meta, tensors = read_container(path, expect_kind=PATCH_CACHE_KIND)
    records = []
    coords = tensors["coords"]
    energy = tensors["energy"]
    for i, sid in enumerate(meta["scene_ids"]):
        records.append(PatchRecord(
            scene_id=sid, y=int(coords[i, 0]), x=int(coords[i, 1]),
            patches={k: tensors[f"view.{k}"][i] for k in VIEW_KEYS},
            sharpness_energy=float(energy[i])))
    return records, meta
