"""Dual-pixel image formation: thin-lens defocus with mirrored half-disc PSFs.

A scene (all-in-focus linear-RGB image + per-pixel depth in mm + camera) is
rendered into the four-image frame a dual-pixel sensor would produce: the
left and right sub-aperture views, their average (the image the camera
outputs), and the sharp ground truth. Out-of-focus points blur with a
half-disc kernel whose retained half flips between the two views and flips
again when a point crosses the focal plane, so the views exhibit a signed
defocus disparity proportional to blur size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .color import luma709, srgb_encode

DEFAULT_DEPTH_LAYERS = 16


class TexturelessPatchError(ValueError):
    """Disparity is undefined on a zero-variance patch."""


@dataclass(frozen=True)
class CameraConfig:
    """Thin-lens camera: millimetres throughout, pixel pitch in mm/pixel."""

    focal_length_mm: float
    f_number: float
    focus_distance_mm: float
    pixel_pitch_mm: float
    resolution: tuple[int, int] | None = None  # (width, height), metadata only

    def __post_init__(self):
        if self.f_number <= 0:
            raise ValueError(f"f_number must be positive, got {self.f_number}")
        if self.focus_distance_mm <= self.focal_length_mm:
            raise ValueError(
                f"focus distance {self.focus_distance_mm} mm must exceed "
                f"focal length {self.focal_length_mm} mm")
        if self.pixel_pitch_mm <= 0:
            raise ValueError("pixel_pitch_mm must be positive")


@dataclass
class SceneSpec:
    """Simulator input: all-in-focus linear RGB image + depth map (mm) + camera."""

    image: np.ndarray       # (H, W, 3) linear RGB in [0, 1]
    depth_mm: np.ndarray    # (H, W), strictly positive
    camera: CameraConfig

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.depth_mm = np.asarray(self.depth_mm, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"scene image must be (H, W, 3), got {self.image.shape}")
        if self.depth_mm.shape != self.image.shape[:2]:
            raise ValueError(
                f"depth map {self.depth_mm.shape} does not match image {self.image.shape[:2]}")
        if not np.all(self.depth_mm > 0):
            raise ValueError("depth map must be strictly positive everywhere")


@dataclass
class DPFrame:
    """One scene's four sRGB-encoded images plus capture metadata."""

    left: np.ndarray
    right: np.ndarray
    blurred: np.ndarray
    sharp: np.ndarray
    camera: CameraConfig
    scene_id: str = ""
    category: str = ""  # indoor | outdoor

    def views(self) -> dict[str, np.ndarray]:
        return {"l": self.left, "r": self.right, "b": self.blurred, "s": self.sharp}


def coc_radius(depth_mm, camera: CameraConfig):
    """Signed circle-of-confusion radius in pixels for scene depth(s) in mm.

    Zero at the focal plane, positive beyond it, negative in front of it:
        r = (f^2 / (2N)) * (d - d_f) / (d * (d_f - f)) / pixel_pitch
    Accepts scalars or arrays; depths at or inside the focal length are
    rejected (the thin-lens image distance diverges there).
    """
    d = np.asarray(depth_mm, dtype=np.float64)
    if np.any(d <= camera.focal_length_mm):
        raise ValueError(
            f"depth must exceed the focal length {camera.focal_length_mm} mm")
    f = camera.focal_length_mm
    r_mm = (f * f / (2.0 * camera.f_number)) * (d - camera.focus_distance_mm) / (
        d * (camera.focus_distance_mm - f))
    r = r_mm / camera.pixel_pitch_mm
    return float(r) if np.isscalar(depth_mm) else r


def half_disc_psf(radius: float, side: str) -> np.ndarray:
    """Unit-sum half-disc kernel of the given signed radius (pixels).

    The anti-aliased disc of radius |r| is halved along the vertical line
    through its center; which half survives depends on ``side`` and on the
    sign of ``radius`` (front/back focus reversal). ``side="right"`` is the
    exact horizontal mirror of ``side="left"``. |radius| < 0.5 degenerates
    to the 1x1 identity kernel.
    """
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    if not math.isfinite(radius):
        raise ValueError(f"radius must be finite, got {radius}")
    r = abs(radius)
    if r < 0.5:
        return np.ones((1, 1))
    n = int(math.ceil(r + 0.5))
    ax = np.arange(-n, n + 1, dtype=np.float64)
    dist = np.hypot(ax[:, None], ax[None, :])
    kernel = np.clip(r + 0.5 - dist, 0.0, 1.0)  # per-tap disc coverage
    keep_negative_x = (side == "left") == (radius >= 0)
    if keep_negative_x:
        kernel[:, n + 1:] = 0.0
    else:
        kernel[:, :n] = 0.0
    return kernel / kernel.sum()


def _blur_premultiplied(color: np.ndarray, alpha: np.ndarray, kernel: np.ndarray):
    if kernel.shape == (1, 1):
        return color * kernel[0, 0], alpha * kernel[0, 0]
    stack = np.concatenate([color, alpha[:, :, None]], axis=2)
    out = fftconvolve(stack, kernel[:, :, None], mode="same", axes=(0, 1))
    return out[:, :, :3], out[:, :, 3]


def render_dp(scene: SceneSpec, layers: int = DEFAULT_DEPTH_LAYERS,
              scene_id: str = "", category: str = "") -> DPFrame:
    """Render a scene into a dual-pixel frame.

    The depth map is quantized into ``layers`` bins; each bin's premultiplied
    color + coverage is convolved with the bin's left/right half-disc PSF and
    the bins are composited back to front with normalized alpha. The blurred
    output image is the average of the two encoded views; the sharp image is
    the encoded input. All four outputs are sRGB-encoded.
    """
    if layers < 1:
        raise ValueError("layer count must be >= 1")
    cam = scene.camera
    depth = scene.depth_mm
    if np.any(depth <= cam.focal_length_mm):
        raise ValueError("scene depth reaches the focal length; cannot render")
    dmin, dmax = float(depth.min()), float(depth.max())
    if dmin == dmax:
        bins = np.zeros(depth.shape, dtype=np.intp)
        nbins = 1
    else:
        edges = np.linspace(dmin, dmax, layers + 1)
        bins = np.clip(np.digitize(depth, edges[1:-1]), 0, layers - 1)
        nbins = layers

    out = {"left": np.zeros_like(scene.image), "right": np.zeros_like(scene.image)}
    acc = {"left": np.zeros(depth.shape), "right": np.zeros(depth.shape)}
    # Back to front: far bins first, each new layer composited over the rest.
    for b in range(nbins - 1, -1, -1):
        mask = bins == b
        if not mask.any():
            continue
        alpha = mask.astype(np.float64)
        color = scene.image * alpha[:, :, None]
        radius = coc_radius(float(depth[mask].mean()), cam)
        for side in ("left", "right"):
            kernel = half_disc_psf(radius, side)
            cb, ab = _blur_premultiplied(color, alpha, kernel)
            out[side] = cb + (1.0 - ab[:, :, None]) * out[side]
            acc[side] = ab + (1.0 - ab) * acc[side]
    for side in ("left", "right"):
        norm = np.maximum(acc[side], 1e-12)[:, :, None]
        out[side] = np.clip(out[side] / norm, 0.0, 1.0)

    left = srgb_encode(out["left"])
    right = srgb_encode(out["right"])
    return DPFrame(
        left=left,
        right=right,
        blurred=combine_views(left, right),
        sharp=srgb_encode(scene.image),
        camera=cam,
        scene_id=scene_id,
        category=category,
    )


def combine_views(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """The sensor's output image: elementwise average of the two views."""
    left = np.asarray(left)
    right = np.asarray(right)
    if left.shape != right.shape:
        raise ValueError(f"view shapes differ: {left.shape} vs {right.shape}")
    return 0.5 * (left + right)


def estimate_disparity(patch_left: np.ndarray, patch_right: np.ndarray,
                       max_shift: int) -> float:
    """Horizontal shift of the right patch relative to the left, in pixels.

    Maximizes zero-mean normalized cross-correlation over integer shifts in
    [-max_shift, max_shift], then refines to sub-pixel precision with a
    parabolic fit over the peak and its neighbors. Positive means the right
    patch's content sits to the right of the left patch's.
    """
    a = luma709(np.asarray(patch_left, dtype=np.float64))
    b = luma709(np.asarray(patch_right, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"patch shapes differ: {a.shape} vs {b.shape}")
    width = a.shape[1]
    if not 0 < max_shift < width / 2:
        raise ValueError(f"max_shift must be in (0, width/2), got {max_shift}")
    if a.std() == 0.0 or b.std() == 0.0:
        raise TexturelessPatchError("textureless patch: disparity undefined")

    def ncc(shift: int) -> float:
        if shift >= 0:
            aa, bb = a[:, : width - shift], b[:, shift:]
        else:
            aa, bb = a[:, -shift:], b[:, : width + shift]
        aa = aa - aa.mean()
        bb = bb - bb.mean()
        denom = math.sqrt(float((aa * aa).sum()) * float((bb * bb).sum()))
        return 0.0 if denom == 0.0 else float((aa * bb).sum()) / denom

    shifts = list(range(-max_shift, max_shift + 1))
    scores = [ncc(s) for s in shifts]
    i = int(np.argmax(scores))
    if i == 0 or i == len(shifts) - 1 or scores[i] >= 1.0 - 1e-12:
        # Peak at the search boundary, or an exact-correlation peak where the
        # parabola is degenerate: return the integer shift.
        return float(shifts[i])
    c_prev, c0, c_next = scores[i - 1], scores[i], scores[i + 1]
    denom = c_prev - 2.0 * c0 + c_next
    delta = 0.0 if denom == 0.0 else 0.5 * (c_prev - c_next) / denom
    return float(shifts[i] + np.clip(delta, -0.5, 0.5))


def disparity_at_depth(depth_mm: float, camera: CameraConfig) -> float:
    """Predicted L/R centroid separation (pixels) for a fronto-parallel point."""
    r = coc_radius(depth_mm, camera)
    kl = half_disc_psf(r, "left")
    kr = half_disc_psf(r, "right")
    n = kl.shape[1] // 2
    ax = np.arange(-n, n + 1, dtype=np.float64)
    return float((kr * ax).sum() - (kl * ax).sum())


def procedural_scene(seed: int, width: int, height: int, camera: CameraConfig,
                     depth_range: tuple[float, float] | None = None) -> SceneSpec:
    """Deterministic textured test scene: a sloped background plane plus a few
    fronto-parallel rectangles at depths around the focal plane."""
    rng = np.random.default_rng(seed)
    d_f = camera.focus_distance_mm
    if depth_range is None:
        depth_range = (0.55 * d_f, 2.6 * d_f)
    lo, hi = depth_range

    def texture() -> np.ndarray:
        img = np.full((height, width, 3), rng.uniform(0.25, 0.75, size=3))
        yy, xx = np.mgrid[0:height, 0:width]
        for _ in range(rng.integers(3, 6)):
            freq = rng.uniform(0.06, 0.45)
            theta = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
            img += wave[:, :, None] * rng.uniform(0.03, 0.14, size=3)
        return np.clip(img, 0.04, 0.96)

    image = texture()
    d0, d1 = rng.uniform(lo, hi, size=2)
    ramp = np.linspace(d0, d1, height)[:, None] if rng.random() < 0.5 \
        else np.linspace(d0, d1, width)[None, :]
    depth = np.broadcast_to(ramp, (height, width)).copy()

    for _ in range(rng.integers(2, 5)):
        rw = int(rng.integers(width // 5, max(width // 2, width // 5 + 1)))
        rh = int(rng.integers(height // 5, max(height // 2, height // 5 + 1)))
        x0 = int(rng.integers(0, width - rw + 1))
        y0 = int(rng.integers(0, height - rh + 1))
        depth[y0 : y0 + rh, x0 : x0 + rw] = rng.uniform(lo, hi)
        image[y0 : y0 + rh, x0 : x0 + rw] = texture()[y0 : y0 + rh, x0 : x0 + rw]

    return SceneSpec(image=image, depth_mm=depth, camera=camera)
