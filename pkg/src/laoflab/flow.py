"""Optical flow utilities: RGB codec, masking, Horn-Schunck, warping, .flo I/O.

Flow fields are ``(H, W, 2)`` float32 arrays holding ``(u, v)`` per pixel:
``u`` is the horizontal displacement (positive right), ``v`` the vertical one
(positive down, image row order). RGB images are ``(H, W, 3)`` uint8.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy import ndimage

from laoflab.errors import FormatError, NumericError, ShapeError, StorageError, UsageError

FLO_MAGIC = 202021.25

# sensitivity factors per control regime
SIGMA_CONTINUOUS = 0.05
SIGMA_DISCRETE = 0.01


def _check_flow(flow: np.ndarray) -> np.ndarray:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ShapeError(f"flow must have shape (H, W, 2), got {flow.shape}")
    if not np.isfinite(flow).all():
        raise NumericError("flow field contains non-finite values")
    return flow


def flow_to_hsv(flow: np.ndarray, sigma: float) -> np.ndarray:
    """Pre-quantization HSV image: hue in degrees [0, 360), S = V = normalized magnitude."""
    if not sigma > 0:
        raise UsageError(f"sigma must be positive, got {sigma}")
    flow = _check_flow(flow).astype(np.float64)
    h, w = flow.shape[:2]
    u, v = flow[..., 0], flow[..., 1]
    hue = np.degrees(np.arctan2(v, u)) % 360.0
    mag = np.hypot(u, v)
    m_norm = np.minimum(1.0, mag / (sigma * np.sqrt(h * h + w * w)))
    return np.stack([hue, m_norm, m_norm], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Sector-based HSV to RGB; hue in degrees, S and V in [0, 1]. Returns uint8, rounding half up."""
    hue, s, v = hsv[..., 0] % 360.0, hsv[..., 1], hsv[..., 2]
    c = v * s
    hp = hue / 60.0
    x = c * (1.0 - np.abs(np.mod(hp, 2.0) - 1.0))
    sector = np.floor(hp).astype(np.int64) % 6
    zero = np.zeros_like(c)
    # (R, G, B) before the +m offset for each 60-degree sector
    table = [
        (c, x, zero),
        (x, c, zero),
        (zero, c, x),
        (zero, x, c),
        (x, zero, c),
        (c, zero, x),
    ]
    rgb = np.zeros(hue.shape + (3,))
    for k, (r, g, b) in enumerate(table):
        sel = sector == k
        rgb[sel, 0] = r[sel]
        rgb[sel, 1] = g[sel]
        rgb[sel, 2] = b[sel]
    rgb += (v - c)[..., None]
    return np.clip(np.floor(rgb * 255.0 + 0.5), 0, 255).astype(np.uint8)


def flow_to_rgb(flow: np.ndarray, sigma: float) -> np.ndarray:
    return hsv_to_rgb(flow_to_hsv(flow, sigma))


def mask_flow(flow_rgb: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keep RGB flow inside the binary mask, black elsewhere."""
    flow_rgb = np.asarray(flow_rgb)
    mask = np.asarray(mask)
    if mask.shape != flow_rgb.shape[:2]:
        raise UsageError(f"mask shape {mask.shape} does not match image {flow_rgb.shape[:2]}")
    if not np.isin(mask, (0, 1)).all():
        raise UsageError("mask must be binary")
    return (flow_rgb * mask.astype(flow_rgb.dtype)[..., None]).astype(flow_rgb.dtype)


def to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    raise ShapeError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


_AVG_KERNEL = np.array([[1, 2, 1], [2, 0, 2], [1, 2, 1]], dtype=np.float64) / 12.0


def _hs_derivatives(e0: np.ndarray, e1: np.ndarray, mode: str):
    """Horn-Schunck first differences over the 2x2x2 cube at each pixel."""
    pad = "wrap" if mode == "wrap" else "edge"

    def shifted(e):
        p = np.pad(e, ((0, 1), (0, 1)), mode=pad)
        return p[:-1, :-1], p[:-1, 1:], p[1:, :-1], p[1:, 1:]

    a00, a01, a10, a11 = shifted(e0)
    b00, b01, b10, b11 = shifted(e1)
    ex = 0.25 * ((a01 - a00) + (a11 - a10) + (b01 - b00) + (b11 - b10))
    ey = 0.25 * ((a10 - a00) + (a11 - a01) + (b10 - b00) + (b11 - b01))
    et = 0.25 * ((b00 - a00) + (b01 - a01) + (b10 - a10) + (b11 - a11))
    return ex, ey, et


def estimate_flow_hs(
    img1: np.ndarray,
    img2: np.ndarray,
    alpha_hs: float = 1.0,
    iterations: int = 200,
    boundary: str = "edge",
    return_residuals: bool = False,
):
    """Dense Horn-Schunck flow from ``img1`` to ``img2``.

    Images are converted to luma on the 0-255 scale. ``boundary`` is ``"edge"``
    (replicate) or ``"wrap"`` (periodic). With ``return_residuals`` the mean
    per-iteration update magnitude is returned alongside the field.
    """
    e0, e1 = to_luma(img1), to_luma(img2)
    if e0.shape != e1.shape:
        raise UsageError(f"image sizes differ: {e0.shape} vs {e1.shape}")
    if min(e0.shape) < 2:
        raise UsageError("Horn-Schunck needs images of at least 2x2 pixels")
    if not alpha_hs > 0 or iterations < 1:
        raise UsageError("alpha_hs must be > 0 and iterations >= 1")
    if boundary not in ("edge", "wrap"):
        raise UsageError(f"unknown boundary mode {boundary!r}")

    ex, ey, et = _hs_derivatives(e0, e1, boundary)
    denom = alpha_hs**2 + ex**2 + ey**2
    mode = "wrap" if boundary == "wrap" else "nearest"
    u = np.zeros_like(e0)
    v = np.zeros_like(e0)
    residuals = []
    for _ in range(iterations):
        u_bar = ndimage.convolve(u, _AVG_KERNEL, mode=mode)
        v_bar = ndimage.convolve(v, _AVG_KERNEL, mode=mode)
        t = (ex * u_bar + ey * v_bar + et) / denom
        u_new = u_bar - ex * t
        v_new = v_bar - ey * t
        if return_residuals:
            residuals.append(float(np.mean(np.hypot(u_new - u, v_new - v))))
        u, v = u_new, v_new
    flow = np.stack([u, v], axis=-1).astype(np.float32)
    return (flow, residuals) if return_residuals else flow


def endpoint_error(flow: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(np.hypot(flow[..., 0] - truth[..., 0], flow[..., 1] - truth[..., 1])))


def warp(
    image: np.ndarray,
    flow: np.ndarray,
    depth: np.ndarray | None = None,
    fill: np.ndarray | None = None,
) -> np.ndarray:
    """Forward-warp ``image`` by ``flow`` to the nearest integer target pixel.

    When several source pixels land on one target, the one with the largest
    ``depth`` (draw order) wins; without ``depth`` the last source pixel in
    raster order wins. Targets nobody writes keep ``fill`` (zeros by default);
    sources mapped outside the frame are dropped.
    """
    image = np.asarray(image)
    flow = _check_flow(flow)
    h, w = image.shape[:2]
    if flow.shape[:2] != (h, w):
        raise ShapeError(f"flow {flow.shape[:2]} does not match image {(h, w)}")
    out = np.zeros_like(image) if fill is None else np.array(fill, dtype=image.dtype, copy=True)

    ys, xs = np.mgrid[0:h, 0:w]
    ty = np.floor(ys + flow[..., 1] + 0.5).astype(np.int64).ravel()
    tx = np.floor(xs + flow[..., 0] + 0.5).astype(np.int64).ravel()
    src = np.arange(h * w)
    if depth is not None:
        src = np.argsort(np.asarray(depth).ravel(), kind="stable")
    ty, tx = ty[src], tx[src]
    keep = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
    src, ty, tx = src[keep], ty[keep], tx[keep]
    # last writer per target: unique over the reversed sequence keeps the final occurrence
    target = (ty * w + tx)[::-1]
    _, first = np.unique(target, return_index=True)
    pick = src[::-1][first]
    flat_out = out.reshape(h * w, -1)
    flat_out[target[first]] = image.reshape(h * w, -1)[pick]
    return out


def write_flo(flow: np.ndarray, path) -> None:
    flow = _check_flow(flow)
    h, w = flow.shape[:2]
    payload = struct.pack("<fii", FLO_MAGIC, w, h) + np.ascontiguousarray(flow, dtype="<f4").tobytes()
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def read_flo(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    if len(buf) < 12:
        raise FormatError(f"{path}: file too short for a .flo header")
    magic, w, h = struct.unpack_from("<fii", buf, 0)
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad .flo magic {magic!r}")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid dimensions {w}x{h}")
    expected = 12 + 8 * w * h
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)
