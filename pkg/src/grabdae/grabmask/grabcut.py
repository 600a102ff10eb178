"""GrabCut-style foreground extraction and background blurring.

Images are float arrays of shape (H, W, 3) with channels in [0, 1].
Pixels are indexed row-major (``i = y * W + x``) wherever a flat index is
needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .gmm import GmmModel, data_term, fit_gmm
from .maxflow import FlowNetwork, min_cut


class Label(IntEnum):
    HARD_BG = 0
    HARD_FG = 1
    PROB_BG = 2
    PROB_FG = 3


@dataclass
class GrabMaskParams:
    K: int = 5
    gamma: float = 50.0
    outer_iters: int = 5
    em_iters: int = 10
    blur_sigma: float = 4.0
    eps: float = 1e-4
    seed_frac: float = 0.6

    def __post_init__(self):
        if self.K < 1 or self.outer_iters < 1 or self.em_iters < 0:
            raise ValueError("K and outer_iters must be >= 1, em_iters >= 0")
        if self.gamma < 0 or self.blur_sigma <= 0 or self.eps <= 0:
            raise ValueError("gamma must be >= 0; blur_sigma and eps must be positive")
        if not 0.0 < self.seed_frac <= 1.0:
            raise ValueError(f"seed_frac must lie in (0, 1], got {self.seed_frac}")


@dataclass
class SegmentResult:
    mask: np.ndarray  # (H, W) bool, True = foreground
    energies: list[float] = field(default_factory=list)
    fallback: bool = False
    reason: str = ""


# ---------------------------------------------------------------------------
# neighbourhood

def neighbor_pairs(height: int, width: int) -> np.ndarray:
    """Every unordered 8-connected pixel pair as flat indices, shape (m, 2)."""
    idx = np.arange(height * width).reshape(height, width)
    parts = [
        (idx[:, :-1], idx[:, 1:]),  # right
        (idx[:-1, :], idx[1:, :]),  # down
        (idx[:-1, :-1], idx[1:, 1:]),  # down-right
        (idx[:-1, 1:], idx[1:, :-1]),  # down-left
    ]
    pairs = [np.stack([a.ravel(), b.ravel()], axis=1) for a, b in parts if a.size]
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(pairs).astype(np.int64)


def _pair_sqdist(img: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    flat = img.reshape(-1, img.shape[-1]).astype(np.float64)
    d = flat[pairs[:, 0]] - flat[pairs[:, 1]]
    return (d * d).sum(axis=1)


def estimate_sigma2(img: np.ndarray) -> float:
    """Mean squared colour difference over all 8-neighbour pairs (floored at 1e-8)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if h * w < 2:
        raise ValueError("need at least two pixels to estimate colour variance")
    sq = _pair_sqdist(img, neighbor_pairs(h, w))
    return max(float(sq.mean()), 1e-8)


def smoothness_weight(z_i, z_j, gamma: float, sigma2: float):
    """``gamma * exp(-||z_i - z_j||^2 / (2 sigma2))``; vectorises over leading axes."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    d = np.asarray(z_i, dtype=np.float64) - np.asarray(z_j, dtype=np.float64)
    out = gamma * np.exp(-(d * d).sum(axis=-1) / (2.0 * sigma2))
    return float(out) if np.ndim(out) == 0 else out


def pairwise_weights(img: np.ndarray, gamma: float, sigma2: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    pairs = neighbor_pairs(h, w)
    if sigma2 is None:
        sigma2 = estimate_sigma2(img) if h * w >= 2 else 1.0
    weights = gamma * np.exp(-_pair_sqdist(img, pairs) / (2.0 * sigma2))
    return pairs, weights


# ---------------------------------------------------------------------------
# energy & graph

def _check_extents(img: np.ndarray, other: np.ndarray, what: str) -> None:
    if img.shape[:2] != other.shape[:2]:
        raise ValueError(f"{what} extents {other.shape[:2]} do not match image {img.shape[:2]}")


def gibbs_energy(labeling, img, fg: GmmModel, bg: GmmModel, params: GrabMaskParams, sigma2: float | None = None) -> float:
    """Sum of per-pixel data costs plus smoothness weights across label changes."""
    img = np.asarray(img, dtype=np.float64)
    lab = np.asarray(labeling, dtype=bool)
    _check_extents(img, lab, "labeling")
    flat = img.reshape(-1, 3)
    lab = lab.reshape(-1)
    unary = np.where(lab, data_term(fg, flat), data_term(bg, flat)).sum()
    pairs, w = pairwise_weights(img, params.gamma, sigma2)
    if len(pairs) == 0:
        return float(unary)
    differ = lab[pairs[:, 0]] != lab[pairs[:, 1]]
    return float(unary + w[differ].sum())


def build_graph(img, trimap, fg: GmmModel, bg: GmmModel, params: GrabMaskParams, sigma2: float | None = None) -> FlowNetwork:
    """Flow network whose cut capacities equal the Gibbs energy of pin-respecting labelings."""
    img = np.asarray(img, dtype=np.float64)
    trimap = np.asarray(trimap)
    _check_extents(img, trimap, "trimap")
    h, w = img.shape[:2]
    flat = img.reshape(-1, 3)
    tri = trimap.reshape(-1)
    source_cap = data_term(bg, flat)  # paid when the pixel is labelled background
    sink_cap = data_term(fg, flat)  # paid when labelled foreground
    pairs, weights = pairwise_weights(img, params.gamma, sigma2)
    hard_fg = tri == Label.HARD_FG
    hard_bg = tri == Label.HARD_BG
    if hard_fg.any() or hard_bg.any():
        # finite stand-in for infinity: larger than every other capacity combined
        pin = 1.0 + float(source_cap.sum() + sink_cap.sum() + weights.sum())
        source_cap = np.where(hard_fg, pin, source_cap)
        sink_cap = np.where(hard_bg, pin, sink_cap)
    return FlowNetwork(h, w, source_cap, sink_cap, pairs, weights)


# ---------------------------------------------------------------------------
# segmentation

def seed_rectangle(height: int, width: int, frac: float = 0.6) -> tuple[int, int, int, int]:
    """Centred rectangle (top, left, bottom, right), exclusive bottom/right."""
    rh = max(1, int(round(height * frac)))
    rw = max(1, int(round(width * frac)))
    top = (height - rh) // 2
    left = (width - rw) // 2
    return top, left, top + rh, left + rw


def initial_trimap(height: int, width: int, rect: tuple[int, int, int, int]) -> np.ndarray:
    top, left, bottom, right = rect
    if not (0 <= top < bottom <= height and 0 <= left < right <= width):
        raise ValueError(f"seed rectangle {rect} does not fit a {height}x{width} image")
    tri = np.full((height, width), Label.HARD_BG, dtype=np.uint8)
    tri[top:bottom, left:right] = Label.PROB_FG
    return tri


def grabcut_segment(img, rect: tuple[int, int, int, int] | None = None,
                    params: GrabMaskParams | None = None, seed: int = 0) -> SegmentResult:
    """Iterated GMM fitting and min-cut starting from a rectangular seed.

    Pixels outside ``rect`` are pinned to background. After the first
    round the colour models are refined by warm-started EM, which keeps the
    Gibbs energy non-increasing across rounds.
    """
    params = params or GrabMaskParams()
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    rect = rect if rect is not None else seed_rectangle(h, w, params.seed_frac)
    tri = initial_trimap(h, w, rect)
    seed_mask = tri == Label.PROB_FG

    def fallback(reason: str, energies: list[float]) -> SegmentResult:
        return SegmentResult(seed_mask.copy(), energies, True, reason)

    flat = img.reshape(-1, 3)
    if h * w < 2 or np.all(flat == flat[0]):
        return fallback("constant image", [])
    sigma2 = estimate_sigma2(img)
    rng = np.random.default_rng(seed)
    fg_model = bg_model = None
    energies: list[float] = []
    fg_now = seed_mask
    for _ in range(params.outer_iters):
        fg_pix = flat[fg_now.reshape(-1)]
        bg_pix = flat[~fg_now.reshape(-1)]
        if len(fg_pix) < params.K or len(bg_pix) < params.K:
            return fallback("too few pixels for a colour model", energies)
        fg_model = fit_gmm(fg_pix, params.K, params.em_iters, rng, params.eps, init=fg_model)
        bg_model = fit_gmm(bg_pix, params.K, params.em_iters, rng, params.eps, init=bg_model)
        net = build_graph(img, tri, fg_model, bg_model, params, sigma2)
        fg_now, _ = min_cut(net)
        energies.append(gibbs_energy(fg_now, img, fg_model, bg_model, params, sigma2))
        prob = (tri == Label.PROB_FG) | (tri == Label.PROB_BG)
        tri = np.where(prob, np.where(fg_now, Label.PROB_FG, Label.PROB_BG), tri).astype(np.uint8)
        if not fg_now.any():
            return fallback("empty foreground", energies)
    return SegmentResult(fg_now, energies)


# ---------------------------------------------------------------------------
# blurring

def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3 sigma), edge-clamped."""
    img = np.asarray(img, dtype=np.float64)
    k = gaussian_kernel(sigma)
    r = (len(k) - 1) // 2
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * img.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="edge")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for t, kv in enumerate(k):
            acc += kv * np.take(padded, np.arange(t, t + n), axis=axis)
        out = acc
    return out


def apply_mask_blur(img, mask, blur_sigma: float) -> np.ndarray:
    """Keep foreground pixels, replace background pixels by the blurred image."""
    img = np.asarray(img)
    mask = np.asarray(mask, dtype=bool)
    _check_extents(img, mask, "mask")
    blurred = gaussian_blur(img, blur_sigma).astype(img.dtype)
    return np.where(mask[..., None], img, blurred)


def scaled_blur_sigma(side: int, sigma_at_32: float = 4.0) -> float:
    return sigma_at_32 * side / 32.0


def grab_mask(img, params: GrabMaskParams | None = None, seed: int = 0) -> tuple[np.ndarray, SegmentResult]:
    """Segment then blur the background; returns (masked image, segmentation result)."""
    params = params or GrabMaskParams()
    res = grabcut_segment(img, None, params, seed)
    return apply_mask_blur(img, res.mask, params.blur_sigma), res
