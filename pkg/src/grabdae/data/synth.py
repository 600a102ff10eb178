"""Synthetic two-domain shape benchmark.

Source images show one anti-aliased shape on a plain dark background;
target images show the same shape classes on a bright, cluttered
background. Ground-truth foreground masks are written next to every target
image as ``<name>_mask.pgm``.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import encode_pgm, encode_ppm

SHAPES = ("circle", "square", "triangle")
SUPERSAMPLE = 4
MAX_DRAWS = 100


@dataclass
class SynthSpec:
    classes: tuple[str, ...] = SHAPES
    side: int = 32
    per_class: int = 20  # images per class per domain
    seed: int = 0
    area: tuple[float, float] = (0.10, 0.16)  # shape area as a fraction of the image
    jitter: float = 1.5  # max centre offset in pixels
    area_bounds: tuple[float, float] = (0.07, 0.20)  # accepted foreground fraction per image
    # source domain
    source_bg_value: tuple[float, float] = (0.0, 0.25)
    source_fg_value: tuple[float, float] = (0.55, 1.0)
    # target domain
    target_bg_value: tuple[float, float] = (0.35, 0.6)
    target_fg_value: tuple[float, float] = (0.85, 1.0)
    target_fg_saturation: tuple[float, float] = (0.3, 0.8)
    clutter_items: tuple[int, int] = (8, 14)
    clutter_size: tuple[float, float] = (2.0, 7.0)
    clutter_saturation: tuple[float, float] = (0.0, 0.3)
    clutter_noise: float = 0.03

    def __post_init__(self):
        self.classes = tuple(self.classes)
        unknown = set(self.classes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shape classes {sorted(unknown)}; choose from {SHAPES}")
        if self.per_class < 1 or self.side < 8:
            raise ValueError("per_class must be >= 1 and side >= 8")
        for name in ("source_bg_value", "source_fg_value", "target_bg_value", "target_fg_value",
                     "target_fg_saturation", "clutter_saturation", "area", "area_bounds"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"{name} must be an ordered range inside [0, 1], got {(lo, hi)}")


def circumradius_for_area(kind: str, area_px: float) -> float:
    """Circumradius giving ``area_px`` pixels of area; every class shares one area law."""
    if kind == "circle":
        return math.sqrt(area_px / math.pi)
    n = 4 if kind == "square" else 3
    return math.sqrt(area_px / (0.5 * n * math.sin(2 * math.pi / n)))


def _shape_coverage(kind: str, side: int, cx: float, cy: float, radius: float, angle: float) -> np.ndarray:
    """Fraction of each pixel covered by the shape, by 4x4 supersampling."""
    s = SUPERSAMPLE
    coords = (np.arange(side * s) + 0.5) / s
    X, Y = np.meshgrid(coords, coords)
    dx, dy = X - cx, Y - cy
    if kind == "circle":
        inside = dx * dx + dy * dy <= radius * radius
    else:
        n = 4 if kind == "square" else 3
        # regular polygon: inside all half-planes at the apothem distance
        apothem = radius * math.cos(math.pi / n)
        inside = np.ones_like(dx, dtype=bool)
        for k in range(n):
            theta = angle + 2 * math.pi * (k + 0.5) / n
            inside &= dx * math.cos(theta) + dy * math.sin(theta) <= apothem
    return inside.reshape(side, s, side, s).mean(axis=(1, 3))


def _hsv(rng: np.random.Generator, sat: tuple[float, float], val: tuple[float, float]) -> np.ndarray:
    h = rng.uniform(0.0, 1.0)
    return np.array(colorsys.hsv_to_rgb(h, rng.uniform(*sat), rng.uniform(*val)))


def _clutter_background(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Flat base colour covered by small distractor shapes drawn evenly from every shape kind."""
    side = spec.side
    img = np.broadcast_to(_hsv(rng, spec.clutter_saturation, spec.target_bg_value), (side, side, 3)).copy()
    for _ in range(rng.integers(spec.clutter_items[0], spec.clutter_items[1] + 1)):
        color = _hsv(rng, spec.clutter_saturation, spec.target_bg_value)
        kind = SHAPES[rng.integers(len(SHAPES))]
        cx, cy = rng.uniform(0, side, size=2)
        cov = _shape_coverage(kind, side, cx, cy, rng.uniform(*spec.clutter_size), rng.uniform(0, 2 * math.pi))
        img = img * (1.0 - cov[..., None]) + color * cov[..., None]
    if spec.clutter_noise:
        img += rng.normal(0.0, spec.clutter_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def render_sample(spec: SynthSpec, kind: str, domain: str, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (uint8 image, bool foreground mask) pair."""
    side = spec.side
    lo, hi = spec.area_bounds
    for _ in range(MAX_DRAWS):
        radius = circumradius_for_area(kind, rng.uniform(*spec.area) * side * side)
        cx, cy = side / 2 + rng.uniform(-spec.jitter, spec.jitter, size=2)
        angle = rng.uniform(0, 2 * math.pi)
        cov = _shape_coverage(kind, side, cx, cy, radius, angle)
        if lo <= (cov >= 0.5).mean() <= hi:
            break
    else:
        raise ValueError(f"could not place a {kind} within area_bounds {spec.area_bounds} in {MAX_DRAWS} draws")
    if domain == "source":
        v = rng.uniform(*spec.source_bg_value)
        bg = np.broadcast_to(_hsv(rng, (0.0, 0.6), (v, v)), (side, side, 3))
        fg = _hsv(rng, (0.5, 1.0), spec.source_fg_value)
    elif domain == "target":
        bg = _clutter_background(spec, rng)
        fg = _hsv(rng, spec.target_fg_saturation, spec.target_fg_value)
    else:
        raise ValueError(f"unknown domain {domain!r}")
    img = bg * (1.0 - cov[..., None]) + fg * cov[..., None]
    img8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return img8, cov >= 0.5


def synth_generate(spec: SynthSpec, out_dir) -> tuple[Path, Path]:
    """Write ``source/`` and ``target/`` class trees under ``out_dir``."""
    out = Path(out_dir)
    roots = {}
    for d_index, domain in enumerate(("source", "target")):
        root = out / domain
        roots[domain] = root
        for c_index, kind in enumerate(spec.classes):
            cdir = root / kind
            try:
                cdir.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise OSError(f"cannot create {cdir}: {exc}") from exc
            rng = np.random.default_rng([spec.seed, d_index, c_index])
            for i in range(spec.per_class):
                img, mask = render_sample(spec, kind, domain, rng)
                stem = f"{kind}_{i:04d}"
                path = cdir / f"{stem}.ppm"
                try:
                    path.write_bytes(encode_ppm(img))
                    if domain == "target":
                        (cdir / f"{stem}_mask.pgm").write_bytes(encode_pgm(mask))
                except OSError as exc:
                    raise OSError(f"cannot write {path}: {exc}") from exc
    return roots["source"], roots["target"]


def mask_path_for(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + "_mask.pgm")
