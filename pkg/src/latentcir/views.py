"""World-view generation: cropped source views, mask blocks, synthetic data.

Training units are triplets <source view, action, target view> built from
plain image-caption pairs: the source view is a random crop of the image,
the target view is the image itself, and the caption acts as the action
that turns one into the other.

Crop geometry: a draw of (scale s, aspect r) fixes the crop extent as

    W_c = round(sqrt(s * r * W * H)),   H_c = round(sqrt(s * W * H / r))

so the crop covers a fraction ~s of the image area at aspect ratio ~r,
with round-half-up to whole pixels. The top-left corner is uniform over
all in-bounds placements.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "CropConfig",
    "CropSpec",
    "RawPair",
    "ViewTriplet",
    "MaskBlock",
    "CropRejectionError",
    "sample_crop_spec",
    "make_triplet",
    "sample_mask_block",
    "full_grid_block",
    "synth_dataset",
    "write_dataset",
    "load_manifest",
    "load_pair",
    "resize_bilinear",
    "SYNTH_VOCABULARY",
]

MIN_CROP_SIDE = 8
MAX_REDRAWS = 10


class CropRejectionError(ValueError):
    """A drawn crop cannot be realized on the given image."""


def round_half_up(x: float) -> int:
    # np.round is round-half-even; the geometry here wants 0.5 -> 1
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class CropConfig:
    scale: tuple[float, float] = (0.2, 0.25)
    aspect: tuple[float, float] = (0.75, 1.5)

    def __post_init__(self):
        for name, (lo, hi) in (("scale", self.scale), ("aspect", self.aspect)):
            if not (0.0 < lo <= hi):
                raise ValueError(f"degenerate {name} range ({lo}, {hi})")
        if self.scale[1] > 1.0:
            raise ValueError("crop scale must not exceed 1.0")


@dataclass(frozen=True)
class CropSpec:
    x: int
    y: int
    scale: float
    aspect: float
    width: int
    height: int


@dataclass(frozen=True)
class RawPair:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    caption: str
    id: str

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"pair {self.id}: image must be (H, W, 3)")
        if h < 32 or w < 32:
            raise ValueError(f"pair {self.id}: image must be at least 32x32, got {h}x{w}")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError(f"pair {self.id}: pixel values must lie in [0, 1]")
        if not self.caption:
            raise ValueError(f"pair {self.id}: caption is empty")


@dataclass(frozen=True)
class ViewTriplet:
    source_image: np.ndarray
    target_image: np.ndarray
    action_text: str
    crop_spec: CropSpec
    id: str


@dataclass(frozen=True)
class MaskBlock:
    """Rectangular set of patch-grid positions, row-major flat indices."""

    indices: tuple[int, ...]
    grid: int
    block_scale: float
    block_aspect: float

    def __post_init__(self):
        if len(self.indices) < 1:
            raise ValueError("mask block is empty")
        for i in self.indices:
            if not 0 <= i < self.grid * self.grid:
                raise ValueError(f"mask index {i} outside {self.grid}x{self.grid} grid")

    def __len__(self) -> int:
        return len(self.indices)


def _crop_extent(scale: float, aspect: float, width: int, height: int) -> tuple[int, int]:
    area = scale * width * height
    wc = round_half_up(math.sqrt(area * aspect))
    hc = round_half_up(math.sqrt(area / aspect))
    return wc, hc


def sample_crop_spec(
    width: int,
    height: int,
    cfg: CropConfig,
    rng: np.random.Generator,
) -> CropSpec:
    """Draw a crop spec with extent from (scale, aspect) and uniform placement.

    Draws failing the bounds check are redrawn up to MAX_REDRAWS times; the
    final fallback keeps the drawn scale (the quantity that matters most) and
    clamps the aspect ratio to the nearest realizable value, which pulls it
    toward the image's own aspect.
    """
    if width < 32 or height < 32:
        raise CropRejectionError(f"image too small to crop: {width}x{height}")
    scale = aspect = None
    for _ in range(MAX_REDRAWS + 1):
        scale = rng.uniform(*cfg.scale)
        aspect = rng.uniform(*cfg.aspect)
        wc, hc = _crop_extent(scale, aspect, width, height)
        if wc == 0:
            raise CropRejectionError(f"crop width rounds to 0 at scale={scale:.4g}")
        if hc == 0:
            raise CropRejectionError(f"crop height rounds to 0 at scale={scale:.4g}")
        if MIN_CROP_SIDE <= wc <= width and MIN_CROP_SIDE <= hc <= height:
            break
    else:
        # keep scale, clamp aspect into the interval where both sides fit
        lo = scale * width / height
        hi = width / (scale * height)
        aspect = min(max(aspect, lo), hi)
        wc, hc = _crop_extent(scale, aspect, width, height)
        wc = min(max(wc, min(MIN_CROP_SIDE, width)), width)
        hc = min(max(hc, min(MIN_CROP_SIDE, height)), height)
    x = int(rng.integers(0, width - wc + 1))
    y = int(rng.integers(0, height - hc + 1))
    return CropSpec(x=x, y=y, scale=float(scale), aspect=float(aspect), width=wc, height=hc)


def identity_crop_spec(width: int, height: int) -> CropSpec:
    return CropSpec(x=0, y=0, scale=1.0, aspect=width / height, width=width, height=height)


def make_triplet(
    pair: RawPair,
    cfg: CropConfig,
    rng: np.random.Generator,
    identity_crop: bool = False,
    mask_source: bool = False,
) -> ViewTriplet:
    """Build <source view, action, target view> from one image-caption pair.

    ``identity_crop`` keeps the full image as the source view. ``mask_source``
    corrupts by zeroing the sampled rectangle instead of cropping to it; the
    source then keeps the full image extent and the crop spec records the
    zeroed region.
    """
    h, w = pair.image.shape[:2]
    if identity_crop:
        spec = identity_crop_spec(w, h)
        source = pair.image.copy()
    else:
        spec = sample_crop_spec(w, h, cfg, rng)
        if mask_source:
            source = pair.image.copy()
            source[spec.y : spec.y + spec.height, spec.x : spec.x + spec.width] = 0.0
        else:
            source = pair.image[
                spec.y : spec.y + spec.height, spec.x : spec.x + spec.width
            ].copy()
    return ViewTriplet(
        source_image=source,
        target_image=pair.image,
        action_text=pair.caption,
        crop_spec=spec,
        id=pair.id,
    )


def sample_mask_block(
    grid: int,
    cfg: CropConfig,
    rng: np.random.Generator,
    entire: bool = False,
) -> MaskBlock:
    """Sample a rectangular block of patch positions on a grid x grid lattice.

    Block extent follows the crop geometry at patch resolution. ``entire``
    selects every position (the whole-image-prediction variant); otherwise
    the block is always a strict subset of the grid.
    """
    if grid < 2:
        raise ValueError(f"grid side must be >= 2, got {grid}")
    if entire:
        return MaskBlock(
            indices=tuple(range(grid * grid)), grid=grid, block_scale=1.0, block_aspect=1.0
        )
    scale = rng.uniform(*cfg.scale)
    aspect = rng.uniform(*cfg.aspect)
    bw = min(grid, max(1, round_half_up(math.sqrt(scale * aspect) * grid)))
    bh = min(grid, max(1, round_half_up(math.sqrt(scale / aspect) * grid)))
    if bw == grid and bh == grid:
        bh = grid - 1  # full-grid blocks only through the `entire` switch
    col = int(rng.integers(0, grid - bw + 1))
    row = int(rng.integers(0, grid - bh + 1))
    indices = tuple(
        r * grid + c for r in range(row, row + bh) for c in range(col, col + bw)
    )
    return MaskBlock(indices=indices, grid=grid, block_scale=float(scale), block_aspect=float(aspect))


def full_grid_block(grid: int) -> MaskBlock:
    return MaskBlock(
        indices=tuple(range(grid * grid)), grid=grid, block_scale=1.0, block_aspect=1.0
    )


# ---------------------------------------------------------------------------
# synthetic corpus

_SHAPES = ("circle", "square", "triangle", "cross")
# palette values stay inside [0.30, 0.70] so the additive speckle and tint
# below never clip (clipping would erase the per-image variation)
_COLORS = {
    "red": (0.70, 0.30, 0.30),
    "green": (0.30, 0.65, 0.33),
    "blue": (0.30, 0.35, 0.70),
    "yellow": (0.70, 0.68, 0.30),
    "purple": (0.58, 0.30, 0.68),
    "orange": (0.70, 0.50, 0.30),
}
_BACKGROUNDS = {
    "white": (0.70, 0.70, 0.70),
    "black": (0.30, 0.30, 0.30),
    "gray": (0.50, 0.50, 0.50),
    "teal": (0.30, 0.62, 0.62),
    "olive": (0.55, 0.58, 0.30),
}
_SIZES = {"small": 14, "large": 24}

SYNTH_VOCABULARY = frozenset(
    {"a", "on", "field"}
    | set(_SHAPES)
    | set(_COLORS)
    | set(_BACKGROUNDS)
    | set(_SIZES)
)

# per-image speckle and global tint; without them, flat-color scenes collapse
# to near-identical encoder features and retrieval among them is degenerate
_TEXTURE_AMPLITUDE = 0.12
_TINT_AMPLITUDE = 0.15


def _render_scene(
    shape: str,
    color: str,
    bg: str,
    size: str,
    res: int = 64,
    center: tuple[int, int] | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    img = np.empty((res, res, 3), dtype=np.float64)
    img[:] = _BACKGROUNDS[bg]
    yy, xx = np.mgrid[0:res, 0:res]
    cx, cy = center if center is not None else (res // 2, res // 2)
    r = _SIZES[size]
    if shape == "circle":
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    elif shape == "square":
        mask = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    elif shape == "triangle":
        mask = (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - (cy - r)) / 2)
    else:  # cross
        arm = max(2, r // 3)
        mask = ((np.abs(xx - cx) <= arm) | (np.abs(yy - cy) <= arm)) & (
            (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
        )
    img[mask] = _COLORS[color]
    if noise is not None:
        img = np.clip(img + noise, 0.0, 1.0)
    return img


def synth_dataset(n: int, rng: np.random.Generator, resolution: int = 64) -> list[RawPair]:
    """Generate ``n`` distinct procedural pairs (shape scenes with captions).

    Scene parameterizations are drawn without replacement so captions are
    unique by construction. Shape placement and background speckle vary per
    image (incidental content the caption does not describe); everything is
    a pure function of the generator state.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    combos = [
        (shape, color, bg, size)
        for shape in _SHAPES
        for color in _COLORS
        for bg in _BACKGROUNDS
        for size in _SIZES
    ]
    if n > len(combos):
        raise ValueError(f"at most {len(combos)} distinct scenes available, requested {n}")
    order = rng.permutation(len(combos))[:n]
    margin = max(_SIZES.values()) + 2
    pairs = []
    for k, idx in enumerate(order):
        shape, color, bg, size = combos[idx]
        caption = f"a {size} {color} {shape} on a {bg} field"
        center = tuple(int(c) for c in rng.integers(margin, resolution - margin, size=2))
        noise = rng.uniform(
            -_TEXTURE_AMPLITUDE, _TEXTURE_AMPLITUDE, (resolution, resolution, 3)
        ) + rng.uniform(-_TINT_AMPLITUDE, _TINT_AMPLITUDE, 3)
        pairs.append(
            RawPair(
                image=_render_scene(
                    shape, color, bg, size, res=resolution, center=center, noise=noise
                ),
                caption=caption,
                id=f"synth-{k:04d}",
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# manifest I/O: JSON-lines entries {"id", "image", "caption"}, images as PNG


def write_dataset(pairs: list[RawPair], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with manifest.open("w") as fh:
        for pair in pairs:
            rel = f"images/{pair.id}.png"
            arr = np.clip(np.rint(pair.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(out / rel)
            fh.write(json.dumps({"id": pair.id, "image": rel, "caption": pair.caption}) + "\n")
    return manifest


def load_manifest(manifest_path: str | Path) -> list[dict]:
    path = Path(manifest_path)
    entries = []
    with path.open() as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            for key in ("id", "image", "caption"):
                if key not in rec:
                    raise ValueError(f"{path}:{line_no}: manifest entry missing '{key}'")
            entries.append(rec)
    return entries


def load_pair(entry: dict, manifest_path: str | Path) -> RawPair:
    img_path = Path(manifest_path).parent / entry["image"]
    try:
        with Image.open(img_path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read image {img_path}: {exc}") from exc
    return RawPair(image=arr, caption=entry["caption"], id=entry["id"])


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Deterministic bilinear resize of an (H, W, C) float array."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bot = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy
