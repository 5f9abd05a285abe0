"""Procedural location-biased smoke scenes with exact box annotations.

A scene is sky above a horizon line and textured ground below it.  Smoke
plumes are stacked translucent ellipses that widen as they rise, and their
boxes are always centered below the horizon.  Source and target domains
render the same geometry with different contrast, haze and hue, which gives
a controlled domain gap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from lada.protocol import BBox, ImageRecord, Manifest, SOURCE, TARGET, parse_scene_name

SMOKE_COLOR = np.array([0.86, 0.86, 0.84])
SKY_TOP = np.array([0.30, 0.48, 0.80])
SKY_HORIZON = np.array([0.62, 0.72, 0.88])
GROUND = np.array([0.36, 0.38, 0.24])
ALPHA_CUTOFF = 0.02


@dataclass(frozen=True)
class DomainStyle:
    contrast: float = 1.0
    haze: float = 0.0
    hue_shift: float = 0.0  # rotation about the gray axis, radians
    noise: float = 0.02


SOURCE_STYLE = DomainStyle()
TARGET_STYLE = DomainStyle(contrast=0.6, haze=0.3, hue_shift=1.2)

SOURCE_CAMERAS = ("20240601_SYNTH_src-n-mobo-c", "20240602_SYNTH_src-e-iqeye", "20240603_SYNTH_src-w-mobo")
TARGET_CAMERAS = ("20240701_SYNTH_tgt-s-mobo-c", "20240702_SYNTH_tgt-e-mobo-m", "20240703_SYNTH_tgt-n-mobo-c")


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    horizon_fraction: float = 0.35
    expansion: float = 0.6
    base_width: tuple[float, float] = (3.0, 7.0)
    plume_height: tuple[float, float] = (12.0, 28.0)
    foreground_prob: float = 0.5
    texture_seed: int = 0
    domain: str = SOURCE
    style: DomainStyle = SOURCE_STYLE
    # Position-labeled variant: per-class (lo, hi) fractions of the image
    # height for the box center; ``None`` gives single-class smoke.
    class_bands: tuple[tuple[float, float], ...] | None = None
    flat_background: bool = False
    cameras: tuple[str, ...] = field(default=SOURCE_CAMERAS)

    def __post_init__(self):
        if not 0 <= self.horizon_fraction < 1:
            raise ValueError("horizon_fraction must be in [0, 1)")

    @property
    def horizon_y(self) -> float:
        return self.horizon_fraction * self.height


def source_spec(**kw) -> SceneSpec:
    return SceneSpec(domain=SOURCE, style=SOURCE_STYLE, cameras=SOURCE_CAMERAS, **kw)


def target_spec(**kw) -> SceneSpec:
    return SceneSpec(domain=TARGET, style=TARGET_STYLE, cameras=TARGET_CAMERAS, **kw)


def position_spec(**kw) -> SceneSpec:
    """Two classes of identical plumes, told apart only by their vertical band."""
    kw.setdefault("class_bands", ((0.2, 0.4), (0.6, 0.8)))
    return SceneSpec(horizon_fraction=0.0, foreground_prob=1.0, base_width=(5.0, 5.0),
                     plume_height=(16.0, 16.0), flat_background=True, **kw)


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    if spec.flat_background:
        return np.broadcast_to(np.array([0.45, 0.5, 0.45]), (h, w, 3)).copy()
    img = np.empty((h, w, 3))
    tex = np.random.default_rng([spec.texture_seed, int(rng.integers(1 << 30))])
    ys = np.arange(h)[:, None]
    # gently undulating skyline a few pixels around the horizon line
    phase = tex.uniform(0, 2 * math.pi)
    skyline = spec.horizon_y - 3.0 * (1 + np.sin(np.arange(w) * 2 * math.pi / w * 1.5 + phase)) / 2
    t = np.clip(ys / max(spec.horizon_y, 1.0), 0, 1)[..., None]
    sky = SKY_TOP * (1 - t) + SKY_HORIZON * t
    coarse = tex.normal(0, 1, (h // 4 + 2, w // 4 + 2))
    noise = np.kron(coarse, np.ones((4, 4)))[:h, :w]
    ground = GROUND + 0.05 * noise[..., None] + 0.04 * (ys / h)[..., None]
    is_sky = ys < skyline[None, :]
    img[:] = np.where(is_sky[..., None], np.broadcast_to(sky, (h, w, 3)), ground)
    return img


def _plume_alpha(spec: SceneSpec, rng: np.random.Generator, center_band=None):
    """Alpha mask of one plume and its tight box, or ``None`` if it does not fit."""
    h, w = spec.height, spec.width
    base_w = rng.uniform(*spec.base_width)
    ph = rng.uniform(*spec.plume_height)
    top_w = base_w + spec.expansion * ph
    half = top_w / 2 + 1
    if center_band is None:
        # box center (base_y - ph/2) must sit at or below the horizon
        lo, hi = spec.horizon_y + ph / 2 + 2.0, h - 1.0
    else:
        lo = max(center_band[0] * h + ph / 2, ph + 1)
        hi = min(center_band[1] * h + ph / 2, h - 1.0)
    if hi <= lo or 2 * half >= w:
        return None
    base_y = rng.uniform(lo, hi)
    base_x = rng.uniform(half, w - half)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    transparency = np.ones((h, w))
    steps = max(int(ph / 2), 4)
    for k in range(steps):
        t = k / (steps - 1)
        cy = base_y - t * ph
        rx = (base_w + spec.expansion * t * ph) / 2
        ry = max(1.5 * ph / steps, 1.5)
        inside = ((xx - base_x) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        transparency *= np.where(inside, 1 - 0.45 * (1 - 0.4 * t), 1.0)
    alpha = 1 - transparency
    ys, xs = np.nonzero(alpha > ALPHA_CUTOFF)
    if len(ys) == 0:
        return None
    return alpha, (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


def _apply_style(img: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    mean = img.mean(axis=(0, 1), keepdims=True)
    img = mean + style.contrast * (img - mean)
    img = (1 - style.haze) * img + style.haze * 0.8
    if style.hue_shift:
        # Rodrigues rotation about the (1,1,1) axis keeps gray levels fixed
        k = np.ones(3) / math.sqrt(3)
        kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        a = style.hue_shift
        rot = np.eye(3) + math.sin(a) * kx + (1 - math.cos(a)) * kx @ kx
        img = img @ rot.T
    img = img + rng.normal(0, style.noise, img.shape)
    return np.clip(img, 0, 1)


def generate_scene(spec: SceneSpec, seed: int, index: int = 0) -> tuple[np.ndarray, ImageRecord]:
    """Render one image (``uint8``, H x W x 3) and its annotation record."""
    rng = np.random.default_rng([seed, index])
    img = _background(spec, rng)
    boxes = []
    if rng.random() < spec.foreground_prob:
        if spec.class_bands is None:
            class_id, band = 0, None
        else:
            class_id = int(rng.integers(len(spec.class_bands)))
            band = spec.class_bands[class_id]
        for _ in range(20):
            plume = _plume_alpha(spec, rng, band)
            if plume is not None and (band is not None or (plume[1][1] + plume[1][3]) / 2 >= spec.horizon_y):
                break
        else:
            raise ValueError("plume size does not fit the scene geometry")
        alpha, (x0, y0, x1, y1) = plume
        img = img * (1 - alpha[..., None]) + SMOKE_COLOR * alpha[..., None]
        boxes.append(BBox.from_corners(class_id, float(x0), float(y0), float(x1), float(y1)))
    img = _apply_style(img, spec.style, rng)
    scene = parse_scene_name(spec.cameras[int(rng.integers(len(spec.cameras)))])
    record = ImageRecord(
        image_id=f"{spec.domain}_{seed}_{index:05d}",
        scene=scene,
        width=spec.width,
        height=spec.height,
        boxes=tuple(boxes),
        domain=spec.domain,
    )
    return (img * 255).round().astype(np.uint8), record


def generate_dataset(spec: SceneSpec, n: int, seed: int) -> tuple[Manifest, dict[str, np.ndarray]]:
    images, records = {}, []
    for i in range(n):
        img, rec = generate_scene(spec, seed, i)
        images[rec.image_id] = img
        records.append(rec)
    return Manifest(records, f"synth-{spec.domain}", seed), images


def write_images(images: dict[str, np.ndarray], directory: str | Path) -> None:
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for image_id, arr in images.items():
        Image.fromarray(arr).save(directory / f"{image_id}.png")


def read_images(image_ids, directory: str | Path) -> dict[str, np.ndarray]:
    from PIL import Image

    directory = Path(directory)
    return {i: np.asarray(Image.open(directory / f"{i}.png").convert("RGB")) for i in image_ids}


def with_style(spec: SceneSpec, **changes) -> SceneSpec:
    return replace(spec, style=replace(spec.style, **changes))
