"""Synthetic scene rendering along cubic Bézier centerlines.

Ground-truth curves are the exact parameters used to place glyphs; nothing is
re-fitted after rasterization.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage
from shapely.geometry import Polygon

from .bezier import bezier_at, bezier_tangent, polygon_from_boundaries, sample_bezier

logger = logging.getLogger(__name__)


@dataclass
class TextInstance:
    center: np.ndarray  # (4, 2) control points, pixels
    top: np.ndarray
    bottom: np.ndarray
    transcription: str

    def __post_init__(self):
        if not self.transcription:
            raise ValueError("empty transcription")
        for name in ("center", "top", "bottom"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(4, 2)
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite {name} control points")
            setattr(self, name, arr)

    def polygon(self, n: int = 25) -> np.ndarray:
        return polygon_from_boundaries(sample_bezier(self.top, n), sample_bezier(self.bottom, n))

    def to_dict(self) -> dict:
        return {
            "transcription": self.transcription,
            "center": self.center.reshape(-1).tolist(),
            "top": self.top.reshape(-1).tolist(),
            "bottom": self.bottom.reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TextInstance":
        return cls(
            center=np.asarray(d["center"], dtype=np.float64).reshape(4, 2),
            top=np.asarray(d["top"], dtype=np.float64).reshape(4, 2),
            bottom=np.asarray(d["bottom"], dtype=np.float64).reshape(4, 2),
            transcription=d["transcription"],
        )


@dataclass
class SceneSample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    instances: list[TextInstance]
    skipped: int = 0
    ink: np.ndarray | None = None  # (H, W) glyph coverage before degradation


@dataclass
class SceneSpec:
    words: list[str]
    height: int = 64
    width: int = 128
    font_size: tuple[int, int] = (13, 16)
    rotation: tuple[float, float] = (-10.0, 10.0)  # degrees
    curvature: tuple[float, float] = (-0.12, 0.12)  # bend as a fraction of word length
    max_retries: int = 50
    clutter: int = 3
    blur: tuple[float, float] = (0.0, 0.0)
    noise: float = 0.02
    occlusion: float = 0.0  # per-instance probability of a covered glyph
    min_contrast: float = 0.45
    margin: float = 1.0


@lru_cache(maxsize=16)
def _font(size: int) -> ImageFont.FreeTypeFont:
    return ImageFont.load_default(size=size)


@lru_cache(maxsize=4096)
def _glyph(ch: str, size: int) -> tuple[np.ndarray, float]:
    font = _font(size)
    side = int(size * 2)
    canvas = Image.new("L", (side, side), 0)
    ImageDraw.Draw(canvas).text((side / 2, side / 2), ch, fill=255, font=font, anchor="mm")
    return np.asarray(canvas, dtype=np.float32) / 255.0, font.getlength(ch)


def _place_glyph(alpha: np.ndarray, ch: str, size: int, pos: np.ndarray, angle: float) -> None:
    patch, _ = _glyph(ch, size)
    c = patch.shape[0] / 2
    cos, sin = math.cos(angle), math.sin(angle)
    h, w = alpha.shape
    img = Image.fromarray((patch * 255).astype(np.uint8))
    px, py = float(pos[0]), float(pos[1])
    # continuous image coordinates -> glyph patch coordinates
    data = (cos, sin, -cos * px - sin * py + c, -sin, cos, sin * px - cos * py + c)
    warped = img.transform((w, h), Image.Transform.AFFINE, data, resample=Image.Resampling.BILINEAR)
    np.maximum(alpha, np.asarray(warped, dtype=np.float32) / 255.0, out=alpha)


def word_geometry(word: str, size: int, angle: float, bend: float, centre: np.ndarray):
    """Centerline and boundary control points for ``word`` at the given pose."""
    font = _font(size)
    ascent, descent = font.getmetrics()
    height = ascent + descent
    length = sum(_glyph(ch, size)[1] for ch in word)
    u = np.array([math.cos(angle), math.sin(angle)])
    n = np.array([math.sin(angle), -math.cos(angle)])  # image "up" for angle 0
    ctrl = np.stack([
        centre - u * length / 2,
        centre - u * length / 6 + n * bend * length,
        centre + u * length / 6 + n * bend * length,
        centre + u * length / 2,
    ])
    return ctrl, ctrl + n * height / 2, ctrl - n * height / 2, height


def _draw_word(alpha: np.ndarray, word: str, size: int, ctrl: np.ndarray) -> list[np.ndarray]:
    """Paint glyphs at arc-length positions along ``ctrl``; returns glyph centres."""
    t = np.linspace(0, 1, 256)
    pts = bezier_at(ctrl, t)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    adv = np.array([_glyph(ch, size)[1] for ch in word])
    scale = arc[-1] / adv.sum()
    mids = (np.cumsum(adv) - adv / 2) * scale
    centres = []
    for ch, s in zip(word, mids):
        tc = float(np.interp(s, arc, t))
        p = bezier_at(ctrl, np.array(tc))
        d = bezier_tangent(ctrl, np.array(tc))
        _place_glyph(alpha, ch, size, p, math.atan2(d[1], d[0]))
        centres.append(p)
    return centres


def _background(rng: np.random.Generator, spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    h, w = spec.height, spec.width
    base = rng.uniform(0.0, 1.0, size=3)
    img = Image.new("RGB", (w, h), tuple(int(v * 255) for v in base))
    draw = ImageDraw.Draw(img)
    for _ in range(spec.clutter):
        col = np.clip(base + rng.normal(0, 0.08, size=3), 0, 1)
        x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
        x1, y1 = x0 + rng.uniform(-w / 2, w / 2), y0 + rng.uniform(-h / 2, h / 2)
        fill = tuple(int(v * 255) for v in col)
        if rng.random() < 0.5:
            draw.rectangle([min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1)], fill=fill)
        else:
            draw.line([x0, y0, x1, y1], fill=fill, width=int(rng.integers(1, 4)))
    return np.asarray(img, dtype=np.float32) / 255.0, base


def _text_colour(rng: np.random.Generator, base: np.ndarray, min_contrast: float) -> np.ndarray:
    lum = base.mean()
    for _ in range(100):
        col = rng.uniform(0, 1, size=3)
        if abs(col.mean() - lum) >= min_contrast:
            return col
    return np.full(3, 0.0 if lum > 0.5 else 1.0)


def render_scene(spec: SceneSpec, seed: int | np.random.Generator = 0) -> SceneSample:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h, w = spec.height, spec.width
    image, base = _background(rng, spec)
    alpha = np.zeros((h, w), dtype=np.float32)
    occluders: list[tuple[np.ndarray, float]] = []
    placed: list[Polygon] = []
    instances: list[TextInstance] = []
    skipped = 0

    for word in spec.words:
        for _ in range(spec.max_retries):
            size = int(rng.integers(spec.font_size[0], spec.font_size[1] + 1))
            angle = math.radians(rng.uniform(*spec.rotation))
            bend = rng.uniform(*spec.curvature)
            centre = rng.uniform([0, 0], [w, h])
            ctrl, top, bottom, height = word_geometry(word, size, angle, bend, centre)
            poly_pts = polygon_from_boundaries(sample_bezier(top, 25), sample_bezier(bottom, 25))
            m = spec.margin
            if (poly_pts < m).any() or (poly_pts[:, 0] > w - 1 - m).any() or (poly_pts[:, 1] > h - 1 - m).any():
                continue
            poly = Polygon(poly_pts)
            if not poly.is_valid or any(poly.buffer(2.0).intersects(p) for p in placed):
                continue
            placed.append(poly)
            centres = _draw_word(alpha, word, size, ctrl)
            if spec.occlusion > 0 and rng.random() < spec.occlusion:
                occluders.append((centres[int(rng.integers(len(centres)))], height))
            instances.append(TextInstance(ctrl, top, bottom, word))
            break
        else:
            skipped += 1

    ink = alpha.copy()
    colour = _text_colour(rng, base, spec.min_contrast)
    image = image * (1 - alpha[..., None]) + colour * alpha[..., None]
    if occluders:
        img = Image.fromarray((image * 255).astype(np.uint8))
        draw = ImageDraw.Draw(img)
        for centre, height in occluders:
            half = height * rng.uniform(0.3, 0.45)
            fill = tuple(int(v * 255) for v in np.clip(base + rng.normal(0, 0.05, 3), 0, 1))
            draw.rectangle([centre[0] - half, centre[1] - half, centre[0] + half, centre[1] + half], fill=fill)
        image = np.asarray(img, dtype=np.float32) / 255.0
    sigma = rng.uniform(*spec.blur)
    if sigma > 0:
        image = ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0))
    if spec.noise > 0:
        image = image + rng.normal(0, spec.noise, size=image.shape)
    image = np.round(np.clip(image, 0, 1) * 255) / 255.0
    if skipped:
        logger.warning("skipped %d word(s) that did not fit", skipped)
    return SceneSample(image.astype(np.float32), instances, skipped, ink)


def save_sample(sample: SceneSample, directory: str | Path, name: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(sample.image * 255).astype(np.uint8)).save(directory / f"{name}.png")
    meta = {
        "image": f"{name}.png",
        "height": int(sample.image.shape[0]),
        "width": int(sample.image.shape[1]),
        "instances": [inst.to_dict() for inst in sample.instances],
    }
    (directory / f"{name}.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")


def load_sample(directory: str | Path, name: str) -> SceneSample:
    directory = Path(directory)
    meta = json.loads((directory / f"{name}.json").read_text(encoding="utf-8"))
    image = np.asarray(Image.open(directory / meta["image"]).convert("RGB"), dtype=np.float32) / 255.0
    return SceneSample(image, [TextInstance.from_dict(d) for d in meta["instances"]])


def load_annotations(path: str | Path) -> list[TextInstance]:
    meta = json.loads(Path(path).read_text(encoding="utf-8"))
    return [TextInstance.from_dict(d) for d in meta["instances"]]


def render_suite(
    words: list[str],
    count: int,
    seed: int = 0,
    words_per_scene: tuple[int, int] = (1, 2),
    **spec_kwargs,
) -> list[SceneSample]:
    """``count`` scenes, each showing a few distinct words drawn from ``words``."""
    if not words:
        raise ValueError("no words to render")
    lo, hi = words_per_scene
    scenes = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        n = min(int(rng.integers(lo, hi + 1)), len(words))
        picked = [str(w) for w in rng.choice(words, size=n, replace=False)]
        scenes.append(render_scene(SceneSpec(picked, **spec_kwargs), rng))
    return scenes
