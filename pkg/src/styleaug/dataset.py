"""Data ingestion for nuclei segmentation.

Covers MoNuSeg-style inputs (RGB tiles plus Aperio XML polygon annotations or
0/255 mask PNGs) and a synthetic generator of textured ellipses whose texture
statistics can be shifted between the training and test splits.
"""

from __future__ import annotations

import json
import logging
import warnings
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from skimage.transform import resize as _sk_resize

from .errors import AnnotationParseError, DataError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".tif", ".tiff", ".png")
MIN_SIZE = 8


@dataclass
class Sample:
    """One image/mask pair.

    ``image`` is float32 H x W x 3 in [0, 1]; ``mask`` is uint8 H x W in {0, 1}.
    """

    image: np.ndarray
    mask: np.ndarray
    id: str
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError(
                f"{self.id}: mask shape {self.mask.shape} != image shape {self.image.shape[:2]}"
            )

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class Dataset:
    samples: list[Sample]
    split_tag: str = "train"

    def __post_init__(self):
        if self.split_tag not in SPLITS:
            raise ValueError(f"split_tag must be one of {SPLITS}, got {self.split_tag!r}")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique within a dataset")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]


Polygon = np.ndarray  # (n, 2) float array of (x, y) vertices, n >= 3


# --------------------------------------------------------------------------- #
# annotations

def parse_annotation_xml(xml_text: str) -> list[Polygon]:
    """Read every ``Region`` of an Aperio/MoNuSeg annotation file as a polygon.

    Regions with fewer than three vertices are dropped with a ``UserWarning``.
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        line = exc.position[0] if exc.position else None
        raise AnnotationParseError(f"malformed annotation XML: {exc}", line) from exc

    polygons = []
    for region in root.iter("Region"):
        verts = []
        for v in region.iter("Vertex"):
            try:
                verts.append((float(v.attrib["X"]), float(v.attrib["Y"])))
            except KeyError as exc:
                raise AnnotationParseError(f"Vertex without {exc.args[0]} attribute") from exc
        if len(verts) < 3:
            warnings.warn(
                f"skipping Region {region.attrib.get('Id', '?')} with {len(verts)} vertices",
                UserWarning,
                stacklevel=2,
            )
            continue
        polygons.append(np.asarray(verts, dtype=np.float64))
    return polygons


def _winding_numbers(poly: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    wn = np.zeros(np.broadcast(px, py).shape, dtype=np.int32)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        side = (bx - ax) * (py - ay) - (px - ax) * (by - ay)
        up = (ay <= py) & (by > py) & (side > 0)
        down = (ay > py) & (by <= py) & (side < 0)
        wn += up.astype(np.int32) - down.astype(np.int32)
    return wn


def rasterize_polygons(polygons: list[Polygon], width: int, height: int) -> np.ndarray:
    """Binary mask of the union of polygons.

    Pixel (i, j) is set when its center (j + 0.5, i + 0.5) has nonzero winding
    number with respect to at least one polygon.
    """
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    mask = np.zeros((height, width), dtype=np.uint8)
    for poly in polygons:
        poly = np.asarray(poly, dtype=np.float64)
        if poly.ndim != 2 or poly.shape[0] < 3 or poly.shape[1] != 2:
            raise ValueError("each polygon needs at least 3 (x, y) vertices")
        # only centers inside the bounding box can be covered
        c0 = max(int(np.floor(poly[:, 0].min() - 0.5)), 0)
        c1 = min(int(np.ceil(poly[:, 0].max() - 0.5)) + 1, width)
        r0 = max(int(np.floor(poly[:, 1].min() - 0.5)), 0)
        r1 = min(int(np.ceil(poly[:, 1].max() - 0.5)) + 1, height)
        if c0 >= c1 or r0 >= r1:
            continue
        px = np.arange(c0, c1, dtype=np.float64)[None, :] + 0.5
        py = np.arange(r0, r1, dtype=np.float64)[:, None] + 0.5
        inside = _winding_numbers(poly, px, py) != 0
        mask[r0:r1, c0:c1] |= inside.astype(np.uint8)
    return mask


# --------------------------------------------------------------------------- #
# sample-level transforms

def resize_sample(sample: Sample, target: int) -> Sample:
    """Resize to ``target`` x ``target``: bilinear image, nearest-neighbour mask."""
    if target < MIN_SIZE:
        raise ValueError(f"target must be >= {MIN_SIZE}, got {target}")
    if sample.image.shape[:2] == (target, target):
        return Sample(sample.image.copy(), sample.mask.copy(), sample.id)
    image = _sk_resize(
        sample.image, (target, target, 3), order=1, mode="edge",
        anti_aliasing=False, preserve_range=True,
    )
    mask = _sk_resize(
        sample.mask, (target, target), order=0, mode="edge",
        anti_aliasing=False, preserve_range=True,
    )
    return Sample(
        np.clip(image, 0.0, 1.0).astype(np.float32),
        (mask > 0).astype(np.uint8),
        sample.id,
    )


def split_train_val(dataset: Dataset, n_val: int, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random partition into (train, val) of sizes (N - n_val, n_val).

    Both parts keep the input's relative order.
    """
    n = len(dataset)
    if not 0 <= n_val <= n:
        raise ValueError(f"n_val must lie in [0, {n}], got {n_val}")
    rng = np.random.default_rng(seed)
    val_idx = set(rng.permutation(n)[:n_val].tolist())
    train = [s for i, s in enumerate(dataset.samples) if i not in val_idx]
    val = [s for i, s in enumerate(dataset.samples) if i in val_idx]
    return Dataset(train, "train"), Dataset(val, "val")


# --------------------------------------------------------------------------- #
# disk I/O

def _read_rgb(path: Path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable image file {path}: {exc}") from exc
    if min(arr.shape[:2]) < MIN_SIZE:
        raise DataError(f"{path}: image smaller than {MIN_SIZE}x{MIN_SIZE}")
    return arr


def _read_mask(path: Path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable mask file {path}: {exc}") from exc
    return (arr > 127).astype(np.uint8)


def load_dataset(root_path, split_tag: str = "train", target: int = 512) -> Dataset:
    """Load ``<root>/images`` with ``<root>/annotations/*.xml`` or ``<root>/masks/*.png``.

    XML annotations take precedence over mask PNGs when both exist for a stem.
    Samples are ordered by id (the file stem).
    """
    root = Path(root_path)
    image_dir = root / "images"
    paths = sorted(
        p for p in image_dir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES
    ) if image_dir.is_dir() else []
    if not paths:
        raise DataError(f"no samples found under {root}")

    missing = []
    samples = []
    for path in paths:
        stem = path.stem
        xml_path = root / "annotations" / f"{stem}.xml"
        mask_path = root / "masks" / f"{stem}.png"
        if not xml_path.exists() and not mask_path.exists():
            missing.append(stem)
            continue
        image = _read_rgb(path)
        h, w = image.shape[:2]
        if xml_path.exists():
            polygons = parse_annotation_xml(xml_path.read_text())
            mask = rasterize_polygons(polygons, w, h)
        else:
            mask = _read_mask(mask_path)
            if mask.shape != (h, w):
                raise DataError(f"{stem}: mask shape {mask.shape} != image shape {(h, w)}")
        samples.append(resize_sample(Sample(image, mask, stem), target))
    if missing:
        raise DataError(f"images without annotation or mask: {', '.join(missing)}")
    log.info("loaded %d %s samples from %s", len(samples), split_tag, root)
    return Dataset(samples, split_tag)


def write_dataset(dataset: Dataset, out_root) -> Path:
    """Write ``<out>/<split>/images/*.png`` and 0/255 ``masks/*.png``."""
    base = Path(out_root) / dataset.split_tag
    (base / "images").mkdir(parents=True, exist_ok=True)
    (base / "masks").mkdir(parents=True, exist_ok=True)
    for s in dataset:
        img = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
        PILImage.fromarray(img, "RGB").save(base / "images" / f"{s.id}.png")
        PILImage.fromarray(s.mask.astype(np.uint8) * 255, "L").save(base / "masks" / f"{s.id}.png")
    return base


# --------------------------------------------------------------------------- #
# synthetic texture-shift data

@dataclass(frozen=True)
class TextureBand:
    """Law for one region's texture: an oriented sinusoid plus uniform noise.

    ``frequency`` is in cycles per image side, ``orientation`` in radians.
    ``contrast`` is the sinusoid amplitude. The RGB base colour is ``tint``
    plus a per-image uniform offset of at most ``tint_jitter`` per channel.
    """

    frequency: tuple[float, float]
    orientation: tuple[float, float] = (0.0, np.pi)
    noise: float = 0.05
    contrast: tuple[float, float] = (0.15, 0.25)
    tint: tuple[float, float, float] = (0.5, 0.5, 0.5)
    tint_jitter: float = 0.0

    def validate(self, name: str):
        for label, (lo, hi) in (("frequency", self.frequency),
                                ("orientation", self.orientation),
                                ("contrast", self.contrast)):
            if not lo <= hi:
                raise ValueError(f"{name}.{label} range is empty: {(lo, hi)}")
        if self.frequency[0] <= 0:
            raise ValueError(f"{name}.frequency must be positive")
        if self.noise < 0 or self.tint_jitter < 0:
            raise ValueError(f"{name}.noise and tint_jitter must be >= 0")

    def overlaps(self, other: "TextureBand") -> bool:
        return not (self.frequency[1] < other.frequency[0] or other.frequency[1] < self.frequency[0])


def _band(d) -> TextureBand:
    if isinstance(d, TextureBand):
        return d
    return TextureBand(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 64
    n_train: int = 25
    n_val: int = 5
    n_test: int = 14
    shapes_per_image: tuple[int, int] = (3, 8)
    ellipse_radius_range: tuple[float, float] = (4.0, 10.0)
    # per-ellipse foreground strength; below 1 the interior fades toward the background
    visibility_range: tuple[float, float] = (1.0, 1.0)
    background_texture_band: TextureBand = TextureBand(
        frequency=(3.0, 6.0), contrast=(0.10, 0.20), tint=(0.80, 0.55, 0.70), noise=0.25)
    foreground_texture_band: TextureBand = TextureBand(
        frequency=(12.0, 16.0), contrast=(0.15, 0.25), tint=(0.45, 0.25, 0.55), noise=0.25)
    shifted_background_band: TextureBand = TextureBand(
        frequency=(8.0, 10.0), contrast=(0.10, 0.20), tint=(0.75, 0.70, 0.60))
    shifted_foreground_band: TextureBand = TextureBand(
        frequency=(20.0, 26.0), contrast=(0.15, 0.25), tint=(0.50, 0.45, 0.35))
    texture_shift: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes_per_image", tuple(self.shapes_per_image))
        object.__setattr__(self, "ellipse_radius_range", tuple(self.ellipse_radius_range))
        object.__setattr__(self, "visibility_range", tuple(self.visibility_range))
        for name in ("background_texture_band", "foreground_texture_band",
                     "shifted_background_band", "shifted_foreground_band"):
            object.__setattr__(self, name, _band(getattr(self, name)))
        self.validate()

    def validate(self):
        if self.image_size < MIN_SIZE:
            raise ValueError(f"image_size must be >= {MIN_SIZE}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("sample counts must be >= 0")
        lo, hi = self.shapes_per_image
        if not 0 <= lo <= hi:
            raise ValueError(f"shapes_per_image range is empty: {(lo, hi)}")
        rlo, rhi = self.ellipse_radius_range
        if not 0 < rlo <= rhi:
            raise ValueError(f"ellipse_radius_range is empty: {(rlo, rhi)}")
        vlo, vhi = self.visibility_range
        if not 0 <= vlo <= vhi <= 1:
            raise ValueError(f"visibility_range must satisfy 0 <= lo <= hi <= 1, got {(vlo, vhi)}")
        self.background_texture_band.validate("background_texture_band")
        self.foreground_texture_band.validate("foreground_texture_band")
        if self.texture_shift:
            self.shifted_background_band.validate("shifted_background_band")
            self.shifted_foreground_band.validate("shifted_foreground_band")
            train = (self.background_texture_band, self.foreground_texture_band)
            test = (self.shifted_background_band, self.shifted_foreground_band)
            if any(a.overlaps(b) for a in train for b in test):
                raise ValueError("texture_shift requires test frequency bands disjoint from train bands")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


@dataclass
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta: float
    visibility: float = 1.0


def _inside(e: Ellipse, size: int) -> np.ndarray:
    c = np.arange(size, dtype=np.float64) + 0.5
    dx, dy = c[None, :] - e.cx, c[:, None] - e.cy
    ct, st = np.cos(e.theta), np.sin(e.theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return (u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0


def ellipse_mask(ellipses: list[Ellipse], size: int) -> np.ndarray:
    """Union of ellipse interiors sampled at pixel centers (boundary counts as inside)."""
    mask = np.zeros((size, size), dtype=bool)
    for e in ellipses:
        mask |= _inside(e, size)
    return mask.astype(np.uint8)


def visibility_map(ellipses: list[Ellipse], size: int) -> np.ndarray:
    """Per-pixel foreground weight: the largest visibility of any covering ellipse."""
    vis = np.zeros((size, size))
    for e in ellipses:
        vis = np.where(_inside(e, size), np.maximum(vis, e.visibility), vis)
    return vis


def _draw_ellipses(spec: SyntheticSpec, rng: np.random.Generator) -> list[Ellipse]:
    lo, hi = spec.shapes_per_image
    n = int(rng.integers(lo, hi + 1))
    rlo, rhi = spec.ellipse_radius_range
    out = []
    for _ in range(n):
        a, b = rng.uniform(rlo, rhi, size=2)
        cx, cy = rng.uniform(0, spec.image_size, size=2)
        theta, vis = rng.uniform(0, np.pi), rng.uniform(*spec.visibility_range)
        out.append(Ellipse(float(cx), float(cy), float(a), float(b), float(theta), float(vis)))
    return out


def _texture(band: TextureBand, size: int, rng: np.random.Generator) -> np.ndarray:
    freq = rng.uniform(*band.frequency)
    theta = rng.uniform(*band.orientation)
    amp = rng.uniform(*band.contrast)
    phase = rng.uniform(0, 2 * np.pi)
    c = (np.arange(size, dtype=np.float64) + 0.5) / size
    x, y = c[None, :], c[:, None]
    wave = amp * np.sin(2 * np.pi * freq * (x * np.cos(theta) + y * np.sin(theta)) + phase)
    tint = np.asarray(band.tint) + rng.uniform(-band.tint_jitter, band.tint_jitter, size=3)
    noise = rng.uniform(-band.noise, band.noise, size=(size, size, 3))
    return tint[None, None, :] + wave[..., None] + noise


def _generate_split(spec, n, prefix, bg_band, fg_band, shape_rng, tex_rng) -> list[Sample]:
    samples = []
    for i in range(n):
        ellipses = _draw_ellipses(spec, shape_rng)
        mask = ellipse_mask(ellipses, spec.image_size)
        vis = visibility_map(ellipses, spec.image_size)[..., None]
        bg = _texture(bg_band, spec.image_size, tex_rng)
        fg = _texture(fg_band, spec.image_size, tex_rng)
        image = vis * fg + (1.0 - vis) * bg
        samples.append(Sample(
            np.clip(image, 0, 1).astype(np.float32), mask, f"{prefix}_{i:03d}",
            meta={"ellipses": [asdict(e) for e in ellipses]},
        ))
    return samples


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Build (train, val, test) datasets of textured ellipses.

    Shapes and textures come from independent streams, so the test split has
    the same shape law whether or not its textures are shifted.
    """
    spec.validate()
    shape_ss, tex_ss = np.random.SeedSequence(spec.seed).spawn(2)
    shape_rngs = [np.random.default_rng(s) for s in shape_ss.spawn(3)]
    tex_rngs = [np.random.default_rng(s) for s in tex_ss.spawn(3)]
    bg, fg = spec.background_texture_band, spec.foreground_texture_band
    test_bg, test_fg = (
        (spec.shifted_background_band, spec.shifted_foreground_band)
        if spec.texture_shift else (bg, fg)
    )
    train = _generate_split(spec, spec.n_train, "train", bg, fg, shape_rngs[0], tex_rngs[0])
    val = _generate_split(spec, spec.n_val, "val", bg, fg, shape_rngs[1], tex_rngs[1])
    test = _generate_split(spec, spec.n_test, "test", test_bg, test_fg, shape_rngs[2], tex_rngs[2])
    return Dataset(train, "train"), Dataset(val, "val"), Dataset(test, "test")


def write_synthetic(spec: SyntheticSpec, out_root) -> Path:
    out = Path(out_root)
    for ds in generate_synthetic(spec):
        write_dataset(ds, out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2))
    return out

