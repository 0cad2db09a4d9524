"""Synthetic binary-segmentation datasets on disk.

Layout::

    <root>/images/<id>.ppm    P6, 8-bit RGB
    <root>/masks/<id>.pgm     P5, 8-bit, values {0, 255}
    <root>/splits.txt         "<id>\t<train|val|test>" per line

Three generating styles stand in for the nuclei, skin-lesion and endoscopic
instrument datasets: scattered ellipses, one smooth star-convex blob, and one
or two long rounded bars. Each style has its own jittered background and
foreground palette, so an object's appearance is consistent across a dataset.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

STYLES = ("nuclei", "lesion", "instrument")
SPLIT_NAMES = ("train", "val", "test")
MAX_ATTEMPTS = 1000


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W, floats in [0, 1]
    mask: np.ndarray  # 1 x H x W, values in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise ValueError(f"{self.id}: expected 3xHxW image and 1xHxW mask")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ValueError(f"{self.id}: image {self.image.shape[1:]} and mask {self.mask.shape[1:]} differ in size")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError(f"{self.id}: mask is not binary")


@dataclass(frozen=True)
class SynthSpec:
    style: str = "nuclei"
    count: int = 200
    size: tuple = (64, 64)
    seed: int = 0
    fg_min: float = 0.02
    fg_max: float = 0.45
    noise: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        if self.style not in STYLES:
            raise ValueError(f"unknown style {self.style!r}; choose from {STYLES}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 0 < self.fg_min < self.fg_max < 1:
            raise ValueError(f"need 0 < fg_min < fg_max < 1, got {self.fg_min}, {self.fg_max}")
        h, w = self.size
        if h < 16 or w < 16 or h % 16 or w % 16:
            raise ValueError(f"size {self.size} must be positive multiples of 16")
        if self.noise < 0:
            raise ValueError("noise amplitude must be >= 0")


# ----------------------------------------------------------------------------
# shape rasterizers (pixel-center inclusion test)


def _grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _nuclei(rng, h, w):
    yy, xx = _grid(h, w)
    side = min(h, w)
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(rng.integers(3, 13)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        a, b = rng.uniform(0.05, 0.14, size=2) * side
        t = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
        v = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask


def _lesion(rng, h, w):
    yy, xx = _grid(h, w)
    side = min(h, w)
    cy = rng.uniform(0.35, 0.65) * h
    cx = rng.uniform(0.35, 0.65) * w
    r0 = rng.uniform(0.15, 0.35) * side
    phi = np.arctan2(yy - cy, xx - cx)
    radius = np.ones_like(phi)
    for k in range(1, 4):
        radius += rng.uniform(0, 0.25 / k) * np.cos(k * phi + rng.uniform(0, 2 * np.pi))
    return np.hypot(yy - cy, xx - cx) <= r0 * radius


def _instrument(rng, h, w):
    yy, xx = _grid(h, w)
    side = min(h, w)
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(rng.integers(1, 3)):
        cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        half_len = rng.uniform(0.25, 0.6) * side
        half_wid = rng.uniform(0.04, 0.09) * side
        r = 0.8 * half_wid
        t = rng.uniform(0, np.pi)
        u = np.abs((xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)) - (half_len - r)
        v = np.abs(-(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)) - (half_wid - r)
        # signed distance of a rounded rectangle
        outside = np.hypot(np.maximum(u, 0), np.maximum(v, 0))
        inside = np.minimum(np.maximum(u, v), 0)
        mask |= outside + inside - r <= 0
    return mask


_SHAPES = {"nuclei": _nuclei, "lesion": _lesion, "instrument": _instrument}

# (background, foreground) mean RGB per style, loosely after each imaging modality:
# fluorescence nuclei on a dark field, brown lesions on skin, grey tools on tissue
_PALETTES = {
    "nuclei": ((0.12, 0.12, 0.16), (0.72, 0.68, 0.80)),
    "lesion": ((0.85, 0.66, 0.56), (0.45, 0.28, 0.20)),
    "instrument": ((0.72, 0.34, 0.30), (0.62, 0.62, 0.66)),
}
COLOR_JITTER = 0.12
MIN_CONTRAST = 0.25


def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(sample_id.encode("utf-8"))])


def render(spec: SynthSpec, sample_id: str) -> tuple:
    """(uint8 H x W x 3 image, bool H x W mask) for one sample id."""
    rng = sample_rng(spec.seed, sample_id)
    h, w = spec.size
    for _ in range(MAX_ATTEMPTS):
        mask = _SHAPES[spec.style](rng, h, w)
        if spec.fg_min <= mask.mean() <= spec.fg_max:
            break
    else:
        raise RuntimeError(f"{sample_id}: no {spec.style} mask within [{spec.fg_min}, {spec.fg_max}] after {MAX_ATTEMPTS} draws")

    bg_mean, fg_mean = (np.array(c) for c in _PALETTES[spec.style])
    while True:
        bg = np.clip(bg_mean + rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3), 0.0, 1.0)
        fg = np.clip(fg_mean + rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3), 0.0, 1.0)
        if np.linalg.norm(fg - bg) >= MIN_CONTRAST:
            break
    img = np.where(mask[..., None], fg, bg)
    if spec.noise > 0:
        img = img + rng.uniform(-spec.noise, spec.noise, size=img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return img, mask


# ----------------------------------------------------------------------------
# PPM / PGM


def write_pnm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write array of shape {arr.shape} as PNM")
    h, w = arr.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 file as uint8 (H x W or H x W x 3)."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PNM header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed PNM header") from exc
    if maxval != 255 or w < 1 or h < 1:
        raise ValueError(f"{path}: only 8-bit PNM with positive size is supported")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    raster = np.frombuffer(buf, dtype=np.uint8, count=-1, offset=pos)
    if raster.size != need:
        raise ValueError(f"{path}: raster has {raster.size} bytes, expected {need}")
    return raster.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


# ----------------------------------------------------------------------------
# splitting, generation, loading


def split(ids, seed: int) -> dict:
    """Seeded shuffle, then contiguous 80/10/10 cut at floor(0.8n), floor(0.9n)."""
    ids = list(ids)
    n = len(ids)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split 80/10/10, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    a, b = (8 * n) // 10, (9 * n) // 10
    return {
        "train": [ids[i] for i in order[:a]],
        "val": [ids[i] for i in order[a:b]],
        "test": [ids[i] for i in order[b:]],
    }


def sample_ids(count: int) -> list:
    return [f"{i:05d}" for i in range(count)]


def generate(spec: SynthSpec, out_dir) -> Path:
    root = Path(out_dir)
    ids = sample_ids(spec.count)
    parts = split(ids, spec.seed)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for sid in ids:
        img, mask = render(spec, sid)
        write_pnm(root / "images" / f"{sid}.ppm", img)
        write_pnm(root / "masks" / f"{sid}.pgm", mask.astype(np.uint8) * 255)
    assignment = {sid: name for name in SPLIT_NAMES for sid in parts[name]}
    (root / "splits.txt").write_text("".join(f"{sid}\t{assignment[sid]}\n" for sid in ids))
    return root


def read_splits(root) -> dict:
    path = Path(root) / "splits.txt"
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        sid, _, name = line.partition("\t")
        if name not in SPLIT_NAMES:
            raise ValueError(f"{path}:{lineno}: bad split name {name!r}")
        out[sid] = name
    return out


def load_sample(image_path, mask_path, sample_id: str) -> Sample:
    img = read_pnm(image_path)
    mask = read_pnm(mask_path)
    if img.ndim != 3:
        raise ValueError(f"{image_path}: expected an RGB (P6) image")
    if mask.ndim != 2:
        raise ValueError(f"{mask_path}: expected a grayscale (P5) mask")
    if img.shape[:2] != mask.shape:
        raise ValueError(f"{sample_id}: image {img.shape[:2]} and mask {mask.shape} differ in size")
    image = img.transpose(2, 0, 1).astype(np.float32) / 255.0
    return Sample(image=image, mask=(mask >= 128).astype(np.float32)[None], id=sample_id)


def load_dataset(root, split_name: str | None = None) -> list:
    """Samples of one split (or all when ``split_name`` is None), sorted by id."""
    root = Path(root)
    images = {p.stem: p for p in (root / "images").glob("*.ppm")}
    masks = {p.stem: p for p in (root / "masks").glob("*.pgm")}
    for stem in sorted(set(images) ^ set(masks)):
        kind = "mask" if stem in images else "image"
        raise ValueError(f"sample {stem!r} has no {kind} file")
    stems = sorted(images)
    if split_name is not None:
        if split_name not in SPLIT_NAMES:
            raise ValueError(f"unknown split {split_name!r}")
        assignment = read_splits(root)
        stems = [s for s in stems if assignment.get(s) == split_name]
    return [load_sample(images[s], masks[s], s) for s in stems]
