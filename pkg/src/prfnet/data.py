"""Image IO, triplets, distortions and the synthetic 2AFC generator.

Images are float arrays shaped (3, H, W) with values in [0, 1] and are stored
on disk as binary 8-bit PPM (P6). A dataset is a JSONL manifest, one triplet
per line, whose image paths are relative to the manifest's directory.

Every distortion has the form ``clip(x + s * D(x, seed))`` (blur aside), with
a direction ``D`` that does not depend on the severity ``s``. Clipping a ray
that starts inside [0, 1] can only shorten it monotonically, so a larger
severity never brings an image closer to its reference.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.fft import dctn, idctn

KINDS = ("gaussian_noise", "gaussian_blur", "jpeg_like_block_quantize", "brightness_shift")

# (exclusive lower, inclusive upper) severity bounds per kind
SEVERITY_RANGE = {
    "gaussian_noise": (0.0, 0.5),  # noise standard deviation
    "gaussian_blur": (0.0, 5.0),  # blur sigma in pixels
    "jpeg_like_block_quantize": (0.0, 1.0),  # blend weight toward the quantised image
    "brightness_shift": (0.0, 0.5),  # additive offset
}

# five-point grids the generator draws severities from
SEVERITY_LEVELS = {
    "gaussian_noise": (0.02, 0.04, 0.06, 0.08, 0.10),
    "gaussian_blur": (0.5, 1.0, 1.5, 2.0, 2.5),
    "jpeg_like_block_quantize": (0.2, 0.4, 0.6, 0.8, 1.0),
    "brightness_shift": (0.03, 0.06, 0.09, 0.12, 0.15),
}

IMAGE_SOURCES = ("procedural-texture", "flat-noise")
MANIFEST_KEYS = ("ref", "dis_a", "dis_b", "hard_label", "soft_label", "kind", "severities")

# JPEG luminance quantisation table (quality 50), in 8-bit units
_JPEG_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
_JPEG_STRENGTH = 2.0  # table multiplier, roughly JPEG quality 25


class PPMError(ValueError):
    """Malformed or truncated PPM data."""


# --------------------------------------------------------------------------- #
# PPM IO
# --------------------------------------------------------------------------- #
_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_ppm(raw: bytes, dtype=np.float32) -> np.ndarray:
    if not raw.startswith(b"P6"):
        raise PPMError("not a binary PPM (missing P6 magic)")
    pos, fields = 2, []
    for _ in range(3):
        m = _TOKEN.match(raw, pos)
        if m is None or not m.group(1).isdigit():
            raise PPMError("malformed PPM header")
        fields.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PPMError(f"invalid PPM dimensions {width}x{height}")
    if maxval != 255:
        raise PPMError(f"only 8-bit PPM (maxval 255) is supported, got {maxval}")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise PPMError("malformed PPM header: no separator before pixel data")
    pos += 1
    expected = width * height * 3
    payload = raw[pos : pos + expected]
    if len(payload) < expected:
        raise PPMError(f"truncated PPM payload: {len(payload)} of {expected} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return (pixels.transpose(2, 0, 1) / 255.0).astype(dtype)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {image.shape}")
    _, h, w = image.shape
    pixels = image if image.dtype == np.uint8 else to_uint8(image)
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.transpose(1, 2, 0).tobytes()


def load_image(path, dtype=np.float32) -> np.ndarray:
    """Read a P6 PPM as a (3, H, W) array in [0, 1]."""
    return decode_ppm(Path(path).read_bytes(), dtype=dtype)


def save_image(path, image: np.ndarray) -> None:
    """Write a (3, H, W) image in [0, 1] (or uint8) as a P6 PPM."""
    Path(path).write_bytes(encode_ppm(image))


# --------------------------------------------------------------------------- #
# Triplets
# --------------------------------------------------------------------------- #
@dataclass
class ImageTriplet:
    """Reference ``ref`` and distorted ``dis_a``/``dis_b``.

    ``hard_label == 1`` and ``soft_label > 0.5`` both mean B is closer to the
    reference.
    """

    ref: np.ndarray
    dis_a: np.ndarray
    dis_b: np.ndarray
    hard_label: int | None = None
    soft_label: float | None = None

    def __post_init__(self):
        if not (self.ref.shape == self.dis_a.shape == self.dis_b.shape):
            raise ValueError(
                f"triplet images differ in shape: {self.ref.shape}, {self.dis_a.shape}, {self.dis_b.shape}"
            )
        if self.hard_label is None and self.soft_label is None:
            raise ValueError("a triplet needs a hard or a soft label")
        if self.hard_label is not None and self.hard_label not in (0, 1):
            raise ValueError(f"hard_label must be 0 or 1, got {self.hard_label}")
        if self.soft_label is not None and not 0.0 <= self.soft_label <= 1.0:
            raise ValueError(f"soft_label must be in [0, 1], got {self.soft_label}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.ref.shape


def crop_window(height: int, width: int, size: int, rng: np.random.Generator) -> tuple[int, int]:
    if size % 16:
        raise ValueError(f"crop size {size} must be divisible by 16")
    if size > height or size > width:
        raise ValueError(f"crop size {size} larger than image {height}x{width}")
    return int(rng.integers(0, height - size + 1)), int(rng.integers(0, width - size + 1))


def random_crop(triplet: ImageTriplet, size: int, rng: np.random.Generator) -> ImageTriplet:
    """Crop all three images with one shared window drawn from ``rng``."""
    _, h, w = triplet.shape
    top, left = crop_window(h, w, size, rng)
    win = (slice(None), slice(top, top + size), slice(left, left + size))
    return ImageTriplet(
        triplet.ref[win], triplet.dis_a[win], triplet.dis_b[win], triplet.hard_label, triplet.soft_label
    )


# --------------------------------------------------------------------------- #
# Distortions
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    severity: float
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in SEVERITY_RANGE:
            raise ValueError(f"unknown distortion kind {self.kind!r}; expected one of {KINDS}")
        lo, hi = SEVERITY_RANGE[self.kind]
        if not (self.severity == 0 or lo < self.severity <= hi):
            raise ValueError(f"severity {self.severity} outside ({lo}, {hi}] for {self.kind}")


def _block_quantize(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    ph, pw = -h % 8, -w % 8
    xp = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="edge")
    hb, wb = xp.shape[1] // 8, xp.shape[2] // 8
    blocks = xp.reshape(c, hb, 8, wb, 8).transpose(0, 1, 3, 2, 4)
    coef = dctn(blocks, type=2, axes=(-2, -1), norm="ortho")
    step = _JPEG_TABLE * _JPEG_STRENGTH / 255.0
    coef = np.rint(coef / step) * step
    out = idctn(coef, type=2, axes=(-2, -1), norm="ortho")
    return out.transpose(0, 1, 3, 2, 4).reshape(xp.shape)[:, :h, :w]


def _gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    # circular blur applied as a Gaussian transfer function; every frequency
    # is attenuated more as sigma grows, so the distance to x is monotone
    _, h, w = x.shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    transfer = np.exp(-2.0 * np.pi**2 * sigma**2 * (fx**2 + fy**2))
    return np.fft.irfft2(np.fft.rfft2(x) * transfer, s=(h, w))


def apply_distortion(image: np.ndarray, spec: DistortionSpec) -> np.ndarray:
    """Distort a (3, H, W) image deterministically; output clipped to [0, 1]."""
    x = np.asarray(image, dtype=np.float64)
    s = float(spec.severity)
    if s == 0:
        return np.array(image, copy=True)
    rng = np.random.default_rng(spec.rng_seed)
    if spec.kind == "gaussian_noise":
        out = x + s * rng.standard_normal(x.shape)
    elif spec.kind == "gaussian_blur":
        out = _gaussian_blur(x, s)
    elif spec.kind == "jpeg_like_block_quantize":
        out = x + s * (_block_quantize(x) - x)
    elif spec.kind == "brightness_shift":
        sign = 1.0 if rng.random() < 0.5 else -1.0
        out = x + sign * s
    else:  # guarded by DistortionSpec
        raise ValueError(f"unknown distortion kind {spec.kind!r}")
    return np.clip(out, 0.0, 1.0).astype(np.asarray(image).dtype, copy=False)


# --------------------------------------------------------------------------- #
# Reference images
# --------------------------------------------------------------------------- #
def make_reference(size: int, source: str, rng: np.random.Generator) -> np.ndarray:
    """A (3, size, size) reference image in [0, 1]."""
    if source == "flat-noise":
        return rng.uniform(0.1, 0.9, size=(3, size, size))
    if source != "procedural-texture":
        raise ValueError(f"unknown image source {source!r}; expected one of {IMAGE_SOURCES}")
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((3, size, size))
    base = rng.uniform(0.3, 0.7, size=3)
    for _ in range(6):
        freq = rng.uniform(1.0, size / 4)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img += rng.uniform(0.02, 0.12, size=(3, 1, 1)) * wave
    for _ in range(3):
        y0, x0 = rng.integers(0, size, 2)
        hh, ww = rng.integers(size // 8, size // 2, 2)
        img[:, y0 : y0 + hh, x0 : x0 + ww] += rng.uniform(-0.15, 0.15, size=(3, 1, 1))
    img += 0.03 * rng.standard_normal(img.shape)
    return np.clip(img + base[:, None, None], 0.0, 1.0)


# --------------------------------------------------------------------------- #
# Synthetic datasets
# --------------------------------------------------------------------------- #
def soft_label(d_a: float, d_b: float) -> float:
    return d_a / (d_a + d_b)


def hard_label(d_a: float, d_b: float) -> int:
    """1 when B is the milder distortion, i.e. closer to the reference."""
    if d_a == d_b:
        raise ValueError("equal severities have no hard label")
    return int(d_a > d_b)


def _draw_severities(kind: str, rng: np.random.Generator) -> tuple[float, float]:
    levels = SEVERITY_LEVELS[kind]
    while True:
        d_a, d_b = (levels[i] for i in rng.integers(0, len(levels), 2))
        if d_a != d_b:
            return d_a, d_b


def synthesize_triplet(
    index: int, seed: int, size: int = 64, image_source: str = "procedural-texture", kinds: Sequence[str] = KINDS
) -> tuple[ImageTriplet, dict]:
    """Deterministically build triplet ``index`` of the dataset for ``seed``."""
    rng = np.random.default_rng([seed, index])
    ref = make_reference(size, image_source, rng)
    kind = kinds[int(rng.integers(0, len(kinds)))]
    d_a, d_b = _draw_severities(kind, rng)
    seed_a, seed_b = (int(v) for v in rng.integers(0, 2**31 - 1, 2))
    ref8 = to_uint8(ref)
    ref_q = ref8 / 255.0
    dis_a = to_uint8(apply_distortion(ref_q, DistortionSpec(kind, d_a, seed_a)))
    dis_b = to_uint8(apply_distortion(ref_q, DistortionSpec(kind, d_b, seed_b)))
    hard = hard_label(d_a, d_b)
    soft = soft_label(d_a, d_b)
    meta = {"kind": kind, "severities": [d_a, d_b], "hard_label": hard, "soft_label": soft}
    return ImageTriplet(ref8, dis_a, dis_b, hard, soft), meta


def generate_synthetic_dataset(
    n: int,
    out_dir,
    size: int = 64,
    image_source: str = "procedural-texture",
    kinds: Sequence[str] = KINDS,
    seed: int = 0,
    manifest_name: str = "manifest.jsonl",
) -> Path:
    """Write ``n`` triplets as PPM files plus a JSONL manifest; returns the manifest path.

    Per triplet one distortion kind is drawn and two distinct severities
    d_A != d_B from its grid. ``hard_label = 1`` iff d_A > d_B (B is closer)
    and ``soft_label = d_A / (d_A + d_B)``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    kinds = tuple(kinds)
    for k in kinds:
        if k not in KINDS:
            raise ValueError(f"unknown distortion kind {k!r}; expected one of {KINDS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n):
        triplet, meta = synthesize_triplet(i, seed, size, image_source, kinds)
        names = {key: f"{i:06d}_{key}.ppm" for key in ("ref", "dis_a", "dis_b")}
        save_image(out / names["ref"], triplet.ref)
        save_image(out / names["dis_a"], triplet.dis_a)
        save_image(out / names["dis_b"], triplet.dis_b)
        entry = {
            "ref": names["ref"],
            "dis_a": names["dis_a"],
            "dis_b": names["dis_b"],
            "hard_label": meta["hard_label"],
            "soft_label": meta["soft_label"],
            "kind": meta["kind"],
            "severities": meta["severities"],
        }
        lines.append(json.dumps(entry))
    manifest = out / manifest_name
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from None
        for key in ("ref", "dis_a", "dis_b"):
            if key not in entry:
                raise ValueError(f"{path}:{lineno}: missing key {key!r}")
        entries.append(entry)
    return entries


def _resolve(base: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else base / p


class TripletDataset:
    """Triplets held in memory as uint8 arrays of shape (n, 3, H, W).

    Missing hard labels are stored as -1 and missing soft labels as NaN.
    """

    def __init__(self, ref, dis_a, dis_b, hard, soft, kinds=None):
        self.ref = np.asarray(ref, dtype=np.uint8)
        self.dis_a = np.asarray(dis_a, dtype=np.uint8)
        self.dis_b = np.asarray(dis_b, dtype=np.uint8)
        self.hard = np.asarray(hard, dtype=np.int64)
        self.soft = np.asarray(soft, dtype=np.float64)
        self.kinds = list(kinds) if kinds is not None else [None] * len(self.ref)
        if not (self.ref.shape == self.dis_a.shape == self.dis_b.shape):
            raise ValueError("reference and distorted image stacks differ in shape")

    def __len__(self) -> int:
        return len(self.ref)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.ref.shape[1:]

    @property
    def has_hard_labels(self) -> bool:
        return len(self) > 0 and bool(np.all(self.hard >= 0))

    @property
    def has_soft_labels(self) -> bool:
        return len(self) > 0 and bool(np.all(np.isfinite(self.soft)))

    @classmethod
    def from_triplets(cls, triplets: Iterable[ImageTriplet], kinds=None) -> "TripletDataset":
        triplets = list(triplets)
        if not triplets:
            raise ValueError("empty dataset")
        stack = lambda attr: np.stack([to_uint8(getattr(t, attr)) if getattr(t, attr).dtype != np.uint8 else getattr(t, attr) for t in triplets])  # noqa: E731
        hard = [-1 if t.hard_label is None else t.hard_label for t in triplets]
        soft = [np.nan if t.soft_label is None else t.soft_label for t in triplets]
        return cls(stack("ref"), stack("dis_a"), stack("dis_b"), hard, soft, kinds)

    @classmethod
    def from_manifest(cls, path) -> "TripletDataset":
        path = Path(path)
        entries = read_manifest(path)
        if not entries:
            raise ValueError(f"manifest {path} is empty")
        base = path.parent
        triplets = []
        for e in entries:
            imgs = [to_uint8(load_image(_resolve(base, e[k]), dtype=np.float64)) for k in ("ref", "dis_a", "dis_b")]
            triplets.append(ImageTriplet(*imgs, hard_label=e.get("hard_label"), soft_label=e.get("soft_label")))
        return cls.from_triplets(triplets, kinds=[e.get("kind") for e in entries])

    def triplet(self, i: int) -> ImageTriplet:
        hard = int(self.hard[i]) if self.hard[i] >= 0 else None
        soft = float(self.soft[i]) if np.isfinite(self.soft[i]) else None
        f = lambda a: a[i].astype(np.float32) / np.float32(255.0)  # noqa: E731
        return ImageTriplet(f(self.ref), f(self.dis_a), f(self.dis_b), hard, soft)

    def subset(self, idx) -> "TripletDataset":
        idx = np.asarray(idx)
        return TripletDataset(
            self.ref[idx], self.dis_a[idx], self.dis_b[idx], self.hard[idx], self.soft[idx],
            [self.kinds[i] for i in idx],
        )

    def batch(self, idx, crop: int | None = None, rng: np.random.Generator | None = None, dtype=np.float32):
        """Float images (O, A, B) for ``idx``, each triplet cropped with its own window."""
        idx = np.asarray(idx)
        h, w = self.image_shape[1:]
        if crop is None or crop == h == w:
            sl = [np.s_[:, :, :]] * len(idx)
        else:
            if rng is None:
                raise ValueError("random cropping needs an rng")
            sl = []
            for _ in idx:
                top, left = crop_window(h, w, crop, rng)
                sl.append(np.s_[:, top : top + crop, left : left + crop])
        out = []
        for arr in (self.ref, self.dis_a, self.dis_b):
            stacked = np.stack([arr[i][s] for i, s in zip(idx, sl)])
            out.append(stacked.astype(dtype) / np.asarray(255.0, dtype=dtype))
        return out[0], out[1], out[2], self.hard[idx], self.soft[idx]


def validate_manifest(path) -> int:
    """Check every referenced file exists, decodes and matches its triplet's shape."""
    path = Path(path)
    entries = read_manifest(path)
    for lineno, e in enumerate(entries, 1):
        shapes = []
        for key in ("ref", "dis_a", "dis_b"):
            f = _resolve(path.parent, e[key])
            if not f.exists():
                raise FileNotFoundError(f"{path}:{lineno}: missing image {f}")
            shapes.append(load_image(f).shape)
        if len(set(shapes)) != 1:
            raise ValueError(f"{path}:{lineno}: triplet images differ in shape {shapes}")
    return len(entries)
