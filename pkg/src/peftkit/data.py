"""Dataset loading, the training-time augmentation pipeline, normalization,
and a synthetic nine-class generator with a deliberately shifted test split.

Augmentation applies, in order: horizontal flip, rotation, shift+scale,
perspective warp, a one-of color group, a one-of noise/blur group, coarse
dropout, then resize and clamp to [0,1].  Validation and test images get
only resize + normalize.  Geometric warps use bilinear interpolation with
reflect padding.  Noise variances are quoted on the 0-255 intensity scale.

Every augmentation draw is keyed by (seed, sample index, copy index), so the
expanded training set is byte-identical however the work is scheduled.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import rng as prng
from .errors import ConfigError, DataError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

SYNTH_CLASS_NAMES = ("disk", "ring", "square", "triangle", "hstripes",
                     "vstripes", "checker", "cross", "diag")


@dataclass
class Sample:
    image: np.ndarray          # H x W x 3 float32 in [0, 1]
    label: int
    source_tag: str = "local"


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    rotate_p: float = 0.5
    rotate_limit_deg: float = 15.0
    shift_scale_p: float = 0.5
    shift_limit: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.2)
    perspective_p: float = 0.3
    perspective_scale: tuple[float, float] = (0.05, 0.10)
    color_p: float = 0.8
    brightness_contrast_limit: float = 0.2
    hsv_shift: tuple[float, float, float] = (10.0, 20.0, 20.0)  # 0-180 / 0-255 scales
    jitter: tuple[float, float, float, float] = (0.2, 0.2, 0.2, 0.1)
    noise_p: float = 0.3
    gauss_noise_var: tuple[float, float] = (10.0, 50.0)   # 0-255 intensity scale
    gauss_blur_kernels: tuple[int, ...] = (3, 5)
    motion_blur_kernel: int = 5
    coarse_dropout_p: float = 0.2
    coarse_dropout_max_holes: int = 8
    coarse_dropout_max_frac: float = 0.10
    resize_to: int = 224
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        for p in (self.flip_p, self.rotate_p, self.shift_scale_p, self.perspective_p,
                  self.color_p, self.noise_p, self.coarse_dropout_p):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"augment probability {p} outside [0, 1]")

    def with_all_probs_zero(self) -> "AugmentConfig":
        return replace(self, flip_p=0, rotate_p=0, shift_scale_p=0, perspective_p=0,
                       color_p=0, noise_p=0, coarse_dropout_p=0)


# ---------------------------------------------------------------------------
# primitive transforms

def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1, :].copy()


def _warp_affine(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Inverse-map an affine transform; matrix maps output (x,y,1)->input (x,y)."""
    h, w = image.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ones = np.ones_like(xs)
    coords = np.stack([xs, ys, ones])
    src_x = (matrix[0, 0] * coords[0] + matrix[0, 1] * coords[1] + matrix[0, 2])
    src_y = (matrix[1, 0] * coords[0] + matrix[1, 1] * coords[1] + matrix[1, 2])
    out = np.empty_like(image)
    for ch in range(image.shape[2]):
        out[:, :, ch] = ndimage.map_coordinates(
            image[:, :, ch], [src_y, src_x], order=1, mode="reflect")
    return out


def _center_affine(h: int, w: int, angle_deg: float = 0.0, scale: float = 1.0,
                   tx: float = 0.0, ty: float = 0.0) -> np.ndarray:
    """Output->input matrix for rotate/scale about center plus translation."""
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    a = math.radians(angle_deg)
    cos_a, sin_a = math.cos(a), math.sin(a)
    inv_s = 1.0 / scale
    m = np.array([[cos_a * inv_s, -sin_a * inv_s, 0.0],
                  [sin_a * inv_s, cos_a * inv_s, 0.0],
                  [0.0, 0.0, 1.0]])
    m[0, 2] = cx - m[0, 0] * (cx + tx) - m[0, 1] * (cy + ty)
    m[1, 2] = cy - m[1, 0] * (cx + tx) - m[1, 1] * (cy + ty)
    return m


def rotate(image: np.ndarray, angle_deg: float) -> np.ndarray:
    h, w = image.shape[:2]
    return _warp_affine(image, _center_affine(h, w, angle_deg=angle_deg))


def shift_scale(image: np.ndarray, tx_frac: float, ty_frac: float, scale: float) -> np.ndarray:
    h, w = image.shape[:2]
    return _warp_affine(image, _center_affine(h, w, scale=scale,
                                              tx=tx_frac * w, ty=ty_frac * h))


def _solve_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 homography mapping dst points back to src points (for inverse warp)."""
    a = []
    b = []
    for (xs, ys), (xd, yd) in zip(src, dst):
        a.append([xd, yd, 1, 0, 0, 0, -xs * xd, -xs * yd])
        b.append(xs)
        a.append([0, 0, 0, xd, yd, 1, -ys * xd, -ys * yd])
        b.append(ys)
    coeffs = np.linalg.solve(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return np.append(coeffs, 1.0).reshape(3, 3)


def perspective(image: np.ndarray, corner_shift: np.ndarray) -> np.ndarray:
    """Warp by displacing the four corners; corner_shift is (4,2) in pixels."""
    h, w = image.shape[:2]
    src = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    dst = src + corner_shift
    hm = _solve_homography(src, dst)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    denom = hm[2, 0] * xs + hm[2, 1] * ys + hm[2, 2]
    src_x = (hm[0, 0] * xs + hm[0, 1] * ys + hm[0, 2]) / denom
    src_y = (hm[1, 0] * xs + hm[1, 1] * ys + hm[1, 2]) / denom
    out = np.empty_like(image)
    for ch in range(image.shape[2]):
        out[:, :, ch] = ndimage.map_coordinates(
            image[:, :, ch], [src_y, src_x], order=1, mode="reflect")
    return out


def resize(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if (h, w) == (size, size):
        return image.copy()
    ys = np.linspace(0, h - 1, size)
    xs = np.linspace(0, w - 1, size)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((size, size, image.shape[2]), dtype=image.dtype)
    for ch in range(image.shape[2]):
        out[:, :, ch] = ndimage.map_coordinates(
            image[:, :, ch], [grid_y, grid_x], order=1, mode="reflect")
    return out


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    dz = np.where(delta == 0, 1.0, delta)
    rc = (maxc - r) / dz
    gc = (maxc - g) / dz
    bc = (maxc - b) / dz
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta == 0, 0.0, (h / 6.0) % 1.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    conds = [i == k for k in range(6)]
    r = np.select(conds, [v, q, p, p, t, v])
    g = np.select(conds, [t, v, v, q, p, p])
    b = np.select(conds, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _gaussian_kernel1d(ksize: int) -> np.ndarray:
    # sigma from kernel size, OpenCV convention
    sigma = 0.3 * ((ksize - 1) * 0.5 - 1) + 0.8
    xs = np.arange(ksize) - (ksize - 1) / 2.0
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, ksize: int) -> np.ndarray:
    k = _gaussian_kernel1d(ksize)
    out = image.astype(np.float64)
    out = ndimage.convolve1d(out, k, axis=0, mode="reflect")
    out = ndimage.convolve1d(out, k, axis=1, mode="reflect")
    return out.astype(image.dtype)


def motion_blur(image: np.ndarray, ksize: int, angle_deg: float) -> np.ndarray:
    kernel = np.zeros((ksize, ksize))
    c = (ksize - 1) / 2.0
    a = math.radians(angle_deg)
    for step in np.linspace(-c, c, 2 * ksize + 1):
        i = int(round(c + step * math.sin(a)))
        j = int(round(c + step * math.cos(a)))
        kernel[i, j] = 1.0
    kernel /= kernel.sum()
    out = np.empty_like(image)
    for ch in range(image.shape[2]):
        out[:, :, ch] = ndimage.convolve(image[:, :, ch].astype(np.float64),
                                         kernel, mode="reflect").astype(image.dtype)
    return out


def coarse_dropout(image: np.ndarray, rng: np.random.Generator, max_holes: int,
                   max_frac: float) -> np.ndarray:
    h, w = image.shape[:2]
    out = image.copy()
    fill = image.reshape(-1, 3).mean(axis=0)  # per-image mean color
    n_holes = int(rng.integers(1, max_holes + 1))
    max_side = max(1, int(max_frac * min(h, w)))
    for _ in range(n_holes):
        hh = int(rng.integers(1, max_side + 1))
        ww = int(rng.integers(1, max_side + 1))
        y0 = int(rng.integers(0, max(1, h - hh + 1)))
        x0 = int(rng.integers(0, max(1, w - ww + 1)))
        out[y0:y0 + hh, x0:x0 + ww, :] = fill
    return out


# ---------------------------------------------------------------------------
# the pipeline

def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Apply the training pipeline in its fixed order; output in [0,1], resized."""
    img = sample.image.astype(np.float64)

    if rng.random() < cfg.flip_p:
        img = hflip(img)
    if rng.random() < cfg.rotate_p:
        img = rotate(img, float(rng.uniform(-cfg.rotate_limit_deg, cfg.rotate_limit_deg)))
    if rng.random() < cfg.shift_scale_p:
        tx = float(rng.uniform(-cfg.shift_limit, cfg.shift_limit))
        ty = float(rng.uniform(-cfg.shift_limit, cfg.shift_limit))
        sc = float(rng.uniform(*cfg.scale_range))
        img = shift_scale(img, tx, ty, sc)
    if rng.random() < cfg.perspective_p:
        frac = float(rng.uniform(*cfg.perspective_scale))
        side = min(img.shape[:2])
        shift = rng.uniform(-frac * side, frac * side, size=(4, 2))
        img = perspective(img, shift)

    if rng.random() < cfg.color_p:
        choice = int(rng.integers(0, 3))
        if choice == 0:
            lim = cfg.brightness_contrast_limit
            alpha = 1.0 + float(rng.uniform(-lim, lim))
            beta = float(rng.uniform(-lim, lim))
            img = img * alpha + beta
        elif choice == 1:
            dh, ds, dv = cfg.hsv_shift
            hsv = _rgb_to_hsv(np.clip(img, 0.0, 1.0))
            hsv[..., 0] = (hsv[..., 0] + rng.uniform(-dh, dh) / 180.0) % 1.0
            hsv[..., 1] = hsv[..., 1] + rng.uniform(-ds, ds) / 255.0
            hsv[..., 2] = hsv[..., 2] + rng.uniform(-dv, dv) / 255.0
            img = _hsv_to_rgb(np.clip(hsv, 0.0, 1.0))
        else:
            jb, jc, js, jh = cfg.jitter
            img = img * (1.0 + float(rng.uniform(-jb, jb)))
            gray = img.mean()
            img = gray + (img - gray) * (1.0 + float(rng.uniform(-jc, jc)))
            lum = img.mean(axis=-1, keepdims=True)
            img = lum + (img - lum) * (1.0 + float(rng.uniform(-js, js)))
            hsv = _rgb_to_hsv(np.clip(img, 0.0, 1.0))
            hsv[..., 0] = (hsv[..., 0] + rng.uniform(-jh, jh)) % 1.0
            img = _hsv_to_rgb(hsv)

    if rng.random() < cfg.noise_p:
        choice = int(rng.integers(0, 3))
        if choice == 0:
            var = float(rng.uniform(*cfg.gauss_noise_var))
            sigma = math.sqrt(var) / 255.0
            img = img + rng.normal(0.0, sigma, size=img.shape)
        elif choice == 1:
            k = int(cfg.gauss_blur_kernels[int(rng.integers(0, len(cfg.gauss_blur_kernels)))])
            img = gaussian_blur(img, k)
        else:
            img = motion_blur(img, cfg.motion_blur_kernel, float(rng.uniform(0.0, 180.0)))

    if rng.random() < cfg.coarse_dropout_p:
        img = coarse_dropout(img, rng, cfg.coarse_dropout_max_holes,
                             cfg.coarse_dropout_max_frac)

    img = resize(img, cfg.resize_to)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(img, sample.label, sample.source_tag)


def normalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """Channel-wise (x - mean)/std, HWC [0,1] input -> CHW output."""
    std = np.asarray(std, dtype=np.float32)
    if np.any(std == 0):
        raise ConfigError("normalization std must be nonzero")
    mean = np.asarray(mean, dtype=np.float32)
    out = (image.astype(np.float32) - mean) / std
    return out.transpose(2, 0, 1)


def denormalize(chw: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    return chw.transpose(1, 2, 0) * std + mean


def expand_training_set(samples: list[Sample], cfg: AugmentConfig,
                        multiplier: int = 3, seed: int = 0) -> list[Sample]:
    """Each input is replaced by `multiplier` augmented variants (2160 -> 6480
    at multiplier 3).  Draws are keyed per (sample, copy), so any execution
    order produces the same bytes."""
    if multiplier < 1:
        raise ConfigError("multiplier must be >= 1")
    out: list[Sample] = []
    for i, s in enumerate(samples):
        for k in range(multiplier):
            out.append(augment(s, cfg, prng.substream("augment", i, k, seed=seed)))
    return out


# ---------------------------------------------------------------------------
# directory datasets (PNG + raw PPM fallback)

def _read_ppm(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not m:
        raise DataError(f"{path}: not a binary P6 PPM file")
    w, h, maxval = (int(m.group(i)) for i in (1, 2, 3))
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=m.end())
    if data.size != w * h * 3:
        raise DataError(f"{path}: truncated PPM payload")
    return data.reshape(h, w, 3).astype(np.float32) / maxval


def _write_ppm(path: Path, image: np.ndarray) -> None:
    h, w = image.shape[:2]
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_image(path: str | Path) -> np.ndarray:
    """Returns H x W x 3 float32 in [0,1]; supports PNG and binary PPM."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return _read_ppm(path)
    try:
        from PIL import Image
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
        return arr / 255.0
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"{path}: unreadable image ({exc})") from exc


def write_image(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        _write_ppm(path, image)
        return
    from PIL import Image
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def load_directory_dataset(root: str | Path, class_names: list[str] | tuple[str, ...],
                           source_tag: str = "local") -> list[Sample]:
    """One subdirectory per class; labels follow class_names order; file order
    is alphabetical, so re-loading yields an identical sample sequence."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    samples: list[Sample] = []
    for label, name in enumerate(class_names):
        cdir = root / name
        if not cdir.is_dir():
            raise DataError(f"missing class directory {cdir}")
        files = sorted(p for p in cdir.iterdir()
                       if p.suffix.lower() in (".png", ".ppm"))
        if not files:
            raise DataError(f"class directory {cdir} contains no images")
        for f in files:
            samples.append(Sample(read_image(f), label, source_tag))
    return samples


def export_dataset(samples: list[Sample], out_dir: str | Path,
                   class_names: list[str] | tuple[str, ...], fmt: str = "png") -> int:
    """Write samples into the class-per-directory layout; returns file count."""
    if fmt not in ("png", "ppm"):
        raise ConfigError(f"unsupported export format {fmt!r}")
    out_dir = Path(out_dir)
    counters = [0] * len(class_names)
    for name in class_names:
        (out_dir / name).mkdir(parents=True, exist_ok=True)
    for s in samples:
        idx = counters[s.label]
        counters[s.label] += 1
        write_image(out_dir / class_names[s.label] / f"{idx:06d}.{fmt}", s.image)
    return sum(counters)


# ---------------------------------------------------------------------------
# synthetic nine-class generator

@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 9
    image_size: int = 32
    train_per_class: int = 24
    val_per_class: int = 6
    test_total: int = 10800
    # long-tailed test profile (fraction per class), heaviest classes first
    # in source-A, mirroring a strongly imbalanced deployment set
    test_weights: tuple[float, ...] = (0.0142, 0.1461, 0.0887, 0.3943, 0.3296,
                                       0.0180, 0.0028, 0.0027, 0.0035)
    source_a: str = "synthA"
    source_b: str = "synthB"
    source_b_classes: tuple[int, ...] = (6, 7, 8)
    # train/val rendering ranges (narrow) vs test ranges (widened + shifted)
    train_gain: tuple[float, float] = (0.85, 1.15)
    test_gain: tuple[float, float] = (0.55, 1.45)
    train_texture: tuple[float, float] = (0.0, 0.04)
    test_texture: tuple[float, float] = (0.06, 0.22)
    train_size: tuple[float, float] = (0.30, 0.42)
    test_size: tuple[float, float] = (0.22, 0.50)
    train_center: float = 0.08
    test_center: float = 0.20
    test_noise: float = 0.04

    def __post_init__(self):
        if self.num_classes != 9:
            raise ConfigError("the synthetic generator renders exactly 9 classes")
        if abs(sum(self.test_weights) - 1.0) > 0.01:
            raise ConfigError("test_weights must sum to ~1")

    def test_counts(self) -> list[int]:
        w = np.asarray(self.test_weights, dtype=np.float64)
        w = w / w.sum()
        counts = np.maximum(1, np.floor(w * self.test_total).astype(int))
        counts[int(np.argmax(counts))] += self.test_total - int(counts.sum())
        return [int(c) for c in counts]


@dataclass
class SplitDataset:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]


def render_class(cls: int, size: int, rng: np.random.Generator, shifted: bool,
            spec: SyntheticSpec) -> np.ndarray:
    gain_rng = spec.test_gain if shifted else spec.train_gain
    tex_rng = spec.test_texture if shifted else spec.train_texture
    size_rng = spec.test_size if shifted else spec.train_size
    center_jit = spec.test_center if shifted else spec.train_center

    n = size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    xx = xx / (n - 1) * 2.0 - 1.0
    yy = yy / (n - 1) * 2.0 - 1.0
    cx = rng.uniform(-center_jit, center_jit)
    cy = rng.uniform(-center_jit, center_jit)
    r = rng.uniform(*size_rng) * 2.0
    aa = 1.5 / n * 2.0  # ~1.5 px anti-alias band

    def soft(d: np.ndarray) -> np.ndarray:
        return np.clip(0.5 - d / aa, 0.0, 1.0)

    dx, dy = xx - cx, yy - cy
    rad = np.sqrt(dx * dx + dy * dy)
    theta = rng.uniform(-0.18, 0.18) + (rng.uniform(-0.1, 0.1) if shifted else 0.0)
    rx = dx * math.cos(theta) - dy * math.sin(theta)
    ry = dx * math.sin(theta) + dy * math.cos(theta)
    freq = rng.uniform(2.2, 3.2) * math.pi
    phase = rng.uniform(0.0, 2.0 * math.pi)

    if cls == 0:      # disk
        mask = soft(rad - r)
    elif cls == 1:    # ring
        width = r * rng.uniform(0.22, 0.34)
        mask = soft(np.abs(rad - r) - width)
    elif cls == 2:    # square
        mask = soft(np.maximum(np.abs(rx), np.abs(ry)) - r)
    elif cls == 3:    # triangle
        k = math.sqrt(3.0)
        d = np.maximum.reduce([-ry - r / 2.0, ry * 0.5 + k / 2.0 * rx - r / 2.0,
                               ry * 0.5 - k / 2.0 * rx - r / 2.0])
        mask = soft(d)
    elif cls == 4:    # horizontal stripes
        mask = 0.5 + 0.5 * np.sin(freq * ry * 2.0 + phase)
    elif cls == 5:    # vertical stripes
        mask = 0.5 + 0.5 * np.sin(freq * rx * 2.0 + phase)
    elif cls == 6:    # checkerboard
        mask = ((np.sin(freq * rx * 2.0 + phase) > 0)
                ^ (np.sin(freq * ry * 2.0 + phase) > 0)).astype(np.float64)
    elif cls == 7:    # plus / cross
        arm = r * rng.uniform(0.25, 0.38)
        bar_x = np.maximum(np.abs(rx) - arm, np.abs(ry) - r)
        bar_y = np.maximum(np.abs(ry) - arm, np.abs(rx) - r)
        mask = np.maximum(soft(bar_x), soft(bar_y))
    else:             # diagonal stripes (45 degrees)
        diag = (rx + ry) / math.sqrt(2.0)
        mask = 0.5 + 0.5 * np.sin(freq * diag * 2.0 + phase)

    fg = rng.uniform(0.55, 0.95, size=3)
    bg = rng.uniform(0.05, 0.35, size=3)
    img = bg[None, None, :] + mask[..., None] * (fg - bg)[None, None, :]

    tex_amp = rng.uniform(*tex_rng)
    if tex_amp > 0:
        # low-frequency texture: coarse noise field upsampled bilinearly
        coarse = rng.normal(0.0, 1.0, size=(n // 4 + 1, n // 4 + 1, 3))
        img = img + tex_amp * resize(coarse, n)
    if shifted and spec.test_noise > 0:
        img = img + rng.normal(0.0, spec.test_noise, size=img.shape)
    img = img * rng.uniform(*gain_rng)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthesize_dataset(spec: SyntheticSpec, seed: int) -> SplitDataset:
    """Deterministic three-way split; train/val narrow, test widened+shifted."""
    def tag(cls: int) -> str:
        return spec.source_b if cls in spec.source_b_classes else spec.source_a

    def make(split: str, cls: int, count: int, shifted: bool) -> list[Sample]:
        out = []
        for i in range(count):
            r = prng.substream("synth", hash_split(split), cls, i, seed=seed)
            out.append(Sample(render_class(cls, spec.image_size, r, shifted, spec),
                              cls, tag(cls)))
        return out

    def hash_split(split: str) -> int:
        return {"train": 0, "val": 1, "test": 2}[split]

    train: list[Sample] = []
    val: list[Sample] = []
    test: list[Sample] = []
    counts = spec.test_counts()
    for cls in range(spec.num_classes):
        train.extend(make("train", cls, spec.train_per_class, shifted=False))
        val.extend(make("val", cls, spec.val_per_class, shifted=False))
        test.extend(make("test", cls, counts[cls], shifted=True))
    return SplitDataset(train, val, test)
