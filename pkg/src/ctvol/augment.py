"""Seeded, mask-consistent slice augmentation.

Geometric transforms compute one source-coordinate map per call and use it
for the image (bilinear) and for every mask (nearest neighbour), so masks
move in lockstep with the image and stay binary. Photometric transforms and
filters only ever see the image.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .volume_io import SliceSample

GEOMETRIC = ("hflip", "shift_scale_rotate", "random_crop", "perspective")
PHOTOMETRIC = ("gaussian_noise", "brightness", "contrast", "hue_saturation")
FILTERS = ("sharpen", "blur", "motion_blur")
KINDS = GEOMETRIC + ("gaussian_noise", "clahe", "brightness", "sharpen", "blur",
                     "motion_blur", "contrast", "hue_saturation")

# kind -> {param name: param type}; "range" is [min, max], "ksizes" a list
# of odd kernel sizes, "tiles" a pair of tile counts.
PARAM_SCHEMA = {
    "hflip": {},
    "shift_scale_rotate": {"shift": "range", "scale": "range", "rotate": "range"},
    "random_crop": {"size": "range"},
    "gaussian_noise": {"sigma": "range"},
    "perspective": {"scale": "range"},
    "clahe": {"clip_limit": "range", "tiles": "tiles"},
    "brightness": {"delta": "range"},
    "sharpen": {"alpha": "range", "ksize": "ksizes"},
    "blur": {"ksize": "ksizes"},
    "motion_blur": {"ksize": "ksizes"},
    "contrast": {"delta": "range"},
    "hue_saturation": {"hue": "range", "saturation": "range", "value": "range"},
}

DEFAULT_PARAMS = {
    "hflip": {},
    "shift_scale_rotate": {"shift": [-0.0625, 0.0625], "scale": [0.9, 1.1], "rotate": [-15.0, 15.0]},
    "random_crop": {"size": [0.8, 1.0]},
    "gaussian_noise": {"sigma": [0.01, 0.05]},
    "perspective": {"scale": [0.0, 0.05]},
    "clahe": {"clip_limit": [4.0, 4.0], "tiles": [8, 8]},
    "brightness": {"delta": [-0.2, 0.2]},
    "sharpen": {"alpha": [0.2, 0.5], "ksize": [3, 5]},
    "blur": {"ksize": [3, 5]},
    "motion_blur": {"ksize": [3, 5]},
    "contrast": {"delta": [-0.2, 0.2]},
    "hue_saturation": {"hue": [-0.1, 0.1], "saturation": [-0.1, 0.1], "value": [-0.1, 0.1]},
}


class AugmentError(ValueError):
    pass


class CropLargerThanImage(AugmentError):
    pass


class EvenKernel(AugmentError):
    pass


@dataclass
class TransformSpec:
    kind: str
    probability: float = 0.5
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PARAM_SCHEMA:
            raise AugmentError(f"unknown transform kind {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise AugmentError(f"{self.kind}: probability {self.probability} outside [0, 1]")
        schema = PARAM_SCHEMA[self.kind]
        missing = set(schema) - set(self.params)
        extra = set(self.params) - set(schema)
        if missing:
            raise AugmentError(f"{self.kind}: missing params {sorted(missing)}")
        if extra:
            raise AugmentError(f"{self.kind}: unexpected params {sorted(extra)}")
        for name, ptype in schema.items():
            value = self.params[name]
            if ptype == "range":
                if len(value) != 2 or not value[0] <= value[1]:
                    raise AugmentError(f"{self.kind}.{name}: range must be [min, max] with min <= max")
            elif ptype == "ksizes":
                if not value or any(int(k) != k or k < 3 or k % 2 == 0 for k in value):
                    raise EvenKernel(f"{self.kind}.{name}: kernel sizes must be odd integers >= 3")
            elif ptype == "tiles":
                if len(value) != 2 or any(int(t) != t or t < 1 for t in value):
                    raise AugmentError(f"{self.kind}.{name}: tiles must be two integers >= 1")
        if self.kind == "clahe" and self.params["clip_limit"][0] <= 0:
            raise AugmentError("clahe.clip_limit must be > 0")

    @classmethod
    def default(cls, kind: str, probability: float = 0.5) -> "TransformSpec":
        return cls(kind, probability, json.loads(json.dumps(DEFAULT_PARAMS[kind])))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "p": self.probability, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        d = dict(d)
        kind = d.pop("kind")
        p = d.pop("p", d.pop("probability", None))
        if p is None:
            raise AugmentError(f"{kind}: missing probability 'p'")
        return cls(kind, float(p), d)


@dataclass
class AugSpec:
    transforms: list
    seed: int = 0

    def to_dict(self) -> dict:
        return {"seed": self.seed, "transforms": [t.to_dict() for t in self.transforms]}

    @classmethod
    def from_dict(cls, d: dict) -> "AugSpec":
        return cls([TransformSpec.from_dict(t) for t in d["transforms"]], int(d.get("seed", 0)))

    @classmethod
    def from_json(cls, text: str) -> "AugSpec":
        return cls.from_dict(json.loads(text))


def default_spec(seed: int = 0, probability: float = 0.5) -> AugSpec:
    """All twelve transforms in the canonical order, each with probability ``probability``."""
    return AugSpec([TransformSpec.default(k, probability) for k in KINDS], seed)


@dataclass
class ResolvedTransform:
    kind: str
    params: dict

    @property
    def applies_to(self) -> str:
        return "image_and_masks" if self.kind in GEOMETRIC else "image_only"


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _resolve(spec: TransformSpec, rng) -> ResolvedTransform:
    p = spec.params
    k = spec.kind
    if k == "hflip":
        params = {}
    elif k == "shift_scale_rotate":
        params = {
            "shift_x": _uniform(rng, p["shift"]),
            "shift_y": _uniform(rng, p["shift"]),
            "scale": _uniform(rng, p["scale"]),
            "angle": _uniform(rng, p["rotate"]),
        }
    elif k == "random_crop":
        params = {
            "height": _uniform(rng, p["size"]),
            "width": _uniform(rng, p["size"]),
            "offset_y": float(rng.uniform()),
            "offset_x": float(rng.uniform()),
        }
    elif k == "gaussian_noise":
        params = {"sigma": _uniform(rng, p["sigma"]), "noise_seed": int(rng.integers(2**63))}
    elif k == "perspective":
        s = _uniform(rng, p["scale"])
        params = {"offsets": [float(v) for v in rng.uniform(0.0, s, size=8)] if s > 0 else [0.0] * 8}
    elif k == "clahe":
        params = {"clip_limit": _uniform(rng, p["clip_limit"]), "tiles": [int(t) for t in p["tiles"]]}
    elif k in ("brightness", "contrast"):
        params = {"delta": _uniform(rng, p["delta"])}
    elif k == "sharpen":
        params = {"alpha": _uniform(rng, p["alpha"]), "ksize": int(rng.choice(p["ksize"]))}
    elif k in ("blur", "motion_blur"):
        params = {"ksize": int(rng.choice(p["ksize"]))}
    elif k == "hue_saturation":
        params = {
            "hue": _uniform(rng, p["hue"]),
            "saturation": _uniform(rng, p["saturation"]),
            "value": _uniform(rng, p["value"]),
        }
    else:  # pragma: no cover - guarded by TransformSpec validation
        raise AugmentError(k)
    return ResolvedTransform(k, params)


def sample_pipeline(spec: AugSpec, sample_index: int) -> list[ResolvedTransform]:
    """Realize the stochastic pipeline for one sample.

    The PRNG is keyed by ``(spec.seed, sample_index)`` so every sample gets
    an independent but reproducible draw.
    """
    rng = np.random.default_rng([int(spec.seed), int(sample_index)])
    resolved = []
    for t in spec.transforms:
        if rng.uniform() < t.probability:
            resolved.append(_resolve(t, rng))
    return resolved


# ---------------------------------------------------------------------------
# Geometric transforms
# ---------------------------------------------------------------------------

def _homography(src_pts, dst_pts) -> np.ndarray:
    """3x3 matrix mapping each ``src_pts[i]`` (x, y) onto ``dst_pts[i]``."""
    a = []
    b = []
    for (x, y), (u, v) in zip(src_pts, dst_pts):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.array(a, dtype=np.float64), np.array(b, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def source_coordinates(t: ResolvedTransform, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) for every output pixel of a geometric transform."""
    h, w = shape
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    p = t.params
    if t.kind == "hflip":
        return rows, (w - 1) - cols
    if t.kind == "shift_scale_rotate":
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        theta = math.radians(p["angle"])
        cos, sin = math.cos(theta), math.sin(theta)
        scale = p["scale"]
        if scale <= 0:
            raise AugmentError("scale must be positive")
        dx = (cols - cx - p["shift_x"] * w) / scale
        dy = (rows - cy - p["shift_y"] * h) / scale
        # inverse of a counter-clockwise (as displayed) rotation
        src_x = cos * dx - sin * dy + cx
        src_y = sin * dx + cos * dy + cy
        return src_y, src_x
    if t.kind == "random_crop":
        ch = int(math.floor(p["height"] * h + 0.5))
        cw = int(math.floor(p["width"] * w + 0.5))
        if ch > h or cw > w:
            raise CropLargerThanImage(f"crop {ch}x{cw} exceeds image {h}x{w}")
        ch, cw = max(ch, 1), max(cw, 1)
        y0 = int(math.floor(p["offset_y"] * (h - ch) + 0.5))
        x0 = int(math.floor(p["offset_x"] * (w - cw) + 0.5))
        # crop, then resample back to the input size
        return y0 + (rows + 0.5) * (ch / h) - 0.5, x0 + (cols + 0.5) * (cw / w) - 0.5
    if t.kind == "perspective":
        o = p["offsets"]
        corners = [(0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)]
        # each source corner moves inward by its own fraction of the image size
        sx = [1, -1, -1, 1]
        sy = [1, 1, -1, -1]
        src = [(x + sx[i] * o[2 * i] * (w - 1), y + sy[i] * o[2 * i + 1] * (h - 1))
               for i, (x, y) in enumerate(corners)]
        if all(v == 0 for v in o):
            return rows, cols
        m = _homography(corners, src)
        den = m[2, 0] * cols + m[2, 1] * rows + m[2, 2]
        src_x = (m[0, 0] * cols + m[0, 1] * rows + m[0, 2]) / den
        src_y = (m[1, 0] * cols + m[1, 1] * rows + m[1, 2]) / den
        return src_y, src_x
    raise AugmentError(f"{t.kind} is not a geometric transform")


def sample_bilinear(img: np.ndarray, src_r: np.ndarray, src_c: np.ndarray) -> np.ndarray:
    """Bilinear lookup; taps falling outside the image read as 0."""
    h, w = img.shape
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0
    out = np.zeros(src_r.shape, dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = r0 + dr
            cc = c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            wgt = wr * wc
            vals = np.where(ok, img[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)], 0.0)
            out += np.where(wgt != 0, wgt * vals, 0.0)
    return out


def sample_nearest(mask: np.ndarray, src_r: np.ndarray, src_c: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    rr = np.floor(src_r + 0.5).astype(np.int64)
    cc = np.floor(src_c + 0.5).astype(np.int64)
    ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    vals = mask[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
    return np.where(ok, vals, 0).astype(mask.dtype)


def geometric_transform(image: np.ndarray, masks: list, t: ResolvedTransform):
    """Warp ``image`` (bilinear) and ``masks`` (nearest) through one coordinate map."""
    if t.kind not in GEOMETRIC:
        raise AugmentError(f"{t.kind} is not a geometric transform")
    for m in masks:
        if m.shape != image.shape:
            raise AugmentError("image and masks must share a shape")
    if t.kind == "hflip":
        return image[:, ::-1].copy(), [m[:, ::-1].copy() for m in masks]
    src_r, src_c = source_coordinates(t, image.shape)
    out = np.clip(sample_bilinear(np.asarray(image, dtype=np.float64), src_r, src_c), 0.0, 1.0)
    return out, [sample_nearest(m, src_r, src_c) for m in masks]


# ---------------------------------------------------------------------------
# Photometric transforms
# ---------------------------------------------------------------------------

def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _hue_saturation(image, dh, ds, dv):
    hsv = rgb_to_hsv(np.repeat(image[..., None], 3, axis=-1))
    hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] + ds, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] + dv, 0.0, 1.0)
    rgb = hsv_to_rgb(hsv)
    return rgb @ np.array([0.299, 0.587, 0.114])


def photometric_transform(image: np.ndarray, t: ResolvedTransform) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    p = t.params
    if t.kind == "gaussian_noise":
        if p["sigma"] == 0:
            return image.copy()
        noise = np.random.default_rng(p["noise_seed"]).normal(0.0, p["sigma"], size=image.shape)
        out = image + noise
    elif t.kind == "brightness":
        out = image + p["delta"]
    elif t.kind == "contrast":
        mean = image.mean()
        out = mean + (image - mean) * (1.0 + p["delta"])
    elif t.kind == "hue_saturation":
        out = _hue_saturation(image, p["hue"], p["saturation"], p["value"])
    else:
        raise AugmentError(f"{t.kind} is not a photometric transform")
    return np.clip(out, 0.0, 1.0)


def clahe(image: np.ndarray, tiles=(8, 8), clip_limit: float = 4.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on a [0, 1] image.

    ``tiles`` is (tiles along x, tiles along y). Images not divisible by the
    tile grid are edge-extended. A tile whose histogram occupies a single
    bin keeps its pixels unchanged.
    """
    image = np.asarray(image, dtype=np.float64)
    tx, ty = int(tiles[0]), int(tiles[1])
    if tx < 1 or ty < 1:
        raise AugmentError("tile counts must be >= 1")
    if clip_limit <= 0:
        raise AugmentError("clip_limit must be > 0")
    h, w = image.shape
    th, tw = -(-h // ty), -(-w // tx)
    q = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.int64)
    padded = np.pad(q, ((0, th * ty - h), (0, tw * tx - w)), mode="edge")
    blocks = padded.reshape(ty, th, tx, tw).transpose(0, 2, 1, 3).reshape(ty * tx, th * tw)
    offsets = np.arange(ty * tx)[:, None] * 256
    hist = np.bincount((blocks + offsets).ravel(), minlength=ty * tx * 256)
    hist = hist.reshape(ty * tx, 256).astype(np.float64)
    n = th * tw
    identity = (hist > 0).sum(axis=1) == 1

    clip = clip_limit * n / 256.0
    excess = np.maximum(hist - clip, 0.0).sum(axis=1, keepdims=True)
    hist = np.minimum(hist, clip) + excess / 256.0
    lut = np.cumsum(hist, axis=1) / n

    # per-tile mapped values, identity tiles pass the raw value through
    mapped = lut[:, q]  # (tiles, h, w)
    mapped = np.where(identity[:, None, None], image[None], mapped)
    mapped = mapped.reshape(ty, tx, h, w)

    def axis_weights(n_pix, size, count):
        u = np.clip((np.arange(n_pix) + 0.5) / size - 0.5, 0.0, count - 1)
        i0 = np.floor(u).astype(np.int64)
        i1 = np.minimum(i0 + 1, count - 1)
        return i0, i1, u - i0

    r0, r1, fr = axis_weights(h, th, ty)
    c0, c1, fc = axis_weights(w, tw, tx)
    rr = np.arange(h)[:, None]
    cc = np.arange(w)[None, :]
    fr = fr[:, None]
    fc = fc[None, :]
    out = image.copy()
    for ri, wr in ((r0, 1.0 - fr), (r1, fr)):
        for ci, wc in ((c0, 1.0 - fc), (c1, fc)):
            m = mapped[ri[:, None], ci[None, :], rr, cc]
            out += wr * wc * (m - image)
    return np.clip(out, 0.0, 1.0)


def kernel_filter(image: np.ndarray, kind: str, ksize: int, alpha: float = 0.0) -> np.ndarray:
    """Edge-replicate 2-D convolution with a box, horizontal-line or sharpen kernel."""
    if ksize < 3 or ksize % 2 == 0:
        raise EvenKernel(f"ksize must be odd and >= 3, got {ksize}")
    image = np.asarray(image, dtype=np.float64)
    if kind in ("blur", "sharpen"):
        kernel = np.full((ksize, ksize), 1.0 / (ksize * ksize))
    elif kind == "motion_blur":
        kernel = np.zeros((ksize, ksize))
        kernel[ksize // 2, :] = 1.0 / ksize
    else:
        raise AugmentError(f"unknown filter {kind!r}")
    r = ksize // 2
    padded = np.pad(image, r, mode="edge")
    h, w = image.shape
    out = np.zeros_like(image)
    for i in range(ksize):
        for j in range(ksize):
            if kernel[i, j] != 0:
                out += kernel[i, j] * padded[i:i + h, j:j + w]
    if kind == "sharpen":
        if alpha == 0:
            return image.copy()
        out = image + alpha * (image - out)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def apply_transform(image, masks, t: ResolvedTransform):
    if t.kind in GEOMETRIC:
        return geometric_transform(image, masks, t)
    if t.kind in PHOTOMETRIC:
        return photometric_transform(image, t), masks
    if t.kind == "clahe":
        return clahe(image, t.params["tiles"], t.params["clip_limit"]), masks
    if t.kind in FILTERS:
        return kernel_filter(image, t.kind, t.params["ksize"], t.params.get("alpha", 0.0)), masks
    raise AugmentError(f"unknown transform kind {t.kind!r}")


def apply_pipeline(spec: AugSpec, sample_index: int, s: SliceSample) -> SliceSample:
    image = np.asarray(s.image, dtype=np.float64)
    masks = [s.lung_mask, s.infection_mask]
    for t in sample_pipeline(spec, sample_index):
        image, masks = apply_transform(image, masks, t)
    return SliceSample(image, masks[0], masks[1], s.source_id, s.slice_index)
