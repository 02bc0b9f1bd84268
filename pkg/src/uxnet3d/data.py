"""Preprocessing, patch sampling, augmentation and synthetic datasets."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .rng import Rng
from .volumes import LabelVolume, Volume, _array, load_raw, save_raw

CT_WINDOW = (-175.0, 250.0)


# ---------------------------------------------------------------------------
# Intensity preprocessing
# ---------------------------------------------------------------------------

def _rewrap(v, data):
    if isinstance(v, Volume):
        return Volume(data, v.spacing, v.modality)
    return data


def clip_intensity(v, lo: float = CT_WINDOW[0], hi: float = CT_WINDOW[1]):
    if not lo < hi:
        raise ValueError(f"clip window needs lo < hi, got ({lo}, {hi})")
    return _rewrap(v, np.clip(_array(v), lo, hi).astype(np.float32))


def percentile_normalize(v, p_lo: float = 1.0, p_hi: float = 99.0):
    """``(x - X_lo) / (X_hi - X_lo)`` with linearly interpolated percentiles, clamped to [0, 1]."""
    x = _array(v).astype(np.float64)
    lo, hi = np.percentile(x, [p_lo, p_hi])
    if hi == lo:
        raise ValueError("percentile_normalize: constant volume (upper and lower percentiles coincide)")
    out = np.clip((x - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)
    return _rewrap(v, out)


# ---------------------------------------------------------------------------
# Patch sampling
# ---------------------------------------------------------------------------

def pad_to(x: np.ndarray, size) -> np.ndarray:
    """Zero-pad at the far end of each axis up to ``size``."""
    pads = [(0, max(0, s - e)) for e, s in zip(x.shape, size)]
    if not any(p for _, p in pads):
        return x
    return np.pad(x, pads)


def random_crop_foreground(image, label, size=(96, 96, 96), rng: Rng | None = None, fg_prob: float = 1 / 3):
    """Crop around a random foreground voxel with probability ``fg_prob``, else uniformly."""
    rng = rng or Rng(0)
    img, lab = _array(image), _array(label)
    if img.shape != lab.shape:
        raise ValueError(f"image {img.shape} and label {lab.shape} shapes differ")
    size = tuple(size)
    img, lab = pad_to(img, size), pad_to(lab, size)
    shape = np.array(img.shape)
    use_fg = rng.random() < fg_prob
    fg = np.flatnonzero(lab > 0) if use_fg else None
    if use_fg and fg.size:
        center = np.array(np.unravel_index(fg[rng.integers(0, fg.size)], lab.shape))
    else:
        center = np.array([rng.integers(0, e) for e in shape])
    start = np.clip(center - np.array(size) // 2, 0, shape - np.array(size))
    sl = tuple(slice(int(a), int(a) + s) for a, s in zip(start, size))
    return img[sl].copy(), lab[sl].copy()


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentParams:
    rotation_deg: float = 30.0
    scale: float = 0.1
    offset: float = 0.1
    p_rotate: float = 0.5
    p_scale: float = 0.5
    p_offset: float = 0.5

    def __post_init__(self):
        if min(self.rotation_deg, self.scale, self.offset) < 0:
            raise ValueError("augmentation ranges must be non-negative")
        if self.scale >= 1:
            raise ValueError("scale range must be below 1")
        for p in (self.p_rotate, self.p_scale, self.p_offset):
            if not 0 <= p <= 1:
                raise ValueError(f"probabilities must lie in [0, 1], got {p}")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentParams":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown AugmentParams keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def rotate(image: np.ndarray, label: np.ndarray, axis: int, angle_deg: float):
    """Rotate about principal ``axis``; multiples of 90 degrees are exact permutations."""
    plane = tuple(a for a in range(3) if a != axis)
    quarter = angle_deg / 90.0
    if float(quarter).is_integer():
        k = int(quarter) % 4
        return np.rot90(image, k, plane).copy(), np.rot90(label, k, plane).copy()
    img = ndimage.rotate(image, angle_deg, axes=plane, reshape=False, order=1, mode="nearest")
    lab = ndimage.rotate(label, angle_deg, axes=plane, reshape=False, order=0, mode="nearest")
    return img.astype(image.dtype), lab.astype(label.dtype)


def rescale(image: np.ndarray, label: np.ndarray, factors):
    """Zoom by per-axis ``factors`` about the centre, resampled back to the same grid."""
    factors = np.asarray(factors, dtype=np.float64)
    center = (np.array(image.shape) - 1) / 2.0
    inv = 1.0 / factors
    offset = center - inv * center
    img = ndimage.affine_transform(image, np.diag(inv), offset, order=1, mode="nearest")
    lab = ndimage.affine_transform(label, np.diag(inv), offset, order=0, mode="nearest")
    return img.astype(image.dtype), lab.astype(label.dtype)


def augment(image, label, params: AugmentParams | None = None, rng: Rng | None = None):
    params = params or AugmentParams()
    rng = rng or Rng(0)
    img = np.asarray(_array(image), dtype=np.float32)
    lab = np.asarray(_array(label))
    # draw every random number up front so the stream advances identically
    do_rot, do_scale, do_off = rng.random(3) < [params.p_rotate, params.p_scale, params.p_offset]
    axis = int(rng.integers(0, 3))
    angle = float(rng.uniform(-params.rotation_deg, params.rotation_deg))
    factors = rng.uniform(1 - params.scale, 1 + params.scale, 3)
    shift = float(rng.uniform(-params.offset, params.offset))
    if do_rot and angle != 0.0:
        img, lab = rotate(img, lab, axis, angle)
    if do_scale and not np.all(factors == 1.0):
        img, lab = rescale(img, lab, factors)
    if do_off and shift != 0.0:
        img = img + np.float32(shift)
    return img, lab


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class DatasetManifest:
    entries: list  # dicts {image, label, split}, paths relative to root
    num_classes: int
    clip: list | None = None
    percentiles: list | None = None
    root: Path = Path(".")
    warnings: list | None = None

    def split(self, tag: str) -> list:
        if tag not in SPLITS:
            raise ValueError(f"unknown split {tag!r}")
        return [e for e in self.entries if e["split"] == tag]

    def validate(self) -> "DatasetManifest":
        seen = {}
        for e in self.entries:
            if e["split"] not in SPLITS:
                raise ValueError(f"unknown split tag {e['split']!r}")
            for key in ("image", "label"):
                p = self.root / e[key]
                if not p.exists():
                    raise FileNotFoundError(f"manifest path does not exist: {p}")
            if e["image"] in seen and seen[e["image"]] != e["split"]:
                raise ValueError(f"{e['image']} appears in splits {seen[e['image']]} and {e['split']}")
            seen[e["image"]] = e["split"]
        return self

    def to_json(self) -> dict:
        return {"num_classes": self.num_classes, "clip": self.clip, "percentiles": self.percentiles,
                "entries": self.entries, "warnings": self.warnings or []}

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        d = json.loads(path.read_text())
        m = cls(d["entries"], int(d["num_classes"]), d.get("clip"), d.get("percentiles"), path.parent,
                d.get("warnings"))
        return m.validate()

    def preprocess(self, image: np.ndarray) -> np.ndarray:
        x = image
        if self.clip:
            x = clip_intensity(x, *self.clip)
        if self.percentiles:
            x = percentile_normalize(x, *self.percentiles)
        return np.asarray(x, dtype=np.float32)

    def load_pairs(self, tag: str) -> list[tuple[np.ndarray, np.ndarray]]:
        """Preprocessed ``(image, label)`` arrays for one split, in manifest order."""
        out = []
        for e in self.split(tag):
            img = load_raw(self.root / e["image"]).data
            lab = load_raw(self.root / e["label"], self.num_classes).data
            out.append((self.preprocess(img), lab))
        return out


def _shape_mask(kind: str, center, radii, grid) -> np.ndarray:
    zz = [(g - c) / r for g, c, r in zip(grid, center, radii)]
    if kind == "ellipsoid":
        return zz[0] ** 2 + zz[1] ** 2 + zz[2] ** 2 <= 1.0
    return (np.abs(zz[0]) <= 1) & (np.abs(zz[1]) <= 1) & (np.abs(zz[2]) <= 1)


def synth_volume(extent, num_classes: int, shapes_per_class: int, noise: float, rng: Rng,
                 radius_range=(0.1, 0.22), max_tries: int = 200):
    """One image/label pair of non-overlapping ellipsoids and cuboids.

    Class ``c`` draws its intensity from the band ``[c, c + 1) / num_classes``
    (background included), then Gaussian noise of std ``noise`` is added.
    """
    extent = tuple(extent)
    grid = np.meshgrid(*[np.arange(e, dtype=np.float32) for e in extent], indexing="ij")
    label = np.zeros(extent, dtype=np.int32)
    occupied = np.zeros(extent, dtype=bool)
    band = 1.0 / num_classes
    image = np.full(extent, rng.uniform(0.25, 0.75) * band, dtype=np.float32)
    placed = 0
    for c in range(1, num_classes):
        for _ in range(shapes_per_class):
            for _ in range(max_tries):
                radii = [rng.uniform(*radius_range) * e for e in extent]
                center = [rng.uniform(r + 1, e - r - 2) for r, e in zip(radii, extent)]
                kind = "ellipsoid" if rng.random() < 0.5 else "cuboid"
                mask = _shape_mask(kind, center, radii, grid)
                # one voxel of clearance so shapes never touch
                if mask.any() and not (ndimage.binary_dilation(mask) & occupied).any():
                    break
            else:
                continue
            occupied |= mask
            label[mask] = c
            image[mask] = (c + rng.uniform(0.25, 0.75)) * band
            placed += 1
    if noise > 0:
        image = image + rng.normal(0.0, noise, extent).astype(np.float32)
    return image.astype(np.float32), label, placed


def synth_generate(out_dir, num_volumes: int = 20, extent=64, num_classes: int = 3, shapes_per_class: int = 2,
                   noise: float = 0.05, seed: int = 0) -> Path:
    """Write a synthetic dataset plus ``manifest.json`` (70/15/15 split); returns the manifest path."""
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    if num_volumes < 1:
        raise ValueError("num_volumes must be positive")
    extent = (extent,) * 3 if isinstance(extent, int) else tuple(extent)
    if min(extent) < 8:
        raise ValueError(f"extent must be at least 8 voxels per axis, got {extent}")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(seed)
    n_train = int(round(0.7 * num_volumes))
    n_val = int(round(0.15 * num_volumes))
    order = rng.permutation(num_volumes)
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[int(idx)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    entries, notes, present = [], [], set()
    expected = (num_classes - 1) * shapes_per_class
    for i in range(num_volumes):
        img, lab, placed = synth_volume(extent, num_classes, shapes_per_class, noise, rng)
        if placed < expected:
            msg = f"volume {i}: placed {placed} of {expected} shapes"
            notes.append(msg)
            warnings.warn(msg, stacklevel=2)
        present.update(np.unique(lab).tolist())
        name = f"vol{i:03d}"
        save_raw(Volume(img), out / f"{name}_img.uxv")
        save_raw(LabelVolume(lab, num_classes), out / f"{name}_lbl.uxv")
        entries.append({"image": f"{name}_img.uxv", "label": f"{name}_lbl.uxv", "split": split_of[i]})
    missing = sorted(set(range(num_classes)) - present)
    if missing:
        msg = f"classes {missing} absent from every volume"
        notes.append(msg)
        warnings.warn(msg, stacklevel=2)
    # intensities are already banded in [0, 1]; percentile scaling would let the
    # brightest class saturate when it covers more than 1% of the volume
    manifest = DatasetManifest(entries, num_classes, None, None, out, notes)
    return manifest.save(out / "manifest.json")
