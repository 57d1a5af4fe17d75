"""Dataset archives, preprocessing, augmentation and batching.

Archives follow the MedMNIST layout: a ZIP container holding NPY (v1.0)
arrays named ``{train,val,test}_{images,labels}``. Images are stored as
bytes and loaded as float32 in [0, 1], channel-last, always 3 channels.
"""
from __future__ import annotations

import io
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple

import numpy as np
from numpy.lib import format as npy_format

from . import kernels

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

# name -> (dims, (train, val, test), classes, modality)
REGISTRY: Dict[str, Tuple[int, Tuple[int, int, int], int, str]] = {
    "breastmnist": (2, (546, 78, 156), 2, "Ultrasound"),
    "retinamnist": (2, (1080, 120, 400), 5, "Fundus imaging"),
    "bloodmnist": (2, (11959, 1712, 3421), 8, "Microscopy"),
    "dermamnist": (2, (7007, 1003, 2005), 7, "Dermatoscopy"),
    "octmnist": (2, (97477, 10832, 1000), 4, "Retinal OCT"),
    "organsmnist": (2, (13932, 2452, 8827), 11, "Abdominal CT"),
    "pneumoniamnist": (2, (4708, 524, 624), 2, "X-ray"),
    "adrenalmnist3d": (3, (1188, 98, 298), 2, "Abdominal CT"),
    "fracturemnist3d": (3, (1027, 103, 240), 3, "Chest CT"),
    "nodulemnist3d": (3, (1158, 165, 310), 2, "Chest CT"),
    "synapsemnist3d": (3, (1230, 177, 352), 2, "Electron Microscopy"),
    "vesselmnist3d": (3, (1335, 191, 382), 2, "Brain MRA"),
}


class DatasetFormatError(ValueError):
    """Archive or array payload cannot be parsed."""


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass
class DatasetBundle:
    name: str
    dims: int
    splits: Dict[str, Split]
    num_classes: int
    modality: str = ""

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.splits["train"].images.shape[1:])

    def sizes(self) -> Tuple[int, ...]:
        return tuple(len(self.splits[s]) for s in SPLITS)

    def validate(self):
        shapes = {tuple(self.splits[s].images.shape[1:]) for s in SPLITS}
        if len(shapes) != 1:
            raise ValueError(f"{self.name}: splits disagree on image shape: {sorted(shapes)}")
        for s in SPLITS:
            sp = self.splits[s]
            if len(sp.images) != len(sp.labels):
                raise ValueError(f"{self.name}/{s}: {len(sp.images)} images but {len(sp.labels)} labels")
            if len(sp.labels) and (sp.labels.min() < 0 or sp.labels.max() >= self.num_classes):
                raise ValueError(f"{self.name}/{s}: labels outside [0, {self.num_classes})")


# -- archive I/O -------------------------------------------------------------------

def _parse_npy(name: str, raw: bytes) -> np.ndarray:
    buf = io.BytesIO(raw)
    try:
        version = npy_format.read_magic(buf)
    except ValueError as exc:
        raise DatasetFormatError(f"{name}: bad NPY magic at offset 0: {exc}") from None
    try:
        if version == (1, 0):
            shape, fortran, dtype = npy_format.read_array_header_1_0(buf)
        else:
            shape, fortran, dtype = npy_format.read_array_header_2_0(buf)
    except ValueError as exc:
        raise DatasetFormatError(f"{name}: bad NPY header at offset 8: {exc}") from None
    if dtype.hasobject:
        raise DatasetFormatError(f"{name}: object arrays are not supported")
    offset = buf.tell()
    need = int(np.prod(shape)) * dtype.itemsize
    have = len(raw) - offset
    if have < need:
        raise DatasetFormatError(
            f"{name}: truncated array data at offset {offset + have} (expected {need} bytes after header at {offset}, found {have})")
    arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    return arr.reshape(shape, order="F" if fortran else "C")


def read_archive(path) -> Dict[str, np.ndarray]:
    """Read every ``*.npy`` member of a ZIP archive."""
    path = Path(path)
    size = path.stat().st_size
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise DatasetFormatError(f"{path}: not a readable ZIP archive ({exc}); file ends at offset {size}") from None
    arrays = {}
    with zf:
        for info in zf.infolist():
            if not info.filename.endswith(".npy"):
                continue
            try:
                raw = zf.read(info)
            except (zipfile.BadZipFile, EOFError, OSError, ValueError) as exc:
                raise DatasetFormatError(
                    f"{path}: member {info.filename} at offset {info.header_offset} is corrupt or truncated ({exc})") from None
            arrays[info.filename[:-4]] = _parse_npy(info.filename, raw)
    return arrays


def write_archive(path, arrays: Dict[str, np.ndarray]):
    """Write arrays as NPY v1.0 members; fixed timestamps keep bytes reproducible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            npy_format.write_array(buf, np.ascontiguousarray(arr), version=(1, 0), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


# -- preprocessing -----------------------------------------------------------------

def to_three_channels(x: np.ndarray) -> np.ndarray:
    """Replicate a trailing single channel to three; 3-channel input is returned as is."""
    c = x.shape[-1]
    if c == 3:
        return x
    if c != 1:
        raise ValueError(f"expected 1 or 3 channels, got {c}")
    return np.repeat(x, 3, axis=-1)


def _images_to_float(images: np.ndarray, dims: int) -> np.ndarray:
    if images.ndim == dims + 1:
        images = images[..., None]
    elif images.ndim != dims + 2:
        raise DatasetFormatError(f"images of shape {images.shape} are not {dims}D")
    if images.dtype == np.uint8:
        out = images.astype(np.float32) / np.float32(255.0)
    else:
        out = images.astype(np.float32)
        if out.size and out.max() > 1.0:
            out /= np.float32(255.0)
    return to_three_channels(np.clip(out, 0.0, 1.0))


def load_dataset(path, name: Optional[str] = None) -> DatasetBundle:
    """Load a MedMNIST-layout archive into a 3-channel float bundle.

    Split sizes that differ from the built-in registry only log a warning,
    so subsets load fine.
    """
    path = Path(path)
    name = (name or path.stem).lower()
    arrays = read_archive(path)
    missing = [f"{s}_{k}" for s in SPLITS for k in ("images", "labels") if f"{s}_{k}" not in arrays]
    if missing:
        raise DatasetFormatError(f"{path}: missing arrays {', '.join(missing)}")

    reg = REGISTRY.get(name)
    if reg is not None:
        dims = reg[0]
    else:
        dims = 3 if name.endswith("3d") or arrays["train_images"].ndim == 5 else 2

    splits = {}
    for s in SPLITS:
        labels = np.asarray(arrays[f"{s}_labels"]).reshape(len(arrays[f"{s}_labels"]), -1)
        if labels.shape[1] != 1:
            raise DatasetFormatError(f"{s}_labels: multi-label targets of shape {labels.shape} are not supported")
        splits[s] = Split(_images_to_float(arrays[f"{s}_images"], dims), labels[:, 0].astype(np.int64))

    all_labels = np.concatenate([splits[s].labels for s in SPLITS])
    num_classes = reg[2] if reg is not None else int(all_labels.max()) + 1
    bundle = DatasetBundle(name, dims, splits, num_classes, reg[3] if reg else "")
    if reg is not None and bundle.sizes() != reg[1]:
        log.warning("%s: split sizes %s differ from registry %s", name, bundle.sizes(), reg[1])
    bundle.validate()
    return bundle


def save_dataset(bundle: DatasetBundle, path):
    """Write a bundle in the archive layout (images quantised to bytes)."""
    arrays = {}
    for s in SPLITS:
        sp = bundle.splits[s]
        arrays[f"{s}_images"] = np.round(np.clip(sp.images, 0.0, 1.0) * 255.0).astype(np.uint8)
        arrays[f"{s}_labels"] = sp.labels.astype(np.int64).reshape(-1, 1)
    write_archive(path, arrays)


# -- augmentation ------------------------------------------------------------------

@dataclass
class AugmentationPolicy:
    crop: bool = True
    crop_scale: Tuple[float, float] = (0.8, 1.0)
    crop_ratio: Tuple[float, float] = (3 / 4, 4 / 3)
    hflip_p: float = 0.5
    rotate: bool = True
    rotate_deg: float = 15.0
    jitter: bool = True
    brightness: float = 0.1
    contrast: float = 0.1
    # volumes
    flip3d_p: float = 0.5
    rot90_p: float = 0.5

    def __post_init__(self):
        self.crop_scale = tuple(self.crop_scale)
        self.crop_ratio = tuple(self.crop_ratio)
        for name in ("hflip_p", "flip3d_p", "rot90_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale must lie in (0, 1], got {self.crop_scale}")
        if self.rotate_deg < 0 or self.brightness < 0 or self.contrast < 0:
            raise ValueError("magnitudes must be non-negative")

    @classmethod
    def disabled(cls) -> "AugmentationPolicy":
        return cls(crop=False, hflip_p=0.0, rotate=False, jitter=False, flip3d_p=0.0, rot90_p=0.0)


def _sample_rng(seed: int, index: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def augment(sample: np.ndarray, policy: AugmentationPolicy, seed: int, index: int = 0, epoch: int = 0) -> np.ndarray:
    """Randomly transform one image (H, W, C) or volume (D, H, W, C).

    Randomness is keyed by ``(seed, index, epoch)``. 2D order: resized crop,
    horizontal flip, rotation, brightness/contrast. 3D: per-axis flips then
    right-angle rotations. Shape is preserved and values stay in [0, 1].
    """
    rng = _sample_rng(seed, index, epoch)
    if sample.ndim == 4:
        return _augment_3d(sample, policy, rng)
    if sample.ndim != 3:
        raise ValueError(f"expected (H, W, C) or (D, H, W, C), got {sample.shape}")
    return _augment_2d(sample, policy, rng)


def _augment_2d(img: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    H, W, _ = img.shape
    out = img
    if policy.crop:
        area = H * W * rng.uniform(*policy.crop_scale)
        ratio = math.exp(rng.uniform(math.log(policy.crop_ratio[0]), math.log(policy.crop_ratio[1])))
        ch = min(H, math.sqrt(area / ratio))
        cw = min(W, math.sqrt(area * ratio))
        y0 = rng.uniform(0, H - ch)
        x0 = rng.uniform(0, W - cw)
        sy, sx = ch / H, cw / W
        # output pixel centre maps onto the crop window
        mat = np.array([[sy, 0.0, y0 + 0.5 * sy - 0.5], [0.0, sx, x0 + 0.5 * sx - 0.5]])
        out = kernels.warp_bilinear(np.ascontiguousarray(out), mat, np.empty_like(out))
    if rng.random() < policy.hflip_p:
        out = out[:, ::-1]
    if policy.rotate and policy.rotate_deg > 0:
        theta = math.radians(rng.uniform(-policy.rotate_deg, policy.rotate_deg))
        c, s = math.cos(theta), math.sin(theta)
        cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
        mat = np.array([[c, -s, cy - c * cy + s * cx], [s, c, cx - s * cy - c * cx]])
        out = kernels.warp_bilinear(np.ascontiguousarray(out), mat, np.empty_like(out))
    if policy.jitter:
        b = rng.uniform(-policy.brightness, policy.brightness)
        k = 1.0 + rng.uniform(-policy.contrast, policy.contrast)
        m = out.mean()
        out = (out - m) * k + m + b
    out = np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)
    return np.ascontiguousarray(out)


def _augment_3d(vol: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    out = vol
    for axis in range(3):
        if rng.random() < policy.flip3d_p:
            out = np.flip(out, axis=axis)
    for plane in ((1, 2), (0, 2), (0, 1)):
        if rng.random() < policy.rot90_p:
            a, b = plane
            k = int(rng.integers(1, 4))
            if out.shape[a] == out.shape[b] or k == 2:
                out = np.rot90(out, k=k, axes=plane)
    return np.ascontiguousarray(out)


# -- batching ---------------------------------------------------------------------

def batch_indices(n: int, batch_size: int, shuffle_seed: Optional[int], epoch: int = 0) -> list:
    """Index arrays of a seeded per-epoch permutation; the last batch may be short."""
    if n <= 0:
        raise ValueError("cannot batch an empty split")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def batches(split: Split, batch_size: int, shuffle_seed: Optional[int], epoch: int = 0,
            policy: Optional[AugmentationPolicy] = None, aug_seed: int = 0) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(images, labels, indices)``; augmentation applies only when ``policy`` is given."""
    for idx in batch_indices(len(split), batch_size, shuffle_seed, epoch):
        x = split.images[idx]
        if policy is not None:
            x = np.stack([augment(split.images[i], policy, aug_seed, int(i), epoch) for i in idx])
        yield x, split.labels[idx], idx


# -- synthetic texture task ----------------------------------------------------------

def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * yy + np.sin(theta) * xx
    fy, fx = rng.uniform(0.2, 0.75, size=2)
    wave = np.sin(np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    chans = [0.5 + rng.uniform(-0.1, 0.1) * ramp + rng.uniform(-0.08, 0.08) * wave for _ in range(3)]
    return np.stack(chans, axis=-1)


def generate_synthetic_texture(n_per_class: int, seed: int, size: int = 28, noise: float = 0.03,
                               amplitude: float = 0.25, region: int = 8) -> DatasetBundle:
    """Two-class 28x28x3 task separable only by fine-scale texture.

    Both classes share a smooth random background plus Gaussian noise.
    Class 1 adds a pixel-period checkerboard of the given amplitude inside
    one randomly placed ``region x region`` window; its sign is random so
    the class means coincide and no single global linear filter separates
    the classes. Splits are stratified 70/10/20 and pixel values are
    quantised to multiples of 1/255 so an archive round trip is exact.
    """
    if n_per_class < 8:
        raise ValueError("n_per_class must be >= 8")
    rng = np.random.default_rng(seed)
    checker = np.where((np.add.outer(np.arange(region), np.arange(region)) % 2) == 0, 1.0, -1.0)
    images = np.empty((2 * n_per_class, size, size, 3))
    labels = np.repeat([0, 1], n_per_class)
    for i, y in enumerate(labels):
        img = _smooth_background(rng, size) + rng.normal(0.0, noise, size=(size, size, 3))
        if y == 1:
            r, c = rng.integers(0, size - region + 1, size=2)
            sign = rng.choice([-1.0, 1.0])
            img[r:r + region, c:c + region] += (sign * amplitude * checker)[..., None]
        images[i] = img
    images = (np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)

    n_train = int(round(0.7 * n_per_class))
    n_val = int(round(0.1 * n_per_class))
    parts = {s: [] for s in SPLITS}
    for cls in (0, 1):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train:n_train + n_val])
        parts["test"].append(idx[n_train + n_val:])
    splits = {}
    for s in SPLITS:
        idx = np.concatenate(parts[s])
        idx = idx[rng.permutation(len(idx))]
        splits[s] = Split(images[idx], labels[idx].astype(np.int64))
    return DatasetBundle("synthetic_texture", 2, splits, 2, "synthetic")
