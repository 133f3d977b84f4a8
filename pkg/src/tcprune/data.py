"""Synthetic covariate-shift domain pairs, the TCPT tensor file format, and batching."""
from __future__ import annotations

import logging
import math
import os
import struct
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import yaml

from .errors import ConfigError, DataError, FormatError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShiftParams:
    """Target-domain covariate shift. The defaults are the identity shift."""

    brightness: float = 0.0     # additive offset, [-0.5, 0.5]
    contrast: float = 1.0       # gain about 0.5, [0.25, 2.0]
    color_mix: float = 0.0      # blend towards a cyclic RGB channel permutation, [0, 1]
    rotation_deg: float = 0.0   # geometry rotation offset, [-45, 45]
    noise: float = 0.0          # extra gaussian pixel noise std, [0, 0.5]

    RANGES = {"brightness": (-0.5, 0.5), "contrast": (0.25, 2.0), "color_mix": (0.0, 1.0),
              "rotation_deg": (-45.0, 45.0), "noise": (0.0, 0.5)}

    def __post_init__(self):
        for name, (lo, hi) in self.RANGES.items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ConfigError(f"shift parameter {name}={v} outside [{lo}, {hi}]")

    def as_dict(self):
        return {k: getattr(self, k) for k in self.RANGES}


@dataclass
class SourceDomain:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.images)


class TargetDomain:
    """Unlabeled target images; labels exist only behind :meth:`audited_labels`."""

    def __init__(self, images, labels=None):
        self.images = images
        self.__labels = None if labels is None else np.asarray(labels)
        self.audit_log = []

    def __len__(self):
        return len(self.images)

    @property
    def has_labels(self):
        return self.__labels is not None

    def audited_labels(self, purpose, indices=None):
        """Ground-truth labels for evaluation only; every access is logged."""
        if self.__labels is None:
            raise DataError("target domain carries no evaluation labels")
        self.audit_log.append(purpose)
        log.info("target labels read for %s", purpose)
        return self.__labels if indices is None else self.__labels[indices]


@dataclass
class DomainPair:
    source: SourceDomain
    target: TargetDomain
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source.images.shape[1:] != self.target.images.shape[1:]:
            raise DataError(f"domains disagree on image shape: {self.source.images.shape[1:]} "
                            f"vs {self.target.images.shape[1:]}")

    @property
    def image_shape(self):
        return tuple(self.source.images.shape[1:])


# --------------------------------------------------------------------------
# procedural generator
# --------------------------------------------------------------------------

def _class_geometry(label):
    """(orientation in degrees, bar count). Orientation alternates, count grows every two classes."""
    return (0.0 if label % 2 == 0 else 90.0), label // 2 + 1


def _render(labels, size, channels, rng, rotation_offset, base_noise):
    n = len(labels)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    ys -= (size - 1) / 2
    xs -= (size - 1) / 2
    out = np.empty((n, channels, size, size))
    for k, lab in enumerate(labels):
        orient, count = _class_geometry(int(lab))
        theta = math.radians(orient + rng.uniform(-8, 8) + rotation_offset)
        c, s = math.cos(theta), math.sin(theta)
        u = xs * c + ys * s      # along the bar
        v = -xs * s + ys * c     # across the bar
        spacing = size / (count + 1)
        shift = rng.uniform(-1.5, 1.5)
        mask = np.zeros((size, size))
        for b in range(count):
            offset = (b + 1) * spacing - size / 2 + shift
            length = rng.uniform(0.55, 0.8) * size
            thick = rng.uniform(1.2, 2.0)
            du = rng.uniform(-1.5, 1.5)
            m = (1 / (1 + np.exp(-(thick / 2 - np.abs(v - offset)) / 0.35))
                 * 1 / (1 + np.exp(-(length / 2 - np.abs(u - du)) / 0.35)))
            mask = np.maximum(mask, m)
        bg = rng.uniform(0.05, 0.35, size=channels)
        fg = rng.uniform(0.55, 1.0, size=channels)
        img = bg[:, None, None] * (1 - mask) + fg[:, None, None] * mask
        out[k] = img + rng.normal(0, base_noise, img.shape)
    return out


def _apply_shift(images, shift: ShiftParams, rng):
    x = images
    if shift.color_mix:
        perm = np.roll(np.arange(x.shape[1]), 1)
        x = (1 - shift.color_mix) * x + shift.color_mix * x[:, perm]
    x = (x - 0.5) * shift.contrast + 0.5 + shift.brightness
    if shift.noise:
        x = x + rng.normal(0, shift.noise, x.shape)
    return x


def round_robin_labels(n, classes, rng):
    labels = np.arange(n) % classes
    return labels[rng.permutation(n)]


def generate_synthetic_domains(n_source, n_target, classes=4, image_size=16, channels=3,
                               shift: ShiftParams = ShiftParams(), seed=0, base_noise=0.05,
                               generator="bars") -> DomainPair:
    """Class-conditional bar images; the target applies ``shift`` on top of the same geometry.

    Class ``c`` draws ``c // 2 + 1`` parallel bars, horizontal for even ``c`` and
    vertical for odd ``c``, so labels survive horizontal flips.
    """
    if generator != "bars":
        raise ConfigError(f"unknown generator {generator!r}")
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if n_source < 1 or n_target < 1:
        raise ConfigError("both domains need at least one example")
    if not isinstance(shift, ShiftParams):
        shift = ShiftParams(**shift)
    rs = np.random.default_rng([seed, 0])
    rt = np.random.default_rng([seed, 1])
    ys = round_robin_labels(n_source, classes, rs)
    yt = round_robin_labels(n_target, classes, rt)
    xs = _render(ys, image_size, channels, rs, 0.0, base_noise)
    xt = _render(yt, image_size, channels, rt, shift.rotation_deg, base_noise)
    xt = _apply_shift(xt, shift, rt)
    prov = {"generator": generator, "seed": seed, "n_source": n_source, "n_target": n_target,
            "classes": classes, "image_size": image_size, "channels": channels,
            "base_noise": base_noise, "shift": shift.as_dict()}
    return DomainPair(SourceDomain(xs.astype(np.float32), ys.astype(np.int64)),
                      TargetDomain(xt.astype(np.float32), yt.astype(np.int64)), classes, prov)


# --------------------------------------------------------------------------
# TCPT binary tensor format
# --------------------------------------------------------------------------

TCPT_MAGIC = b"TCPT"
TCPT_VERSION = 1
DTYPE_F32 = 0
MAX_ELEMENTS = 1 << 40


def save_tensor_file(path, tensor, labels=None):
    """Write ``tensor`` as TCPT; ``labels`` (if given) go to ``<path>.labels`` as raw u32."""
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    if arr.ndim > 255:
        raise DataError("rank too large for TCPT")
    with open(path, "wb") as fh:
        fh.write(TCPT_MAGIC + struct.pack("<HBB", TCPT_VERSION, DTYPE_F32, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())
    if labels is not None:
        np.ascontiguousarray(labels, dtype="<u4").tofile(f"{path}.labels")


def load_tensor_file(path, with_labels=False):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError(f"truncated header: expected at least 8 bytes, got {len(blob)}", len(blob))
    if blob[:4] != TCPT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {TCPT_MAGIC!r}", 0)
    version, dtype, rank = struct.unpack_from("<HBB", blob, 4)
    if version != TCPT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}", 6)
    hdr = 8 + 8 * rank
    if len(blob) < hdr:
        raise FormatError(f"truncated dims: expected {hdr} header bytes, got {len(blob)}", len(blob))
    dims = struct.unpack_from(f"<{rank}Q", blob, 8)
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise FormatError(f"header claims more than {MAX_ELEMENTS} elements; refusing to allocate", 8)
    expected = hdr + 4 * count
    if len(blob) != expected:
        raise FormatError(f"payload length mismatch: expected {expected} bytes, got {len(blob)}", hdr)
    arr = np.frombuffer(blob, dtype="<f4", offset=hdr, count=count).reshape(dims).astype(np.float32)
    if not with_labels:
        return arr
    lab_path = f"{path}.labels"
    labels = np.fromfile(lab_path, dtype="<u4").astype(np.int64) if os.path.exists(lab_path) else None
    if labels is not None and rank and len(labels) != dims[0]:
        raise FormatError(f"label file has {len(labels)} entries for {dims[0]} rows", 0)
    return arr, labels


def save_domain_pair(pair: DomainPair, directory):
    os.makedirs(directory, exist_ok=True)
    save_tensor_file(os.path.join(directory, "source.tcpt"), pair.source.images, pair.source.labels)
    labels = pair.target.audited_labels("export") if pair.target.has_labels else None
    save_tensor_file(os.path.join(directory, "target.tcpt"), pair.target.images, labels)
    with open(os.path.join(directory, "meta.yaml"), "w") as fh:
        yaml.safe_dump({"num_classes": pair.num_classes, "provenance": pair.provenance}, fh, sort_keys=True)


def load_domain_pair(directory) -> DomainPair:
    with open(os.path.join(directory, "meta.yaml")) as fh:
        meta = yaml.safe_load(fh)
    xs, ys = load_tensor_file(os.path.join(directory, "source.tcpt"), with_labels=True)
    xt, yt = load_tensor_file(os.path.join(directory, "target.tcpt"), with_labels=True)
    if ys is None:
        raise DataError("source domain needs labels")
    prov = dict(meta.get("provenance") or {})
    prov["path"] = os.path.abspath(directory)
    return DomainPair(SourceDomain(xs, ys), TargetDomain(xt, yt), int(meta["num_classes"]), prov)


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Augment:
    hflip: bool = False
    crop_padding: int = 0
    normalize: bool = True


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, images):
        x = np.asarray(images, dtype=np.float64)
        return cls(x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3)))

    def __call__(self, images):
        out = (np.asarray(images, dtype=np.float64) - self.mean[None, :, None, None]) / self.std[None, :, None, None]
        return out.astype(np.asarray(images).dtype)


def hflip(images):
    return images[..., ::-1]


def random_crop(images, padding, rng):
    if not padding:
        return images
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    offs = rng.integers(0, 2 * padding + 1, size=(n, 2))
    return np.stack([padded[i, :, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(offs)])


def make_batches(images, labels, batch_size, seed, epoch=0, augment: Augment = Augment(),
                 normalizer: Normalizer = None):
    """Yield ``(x, y)`` (or ``x`` when ``labels`` is None) for one seeded epoch."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    n = len(images)
    if batch_size > n:
        warnings.warn(f"batch size {batch_size} exceeds dataset size {n}; using one batch of {n}", RuntimeWarning)
        batch_size = n
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = images[idx]
        if augment.hflip:
            flip = rng.random(len(idx)) < 0.5
            x = x.copy()
            x[flip] = hflip(x[flip])
        if augment.crop_padding:
            x = random_crop(x, augment.crop_padding, rng)
        if augment.normalize and normalizer is not None:
            x = normalizer(x)
        yield (x, labels[idx]) if labels is not None else x
