"""Seeded random perturbations producing the perturbed copy of a target sample.

Images go through affine warp -> Gaussian blur -> horizontal flip -> padded
random crop. Flat vectors get additive isotropic Gaussian noise. Each sample
draws from its own stream keyed by ``(seed, *salt, sample_id)`` so a batch can
be perturbed in any order with identical results.
"""

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from lowbudget import _kernels
from lowbudget.errors import ContractViolation


@dataclass(frozen=True)
class PerturbConfig:
    rotation_deg_max: float = 0.0
    translate_px_max: int = 0
    scale_range: tuple = (1.0, 1.0)
    blur_sigma: float = 0.0
    hflip_prob: float = 0.0
    crop_pad: int = 0
    vector_noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        problems = []
        if self.rotation_deg_max < 0:
            problems.append("rotation_deg_max must be >= 0")
        if self.translate_px_max < 0:
            problems.append("translate_px_max must be >= 0")
        if not 0 < lo <= hi:
            problems.append("scale_range must satisfy 0 < lo <= hi")
        if self.blur_sigma < 0:
            problems.append("blur_sigma must be >= 0")
        if not 0.0 <= self.hflip_prob <= 1.0:
            problems.append("hflip_prob must lie in [0, 1]")
        if self.crop_pad < 0:
            problems.append("crop_pad must be >= 0")
        if self.vector_noise_sigma < 0:
            problems.append("vector_noise_sigma must be >= 0")
        if problems:
            raise ContractViolation("; ".join(problems))
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def to_dict(self):
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d


_AFFINE = dict(rotation_deg_max=10.0, translate_px_max=2, scale_range=(0.9, 1.1), blur_sigma=0.1, crop_pad=4)

PROFILES = {
    "images_flip": PerturbConfig(hflip_prob=0.5, **_AFFINE),
    "images_noflip": PerturbConfig(hflip_prob=0.0, **_AFFINE),
    "vectors": PerturbConfig(vector_noise_sigma=0.6),
}


def profile(name, seed=0):
    try:
        return PROFILES[name].with_seed(seed)
    except KeyError:
        raise ContractViolation(f"unknown perturbation profile {name!r}; choose from {sorted(PROFILES)}") from None


def sample_stream(seed, *keys):
    """Independent generator for one (seed, keys...) coordinate."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in keys)])


def gaussian_kernel(sigma):
    """Normalized sampled Gaussian with radius ``ceil(3 * sigma)``."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _affine_inverse(angle_deg, ty, tx, scale, h, w):
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    # forward map on (row, col) about the image centre
    fwd = scale * np.array([[c, -s], [s, c]])
    inv = np.linalg.inv(fwd)
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    out = np.empty((2, 3))
    out[:, :2] = inv
    out[:, 2] = centre - inv @ (centre + np.array([ty, tx]))
    return out


def perturb_image(image, config, rng):
    """Perturb one ``H x W`` or ``H x W x channels`` image; shape is preserved."""
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ContractViolation(f"expected an H x W (x C) image, got shape {np.shape(image)}")
    h, w, _ = img.shape
    out = img.copy()

    rot = config.rotation_deg_max
    shift = config.translate_px_max
    angle = rng.uniform(-rot, rot) if rot else 0.0
    ty, tx = rng.uniform(-shift, shift, size=2) if shift else (0.0, 0.0)
    lo, hi = config.scale_range
    scale = rng.uniform(lo, hi) if hi > lo else lo
    if angle != 0.0 or ty != 0.0 or tx != 0.0 or scale != 1.0:
        out = _kernels.bilinear_warp(out, _affine_inverse(angle, ty, tx, scale, h, w))

    if config.blur_sigma > 0:
        k = gaussian_kernel(config.blur_sigma)
        out = _kernels.blur_axis(out, k, 0)
        out = _kernels.blur_axis(out, k, 1)

    if config.hflip_prob > 0 and rng.random() < config.hflip_prob:
        out = out[:, ::-1, :].copy()

    pad = config.crop_pad
    if pad > 0:
        r0, c0 = rng.integers(0, 2 * pad + 1, size=2)
        padded = np.pad(out, ((pad, pad), (pad, pad), (0, 0)))
        out = padded[r0 : r0 + h, c0 : c0 + w].copy()

    return out[:, :, 0] if squeeze else out


def perturb_vector(x, config, rng):
    x = np.asarray(x, dtype=np.float64)
    sigma = config.vector_noise_sigma
    if sigma == 0:
        return x.copy()
    return x + rng.normal(0.0, sigma, size=x.shape)


def perturb_batch(batch, ids, config, *salt):
    """Perturb each row of ``batch`` with the stream ``(config.seed, *salt, id)``.

    Rows that are flat vectors use ``perturb_vector``; ``H x W (x C)`` rows use
    ``perturb_image``.
    """
    batch = np.asarray(batch, dtype=np.float64)
    ids = np.asarray(ids)
    if batch.shape[0] != ids.shape[0]:
        raise ContractViolation("one id per batch row is required")
    fn = perturb_vector if batch.ndim == 2 else perturb_image
    out = np.empty_like(batch)
    for row, sid in enumerate(ids):
        out[row] = fn(batch[row], config, sample_stream(config.seed, *salt, sid))
    return out
