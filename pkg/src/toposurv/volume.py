"""Multi-modal volume container, resampling/normalization, mask ring
geometry, and synthetic phantoms with known topology and planted hazard."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from .survival import SurvivalRecord

MODALITIES = ("t1", "t1ce", "t2", "flair")

REGION_TUMOR = 0
REGION_RING_0_5 = 1
REGION_RING_5_10 = 2
REGION_RING_10_20 = 3
REGION_NORMAL = 4
REGION_NAMES = ("tumor", "ring_0_5", "ring_5_10", "ring_10_20", "normal")

DEFAULT_RING_EDGES = (0.0, 5.0, 10.0, 20.0)


class ZeroExtent(ValueError):
    pass


class NonFiniteInput(ValueError):
    pass


@dataclass
class MultiModalVolume:
    """Four co-registered modality channels sharing one (D, H, W) grid."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[0] != len(MODALITIES):
            raise ValueError(f"expected (4, D, H, W), got {self.data.shape}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def normalized(self) -> "MultiModalVolume":
        return MultiModalVolume(np.stack([minmax_normalize(c) for c in self.data]))

    def resampled(self, target_extents) -> "MultiModalVolume":
        return MultiModalVolume(
            np.stack([resample_trilinear(c, target_extents) for c in self.data]))


@dataclass
class Mask:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.ndim != 3:
            raise ValueError(f"mask must be 3D, got {self.data.shape}")


@dataclass
class RegionPartition:
    """Per-voxel region codes; every voxel gets exactly one code."""

    labels: np.ndarray

    def voxel_counts(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=len(REGION_NAMES))


def resample_trilinear(volume: np.ndarray, target_extents) -> np.ndarray:
    """Align-corners trilinear resampling: source index t*(S-1)/(T-1).

    Separable linear interpolation per axis; an exact copy when the
    extents already match.  Axes with source extent 1 are constant.
    """
    volume = np.asarray(volume, dtype=np.float64)
    target_extents = tuple(int(t) for t in target_extents)
    if volume.ndim != len(target_extents):
        raise ValueError(f"rank mismatch: {volume.shape} vs {target_extents}")
    if min(volume.shape) < 1 or min(target_extents) < 1:
        raise ZeroExtent(f"{volume.shape} -> {target_extents}")
    if volume.shape == target_extents:
        return volume.copy()
    out = volume
    for axis, target in enumerate(target_extents):
        out = _interp_axis(out, target, axis)
    return out


def _interp_axis(vol: np.ndarray, target: int, axis: int) -> np.ndarray:
    source = vol.shape[axis]
    if source == target:
        return vol
    if source == 1:
        return np.repeat(vol, target, axis=axis)
    if target == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(target) * (source - 1) / (target - 1)
    lo = np.floor(pos).astype(np.int64)
    lo = np.minimum(lo, source - 2)
    w = pos - lo
    shape = [1] * vol.ndim
    shape[axis] = target
    w = w.reshape(shape)
    a = np.take(vol, lo, axis=axis)
    b = np.take(vol, lo + 1, axis=axis)
    return a * (1.0 - w) + b * w


def minmax_normalize(channel: np.ndarray) -> np.ndarray:
    """Per-channel (x - min)/(max - min); constant channels map to zeros."""
    channel = np.asarray(channel, dtype=np.float64)
    if not np.all(np.isfinite(channel)):
        raise NonFiniteInput("channel contains non-finite values")
    lo, hi = channel.min(), channel.max()
    if hi == lo:
        return np.zeros_like(channel)
    return (channel - lo) / (hi - lo)


def region_partition(mask: Mask, ring_edges=DEFAULT_RING_EDGES) -> RegionPartition:
    """Tumor / distance-ring / normal codes from the Euclidean distance
    transform of the tumor set.  An empty mask labels everything normal."""
    m = mask.data
    labels = np.full(m.shape, REGION_NORMAL, dtype=np.int8)
    if not m.any():
        return RegionPartition(labels)
    dist = distance_transform_edt(~m)
    edges = tuple(ring_edges)
    for code in range(len(edges) - 1, 0, -1):
        labels[(dist >= edges[code - 1]) & (dist < edges[code]) & ~m] = code
    labels[m] = REGION_TUMOR
    return RegionPartition(labels)


@dataclass
class PhantomSpec:
    """Spherical tumor phantom: optional cavity, noisy modality copies,
    survival time decreasing in tumor size."""

    extents: tuple[int, int, int] = (32, 32, 32)
    center: tuple[int, int, int] | None = None
    outer_radius: float = 6.0
    cavity_radius: float = 0.0
    rim_intensity: float = 0.9
    core_intensity: float = 0.35
    background_intensity: float = 0.1
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.center is None:
            self.center = tuple(e // 2 for e in self.extents)
        if not 0 <= self.cavity_radius < self.outer_radius:
            raise ValueError(
                f"need 0 <= cavity {self.cavity_radius} < outer {self.outer_radius}")
        for c, e in zip(self.center, self.extents):
            if c - self.outer_radius < 0 or c + self.outer_radius >= e:
                raise ValueError(f"radius {self.outer_radius} leaves extents {self.extents}")


CENSORING_RATE = 0.2


def make_phantom(spec: PhantomSpec) -> tuple[MultiModalVolume, Mask, SurvivalRecord]:
    """Deterministic phantom for a given spec and seed.

    The tumor mask is the rim shell when a cavity is present (Betti
    (1,0,1)) and the solid ball otherwise (Betti (1,0,0)).  Survival time
    decays with outer radius plus seeded lognormal jitter; events are
    drawn at a fixed 0.2 censoring rate.
    """
    rng = np.random.default_rng(spec.seed)
    grids = np.ogrid[tuple(slice(0, e) for e in spec.extents)]
    rho = np.sqrt(sum((g - c) ** 2.0 for g, c in zip(grids, spec.center)))

    base = np.full(spec.extents, spec.background_intensity, dtype=np.float64)
    base[rho <= spec.outer_radius] = spec.rim_intensity
    if spec.cavity_radius > 0:
        base[rho < spec.cavity_radius] = spec.core_intensity
        mask = (rho <= spec.outer_radius) & (rho >= spec.cavity_radius)
    else:
        mask = rho <= spec.outer_radius

    channels = []
    for _ in MODALITIES:
        noisy = base + rng.normal(0.0, spec.noise_sigma, size=spec.extents)
        channels.append(minmax_normalize(noisy))
    volume = MultiModalVolume(np.stack(channels))

    jitter = rng.normal()
    time_days = float(1500.0 * np.exp(-0.18 * spec.outer_radius + 0.12 * jitter))
    event = int(rng.random() >= CENSORING_RATE)
    age = float(45.0 + 30.0 * rng.random())
    record = SurvivalRecord(time=time_days, event=event, covariates=(age,))
    return volume, Mask(mask), record


def occlude(volume, center, side: int, fill: float = 0.0):
    """Copy with an axis-aligned cube (clamped to bounds) set to fill in
    every channel; the input is untouched."""
    if side < 1:
        raise ValueError(f"side must be >= 1, got {side}")
    arr = volume.data if isinstance(volume, MultiModalVolume) else np.asarray(volume)
    spatial = arr.shape[1:] if arr.ndim == 4 else arr.shape
    slices = []
    for c, n in zip(center, spatial):
        lo = max(0, c - side // 2)
        hi = min(n, c - side // 2 + side)
        slices.append(slice(lo, hi))
    out = arr.copy()
    if arr.ndim == 4:
        out[(slice(None),) + tuple(slices)] = fill
    else:
        out[tuple(slices)] = fill
    return MultiModalVolume(out) if isinstance(volume, MultiModalVolume) else out
