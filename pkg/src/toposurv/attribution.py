"""Occlusion sensitivity maps and regional decomposition of the hazard
and embedding signal."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import REGION_NAMES, MultiModalVolume, RegionPartition, occlude


@dataclass
class OcclusionConfig:
    side: int = 2
    stride: int | None = None  # defaults to max(1, side // 2)
    fill: float = 0.0

    def __post_init__(self):
        if self.side < 1:
            raise ValueError("occluder side must be >= 1")
        if self.stride is None:
            self.stride = max(1, self.side // 2)


@dataclass
class RegionalAttribution:
    """Per-region fractions of total occlusion sensitivity."""

    hazard_fraction: np.ndarray
    embedding_fraction: np.ndarray
    hazard_degenerate: bool = False
    embedding_degenerate: bool = False
    region_names: tuple[str, ...] = field(default=REGION_NAMES)


def _axis_corners(extent: int, side: int, stride: int) -> list[int]:
    if extent <= side:
        return [0]
    corners = list(range(0, extent - side + 1, stride))
    if corners[-1] != extent - side:
        corners.append(extent - side)
    return corners


def occlusion_map(model, volume, config: OcclusionConfig = OcclusionConfig()):
    """Slide the occluder on the stride grid; spread each response delta
    uniformly over the occluded voxels and average overlaps by visit count.

    ``model`` must expose risk(x) -> float, embedding(x) -> 1-D array
    and top_dims (the embedding indices that count).  Returns the
    (hazard_delta, embedding_delta) volumes.
    """
    arr = volume.data if isinstance(volume, MultiModalVolume) else np.asarray(volume)
    spatial = arr.shape[1:]
    base_risk = model.risk(arr)
    base_embed = np.asarray(model.embedding(arr), dtype=np.float64)
    top = np.asarray(model.top_dims, dtype=np.int64)

    hazard_delta = np.zeros(spatial, dtype=np.float64)
    embed_delta = np.zeros(spatial, dtype=np.float64)
    visits = np.zeros(spatial, dtype=np.int64)
    side, stride, fill = config.side, config.stride, config.fill
    for cd in _axis_corners(spatial[0], side, stride):
        for ch in _axis_corners(spatial[1], side, stride):
            for cw in _axis_corners(spatial[2], side, stride):
                center = (cd + side // 2, ch + side // 2, cw + side // 2)
                occluded = occlude(arr, center, side, fill)
                dr = abs(model.risk(occluded) - base_risk)
                emb = np.asarray(model.embedding(occluded), dtype=np.float64)
                dz = float(np.abs(emb[top] - base_embed[top]).sum())
                region = (slice(cd, cd + side), slice(ch, ch + side),
                          slice(cw, cw + side))
                hazard_delta[region] += dr
                embed_delta[region] += dz
                visits[region] += 1
    visited = visits > 0
    hazard_delta[visited] /= visits[visited]
    embed_delta[visited] /= visits[visited]
    return hazard_delta, embed_delta


def regional_fractions(delta: np.ndarray, partition: RegionPartition):
    """Per-region share of the total sensitivity.

    An all-zero map falls back to voxel-count proportions and flags the
    result as degenerate.
    """
    labels = partition.labels
    if labels.shape != delta.shape:
        raise ValueError(f"partition {labels.shape} vs delta {delta.shape}")
    sums = np.array([float(delta[labels == code].sum())
                     for code in range(len(REGION_NAMES))])
    total = sums.sum()
    if total > 0:
        return sums / total, False
    counts = partition.voxel_counts().astype(np.float64)
    return counts / counts.sum(), True


def attribute_regions(model, volume, partition: RegionPartition,
                      config: OcclusionConfig = OcclusionConfig()) -> RegionalAttribution:
    hazard_delta, embed_delta = occlusion_map(model, volume, config)
    hf, hdeg = regional_fractions(hazard_delta, partition)
    ef, edeg = regional_fractions(embed_delta, partition)
    return RegionalAttribution(hf, ef, hdeg, edeg)


def gate_values(head_params: dict, z: np.ndarray) -> np.ndarray:
    """Plain-numpy gate forward for ranking embedding dimensions."""
    w1 = head_params["gate/w1"].values
    b1 = head_params["gate/b1"].values
    w2 = head_params["gate/w2"].values
    b2 = head_params["gate/b2"].values
    hidden = np.maximum(w1 @ z + b1, 0.0)
    return 1.0 / (1.0 + np.exp(-(w2 @ hidden + b2)))


def top_embedding_dims(head_params: dict, embeddings: np.ndarray,
                       top_j: int) -> np.ndarray:
    """The top_j dims with the largest mean gate over the cohort; ties
    break deterministically toward lower indices."""
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    mean_gate = np.mean([gate_values(head_params, z) for z in embeddings], axis=0)
    ranked = np.argsort(-mean_gate, kind="stable")
    return ranked[:top_j]
