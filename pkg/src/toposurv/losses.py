"""Training objectives: reconstruction MSE, survival-bin cross-entropy,
Cox negative partial likelihood, the topology penalty as a tape op, and
the weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import topology
from .autodiff import ShapeMismatch, Tape, Tensor


class LabelOutOfRange(ValueError):
    pass


@dataclass
class LossWeights:
    tau: float = 0.1  # topology penalty weight
    beta: float = 0.01  # hazard penalty weight

    def __post_init__(self):
        if self.tau < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")


def recon_mse(tape: Tape, target, recon) -> Tensor:
    """Mean squared error over every channel and voxel."""
    target = ad.as_tensor(target)
    recon = ad.as_tensor(recon)
    if target.shape != recon.shape:
        raise ShapeMismatch(f"{target.shape} vs {recon.shape}")
    diff = recon.values - target.values
    n = diff.size
    out = Tensor((diff * diff).sum() / n,
                 target.requires_grad or recon.requires_grad)
    scaled = 2.0 * diff / n

    def pull(g):
        return [(recon, g * scaled), (target, -g * scaled)]

    return tape.record_op(out, pull)


def ce_bins(tape: Tape, logits: Tensor, label: int) -> Tensor:
    """Cross-entropy of a bin label under softmax(logits), computed from
    max-subtracted logits."""
    logits = ad.as_tensor(logits)
    k = logits.values.size
    if not 0 <= label < k:
        raise LabelOutOfRange(f"label {label} outside [0, {k})")
    shifted = logits.values - logits.values.max()
    lse = np.log(np.exp(shifted).sum())
    out = Tensor(lse - shifted[label], logits.requires_grad)
    p = np.exp(shifted - lse)

    def pull(g):
        grad = p.copy()
        grad[label] -= 1.0
        return [(logits, g * grad)]

    return tape.record_op(out, pull)


def cox_nll(tape: Tape, hazards: Tensor, records) -> Tensor:
    """Negative Cox partial likelihood, Breslow ties, divided by the
    event count.  Zero events yield loss 0 with zero gradient."""
    hazards = ad.as_tensor(hazards)
    eta = hazards.values
    times = np.array([r.time for r in records], dtype=np.float64)
    events = np.array([r.event for r in records], dtype=np.int64)
    if eta.shape != times.shape:
        raise ShapeMismatch(f"hazards {eta.shape} vs {len(records)} records")
    event_idx = np.flatnonzero(events == 1)
    if event_idx.size == 0:
        return Tensor(0.0)

    value = 0.0
    grad = -events.astype(np.float64)
    for i in event_idx:
        risk = times >= times[i]
        masked = np.where(risk, eta, -np.inf)
        top = masked.max()
        w = np.exp(masked - top)
        total = w.sum()
        value += top + np.log(total) - eta[i]
        grad += w / total
    scale = 1.0 / event_idx.size
    value *= scale
    grad *= scale
    out = Tensor(value, hazards.requires_grad)
    return tape.record_op(out, lambda g: [(hazards, g * grad)])


def topo_penalty(tape: Tape, z: Tensor, target_diagram, weights: topology.TopoWeights,
                 distance: str = "wasserstein2_sq") -> Tensor:
    """Diagram distance between the latent grid of z and a fixed target
    diagram, differentiable through critical cells (matching held fixed)."""
    z = ad.as_tensor(z)
    grid = topology.latent_grid(z.values)
    latent_diagram = topology.compute_persistence(
        topology.CubicalFiltration(grid, "sublevel"))
    value, grid_grad = topology.topo_loss(target_diagram, latent_diagram,
                                          weights, grid.shape, distance)
    dz = topology.latent_grid_backward(z.values, grid_grad)
    out = Tensor(value, z.requires_grad)
    return tape.record_op(out, lambda g: [(z, g * dz)])


def total_loss(tape: Tape, recon, topo, cox, weights: LossWeights) -> Tensor:
    """recon + tau*topo + beta*cox."""
    total = ad.add(tape, recon, ad.mul(tape, topo, weights.tau))
    return ad.add(tape, total, ad.mul(tape, cox, weights.beta))


def batch_mean(tape: Tape, terms) -> Tensor:
    """Mean of scalar tensors on the tape."""
    if len(terms) == 1:
        return terms[0]
    return ad.mul(tape, ad.sum_all(tape, ad.stack(tape, terms)), 1.0 / len(terms))
