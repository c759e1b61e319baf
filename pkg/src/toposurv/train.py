"""Phantom corpus generation, deterministic splits, the two training
loops, and the assembled inference pipeline."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint, losses, model, nifti, topology, volume
from .attribution import top_embedding_dims
from .autodiff import AdamWState, BatchStandardizer, Tape, Tensor
from .config import RunConfig
from .harmonize import PcaModel, pca_fit, pca_remove
from .survival import (BinEdges, NoComparablePairs, SurvivalRecord, bin_label,
                       c_index, make_bin_edges)


class NumericError(ArithmeticError):
    """A loss or parameter became non-finite."""


# stream ids for the single seeded source of randomness
_STREAM_INIT = 1
_STREAM_SHUFFLE = 2
_STREAM_PHANTOM = 3
_STREAM_SPLIT = 4


def stream_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, index)))


# ---------------------------------------------------------------------------
# Phantom corpus
# ---------------------------------------------------------------------------

def phantom_specs(config: RunConfig) -> list[volume.PhantomSpec]:
    rng = stream_rng(config.seed, _STREAM_PHANTOM)
    hollow_count = int(round(config.phantom_count * config.hollow_fraction))
    specs = []
    for i in range(config.phantom_count):
        outer = float(rng.uniform(config.radius_min, config.radius_max))
        cavity = outer * config.cavity_fraction if i < hollow_count else 0.0
        specs.append(volume.PhantomSpec(
            extents=config.extents,
            outer_radius=outer,
            cavity_radius=cavity,
            noise_sigma=config.phantom_noise,
            seed=int(rng.integers(2 ** 31)),
        ))
    return specs


def generate_phantom_dataset(config: RunConfig, out_dir: str) -> str:
    """Write N phantoms as NIfTI volumes plus the manifest CSV."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, spec in enumerate(phantom_specs(config)):
        pid = f"P{i:04d}"
        vol, mask, record = volume.make_phantom(spec)
        paths = {}
        for c, modality in enumerate(volume.MODALITIES):
            name = f"{pid}_{modality}.nii"
            with open(os.path.join(out_dir, name), "wb") as fh:
                fh.write(nifti.write_nifti(vol.data[c].astype(np.float32)))
            paths[modality] = name
        mask_name = f"{pid}_mask.nii"
        with open(os.path.join(out_dir, mask_name), "wb") as fh:
            fh.write(nifti.write_nifti(mask.data.astype(np.uint8), datatype=2))
        rows.append(nifti.ManifestRow(
            pid, paths["t1"], paths["t1ce"], paths["t2"], paths["flair"],
            mask_name, record.time, record.event, record.covariates[0]))
    manifest_path = os.path.join(out_dir, "manifest.csv")
    with open(manifest_path, "w") as fh:
        fh.write(nifti.write_manifest(rows))
    return manifest_path


@dataclass
class Patient:
    patient_id: str
    volume: np.ndarray  # normalized [4, D, H, W]
    mask: np.ndarray | None
    record: SurvivalRecord


def load_dataset(dataset_dir: str, config: RunConfig) -> list[Patient]:
    """Load, resample to the configured extents, and normalize."""
    with open(os.path.join(dataset_dir, "manifest.csv")) as fh:
        manifest = nifti.read_manifest(fh.read())
    patients = []
    for row in sorted(manifest.rows, key=lambda r: r.patient_id):
        channels = []
        for path in row.modality_paths():
            raw = np.asarray(nifti.load_volume(os.path.join(dataset_dir, path)),
                             dtype=np.float64)
            resampled = volume.resample_trilinear(raw, config.extents)
            channels.append(volume.minmax_normalize(resampled))
        mask = None
        if row.mask:
            mask_raw = np.asarray(
                nifti.load_volume(os.path.join(dataset_dir, row.mask)))
            if mask_raw.shape != tuple(config.extents):
                mask_raw = volume.resample_trilinear(
                    mask_raw.astype(np.float64), config.extents) >= 0.5
            mask = mask_raw.astype(bool)
        record = SurvivalRecord(row.time_days, row.event, (row.age,))
        patients.append(Patient(row.patient_id, np.stack(channels), mask, record))
    return patients


def split_cohort(patient_ids, fractions, seed: int) -> dict[str, str]:
    """Deterministic train/val/test assignment by seeded permutation."""
    ids = sorted(patient_ids)
    order = stream_rng(seed, _STREAM_SPLIT).permutation(len(ids))
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    assignment = {}
    for pos, idx in enumerate(order):
        if pos < n_train:
            split = "train"
        elif pos < n_train + n_val:
            split = "val"
        else:
            split = "test"
        assignment[ids[idx]] = split
    return assignment


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------

@dataclass
class Stage1EpochLog:
    epoch: int
    recon: float
    topo: float
    cox: float
    total: float
    val_total: float
    is_best: bool


@dataclass
class Stage1Fit:
    best_params: dict[str, Tensor]
    last_params: dict[str, Tensor]
    optimizer: AdamWState
    logs: list[Stage1EpochLog]
    best_epoch: int
    epochs_run: int


def input_slice_diagram(vol: np.ndarray, grid_side: int) -> topology.PersistenceDiagram:
    """Reference diagram: channel-mean mid-axial slice, resampled to the
    latent grid size, sublevel filtration."""
    mid = vol[:, vol.shape[1] // 2].mean(axis=0)
    small = volume.resample_trilinear(mid, (grid_side, grid_side))
    return topology.compute_persistence(topology.CubicalFiltration(small, "sublevel"))


def _check_finite(value: float, what: str):
    if not np.isfinite(value):
        raise NumericError(f"{what} is not finite: {value}")


def _batches(ids: list, batch_size: int) -> list[list]:
    batches = [ids[i:i + batch_size] for i in range(0, len(ids), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2].extend(batches.pop())
    return batches


def _stage1_epoch_pass(patients, params, enc_cfg, config, weights, topo_weights,
                       diagrams, update: bool, optimizer=None, order=None):
    """One pass over patients; returns component means.  With update=True
    runs backward and one AdamW step per batch."""
    idx = list(range(len(patients))) if order is None else list(order)
    sums = np.zeros(4)
    count = 0
    for batch in _batches(idx, config.batch_size):
        tape = Tape()
        recon_terms, topo_terms, hazards, records = [], [], [], []
        for i in batch:
            p = patients[i]
            z = model.encode(tape, params, enc_cfg, p.volume)
            xhat = model.decode(tape, params, enc_cfg, z)
            recon_terms.append(losses.recon_mse(tape, p.volume, xhat))
            if config.tau > 0:
                topo_terms.append(losses.topo_penalty(
                    tape, z, diagrams[p.patient_id], topo_weights,
                    config.topo_distance))
            if config.beta > 0:
                hazards.append(model.stage1_hazard(tape, params, z))
                records.append(p.record)
        recon = losses.batch_mean(tape, recon_terms)
        topo = losses.batch_mean(tape, topo_terms) if topo_terms else Tensor(0.0)
        cox = (losses.cox_nll(tape, ad.stack(tape, hazards), records)
               if hazards else Tensor(0.0))
        total = losses.total_loss(tape, recon, topo, cox, weights)
        _check_finite(total.item(), "stage-1 loss")
        n = len(batch)
        sums += n * np.array([recon.item(), topo.item(), cox.item(), total.item()])
        count += n
        if update:
            grad_map = ad.backward(tape, total)
            named = {name: grad_map.get(t) for name, t in params.items()}
            ad.adamw_step(params, named, optimizer)
    return sums / count


def fit_stage1(patients: list[Patient], assignment: dict[str, str],
               config: RunConfig, resume: dict | None = None) -> Stage1Fit:
    enc_cfg = model.EncoderConfig(config.extents, config.channels, config.latent_dim)
    weights = losses.LossWeights(config.tau, config.beta)
    topo_weights = topology.TopoWeights(config.alpha, config.tau)
    train_set = [p for p in patients if assignment[p.patient_id] == "train"]
    val_set = [p for p in patients if assignment[p.patient_id] == "val"]

    diagrams = {}
    if config.tau > 0:
        side = int(round(np.sqrt(config.latent_dim)))
        for p in patients:
            diagrams[p.patient_id] = input_slice_diagram(p.volume, side)

    if resume is None:
        params = model.init_stage1_params(enc_cfg, stream_rng(config.seed, _STREAM_INIT))
        optimizer = AdamWState(lr=config.stage1_lr, weight_decay=config.weight_decay)
        start_epoch = 1
    else:
        params = resume["params"]
        optimizer = resume["optimizer"]
        start_epoch = resume["epoch"] + 1

    best_val = np.inf
    best_epoch = 0
    best_snapshot = {k: t.values.copy() for k, t in params.items()}
    logs = []
    for epoch in range(start_epoch, config.epochs + 1):
        order = stream_rng(config.seed, _STREAM_SHUFFLE, epoch).permutation(len(train_set))
        recon, topo, cox, total = _stage1_epoch_pass(
            train_set, params, enc_cfg, config, weights, topo_weights, diagrams,
            update=True, optimizer=optimizer, order=order)
        if val_set:
            _, _, _, val_total = _stage1_epoch_pass(
                val_set, params, enc_cfg, config, weights, topo_weights, diagrams,
                update=False)
        else:
            val_total = total
        is_best = val_total < best_val
        if is_best:
            best_val = val_total
            best_epoch = epoch
            best_snapshot = {k: t.values.copy() for k, t in params.items()}
        logs.append(Stage1EpochLog(epoch, recon, topo, cox, total, val_total, is_best))

    best_params = {k: Tensor(v, requires_grad=True) for k, v in best_snapshot.items()}
    return Stage1Fit(best_params, params, optimizer, logs, best_epoch,
                     config.epochs)


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------

@dataclass
class Stage2EpochLog:
    epoch: int
    ce: float
    c_val: float
    is_best: bool


@dataclass
class HeadFit:
    params: dict[str, Tensor]
    head_config: model.HeadConfig
    standardizer: BatchStandardizer
    pca: PcaModel | None
    edges: BinEdges
    logs: list[Stage2EpochLog]
    best_epoch: int
    best_c_val: float
    stopped_epoch: int


def compute_embeddings(patients: list[Patient], params: dict,
                       config: RunConfig) -> np.ndarray:
    """Frozen-encoder embeddings, one row per patient."""
    enc_cfg = model.EncoderConfig(config.extents, config.channels, config.latent_dim)
    frozen = {k: Tensor(t.values) for k, t in params.items()}
    return np.stack([
        model.encode(Tape(), frozen, enc_cfg, p.volume).values for p in patients])


def _safe_c_index(risks, records) -> float:
    try:
        return c_index(risks, records)
    except NoComparablePairs:
        return 0.5


def fit_survival_head(embeddings: np.ndarray, records: list[SurvivalRecord],
                      assignment: list[str], config: RunConfig) -> HeadFit:
    """Train the attention head on precomputed embeddings with early
    stopping on validation concordance."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    ages = np.array([r.covariates[0] for r in records], dtype=np.float64)
    train_idx = [i for i, s in enumerate(assignment) if s == "train"]
    val_idx = [i for i, s in enumerate(assignment) if s == "val"]
    if not train_idx or not val_idx:
        raise ValueError("stage 2 needs nonempty train and val splits")

    pca = None
    if config.harmonize_k > 0:
        pca = pca_fit(embeddings[train_idx], config.harmonize_k)
        embeddings = pca_remove(pca, embeddings)

    edges = make_bin_edges([records[i] for i in train_idx], config.bins)
    labels = [bin_label(records[i].time, edges) for i in range(len(records))]

    head_cfg = model.HeadConfig(
        latent_dim=embeddings.shape[1], clinical_dim=1,
        attention_dim=config.attention_dim, heads=config.heads,
        num_bins=config.bins, ln_affine=config.ln_affine)
    params = model.init_head_params(head_cfg, stream_rng(config.seed, _STREAM_INIT, 1))
    optimizer = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    standardizer = BatchStandardizer()

    best_c = -np.inf
    best_epoch = 0
    best_snapshot = {k: t.values.copy() for k, t in params.items()}
    best_stats = standardizer.state()
    epochs_since = 0
    logs = []
    stopped_epoch = config.epochs
    for epoch in range(1, config.epochs + 1):
        order = stream_rng(config.seed, _STREAM_SHUFFLE, epoch).permutation(len(train_idx))
        ce_sum = 0.0
        for batch in _batches([train_idx[i] for i in order], config.batch_size):
            ages_std = standardizer.train_batch(ages[batch])
            tape = Tape()
            terms = []
            for pos, i in enumerate(batch):
                logits = model.head_forward(tape, params, head_cfg,
                                            embeddings[i],
                                            np.array([ages_std[pos]]))
                terms.append(losses.ce_bins(tape, logits, labels[i]))
            loss = losses.batch_mean(tape, terms)
            _check_finite(loss.item(), "stage-2 loss")
            ce_sum += loss.item() * len(batch)
            grad_map = ad.backward(tape, loss)
            named = {name: grad_map.get(t) for name, t in params.items()}
            ad.adamw_step(params, named, optimizer)

        val_risks = _head_risks(params, head_cfg, standardizer,
                                embeddings[val_idx], ages[val_idx])
        c_val = _safe_c_index(val_risks, [records[i] for i in val_idx])
        is_best = c_val > best_c + config.early_stop_tol
        if is_best:
            best_c = c_val
            best_epoch = epoch
            best_snapshot = {k: t.values.copy() for k, t in params.items()}
            best_stats = standardizer.state()
            epochs_since = 0
        else:
            epochs_since += 1
        logs.append(Stage2EpochLog(epoch, ce_sum / len(train_idx), c_val, is_best))
        if epochs_since >= config.patience:
            stopped_epoch = epoch
            break

    params = {k: Tensor(v, requires_grad=True) for k, v in best_snapshot.items()}
    standardizer.load_state(best_stats)
    return HeadFit(params, head_cfg, standardizer, pca, edges, logs,
                   best_epoch, best_c, stopped_epoch)


def _head_risks(params, head_cfg, standardizer, embeddings, ages) -> np.ndarray:
    ages_std = standardizer.apply(ages)
    risks = []
    for z, a in zip(np.atleast_2d(embeddings), ages_std):
        logits = model.head_forward(Tape(), _frozen(params), head_cfg, z, np.array([a]))
        risks.append(model.risk_value(logits.values))
    return np.array(risks)


def _frozen(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(t.values) for k, t in params.items()}


def head_predictions(head: HeadFit, embeddings: np.ndarray, ages: np.ndarray):
    """Risk, argmax bin and bin probabilities per patient.

    Embeddings must already be harmonized if the head was fit that way.
    """
    ages_std = head.standardizer.apply(np.asarray(ages, dtype=np.float64))
    rows = []
    for z, a in zip(np.atleast_2d(embeddings), ages_std):
        logits = model.head_forward(Tape(), _frozen(head.params), head.head_config,
                                    z, np.array([a])).values
        shifted = logits - logits.max()
        p = np.exp(shifted)
        p /= p.sum()
        rows.append((model.risk_value(logits), int(p.argmax()), p))
    return rows


# ---------------------------------------------------------------------------
# Assembled pipeline (used by evaluation and attribution)
# ---------------------------------------------------------------------------

@dataclass
class SurvivalPipeline:
    """Frozen two-stage model over a raw normalized volume."""

    stage1_params: dict[str, Tensor]
    encoder_config: model.EncoderConfig
    head: HeadFit
    age: float
    top_dims: np.ndarray = field(default_factory=lambda: np.arange(16))

    def embedding(self, x: np.ndarray) -> np.ndarray:
        z = model.encode(Tape(), self.stage1_params, self.encoder_config, x).values
        if self.head.pca is not None:
            z = pca_remove(self.head.pca, z)
        return z

    def risk(self, x: np.ndarray) -> float:
        z = self.embedding(x)
        a = self.head.standardizer.apply(np.array([self.age]))
        logits = model.head_forward(Tape(), _frozen(self.head.params),
                                    self.head.head_config, z, a)
        return model.risk_value(logits.values)


def build_pipeline(stage1_params: dict, head: HeadFit, config: RunConfig,
                   cohort_embeddings: np.ndarray, age: float) -> SurvivalPipeline:
    enc_cfg = model.EncoderConfig(config.extents, config.channels, config.latent_dim)
    frozen = _frozen(stage1_params)
    top = top_embedding_dims(head.params, cohort_embeddings,
                             min(config.top_dims, config.latent_dim))
    return SurvivalPipeline(frozen, enc_cfg, head, age, top)


# ---------------------------------------------------------------------------
# Checkpoint wiring
# ---------------------------------------------------------------------------

def save_stage1_checkpoint(path: str, fit: Stage1Fit):
    """Best parameters plus the optimizer/epoch state needed to resume."""
    arrays = {f"param/{k}": t.values for k, t in fit.best_params.items()}
    arrays.update({f"last/{k}": t.values for k, t in fit.last_params.items()})
    for k in fit.last_params:
        arrays[f"opt/m/{k}"] = fit.optimizer.m.get(k, np.zeros(0))
        arrays[f"opt/v/{k}"] = fit.optimizer.v.get(k, np.zeros(0))
    arrays["opt/step"] = np.array(float(fit.optimizer.step_count))
    arrays["meta/epoch"] = np.array(float(fit.epochs_run))
    arrays["meta/best_epoch"] = np.array(float(fit.best_epoch))
    checkpoint.save_arrays(path, arrays)


def load_stage1_params(path: str, requires_grad: bool = True) -> dict[str, Tensor]:
    arrays = checkpoint.load_arrays(path)
    return {k[len("param/"):]: Tensor(v.copy(), requires_grad)
            for k, v in arrays.items() if k.startswith("param/")}


def load_stage1_resume(path: str, config: RunConfig) -> dict:
    arrays = checkpoint.load_arrays(path)
    params = {k[len("last/"):]: Tensor(v.copy(), True)
              for k, v in arrays.items() if k.startswith("last/")}
    optimizer = AdamWState(lr=config.stage1_lr, weight_decay=config.weight_decay)
    optimizer.step_count = int(arrays["opt/step"])
    for k in params:
        optimizer.m[k] = arrays[f"opt/m/{k}"].copy()
        optimizer.v[k] = arrays[f"opt/v/{k}"].copy()
    return {"params": params, "optimizer": optimizer,
            "epoch": int(arrays["meta/epoch"])}


def save_head_checkpoint(path: str, head: HeadFit):
    arrays = {f"param/{k}": t.values for k, t in head.params.items()}
    arrays["standardizer/running_mean"] = np.array(head.standardizer.running_mean)
    arrays["standardizer/running_var"] = np.array(head.standardizer.running_var)
    arrays["edges/values"] = head.edges.edges
    cfg = head.head_config
    arrays["headcfg/values"] = np.array([
        cfg.latent_dim, cfg.clinical_dim, cfg.attention_dim, cfg.heads,
        cfg.num_bins, cfg.gate_bottleneck, int(cfg.ln_affine)], dtype=np.float64)
    if head.pca is not None:
        arrays["pca/mean"] = head.pca.mean
        arrays["pca/components"] = head.pca.components
        arrays["pca/explained"] = head.pca.explained_variance
        arrays["pca/k"] = np.array(float(head.pca.discard_k))
    arrays["meta/best_epoch"] = np.array(float(head.best_epoch))
    arrays["meta/best_c_val"] = np.array(head.best_c_val)
    checkpoint.save_arrays(path, arrays)


def load_head_checkpoint(path: str) -> HeadFit:
    arrays = checkpoint.load_arrays(path)
    params = {k[len("param/"):]: Tensor(v.copy(), True)
              for k, v in arrays.items() if k.startswith("param/")}
    raw = arrays["headcfg/values"]
    head_cfg = model.HeadConfig(
        latent_dim=int(raw[0]), clinical_dim=int(raw[1]),
        attention_dim=int(raw[2]), heads=int(raw[3]), num_bins=int(raw[4]),
        gate_bottleneck=int(raw[5]), ln_affine=bool(raw[6]))
    standardizer = BatchStandardizer()
    standardizer.load_state({
        "running_mean": float(arrays["standardizer/running_mean"]),
        "running_var": float(arrays["standardizer/running_var"])})
    pca = None
    if "pca/mean" in arrays:
        pca = PcaModel(arrays["pca/mean"], arrays["pca/components"],
                       arrays["pca/explained"], int(arrays["pca/k"]))
    edges = BinEdges(arrays["edges/values"])
    return HeadFit(params, head_cfg, standardizer, pca, edges, [],
                   int(arrays["meta/best_epoch"]), float(arrays["meta/best_c_val"]),
                   int(arrays["meta/best_epoch"]))
