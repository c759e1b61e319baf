"""Command-line driver: phantom | train-stage1 | train-stage2 | eval |
attribute | persistence | harmonize.

Exit codes: 0 success, 1 validation/config error, 2 I/O error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys

import numpy as np

from . import attribution as attr
from . import nifti, report, topology, train
from .config import ConfigError, RunConfig, config_to_json, load_config
from .harmonize import pca_fit, pca_remove
from .recon_metrics import EmptyRegion, ReconReport, mae_mse, psnr, region_mae, ssim_slices
from .survival import NoComparablePairs, c_index, kaplan_meier, stratify_median
from .train import NumericError
from .volume import region_partition, Mask
from .autodiff import Tape
from . import model as tmodel


class MissingMask(ValueError):
    pass


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="config file (JSON or key=value lines)")
    for f in dataclasses.fields(RunConfig):
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}",
                            default=None, metavar="V")


def _config_from_args(args) -> RunConfig:
    overrides = {f.name: getattr(args, f"cfg_{f.name}")
                 for f in dataclasses.fields(RunConfig)}
    return load_config(args.config, overrides)


def _write_splits(path, assignment: dict[str, str]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "split"])
        for pid in sorted(assignment):
            writer.writerow([pid, assignment[pid]])


def _load_cohort(args, config: RunConfig):
    patients = train.load_dataset(args.dataset, config)
    assignment = train.split_cohort([p.patient_id for p in patients],
                                    config.split, config.seed)
    return patients, assignment


def cmd_phantom(args) -> int:
    config = _config_from_args(args)
    report.ensure_dir(args.out)
    train.generate_phantom_dataset(config, args.out)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        fh.write(config_to_json(config))
    print(f"wrote {config.phantom_count} phantoms to {args.out}")
    return 0


def cmd_train_stage1(args) -> int:
    config = _config_from_args(args)
    report.ensure_dir(args.out)
    patients, assignment = _load_cohort(args, config)
    resume = train.load_stage1_resume(args.resume, config) if args.resume else None
    fit = train.fit_stage1(patients, assignment, config, resume)
    train.save_stage1_checkpoint(os.path.join(args.out, "stage1.tgc"), fit)
    report.write_stage1_log(os.path.join(args.out, "stage1_log.csv"), fit.logs)
    report.fig_stage1_loss(os.path.join(args.out, "stage1_loss.png"), fit.logs)
    _write_splits(os.path.join(args.out, "splits.csv"), assignment)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        fh.write(config_to_json(config))
    last = fit.logs[-1]
    print(f"stage 1 done: epoch {last.epoch}, train total {last.total:.6f}, "
          f"best val {min(l.val_total for l in fit.logs):.6f} @ {fit.best_epoch}")
    return 0


def cmd_train_stage2(args) -> int:
    config = _config_from_args(args)
    report.ensure_dir(args.out)
    patients, assignment = _load_cohort(args, config)
    params = train.load_stage1_params(args.stage1)
    theta_before = {k: t.values.copy() for k, t in params.items()}
    embeddings = train.compute_embeddings(patients, params, config)
    records = [p.record for p in patients]
    splits = [assignment[p.patient_id] for p in patients]
    head = train.fit_survival_head(embeddings, records, splits, config)
    # the encoder is frozen in stage 2; verify nothing moved
    for k, t in params.items():
        assert np.array_equal(theta_before[k], t.values), f"encoder drifted: {k}"
    train.save_head_checkpoint(os.path.join(args.out, "stage2.tgc"), head)
    report.write_stage2_log(os.path.join(args.out, "stage2_log.csv"), head.logs)
    _write_embeddings_csv(os.path.join(args.out, "embeddings.csv"),
                          patients, splits, embeddings)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        fh.write(config_to_json(config))
    print(f"stage 2 done: best C_val {head.best_c_val:.4f} @ epoch {head.best_epoch}, "
          f"stopped at {head.stopped_epoch}")
    return 0


def _write_embeddings_csv(path, patients, splits, embeddings):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "split"] +
                        [f"z{i}" for i in range(embeddings.shape[1])])
        for p, s, z in zip(patients, splits, embeddings):
            writer.writerow([p.patient_id, s] + [repr(float(v)) for v in z])


def cmd_eval(args) -> int:
    config = _config_from_args(args)
    report.ensure_dir(args.out)
    patients, assignment = _load_cohort(args, config)
    params = train.load_stage1_params(args.stage1, requires_grad=False)
    head = train.load_head_checkpoint(args.stage2)
    enc_cfg = tmodel.EncoderConfig(config.extents, config.channels, config.latent_dim)

    embeddings = train.compute_embeddings(patients, params, config)
    harmonized = pca_remove(head.pca, embeddings) if head.pca is not None else embeddings
    ages = np.array([p.record.covariates[0] for p in patients])
    predictions = train.head_predictions(head, harmonized, ages)

    risk_rows = []
    risks = []
    for p, (risk, yhat, probs) in zip(patients, predictions):
        risks.append(risk)
        risk_rows.append((p.patient_id, assignment[p.patient_id], p.record.time,
                          p.record.event, risk, yhat, [float(v) for v in probs]))
    risks = np.array(risks)
    report.write_risk_csv(os.path.join(args.out, "risks.csv"), risk_rows,
                          head.head_config.num_bins)

    metrics = {"c_index": {}}
    for split in ("train", "val", "test"):
        idx = [i for i, p in enumerate(patients) if assignment[p.patient_id] == split]
        try:
            value = c_index(risks[idx], [patients[i].record for i in idx]) if idx else None
        except NoComparablePairs:
            value = None
        metrics["c_index"][split] = value
    try:
        metrics["c_index"]["all"] = c_index(risks, [p.record for p in patients])
    except NoComparablePairs:
        metrics["c_index"]["all"] = None
    report.write_metrics_json(os.path.join(args.out, "metrics.json"), metrics)

    high = stratify_median(risks)
    strata = {}
    for name, chosen in (("high", high), ("low", ~high)):
        group = [p.record for p, h in zip(patients, chosen) if h]
        if group:
            strata[name] = kaplan_meier(group)
    report.write_km_csv(os.path.join(args.out, "km_strata.csv"), strata)
    report.fig_km(os.path.join(args.out, "km_curves.png"), strata)

    reports = []
    for p in patients:
        tape = Tape()
        xhat = tmodel.decode(tape, params, enc_cfg,
                             tmodel.encode(tape, params, enc_cfg, p.volume)).values
        mae, mse, mae_c, mse_c = mae_mse(p.volume, xhat)
        if p.mask is not None and p.mask.any() and not p.mask.all():
            mae_t, mae_n = region_mae(p.volume, xhat, p.mask)
        else:
            mae_t, mae_n = float("nan"), float("nan")
        reports.append(ReconReport(
            p.patient_id, assignment[p.patient_id], mae, mse, psnr(mse),
            ssim_slices(p.volume, xhat), mae_t, mae_n,
            tuple(mae_c), tuple(mse_c)))
    report.write_recon_csv(os.path.join(args.out, "recon_report.csv"), reports)
    report.write_recon_summary(os.path.join(args.out, "recon_summary.csv"),
                               reports, seed=config.seed)
    report.fig_recon_box(os.path.join(args.out, "recon_metrics.png"), reports)
    shown = {k: (round(v, 4) if v is not None else None)
             for k, v in metrics["c_index"].items()}
    print(f"eval done: C-index {shown}")
    return 0


def cmd_attribute(args) -> int:
    config = _config_from_args(args)
    report.ensure_dir(args.out)
    patients, assignment = _load_cohort(args, config)
    params = train.load_stage1_params(args.stage1, requires_grad=False)
    head = train.load_head_checkpoint(args.stage2)
    embeddings = train.compute_embeddings(patients, params, config)
    harmonized = pca_remove(head.pca, embeddings) if head.pca is not None else embeddings

    occlusion = attr.OcclusionConfig(
        config.occlusion_side,
        config.occlusion_stride if config.occlusion_stride > 0 else None,
        config.occlusion_fill)
    rows = []
    for p in patients:
        if p.mask is None:
            raise MissingMask(f"{p.patient_id} has no tumor mask")
        partition = region_partition(Mask(p.mask))
        pipeline = train.build_pipeline(params, head, config, harmonized,
                                        p.record.covariates[0])
        rows.append((p.patient_id,
                     attr.attribute_regions(pipeline, p.volume, partition, occlusion)))
    report.write_attribution_csv(os.path.join(args.out, "attribution.csv"), rows)
    hazard, embed = report.write_attribution_summary(
        os.path.join(args.out, "attribution_summary.csv"), rows)
    report.fig_attribution(os.path.join(args.out, "attribution_fractions.png"),
                           hazard, embed)
    print(f"attribution done for {len(rows)} patients")
    return 0


def cmd_persistence(args) -> int:
    vol = np.asarray(nifti.load_volume(args.volume), dtype=np.float64)
    if vol.ndim == 4:
        vol = vol.mean(axis=0)
    diagram = topology.compute_persistence(
        topology.CubicalFiltration(vol, args.mode))
    dims = {int(d) for d in args.dims.split(",")}
    diagram = topology.PersistenceDiagram(
        [p for p in diagram.points if p.dim in dims])
    if args.out:
        report.write_diagram_csv(args.out, diagram)
    else:
        report.write_diagram_csv(sys.stdout, diagram)
    return 0


def cmd_harmonize(args) -> int:
    with open(args.embeddings, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    z_cols = [i for i, name in enumerate(header) if name.startswith("z")]
    split_col = header.index("split") if "split" in header else None
    ids = [r[0] for r in rows[1:]]
    matrix = np.array([[float(r[i]) for i in z_cols] for r in rows[1:]])
    if split_col is not None:
        train_rows = [i for i, r in enumerate(rows[1:]) if r[split_col] == "train"]
        if not train_rows:
            train_rows = list(range(len(ids)))
    else:
        train_rows = list(range(len(ids)))
    model_fit = pca_fit(matrix[train_rows], args.k)
    harmonized = pca_remove(model_fit, matrix)
    report.ensure_dir(args.out)
    out_csv = os.path.join(args.out, "harmonized.csv")
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id"] + [f"z{i}" for i in range(matrix.shape[1])])
        for pid, z in zip(ids, harmonized):
            writer.writerow([pid] + [repr(float(v)) for v in z])
    from .checkpoint import save_arrays
    save_arrays(os.path.join(args.out, "pca.tgc"), {
        "pca/mean": model_fit.mean, "pca/components": model_fit.components,
        "pca/explained": model_fit.explained_variance,
        "pca/k": np.array(float(model_fit.discard_k))})
    print(f"harmonized {len(ids)} embeddings (k={args.k}) -> {out_csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="toposurv",
        description="Topology-regularized volume autoencoding with "
                    "attention-fused discrete-time survival prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom cohort")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train-stage1", help="train the autoencoder stage")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="resume from a stage-1 checkpoint")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the survival head")
    p.add_argument("--dataset", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("eval", help="risks, concordance, KM strata, recon metrics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attribute", help="occlusion attribution by region")
    p.add_argument("--dataset", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("persistence", help="persistence diagram of a volume")
    p.add_argument("volume")
    p.add_argument("--mode", choices=("sublevel", "superlevel"), default="sublevel")
    p.add_argument("--dims", default="0,1,2")
    p.add_argument("--out")
    p.set_defaults(func=cmd_persistence)

    p = sub.add_parser("harmonize", help="PCA scanner-bias removal on embeddings")
    p.add_argument("--embeddings", required=True, help="embeddings CSV")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_harmonize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
