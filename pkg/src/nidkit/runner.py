"""Experiment execution: config -> split -> train -> detect -> metrics.

Each experiment owns a directory named by its config hash; inside it every
run (seed) gets a subdirectory with checkpoint, score dump, loss log, and a
structured record. Training never sees labels: the split hands the trainers
a bare feature matrix, and labels surface only at the metrics stage.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from copy import deepcopy
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import nn
from .augment import AugmentationSpec, subset_columns
from .baselines import (Autoencoder, DeepSVDD, ae_score, reconstruction_loss,
                        svdd_init_center, svdd_loss, svdd_score,
                        train_baseline)
from .config import (CONFIG_VERSION, ExperimentConfig, validate_config,
                     encoder_config_for)
from .data import (load_csv, load_dataset, load_schema, preprocess,
                   protocol_split, synth_generate)
from .detector import dump_scores, fit_center
from .encoders import build_encoder, representation_dim
from .evaluate import (MetricsReport, aggregate_runs, format_aggregate,
                       format_report, optimal_threshold_metrics)
from .nn import ConfigError
from .ssl_models import MODEL_KINDS, build_model, pretrain


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    status: str                       # "ok" | "failed"
    stage: Optional[str] = None       # failing stage when status == "failed"
    error: Optional[str] = None
    duration_s: float = 0.0
    checkpoint: Optional[str] = None
    loss_first: Optional[float] = None
    loss_last: Optional[float] = None
    report: Optional[MetricsReport] = None


def load_experiment_dataset(cfg: ExperimentConfig):
    ds_cfg = cfg.dataset
    if "synth" in ds_cfg:
        return synth_generate(**ds_cfg["synth"])
    if "cache" in ds_cfg:
        return load_dataset(ds_cfg["cache"])
    schema = load_schema(ds_cfg["schema"])
    raw, rejects = load_csv(ds_cfg["csv"], schema,
                            max_reject_fraction=float(ds_cfg.get("max_reject_fraction", 0.1)))
    if rejects:
        print(f"[data] {len(rejects)} malformed rows rejected")
    return preprocess(raw)


def _totals(history) -> list:
    return [float(getattr(step, "total", step)) for step in history]


def _write_loss_csv(path, totals) -> None:
    with open(path, "w") as fh:
        fh.write("step,total\n")
        for i, t in enumerate(totals):
            fh.write(f"{i},{t!r}\n")


def _run_ssl(cfg: ExperimentConfig, train, rng, run_dir: Path):
    d = train.n_features
    aug = AugmentationSpec(**cfg.augmentation)
    perm, cols, width = None, None, d
    numeric_cols, cat_groups = list(train.numeric_idx), train.onehot_groups
    if aug.kind == "subsets":
        perm = rng.permutation(d)
        cols = subset_columns(d, aug.k, aug.overlap_fraction, perm)
        width = len(cols[0])
        numeric_cols, cat_groups = [], {}  # slices break the one-hot blocks
    enc_cfg = encoder_config_for(cfg.encoder, width, numeric_cols, cat_groups)
    model = build_model(cfg.model, lambda: build_encoder(enc_cfg, rng),
                        representation_dim(enc_cfg), rng,
                        dim=cfg.projection_dim, **cfg.loss_params)
    optimizer = nn.Adam(model, lr=cfg.learning_rate)
    history = pretrain(model, train.features, aug, optimizer,
                       cfg.epochs, cfg.batch_size, rng,
                       feature_permutation=perm,
                       log_path=run_dir / "loss.csv")
    detector = fit_center(model.encoder, train.features, subset_columns=cols)
    return model, detector.score, _totals(history)


def _run_baseline(cfg: ExperimentConfig, train, rng, run_dir: Path):
    d = train.n_features
    if cfg.model == "autoencoder":
        keys = {k: v for k, v in cfg.loss_params.items() if k in ("hidden", "latent")}
        model = Autoencoder(d, rng, **keys)
        loss_fn, score_fn = reconstruction_loss, ae_score
    else:
        widths = tuple(cfg.loss_params.get("widths", (256, 64, 32)))
        model = DeepSVDD(d, rng, widths=widths)
        svdd_init_center(model, train.features)
        loss_fn, score_fn = svdd_loss, svdd_score
    optimizer = nn.Adam(model, lr=cfg.learning_rate)
    history = train_baseline(model, train.features, loss_fn, optimizer,
                             cfg.epochs, cfg.batch_size, rng)
    _write_loss_csv(run_dir / "loss.csv", history)
    return model, (lambda feats: score_fn(model, feats)), history


def run_single(cfg: ExperimentConfig, ds, seed: int, run_dir: Path) -> RunRecord:
    """One seeded run; failures are captured with their stage name."""
    run_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    stage = "split"
    try:
        train, test = protocol_split(ds, cfg.train_fraction, seed=seed)
        rng = np.random.default_rng(seed)
        stage = "train"
        if cfg.model in MODEL_KINDS:
            model, score_fn, totals = _run_ssl(cfg, train, rng, run_dir)
        else:
            model, score_fn, totals = _run_baseline(cfg, train, rng, run_dir)
        stage = "score"
        scores = score_fn(test.features)
        stage = "metrics"
        report = optimal_threshold_metrics(scores, test.labels, seed=seed)
        dump_scores(run_dir / "scores.csv", test.ids, scores, test.labels)
        stage = "checkpoint"
        ckpt = run_dir / "checkpoint.npz"
        nn.save_checkpoint(ckpt, model,
                           extra={"config_hash": cfg.hash, "seed": seed})
        return RunRecord(
            config_hash=cfg.hash, seed=seed, status="ok",
            duration_s=time.perf_counter() - t0, checkpoint=str(ckpt),
            loss_first=totals[0] if totals else None,
            loss_last=totals[-1] if totals else None,
            report=report)
    except Exception as exc:  # recorded, remaining seeds continue
        return RunRecord(config_hash=cfg.hash, seed=seed, status="failed",
                         stage=stage, error=f"{type(exc).__name__}: {exc}",
                         duration_s=time.perf_counter() - t0)


def _record_doc(rec: RunRecord) -> dict:
    doc = {
        "config_hash": rec.config_hash, "seed": rec.seed, "status": rec.status,
        "duration_s": rec.duration_s, "checkpoint": rec.checkpoint,
        "loss_first": rec.loss_first, "loss_last": rec.loss_last,
    }
    if rec.status == "failed":
        doc.update(stage=rec.stage, error=rec.error)
    if rec.report is not None:
        doc["metrics"] = {
            "precision": rec.report.precision, "recall": rec.report.recall,
            "f1": rec.report.f1, "auroc": rec.report.auroc,
            "threshold": rec.report.threshold,
        }
    return doc


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Execute all seeded runs of one experiment and write its artifacts."""
    exp_dir = Path(cfg.output_dir) / cfg.hash
    exp_dir.mkdir(parents=True, exist_ok=True)
    (exp_dir / "config.yaml").write_text(yaml.safe_dump(cfg.document))
    ds = load_experiment_dataset(cfg)

    records = []
    for i in range(cfg.n_runs):
        seed = cfg.base_seed + i
        run_dir = exp_dir / f"run{seed}"
        rec = run_single(cfg, ds, seed, run_dir)
        (run_dir / "record.yaml").write_text(yaml.safe_dump(_record_doc(rec)))
        records.append(rec)

    reports = [r.report for r in records if r.status == "ok"]
    aggregate = aggregate_runs(reports) if reports else None

    lines = [format_report(r.report) if r.status == "ok"
             else f"run seed={r.seed}: FAILED at {r.stage} ({r.error})"
             for r in records]
    if aggregate is not None:
        lines.append(format_aggregate(aggregate, len(reports)))
    (exp_dir / "report.txt").write_text("\n".join(lines) + "\n")
    if aggregate is not None:
        # presence of aggregate.yaml is the grid's "cell complete" marker
        (exp_dir / "aggregate.yaml").write_text(yaml.safe_dump({
            "config_hash": cfg.hash, "model": cfg.model,
            "n_runs_ok": len(reports),
            "metrics": {k: [float(m), float(s)] for k, (m, s) in aggregate.items()},
        }))
    return {"dir": exp_dir, "records": records, "aggregate": aggregate}


# ---------------------------------------------------------------------------
# grid execution


def expand_grid(doc: dict) -> list:
    """Cell documents for every model x encoder x augmentation combination."""
    if int(doc.get("version", -1)) != CONFIG_VERSION:
        raise ConfigError(f"grid: unsupported config version {doc.get('version')!r}")
    if "base" not in doc or "grid" not in doc:
        raise ConfigError("grid config needs 'base' and 'grid' sections")
    base, grid = doc["base"], doc["grid"]
    models = grid.get("model") or [base.get("model")]
    encoders = grid.get("encoder") or [base.get("encoder", {"kind": "mlp"})]
    augs = grid.get("augmentation") or [base.get("augmentation")]
    cells = []
    for m in models:
        for e in encoders:
            for a in augs:
                cell = deepcopy(base)
                cell["version"] = CONFIG_VERSION
                cell["model"] = m
                cell["encoder"] = {"kind": e} if isinstance(e, str) else dict(e)
                if a is not None:
                    cell["augmentation"] = dict(a)
                cells.append(cell)
    return cells


def _cell_label(cell: dict) -> str:
    enc = cell.get("encoder", {}).get("kind", "-")
    aug = (cell.get("augmentation") or {}).get("kind", "-")
    return f"{cell['model']}/{enc}/{aug}"


def _run_cell(args):
    cell, base_dir = args
    cfg = validate_config(cell, base_dir=base_dir, source=_cell_label(cell))
    agg_path = Path(cfg.output_dir) / cfg.hash / "aggregate.yaml"
    row = {"cell": _cell_label(cell), "model": cfg.model,
           "encoder": cfg.encoder.get("kind", "-"),
           "augmentation": (cfg.augmentation or {}).get("kind", "-"),
           "hash": cfg.hash}
    if agg_path.exists():
        stored = yaml.safe_load(agg_path.read_text())
        row.update(status="cached", metrics=stored["metrics"])
        return row
    try:
        result = run_experiment(cfg)
    except Exception as exc:
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}", metrics=None)
        return row
    if result["aggregate"] is None:
        failures = {r.stage for r in result["records"]}
        row.update(status="failed", error=f"all runs failed at {sorted(failures)}",
                   metrics=None)
    else:
        row.update(status="ok",
                   metrics={k: [float(m), float(s)]
                            for k, (m, s) in result["aggregate"].items()})
    return row


def run_grid(doc: dict, base_dir=".", workers: int = 1) -> dict:
    """Run every grid cell (skipping completed ones) and rank the results.

    Cells are independent; with workers > 1 they execute in separate
    processes, each still fully deterministic given its config and seeds.
    """
    cells = expand_grid(doc)
    args = [(cell, base_dir) for cell in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, args))
    else:
        rows = [_run_cell(a) for a in args]

    scored = [r for r in rows if r.get("metrics")]
    ranking = sorted(scored, key=lambda r: -r["metrics"]["f1"][0])
    best_per_model = {}
    for row in ranking:
        best_per_model.setdefault(row["model"], row)

    out_dir = Path(base_dir) / str(doc["base"].get("output_dir", "runs"))
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_grid_report(out_dir, rows, ranking, best_per_model)
    return {"rows": rows, "ranking": ranking, "best_per_model": best_per_model,
            "dir": out_dir}


def _write_grid_report(out_dir: Path, rows, ranking, best_per_model) -> None:
    with open(out_dir / "grid_report.csv", "w") as fh:
        fh.write("rank,model,encoder,augmentation,hash,status,"
                 "f1_mean,f1_std,auroc_mean,auroc_std\n")
        for rank, row in enumerate(ranking, start=1):
            f1m, f1s = row["metrics"]["f1"]
            aum, aus = row["metrics"]["auroc"]
            fh.write(f"{rank},{row['model']},{row['encoder']},{row['augmentation']},"
                     f"{row['hash']},{row['status']},{f1m!r},{f1s!r},{aum!r},{aus!r}\n")
        failed = [r for r in rows if not r.get("metrics")]
        for row in failed:
            fh.write(f",{row['model']},{row['encoder']},{row['augmentation']},"
                     f"{row['hash']},{row['status']},,,,\n")

    lines = ["best encoder + augmentation per model (by mean F1):"]
    for model, row in best_per_model.items():
        f1m, f1s = row["metrics"]["f1"]
        lines.append(f"  {model}: {row['encoder']} + {row['augmentation']}"
                     f"  f1={f1m:.4f}±{f1s:.4f}")
    lines.append("")
    lines.append("full ranking:")
    for rank, row in enumerate(ranking, start=1):
        f1m, f1s = row["metrics"]["f1"]
        lines.append(f"  {rank:2d}. {row['cell']:40s} f1={f1m:.4f}±{f1s:.4f} [{row['status']}]")
    for row in rows:
        if not row.get("metrics"):
            lines.append(f"   -. {row['cell']:40s} FAILED: {row.get('error', '?')}")
    (out_dir / "grid_report.txt").write_text("\n".join(lines) + "\n")


def read_report(exp_dir) -> str:
    """Re-print the stored report of an experiment directory."""
    exp_dir = Path(exp_dir)
    path = exp_dir / "report.txt"
    if not path.exists():
        raise FileNotFoundError(f"no report.txt under {exp_dir}")
    return path.read_text().rstrip("\n")
