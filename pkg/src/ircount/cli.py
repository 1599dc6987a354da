"""Command-line interface.

Every command is deterministic given its flags and seed. Each output
file embeds the hex digest of the invocation that produced it, so any
artifact can be traced back to its exact configuration. The dataset path
defaults to the ``IRCOUNT_DATA`` environment variable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys

import click
import numpy as np

from . import baseline as bl
from . import synth
from .data import (
    DATA_ENV_VAR,
    class_weights,
    fold_samples,
    load_sessions,
    make_folds,
    normalization_stats,
    normalize,
    write_sessions_csv,
)
from .explore import ALL_FAMILIES, load_results, run_grid
from .metrics import aggregate_folds, evaluate
from .modelio import load_model, save_model
from .models import ArchError, build_model, parse_arch
from .quant import QuantModel, QuantUnsupported, export_int8, predict_counts_int
from .report import write_report
from .train import TrainConfig, train

_METRIC_HEADER = ["fold", "test_session", "n_test", "bal_acc", "acc",
                  "f1_weighted", "mae", "mse"]


def _digest(**kwargs) -> str:
    """Short stable digest of the effective invocation configuration."""
    blob = json.dumps(kwargs, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def _load_data(path):
    if path is None:
        raise click.ClickException(
            f"no dataset: pass --data or set {DATA_ENV_VAR}"
        )
    try:
        return load_sessions(path)
    except (OSError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc


def _fold_by_test_session(sessions, fold_id: int):
    folds = {f.test_session: f for f in make_folds(sessions)}
    if fold_id not in folds:
        raise click.ClickException(
            f"fold {fold_id} not available; choose from {sorted(folds)}"
        )
    return folds[fold_id]


def _write_metrics_csv(path, rows, digest):
    """Per-fold rows plus one weighted-aggregate row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# ircount-config-digest: {digest}\n")
        writer = csv.writer(fh)
        writer.writerow(_METRIC_HEADER)
        for row in rows:
            writer.writerow(row)
        if rows:
            sizes = [r[2] for r in rows]
            agg = ["aggregate", "", sum(sizes)]
            for i in range(3, len(_METRIC_HEADER)):
                mean, _ = aggregate_folds([r[i] for r in rows], sizes)
                agg.append(f"{mean:.6f}")
            writer.writerow(agg)


@click.group()
def main():
    """People counting on 8x8 thermal frames: train, quantize, explore."""


@main.command("train")
@click.option("--arch", required=True, help="architecture string, e.g. mc:w3:C8-P-C16-FC")
@click.option("--fold", type=int, required=True, help="test session id (2-5 on the reference data)")
@click.option("--data", envvar=DATA_ENV_VAR, type=click.Path(exists=True), help="dataset CSV")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--qat", is_flag=True, help="quantization-aware fine-tune and export int8")
@click.option("--epochs", type=int, default=500, show_default=True)
@click.option("--out", required=True, type=click.Path(), help="model file to write")
@click.option("--history", "history_path", type=click.Path(), help="per-epoch loss CSV")
def cmd_train(arch, fold, data, seed, qat, epochs, out, history_path):
    """Train one architecture on one cross-validation fold."""
    try:
        spec = parse_arch(arch)
    except ArchError as exc:
        raise click.ClickException(str(exc)) from exc
    if qat and spec.family == "lstm":
        raise click.ClickException(
            "QuantUnsupported: CNN-LSTM models cannot be quantized"
        )
    digest = _digest(cmd="train", arch=arch, fold=fold, seed=seed, qat=qat,
                     epochs=epochs)
    sessions = _load_data(data)
    fold_obj = _fold_by_test_session(sessions, fold)
    train_set, test_set = fold_samples(sessions, fold_obj, spec.window)
    mean, std = normalization_stats(train_set.windows)
    x_train = normalize(train_set.windows, mean, std)
    if spec.family == "mv":
        x_train = x_train[:, -1:]
    weights = class_weights(train_set.labels)
    cfg = TrainConfig(max_epochs=epochs, seed=seed)
    model = build_model(spec, seed=seed)
    model, history = train(model, x_train, train_set.labels, weights, cfg)
    histories = [("float", history)]
    if qat:
        model, qat_history = train(
            model, x_train, train_set.labels, weights, cfg.for_qat(),
            quant_aware=True,
        )
        histories.append(("qat", qat_history))
        model = export_int8(model)

    x_test = normalize(test_set.windows, mean, std)
    if isinstance(model, QuantModel):
        preds = predict_counts_int(model, x_test)
    else:
        preds = model.predict_counts(x_test)
    fold_metrics = evaluate(preds, test_set.labels)
    meta = {
        "seed": seed,
        "fold": fold,
        "config_digest": digest,
        "norm_mean": mean,
        "norm_std": std,
        "metrics": fold_metrics.as_dict(),
    }
    save_model(out, model, metadata=meta)
    if history_path:
        with open(history_path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# ircount-config-digest: {digest}\n")
            writer = csv.writer(fh)
            writer.writerow(["phase", "epoch", "loss", "lr"])
            for phase, h in histories:
                for i, (loss, lr) in enumerate(zip(h.losses, h.lrs)):
                    writer.writerow([phase, i, f"{loss:.8f}", f"{lr:.8g}"])
    click.echo(
        f"trained {arch} (fold {fold}): balanced accuracy "
        f"{fold_metrics.bal_acc:.4f} -> {out}"
    )


@main.command("explore")
@click.option("--families", default="all", show_default=True,
              help="comma-separated subset of sf,mc,mv,cat,lstm,tcn or 'all'")
@click.option("--preset", default="full", show_default=True,
              type=click.Choice(["full", "sf-paper"]))
@click.option("--data", envvar=DATA_ENV_VAR, type=click.Path(exists=True))
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--epochs", type=int, default=500, show_default=True)
@click.option("--windows", default="3,5,7,9", show_default=True)
@click.option("--out", required=True, type=click.Path(), help="results CSV (appended, resumable)")
def cmd_explore(families, preset, data, jobs, seed, epochs, windows, out):
    """Run the staged architecture grid study."""
    fams = ALL_FAMILIES if families == "all" else tuple(
        f.strip() for f in families.split(",") if f.strip()
    )
    unknown = set(fams) - set(ALL_FAMILIES)
    if unknown:
        raise click.ClickException(f"unknown families: {', '.join(sorted(unknown))}")
    window_list = tuple(int(w) for w in windows.split(","))
    digest = _digest(cmd="explore", families=sorted(fams), preset=preset,
                     seed=seed, epochs=epochs, windows=window_list)
    sessions = _load_data(data)
    cfg = TrainConfig(max_epochs=epochs, seed=seed)
    records = run_grid(
        sessions,
        families=fams,
        cfg=cfg,
        master_seed=seed,
        preset=preset,
        windows=window_list,
        results_path=out,
        jobs=jobs,
        digest=digest,
    )
    ok = sum(1 for r in records if r.status == "ok")
    click.echo(f"{len(records)} records ({ok} ok) -> {out}")


@main.command("report")
@click.option("--results", required=True, type=click.Path(exists=True))
@click.option("--axis", default="macs", show_default=True,
              type=click.Choice(["macs", "params"]))
@click.option("--out-dir", required=True, type=click.Path())
def cmd_report(results, axis, out_dir):
    """Render Pareto tables, scatter CSV and SVG plots from a results CSV."""
    records = list(load_results(results).values())
    if not records:
        raise click.ClickException(f"{results}: no records")
    digest = _digest(cmd="report", results_digest=_file_digest(results), axis=axis)
    try:
        written = write_report(records, out_dir, axis=axis, digest=digest)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    for path in written:
        click.echo(path)


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()[:12]


@main.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--data", envvar=DATA_ENV_VAR, type=click.Path(exists=True))
@click.option("--folds", default=None, help="comma-separated test session ids (default: all)")
@click.option("--out", required=True, type=click.Path(), help="metrics CSV")
def cmd_eval(model_path, data, folds, out):
    """Evaluate a saved model file on cross-validation folds."""
    model, meta = load_model(model_path)
    sessions = _load_data(data)
    all_folds = make_folds(sessions)
    if folds:
        wanted = {int(f) for f in folds.split(",")}
        all_folds = [f for f in all_folds if f.test_session in wanted]
        if not all_folds:
            raise click.ClickException(f"no matching folds in {sorted(wanted)}")
    mean, std = meta.get("norm_mean", 0.0), meta.get("norm_std", 1.0)
    digest = _digest(cmd="eval", model=_file_digest(model_path),
                     folds=sorted(f.test_session for f in all_folds))
    rows = []
    for fold in all_folds:
        _, test_set = fold_samples(sessions, fold, model.spec.window)
        x_test = normalize(test_set.windows, mean, std)
        if isinstance(model, QuantModel):
            preds = predict_counts_int(model, x_test)
        else:
            preds = model.predict_counts(x_test)
        m = evaluate(preds, test_set.labels)
        rows.append([fold.test_session, fold.test_session, m.n_test,
                     m.bal_acc, m.acc, m.f1_weighted, m.mae, m.mse])
    _write_metrics_csv(out, rows, digest)
    click.echo(f"{len(rows)} fold rows -> {out}")


@main.command("baseline")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="key = value config file for the deterministic pipeline")
@click.option("--data", envvar=DATA_ENV_VAR, type=click.Path(exists=True))
@click.option("--folds", default=None, help="comma-separated test session ids (default: all)")
@click.option("--out", required=True, type=click.Path(), help="metrics CSV")
@click.option("--predictions", "pred_path", type=click.Path(),
              help="optional per-frame predictions CSV (session,frame_idx,count)")
def cmd_baseline(config_path, data, folds, out, pred_path):
    """Run the deterministic blob-counting baseline on the CV test folds."""
    try:
        cfg = (bl.BaselineConfig.from_file(config_path) if config_path
               else bl.BaselineConfig())
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    sessions = _load_data(data)
    all_folds = make_folds(sessions)
    if folds:
        wanted = {int(f) for f in folds.split(",")}
        all_folds = [f for f in all_folds if f.test_session in wanted]
    digest = _digest(cmd="baseline", config=vars(cfg),
                     folds=sorted(f.test_session for f in all_folds))
    by_id = {s.session_id: s for s in sessions}
    rows, pred_rows = [], []
    for fold in all_folds:
        session = by_id[fold.test_session]
        counts = bl.run_baseline(session.frames, cfg)
        m = evaluate(counts, session.labels)
        rows.append([fold.test_session, fold.test_session, m.n_test,
                     m.bal_acc, m.acc, m.f1_weighted, m.mae, m.mse])
        pred_rows += [
            (session.session_id, i, int(c)) for i, c in enumerate(counts)
        ]
    _write_metrics_csv(out, rows, digest)
    if pred_path:
        with open(pred_path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# ircount-config-digest: {digest}\n")
            writer = csv.writer(fh)
            writer.writerow(["session", "frame_idx", "count"])
            writer.writerows(pred_rows)
    click.echo(f"{len(rows)} fold rows -> {out}")


@main.command("synth")
@click.option("--sessions", type=int, default=5, show_default=True)
@click.option("--frames", type=int, default=600, show_default=True,
              help="frames per non-anchor session")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def cmd_synth(sessions, frames, seed, out):
    """Generate a synthetic dataset CSV in the ingestion schema."""
    digest = _digest(cmd="synth", sessions=sessions, frames=frames, seed=seed)
    data = synth.make_dataset(
        n_sessions=sessions, frames_per_session=frames, seed=seed
    )
    write_sessions_csv(out, data, digest=digest)
    click.echo(f"{sum(len(s) for s in data)} frames -> {out}")


if __name__ == "__main__":
    main()
