"""Staged architecture study.

Stage 1 trains the single-frame (sf) grid; its Pareto fronts (on MACs and
on parameters) supply the feature extractors for the window-based
families (mv/cat/lstm/tcn). The multi-channel (mc) grid is independent.
Every spec is trained on all cross-validation folds in float precision
and, where supported, fine-tuned and exported to int8. Records are
appended to a results CSV incrementally, so an interrupted run resumes
by re-training only the missing specs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from .costs import count_macs, count_params, size_bytes
from .data import (
    class_weights,
    fold_samples,
    make_folds,
    normalization_stats,
    normalize,
)
from .metrics import aggregate_folds, evaluate
from .models import (
    HEAD_SET,
    MULTI_FRAME_WINDOWS,
    ModelSpec,
    build_model,
    enumerate_family,
    enumerate_sf,
    parse_arch,
)
from .quant import QuantUnsupported, export_int8, predict_counts_int
from .train import TrainConfig, train

ALL_FAMILIES = ("sf", "mc", "mv", "cat", "lstm", "tcn")
DEPENDENT_FAMILIES = ("mv", "cat", "lstm", "tcn")

_AGG_KEYS = ("bal_acc", "acc", "f1_weighted", "mae", "mse")


@dataclass
class ResultRecord:
    spec: str
    precision: str  # float | int8
    family: str
    window: int
    seed: int
    params: int
    macs: int
    size_bytes: int
    bal_acc: float = float("nan")
    bal_acc_std: float = float("nan")
    acc: float = float("nan")
    f1_weighted: float = float("nan")
    mae: float = float("nan")
    mse: float = float("nan")
    n_folds: int = 0
    folds_json: str = "[]"  # per-fold metric dicts; aggregation is recomputable
    wall_clock: float = 0.0
    status: str = "ok"

    @property
    def key(self) -> tuple[str, str]:
        return (self.spec, self.precision)


RESULT_FIELDS = [f.name for f in fields(ResultRecord)]
_INT_FIELDS = {"window", "seed", "params", "macs", "size_bytes", "n_folds"}
_FLOAT_FIELDS = {"bal_acc", "bal_acc_std", "acc", "f1_weighted", "mae", "mse", "wall_clock"}


def model_seed(master_seed: int, spec_str: str) -> int:
    """Stable per-spec seed; adding specs never perturbs existing ones."""
    digest = hashlib.sha256(f"{master_seed}:{spec_str}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def load_results(path) -> dict[tuple[str, str], ResultRecord]:
    results: dict[tuple[str, str], ResultRecord] = {}
    if not path or not os.path.exists(path):
        return results
    with open(path, newline="", encoding="utf-8") as fh:
        lines = (ln for ln in fh if not ln.startswith("#"))
        for row in csv.DictReader(lines):
            kwargs = {}
            for key in RESULT_FIELDS:
                raw = row[key]
                if key in _INT_FIELDS:
                    kwargs[key] = int(raw)
                elif key in _FLOAT_FIELDS:
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = raw
            rec = ResultRecord(**kwargs)
            results[rec.key] = rec
    return results


class ResultsWriter:
    """Append-only, single-writer CSV sink (header written once)."""

    def __init__(self, path, digest: str | None = None):
        self.path = path
        new = path is not None and not os.path.exists(path)
        self._fh = open(path, "a", newline="", encoding="utf-8") if path else None
        if self._fh and new:
            if digest:
                self._fh.write(f"# ircount-config-digest: {digest}\n")
            csv.writer(self._fh).writerow(RESULT_FIELDS)
            self._fh.flush()

    def append(self, rec: ResultRecord) -> None:
        if self._fh is None:
            return
        csv.writer(self._fh).writerow([getattr(rec, k) for k in RESULT_FIELDS])
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _aggregate(fold_metrics, fold_sizes) -> dict:
    out = {}
    for key in _AGG_KEYS:
        mean, std = aggregate_folds([getattr(m, key) for m in fold_metrics], fold_sizes)
        out[key] = mean
        if key == "bal_acc":
            out["bal_acc_std"] = std
    return out


def evaluate_spec(
    sessions,
    spec: ModelSpec,
    seed: int,
    cfg: TrainConfig,
) -> list[ResultRecord]:
    """Cross-validated training of one spec; float record plus, for the
    quantizable families, the int8 record of its QAT fine-tuned twin."""
    base = dict(
        spec=str(spec),
        family=spec.family,
        window=spec.window,
        seed=seed,
        params=count_params(spec),
        macs=count_macs(spec),
    )
    quantizable = spec.family != "lstm"
    t0 = time.perf_counter()
    float_folds, int8_folds, sizes = [], [], []
    try:
        for fold in make_folds(sessions):
            train_set, test_set = fold_samples(sessions, fold, spec.window)
            mean, std = normalization_stats(train_set.windows)
            x_train = normalize(train_set.windows, mean, std)
            x_test = normalize(test_set.windows, mean, std)
            if spec.family == "mv":
                x_train = x_train[:, -1:]
            weights = class_weights(train_set.labels)
            fold_cfg = TrainConfig(
                max_epochs=cfg.max_epochs,
                lr0=cfg.lr0,
                plateau_factor=cfg.plateau_factor,
                plateau_patience=cfg.plateau_patience,
                early_stop_patience=cfg.early_stop_patience,
                batch_size=cfg.batch_size,
                seed=seed,
            )
            model = build_model(spec, seed=seed)
            model, _ = train(model, x_train, train_set.labels, weights, fold_cfg)
            preds = model.predict_counts(x_test)
            float_folds.append(evaluate(preds, test_set.labels))
            sizes.append(len(test_set.labels))
            if quantizable:
                qat, _ = train(
                    model,
                    x_train,
                    train_set.labels,
                    weights,
                    fold_cfg.for_qat(),
                    quant_aware=True,
                )
                qmodel = export_int8(qat)
                qpreds = predict_counts_int(qmodel, x_test)
                int8_folds.append(evaluate(qpreds, test_set.labels))
    except (QuantUnsupported, ValueError, FloatingPointError) as exc:
        wall = time.perf_counter() - t0
        return [
            ResultRecord(
                precision="float",
                size_bytes=size_bytes(spec, "float"),
                wall_clock=wall,
                status=f"error: {exc}",
                **base,
            )
        ]
    wall = time.perf_counter() - t0
    records = [
        ResultRecord(
            precision="float",
            size_bytes=size_bytes(spec, "float"),
            n_folds=len(float_folds),
            folds_json=json.dumps([m.as_dict() for m in float_folds]),
            wall_clock=wall,
            **_aggregate(float_folds, sizes),
            **base,
        )
    ]
    if quantizable:
        records.append(
            ResultRecord(
                precision="int8",
                size_bytes=size_bytes(spec, "int8"),
                n_folds=len(int8_folds),
                folds_json=json.dumps([m.as_dict() for m in int8_folds]),
                wall_clock=wall,
                **_aggregate(int8_folds, sizes),
                **base,
            )
        )
    return records


# -- Pareto machinery ------------------------------------------------------


def pareto_front(records, axis: str = "macs") -> list[ResultRecord]:
    """Non-dominated records: minimize cost ``axis``, maximize bal_acc.

    The result is ordered with strictly increasing cost and strictly
    increasing balanced accuracy. Equal-cost ties keep the higher
    accuracy, then the lexicographically smaller spec string.
    """
    if axis not in ("macs", "params"):
        raise ValueError(f"unknown cost axis {axis!r}")
    records = [r for r in records if np.isfinite(r.bal_acc)]
    if not records:
        raise ValueError("no finite records to rank")
    ordered = sorted(records, key=lambda r: (getattr(r, axis), -r.bal_acc, r.spec))
    front: list[ResultRecord] = []
    best = -np.inf
    for rec in ordered:
        if front and getattr(rec, axis) == getattr(front[-1], axis):
            continue  # same cost: the sort already kept the winner
        if rec.bal_acc > best:
            front.append(rec)
            best = rec.bal_acc
    return front


def select_extractors(sf_records, axis: str = "both") -> list[str]:
    """Conv/pool prefixes of the sf Pareto members, deduplicated.

    ``axis`` picks the MACs front, the params front, or their union.
    """
    members = _front_union(sf_records, axis)
    prefixes: list[str] = []
    for rec in members:
        prefix = "-".join(parse_arch(rec.spec).extractor_tokens())
        if prefix not in prefixes:
            prefixes.append(prefix)
    return prefixes


def select_sf_variants(sf_records, axis: str = "both") -> list[str]:
    """Full token strings of the sf Pareto members (the voting family
    ensembles whole Pareto-optimal single-frame models)."""
    variants: list[str] = []
    for rec in _front_union(sf_records, axis):
        tokens = "-".join(parse_arch(rec.spec).tokens)
        if tokens not in variants:
            variants.append(tokens)
    return variants


def _front_union(sf_records, axis: str) -> list[ResultRecord]:
    sf_records = list(sf_records)
    if not sf_records:
        raise ValueError("empty sf results")
    if axis == "both":
        union = pareto_front(sf_records, "macs")
        seen = {r.spec for r in union}
        union += [r for r in pareto_front(sf_records, "params") if r.spec not in seen]
        return union
    return pareto_front(sf_records, axis)


# -- staged grid run --------------------------------------------------------


def run_grid(
    sessions,
    families=ALL_FAMILIES,
    cfg: TrainConfig | None = None,
    master_seed: int = 0,
    preset: str = "full",
    windows=MULTI_FRAME_WINDOWS,
    heads=HEAD_SET,
    results_path=None,
    jobs: int = 1,
    extractor_axis: str = "both",
    digest: str | None = None,
) -> list[ResultRecord]:
    """Run the staged study; returns all records (existing + new)."""
    families = tuple(families)
    unknown = set(families) - set(ALL_FAMILIES)
    if unknown:
        raise ValueError(f"unknown families: {sorted(unknown)}")
    cfg = cfg or TrainConfig()
    results = load_results(results_path)
    writer = ResultsWriter(results_path, digest=digest)

    def run_stage(specs):
        todo = [s for s in specs if (str(s), "float") not in results]
        def task(spec):
            return evaluate_spec(sessions, spec, model_seed(master_seed, str(spec)), cfg)
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                batches = list(pool.map(task, todo))
        else:
            batches = [task(s) for s in todo]
        for batch in batches:  # single-writer append
            for rec in batch:
                results[rec.key] = rec
                writer.append(rec)

    try:
        dependents = [f for f in DEPENDENT_FAMILIES if f in families]
        if "sf" in families or dependents:
            run_stage(enumerate_sf(preset))
        if "mc" in families:
            run_stage(enumerate_family("mc", windows=windows, preset=preset))
        if dependents:
            sf_ok = [
                r
                for r in results.values()
                if r.family == "sf" and r.precision == "float" and r.status == "ok"
            ]
            prefixes = select_extractors(sf_ok, extractor_axis)
            variants = select_sf_variants(sf_ok, extractor_axis)
            for fam in dependents:
                run_stage(
                    enumerate_family(
                        fam,
                        windows=windows,
                        heads=heads,
                        extractors=variants if fam == "mv" else prefixes,
                    )
                )
    finally:
        writer.close()
    return list(results.values())
