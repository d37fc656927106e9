# roi_cae/report.py
"""Aggregate run fragments into CSV/JSON tables, delta summaries and plots."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from . import plots
from .const import (
    FILE_ABLATION_FRAGMENT,
    FILE_FRAGMENT,
    FILE_INTERPOLATION,
    FILE_PROBES,
    KEY_MS_SSIM,
    KEY_PSNR,
    KEY_ROI_EDGE_MAE,
    KEY_ROI_MAE,
    KEY_ROI_MS_SSIM,
    METRIC_KEYS,
    NOT_AVAILABLE,
    PACKAGE_VERSION,
    PHASE_1,
    PHASE_2,
    PHASES,
    PLOTS_DIR,
    REPORT_ABLATION,
    REPORT_ABLATION_ECHO,
    REPORT_DELTAS,
    REPORT_JSON,
    REPORT_OOD,
    REPORT_PER_SEED,
    REPORT_PROBES_JSON,
    REPORT_PROTOCOLS,
    REPORT_PROVENANCE,
    REPORT_QC,
)
from .diagnostics import read_json, write_json
from .exceptions import DatasetIOError, RoiCaeError
from .metrics import MetricRecord

_LOGGER = logging.getLogger(__name__)

CROSS_CHECK_TOLERANCE = 1e-9
KIND_PROTOCOL = "protocol"
KIND_ABLATION = "ablation"


@dataclass(frozen=True)
class MetricDescription:
    """How a metric is labelled, ranked and compared between phases."""

    key: str
    name: str
    unit: Optional[str] = None
    higher_is_better: bool = True
    relative_delta: bool = False


METRIC_DESCRIPTIONS: tuple[MetricDescription, ...] = (
    MetricDescription(key=KEY_PSNR, name="PSNR", unit="dB"),
    MetricDescription(key=KEY_MS_SSIM, name="MS-SSIM"),
    MetricDescription(
        key=KEY_ROI_MAE, name="ROI-MAE", higher_is_better=False, relative_delta=True
    ),
    MetricDescription(key=KEY_ROI_MS_SSIM, name="ROI MS-SSIM"),
    MetricDescription(
        key=KEY_ROI_EDGE_MAE,
        name="ROI Edge-MAE",
        higher_is_better=False,
        relative_delta=True,
    ),
)
DESCRIPTIONS_BY_KEY = {description.key: description for description in METRIC_DESCRIPTIONS}
# Fixed-horizon ablation tables traditionally omit ROI MS-SSIM.
ABLATION_TABLE_KEYS = (KEY_PSNR, KEY_MS_SSIM, KEY_ROI_MAE, KEY_ROI_EDGE_MAE)


# --- Aggregation ---
def split_means(records: Iterable[MetricRecord]) -> Dict[str, Dict[str, float]]:
    """``{split: {metric: mean}}`` over per-sample metric records."""
    grouped: Dict[str, List[MetricRecord]] = {}
    for record in records:
        grouped.setdefault(record.split, []).append(record)
    return {
        split: {
            key: float(np.mean([getattr(record, key) for record in rows]))
            for key in METRIC_KEYS
        }
        for split, rows in sorted(grouped.items())
    }


def mean_std(values: Sequence[float]) -> tuple[float, Optional[float]]:
    """Mean and sample std; std is None below two values."""
    data = np.asarray(values, dtype=np.float64)
    if data.size == 0:
        raise ValueError("mean_std needs at least one value")
    std = float(np.std(data, ddof=1)) if data.size >= 2 else None
    return float(np.mean(data)), std


def metric_delta(key: str, p1: float, p2: float) -> Optional[float]:
    """Relative percent change for MAE-type metrics, absolute P2 - P1 otherwise.

    A 0.010 -> 0.009 ROI-MAE gives -10.0 (percent); PSNR 35.0 -> 35.3 gives +0.3.
    """
    if DESCRIPTIONS_BY_KEY[key].relative_delta:
        if p1 == 0:
            return None
        return 100.0 * (p2 - p1) / p1
    return p2 - p1


def summarize_runs(runs: Sequence[Mapping[str, Any]]) -> Dict[str, Any]:
    """``{phase: {split: {metric: {mean, std, n}}}}`` across seeds."""
    summary: Dict[str, Any] = {}
    for phase in PHASES:
        splits = sorted({split for run in runs for split in run["metrics"].get(phase, {})})
        for split in splits:
            for key in METRIC_KEYS:
                values = [
                    run["metrics"][phase][split][key]
                    for run in runs
                    if split in run["metrics"].get(phase, {})
                ]
                mean, std = mean_std(values)
                summary.setdefault(phase, {}).setdefault(split, {})[key] = {
                    "mean": mean,
                    "std": std,
                    "n": len(values),
                }
    return summary


def summary_deltas(summary: Mapping[str, Any]) -> Dict[str, Dict[str, Optional[float]]]:
    """``{split: {metric: delta}}`` for splits present in both phases."""
    deltas: Dict[str, Dict[str, Optional[float]]] = {}
    shared = sorted(set(summary.get(PHASE_1, {})) & set(summary.get(PHASE_2, {})))
    for split in shared:
        deltas[split] = {
            key: metric_delta(
                key,
                summary[PHASE_1][split][key]["mean"],
                summary[PHASE_2][split][key]["mean"],
            )
            for key in METRIC_KEYS
        }
    return deltas


# --- Fragments ---
def load_fragments(runs_dir: Union[str, Path]) -> List[Dict[str, Any]]:
    """Every protocol and ablation fragment under ``runs_dir``, in path order."""
    root = Path(runs_dir)
    if not root.is_dir():
        raise DatasetIOError(f"Runs directory {root} does not exist", error_details=str(root))
    paths = sorted(
        list(root.rglob(FILE_FRAGMENT)) + list(root.rglob(FILE_ABLATION_FRAGMENT))
    )
    fragments = [read_json(path) for path in paths]
    _LOGGER.info("Loaded %d fragment(s) from %s", len(fragments), root)
    return fragments


def _protocol_rows(fragment: Mapping[str, Any]) -> List[Dict[str, Any]]:
    rows = []
    summary = fragment["summary"]
    for phase in PHASES:
        for split, values in sorted(summary.get(phase, {}).items()):
            row: Dict[str, Any] = {
                "protocol": fragment["protocol"],
                "held_out_site": fragment.get("held_out_site") or "",
                "phase": phase,
                "split": split,
                "n_seeds": values[METRIC_KEYS[0]]["n"],
            }
            for key in METRIC_KEYS:
                std = values[key]["std"]
                row[f"{key}_mean"] = values[key]["mean"]
                row[f"{key}_std"] = NOT_AVAILABLE if std is None else std
            rows.append(row)
    return rows


def _per_seed_rows(fragment: Mapping[str, Any]) -> List[Dict[str, Any]]:
    rows = []
    for run in fragment["runs"]:
        for phase in PHASES:
            for split, values in sorted(run["metrics"].get(phase, {}).items()):
                rows.append(
                    {
                        "protocol": fragment["protocol"],
                        "seed": run["seed"],
                        "phase": phase,
                        "split": split,
                        **{key: values[key] for key in METRIC_KEYS},
                    }
                )
    return rows


def _delta_rows(
    protocol: str,
    deltas: Mapping[str, Mapping[str, Optional[float]]],
    summary: Mapping[str, Any],
) -> List[Dict[str, Any]]:
    rows = []
    for split, values in deltas.items():
        for key, delta in values.items():
            description = DESCRIPTIONS_BY_KEY[key]
            rows.append(
                {
                    "protocol": protocol,
                    "split": split,
                    "metric": key,
                    "name": description.name,
                    "mode": "relative_percent" if description.relative_delta else "absolute",
                    "p1": summary[PHASE_1][split][key]["mean"],
                    "p2": summary[PHASE_2][split][key]["mean"],
                    "delta": NOT_AVAILABLE if delta is None else delta,
                }
            )
    return rows


def cross_check_deltas(
    per_seed_csv: Union[str, Path],
    delta_rows: Sequence[Mapping[str, Any]],
    tolerance: float = CROSS_CHECK_TOLERANCE,
) -> Dict[str, Any]:
    """Recompute every delta from the per-seed CSV and compare with the table."""
    frame = pd.read_csv(per_seed_csv, float_precision="round_trip")
    means = frame.groupby(["protocol", "phase", "split"])[list(METRIC_KEYS)].mean()
    max_diff = 0.0
    mismatches = []
    checked = 0
    for row in delta_rows:
        if row["delta"] == NOT_AVAILABLE:
            continue
        p1 = float(means.loc[(row["protocol"], PHASE_1, row["split"]), row["metric"]])
        p2 = float(means.loc[(row["protocol"], PHASE_2, row["split"]), row["metric"]])
        recomputed = metric_delta(row["metric"], p1, p2)
        diff = abs(float(row["delta"]) - float(recomputed)) if recomputed is not None else np.inf
        scale = max(1.0, abs(float(row["delta"])))
        max_diff = max(max_diff, diff)
        checked += 1
        if diff > tolerance * scale:
            mismatches.append(f"{row['protocol']}/{row['split']}/{row['metric']}")
    if mismatches:
        _LOGGER.error("Delta cross-check failed for %s", ", ".join(mismatches))
    return {
        "ok": not mismatches,
        "checked": checked,
        "max_abs_diff": max_diff,
        "mismatches": mismatches,
    }


def _probe_rows(fragment: Mapping[str, Any]) -> tuple[list, list, list]:
    provenance, ood, qc = [], [], []
    for run in fragment["runs"]:
        for phase, report in sorted(run.get("probes", {}).items()):
            base = {"protocol": fragment["protocol"], "seed": run["seed"], "phase": phase}
            for site_row in report["provenance"]["per_site"]:
                provenance.append({**base, **site_row})
            ood.append(
                {
                    **base,
                    "held_out_site": report["held_out_site"],
                    "seen_accuracy": report["provenance"]["seen_accuracy"],
                    "unseen_auroc": report["provenance"]["unseen_auroc"],
                    "mahalanobis_auroc": report["ood"]["mahalanobis_auroc"],
                    "knn_auroc": report["ood"]["knn_auroc"],
                    "knn_k": report["ood"]["knn_k"],
                    "triage_auroc": report["triage_auroc"],
                }
            )
            for site, stats in sorted(report["qc"].items()):
                qc.append({**base, "site": site, **stats})
    return provenance, ood, qc


def _ablation_frames(
    fragments: Sequence[Mapping[str, Any]], table_keys: Sequence[str]
) -> tuple[pd.DataFrame, pd.DataFrame]:
    columns = ["protocol", "held_out_site", "variant", "split", *table_keys]
    rows, echo = [], []
    for fragment in fragments:
        base = {"protocol": fragment["protocol"], "held_out_site": fragment["held_out_site"]}
        for row in fragment["rows"]:
            rows.append({**base, **{k: row[k] for k in ("variant", "split", *table_keys)}})
        for row in fragment.get("echo", []):
            echo.append({**base, **{k: row[k] for k in ("variant", "split", *table_keys)}})
    return pd.DataFrame(rows, columns=columns), pd.DataFrame(echo, columns=columns)


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    try:
        frame.to_csv(path, index=False, float_format="%.17g")
    except OSError as err:
        raise DatasetIOError(f"Cannot write {path}: {err}", error_details=str(path)) from err
    return path


# --- Plots ---
def _emit_plots(
    fragment: Mapping[str, Any], runs_dir: Path, plots_dir: Path
) -> List[str]:
    """Plots for the first seed of a protocol; missing artifacts are skipped."""
    if not fragment["runs"]:
        return []
    run = fragment["runs"][0]
    run_dir = runs_dir / run["run_dir"]
    prefix = f"{fragment['protocol']}_seed-{run['seed']}"
    written: List[str] = []
    probes_path = run_dir / FILE_PROBES
    if probes_path.exists():
        reports = read_json(probes_path)
        for phase, report in sorted(reports.items()):
            scores = report.get("scores", {})
            if "confidence" in scores:
                written.append(
                    plots.plot_confidence_histograms(
                        scores["confidence"],
                        plots_dir / f"{prefix}_{phase}_confidence.png",
                        title=f"{fragment['protocol']} {phase}: max-softmax confidence",
                    ).name
                )
            if "mahalanobis" in scores and "knn" in scores:
                written.append(
                    plots.plot_ood_distributions(
                        scores,
                        plots_dir / f"{prefix}_{phase}_ood.png",
                        title=f"{fragment['protocol']} {phase}: OOD scores",
                    ).name
                )
            if "pca" in scores:
                written.append(
                    plots.plot_pca_scatter(
                        scores["pca"],
                        plots_dir / f"{prefix}_{phase}_pca.png",
                        title=f"{fragment['protocol']} {phase}: latent PCA",
                    ).name
                )
    strip_path = run_dir / FILE_INTERPOLATION
    if strip_path.exists():
        written.append(
            plots.plot_interpolation_strip(
                np.load(strip_path), plots_dir / f"{prefix}_interpolation.png"
            ).name
        )
    return written


# --- Emission ---
def emit_report(
    fragments: Sequence[Mapping[str, Any]],
    out: Union[str, Path],
    runs_dir: Optional[Union[str, Path]] = None,
    ablation_table_layout: bool = False,
) -> Dict[str, Any]:
    """Write every table, the report JSON and (with ``runs_dir``) the plots."""
    if not fragments:
        raise RoiCaeError("emit_report needs at least one fragment", error_key="empty_report")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise DatasetIOError(f"Cannot create {out}: {err}", error_details=str(out)) from err

    protocols = [f for f in fragments if f.get("kind") == KIND_PROTOCOL]
    ablations = [f for f in fragments if f.get("kind") == KIND_ABLATION]
    files: List[str] = []
    payload: Dict[str, Any] = {"package_version": PACKAGE_VERSION, "protocols": {}}

    if protocols:
        table, per_seed, deltas = [], [], []
        provenance, ood, qc = [], [], []
        probes_json: Dict[str, Any] = {}
        for fragment in protocols:
            name = fragment["protocol"]
            table.extend(_protocol_rows(fragment))
            per_seed.extend(_per_seed_rows(fragment))
            fragment_deltas = summary_deltas(fragment["summary"])
            deltas.extend(_delta_rows(name, fragment_deltas, fragment["summary"]))
            payload["protocols"][name] = {
                "held_out_site": fragment.get("held_out_site") or "",
                "seeds": fragment["seeds"],
                "summary": fragment["summary"],
                "deltas": fragment_deltas,
            }
            rows = _probe_rows(fragment)
            provenance.extend(rows[0])
            ood.extend(rows[1])
            qc.extend(rows[2])
            probes_json[name] = {
                str(run["seed"]): run.get("probes", {}) for run in fragment["runs"]
            }

        _write_csv(pd.DataFrame(table), out / REPORT_PROTOCOLS)
        per_seed_path = _write_csv(pd.DataFrame(per_seed), out / REPORT_PER_SEED)
        _write_csv(pd.DataFrame(deltas), out / REPORT_DELTAS)
        files.extend([REPORT_PROTOCOLS, REPORT_PER_SEED, REPORT_DELTAS])
        payload["cross_check"] = cross_check_deltas(per_seed_path, deltas)

        if ood:
            _write_csv(pd.DataFrame(provenance), out / REPORT_PROVENANCE)
            _write_csv(pd.DataFrame(ood), out / REPORT_OOD)
            _write_csv(pd.DataFrame(qc), out / REPORT_QC)
            write_json(probes_json, out / REPORT_PROBES_JSON)
            files.extend([REPORT_PROVENANCE, REPORT_OOD, REPORT_QC, REPORT_PROBES_JSON])

        if runs_dir is not None:
            plots_dir = out / PLOTS_DIR
            for fragment in protocols:
                try:
                    names = _emit_plots(fragment, Path(runs_dir), plots_dir)
                except (RoiCaeError, OSError, ValueError) as err:
                    _LOGGER.warning(
                        "Skipping plots for '%s': %s", fragment["protocol"], err
                    )
                    continue
                files.extend(f"{PLOTS_DIR}/{name}" for name in names)

    if ablations:
        keys = ABLATION_TABLE_KEYS if ablation_table_layout else METRIC_KEYS
        rows, echo = _ablation_frames(ablations, keys)
        _write_csv(rows, out / REPORT_ABLATION)
        files.append(REPORT_ABLATION)
        if not echo.empty:
            _write_csv(echo, out / REPORT_ABLATION_ECHO)
            files.append(REPORT_ABLATION_ECHO)
        payload["ablations"] = {
            fragment["protocol"]: {
                "held_out_site": fragment["held_out_site"],
                "horizon": fragment["horizon"],
                "weights": fragment["weights"],
            }
            for fragment in ablations
        }

    payload["files"] = sorted(files)
    write_json(payload, out / REPORT_JSON)
    _LOGGER.info(
        "Report written to %s: %d protocol and %d ablation fragment(s)",
        out,
        len(protocols),
        len(ablations),
    )
    return payload
