import json
import logging

import numpy as np
import pandas as pd
import pytest

from roi_cae.diagnostics import write_json
from roi_cae.exceptions import DatasetIOError, RoiCaeError
from roi_cae.plots import (
    plot_confidence_histograms,
    plot_interpolation_strip,
    plot_ood_distributions,
    plot_pca_scatter,
)
from roi_cae.report import (
    cross_check_deltas,
    emit_report,
    load_fragments,
    mean_std,
    metric_delta,
    summarize_runs,
    summary_deltas,
)


def _metrics(psnr, ms_ssim, roi_mae, roi_ms_ssim, roi_edge_mae):
    return {
        "psnr": psnr,
        "ms_ssim": ms_ssim,
        "roi_mae": roi_mae,
        "roi_ms_ssim": roi_ms_ssim,
        "roi_edge_mae": roi_edge_mae,
    }


def _run(seed, shift):
    return {
        "name": "hold-out-site_c",
        "seed": seed,
        "run_dir": f"hold-out-site_c/seed-{seed}",
        "best_epoch": {"P1": 4, "P2": 3},
        "metrics": {
            "P1": {
                "val": _metrics(35.0 + shift, 0.90, 0.010, 0.80, 0.20),
                "test": _metrics(30.0 + shift, 0.85, 0.020, 0.70, 0.30),
            },
            "P2": {
                "val": _metrics(35.3 + shift, 0.91, 0.009, 0.82, 0.18),
                "test": _metrics(30.1 + shift, 0.86, 0.018, 0.72, 0.27),
            },
        },
        "probes": {},
    }


def _protocol_fragment(seeds=(1, 2)):
    runs = [_run(seed, 0.1 * index) for index, seed in enumerate(seeds)]
    return {
        "kind": "protocol",
        "protocol": "hold-out-site_c",
        "held_out_site": "site_c",
        "seeds": list(seeds),
        "runs": runs,
        "summary": summarize_runs(runs),
    }


def _ablation_fragment():
    rows = [
        {"variant": label, "split": "val", **_metrics(35.0 + i, 0.9, 0.01, 0.8, 0.2)}
        for i, label in enumerate(("none", "+l1"))
    ]
    return {
        "kind": "ablation",
        "protocol": "ablation-site_c",
        "held_out_site": "site_c",
        "horizon": 15,
        "weights": {"none": {"glob": 1.0, "l1": 0.0, "edge": 0.0}},
        "rows": rows,
        "echo": [],
    }


def test_metric_deltas():
    assert metric_delta("roi_mae", 0.010, 0.009) == pytest.approx(-10.0)
    assert metric_delta("psnr", 35.0, 35.3) == pytest.approx(0.3)
    assert metric_delta("roi_edge_mae", 0.0, 0.1) is None
    assert metric_delta("ms_ssim", 0.9, 0.9) == 0.0


def test_mean_std():
    assert mean_std([1.0, 3.0]) == pytest.approx((2.0, np.sqrt(2.0)))
    assert mean_std([5.0]) == (5.0, None)
    with pytest.raises(ValueError):
        mean_std([])


def test_summary_and_deltas():
    summary = _protocol_fragment()["summary"]
    assert summary["P1"]["val"]["psnr"]["mean"] == pytest.approx(35.05)
    assert summary["P1"]["val"]["psnr"]["n"] == 2
    deltas = summary_deltas(summary)
    assert set(deltas) == {"test", "val"}
    assert deltas["val"]["roi_mae"] == pytest.approx(-10.0)
    assert deltas["test"]["psnr"] == pytest.approx(0.1)


def test_emit_report_writes_tables(tmp_path):
    payload = emit_report([_protocol_fragment(seeds=(7,))], tmp_path / "report")
    out = tmp_path / "report"
    assert payload["files"] == ["deltas.csv", "per_seed.csv", "table_protocols.csv"]
    assert payload["cross_check"]["ok"]
    assert payload["cross_check"]["checked"] == 10

    table = pd.read_csv(out / "table_protocols.csv", keep_default_na=False)
    assert len(table) == 4
    assert (table["psnr_std"] == "n/a").all()
    deltas = pd.read_csv(out / "deltas.csv")
    row = deltas[(deltas["split"] == "val") & (deltas["metric"] == "roi_mae")].iloc[0]
    assert row["mode"] == "relative_percent"
    assert float(row["delta"]) == pytest.approx(-10.0)
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["protocols"]["hold-out-site_c"]["held_out_site"] == "site_c"


def test_plot_failure_keeps_the_tables(tmp_path, monkeypatch, caplog):
    runs_dir = tmp_path / "runs"
    run_dir = runs_dir / "hold-out-site_c" / "seed-7"
    run_dir.mkdir(parents=True)
    np.save(run_dir / "interpolation.npy", np.zeros((4, 32, 48)))

    def broken_strip(*args, **kwargs):
        raise OSError("disk full")

    monkeypatch.setattr("roi_cae.report.plots.plot_interpolation_strip", broken_strip)
    with caplog.at_level(logging.WARNING, logger="roi_cae.report"):
        payload = emit_report(
            [_protocol_fragment(seeds=(7,))], tmp_path / "report", runs_dir=runs_dir
        )
    assert payload["files"] == ["deltas.csv", "per_seed.csv", "table_protocols.csv"]
    assert (tmp_path / "report" / "report.json").exists()
    assert "Skipping plots for 'hold-out-site_c': disk full" in caplog.text


def test_cross_check_detects_a_tampered_delta(tmp_path):
    emit_report([_protocol_fragment()], tmp_path)
    rows = pd.read_csv(tmp_path / "deltas.csv").to_dict("records")
    assert cross_check_deltas(tmp_path / "per_seed.csv", rows)["ok"]
    rows[0]["delta"] = float(rows[0]["delta"]) + 0.5
    check = cross_check_deltas(tmp_path / "per_seed.csv", rows)
    assert not check["ok"]
    assert len(check["mismatches"]) == 1


def test_ablation_table_layout(tmp_path):
    fragment = _ablation_fragment()
    full = emit_report([fragment], tmp_path / "full")
    assert full["files"] == ["table_ablation.csv"]
    assert "roi_ms_ssim" in pd.read_csv(tmp_path / "full" / "table_ablation.csv").columns

    emit_report([fragment], tmp_path / "compact", ablation_table_layout=True)
    table = pd.read_csv(tmp_path / "compact" / "table_ablation.csv")
    assert list(table.columns) == [
        "protocol",
        "held_out_site",
        "variant",
        "split",
        "psnr",
        "ms_ssim",
        "roi_mae",
        "roi_edge_mae",
    ]
    assert table["variant"].tolist() == ["none", "+l1"]


def test_empty_report_is_rejected(tmp_path):
    with pytest.raises(RoiCaeError) as err:
        emit_report([], tmp_path)
    assert err.value.error_key == "empty_report"


def test_load_fragments(tmp_path):
    write_json(_protocol_fragment(), tmp_path / "hold-out-site_c" / "fragment.json")
    write_json(_ablation_fragment(), tmp_path / "ablation" / "ablation_fragment.json")
    kinds = sorted(fragment["kind"] for fragment in load_fragments(tmp_path))
    assert kinds == ["ablation", "protocol"]
    assert load_fragments(tmp_path / "hold-out-site_c")[0]["protocol"] == "hold-out-site_c"
    with pytest.raises(DatasetIOError):
        load_fragments(tmp_path / "missing")


def test_plots_are_written(tmp_path):
    rng = np.random.default_rng(0)
    confidence = {"sites": ["a"] * 5 + ["b"] * 5, "values": rng.uniform(0.3, 1.0, 10).tolist()}
    scores = {
        "mahalanobis": {"in": rng.normal(2, 1, 20).tolist(), "out": rng.normal(6, 1, 10).tolist()},
        "knn": {"in": rng.normal(1, 0.2, 20).tolist(), "out": rng.normal(3, 0.2, 10).tolist()},
    }
    pca = {"sites": ["a", "b", "a", "b"], "coords": rng.normal(size=(4, 2)).tolist()}
    paths = [
        plot_confidence_histograms(confidence, tmp_path / "confidence.png"),
        plot_ood_distributions(scores, tmp_path / "ood.png"),
        plot_pca_scatter(pca, tmp_path / "pca.png"),
        plot_interpolation_strip(rng.uniform(size=(4, 32, 48)), tmp_path / "strip.png"),
    ]
    for path in paths:
        assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    with pytest.raises(DatasetIOError):
        plot_interpolation_strip(rng.uniform(size=(32, 48)), tmp_path / "bad.png")
