# roi_cae/services.py
"""Experiment services: leave-one-site-out protocols, ablations and probe runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import (
    Any,
    Callable,
    Dict,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    TypeVar,
    Union,
)

import numpy as np

from .calibration import CalibrationReport, calibrate_weights
from .config import ExperimentConfig
from .const import (
    ABLATION_VARIANTS,
    FILE_ABLATION_FRAGMENT,
    FILE_CALIBRATION,
    FILE_CHECKPOINT,
    FILE_FRAGMENT,
    FILE_INTERPOLATION,
    FILE_LATENTS,
    FILE_METRICS,
    FILE_PROBES,
    FILE_SHARED_P1,
    FILE_TRACE,
    INTERPOLATION_STEPS,
    KNN_K,
    LOSS_TERMS,
    METRIC_KEYS,
    PACKAGE_VERSION,
    PHASE_1,
    PHASE_2,
    PHASES,
    PRESET_HOLD_OUT_PREFIX,
    PRESET_STANDARD_DEV,
    SPLIT_TEST,
    SPLIT_TRAIN,
    SPLIT_VAL,
    TERM_GLOBAL,
)
from .coordinator import ExperimentCoordinator, Job
from .diagnostics import run_summary, write_config_snapshot, write_json
from .exceptions import (
    CalibrationError,
    CheckpointError,
    ConfigValidationError,
    DatasetIOError,
    LeakageError,
    NonFiniteError,
    ProbeError,
    RoiCaeError,
    RunFailedError,
    SplitError,
)
from .metrics import MetricRecord, evaluate_sample, save_metrics_csv
from .model import (
    CaeConfig,
    Checkpoint,
    ConvAutoencoder,
    load_checkpoint,
    save_checkpoint,
)
from .phantom import (
    Manifest,
    Sample,
    SplitPlan,
    load_samples,
    make_pooled_split,
    make_split,
)
from .probes import (
    LatentRecord,
    ProbeReport,
    extract_latents,
    latent_interpolate,
    reconstruct_sample,
    run_probe_battery,
    save_latents_csv,
)
from .report import KIND_ABLATION, KIND_PROTOCOL, split_means, summarize_runs
from .trainer import TrainResult, save_trace_csv, train_phase

_LOGGER = logging.getLogger(__name__)

T = TypeVar("T")


# --- Protocol And Ablation Specs ---
@dataclass(frozen=True)
class ProtocolSpec:
    """One named train/test protocol; an empty held-out site pools all sites."""

    name: str
    held_out_site: Optional[str]
    seeds: tuple[int, ...]
    enabled_terms: tuple[str, ...] = LOSS_TERMS
    phases: tuple[str, ...] = PHASES
    metrics: tuple[str, ...] = METRIC_KEYS

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(seed) for seed in self.seeds))
        object.__setattr__(self, "enabled_terms", tuple(self.enabled_terms))
        if not self.seeds:
            raise ConfigValidationError(f"Protocol '{self.name}' has no seeds")
        if tuple(self.phases) != PHASES:
            raise ConfigValidationError(
                f"Protocol '{self.name}' must run phases {PHASES}, got {self.phases}"
            )
        unknown = set(self.enabled_terms) - set(LOSS_TERMS)
        if unknown or TERM_GLOBAL not in self.enabled_terms:
            raise ConfigValidationError(
                f"Protocol '{self.name}' enabled terms {self.enabled_terms} are invalid"
            )
        unknown_metrics = set(self.metrics) - set(METRIC_KEYS)
        if unknown_metrics:
            raise ConfigValidationError(f"Unknown metrics {sorted(unknown_metrics)}")

    @property
    def pooled(self) -> bool:
        return not self.held_out_site


@dataclass(frozen=True)
class AblationSpec:
    """Phase-2 loss-term subsets trained for a fixed horizon from one Phase-1 start."""

    name: str
    held_out_site: str
    seed: int
    variants: tuple[tuple[str, tuple[str, ...]], ...] = ABLATION_VARIANTS
    horizon: int = 15
    test_echo: bool = True

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ConfigValidationError(
                f"Ablation horizon must be >= 1, got {self.horizon}"
            )
        if not self.variants:
            raise ConfigValidationError(f"Ablation '{self.name}' has no variants")
        labels = [label for label, _ in self.variants]
        if len(set(labels)) != len(labels):
            raise ConfigValidationError(f"Duplicate ablation variants {labels}")
        for label, terms in self.variants:
            if TERM_GLOBAL not in terms or set(terms) - set(LOSS_TERMS):
                raise ConfigValidationError(
                    f"Ablation variant '{label}' has invalid terms {terms}"
                )


def build_presets(
    sites: Sequence[str],
    seeds: Sequence[int],
    enabled_terms: Sequence[str] = LOSS_TERMS,
) -> Dict[str, ProtocolSpec]:
    """``hold-out-<site>`` for every site plus the pooled ``standard-dev`` split."""
    presets = {
        f"{PRESET_HOLD_OUT_PREFIX}{site}": ProtocolSpec(
            name=f"{PRESET_HOLD_OUT_PREFIX}{site}",
            held_out_site=site,
            seeds=tuple(seeds),
            enabled_terms=tuple(enabled_terms),
        )
        for site in sorted(sites)
    }
    presets[PRESET_STANDARD_DEV] = ProtocolSpec(
        name=PRESET_STANDARD_DEV,
        held_out_site=None,
        seeds=tuple(seeds),
        enabled_terms=tuple(enabled_terms),
    )
    return presets


@dataclass
class SeedRun:
    protocol: str
    held_out_site: str
    seed: int
    run_dir: Path
    results: Dict[str, TrainResult]
    calibration: CalibrationReport
    metrics: Dict[str, List[MetricRecord]]
    probes: Dict[str, ProbeReport] = field(default_factory=dict)


# --- Handler Helper ---
def _run_failed(msg: str, err: RoiCaeError) -> RunFailedError:
    _LOGGER.error(msg)
    return RunFailedError(msg, error_key=err.error_key, error_details=err.error_details)


def _base_run_handler(
    step: Callable[[], T],
    step_name: str,
    context: Optional[str] = None,
) -> T:
    """Run one step; library errors come back as RunFailedError with context."""
    context_msg = f" for '{context}'" if context else ""
    try:
        result = step()
        _LOGGER.debug("%s%s finished", step_name, context_msg)
        return result
    except (ConfigValidationError, RunFailedError):
        raise
    except LeakageError as err:
        raise _run_failed(
            f"{step_name}{context_msg}: Split leakage detected. ({err})", err
        ) from err
    except NonFiniteError as err:
        raise _run_failed(
            f"{step_name}{context_msg}: Non-finite values during training. ({err})", err
        ) from err
    except CalibrationError as err:
        raise _run_failed(
            f"{step_name}{context_msg}: Loss-weight calibration failed. ({err})", err
        ) from err
    except (SplitError, ProbeError) as err:
        raise _run_failed(
            f"{step_name}{context_msg}: Invalid split or probe input. ({err})", err
        ) from err
    except (DatasetIOError, CheckpointError) as err:
        raise _run_failed(
            f"{step_name}{context_msg}: Artifact I/O failed. ({err})", err
        ) from err
    except RoiCaeError as err:
        raise _run_failed(f"{step_name}{context_msg}: {err}", err) from err
    except Exception as err:
        _LOGGER.exception("%s%s: Unexpected error.", step_name, context_msg)
        raise RunFailedError(
            f"{step_name}{context_msg}: Unexpected error - {type(err).__name__}",
            error_details=str(err),
        ) from err


# --- Split Hygiene ---
def assert_no_leakage(
    plan: SplitPlan,
    manifest: Manifest,
    artifacts: Optional[Mapping[str, Iterable[str]]] = None,
) -> None:
    """No held-out sample may reach a train/val split or a train/val artifact."""
    test_ids = set(plan.test_ids)
    fit_ids = set(plan.train_ids) | set(plan.val_ids)
    overlap = test_ids & fit_ids
    if overlap:
        raise LeakageError(
            f"{len(overlap)} sample(s) are both test and train/val",
            error_details=",".join(sorted(overlap)[:5]),
        )
    if plan.held_out_site:
        site_of = {entry.id: entry.site for entry in manifest.entries}
        leaked = sorted(i for i in fit_ids if site_of.get(i) == plan.held_out_site)
        if leaked:
            raise LeakageError(
                f"Held-out site '{plan.held_out_site}' has samples in train/val",
                error_details=",".join(leaked[:5]),
            )
        foreign = sorted(i for i in test_ids if site_of.get(i) != plan.held_out_site)
        if foreign:
            raise LeakageError(
                f"Test split holds samples outside '{plan.held_out_site}'",
                error_details=",".join(foreign[:5]),
            )
    for name, ids in (artifacts or {}).items():
        leaked = sorted(set(ids) & test_ids)
        if leaked:
            raise LeakageError(
                f"Artifact '{name}' uses {len(leaked)} held-out sample(s)",
                error_details=",".join(leaked[:5]),
            )


def _plan_for(spec: ProtocolSpec, manifest: Manifest, seed: int) -> SplitPlan:
    if spec.pooled:
        return make_pooled_split(manifest, seed)
    if spec.held_out_site not in manifest.sites:
        raise SplitError(
            f"Held-out site '{spec.held_out_site}' not in manifest "
            f"sites {manifest.sites}",
            error_details=spec.held_out_site,
        )
    return make_split(manifest, spec.held_out_site, seed)


def _model_config(config: ExperimentConfig, manifest: Manifest) -> CaeConfig:
    width, height = manifest.canvas
    if (config.model.input_width, config.model.input_height) != (width, height):
        _LOGGER.info(
            "Model input follows the dataset canvas %dx%d (config had %dx%d)",
            width,
            height,
            config.model.input_width,
            config.model.input_height,
        )
        return replace(config.model, input_width=width, input_height=height)
    return config.model


def _load_split(
    manifest: Manifest, plan: SplitPlan
) -> tuple[List[Sample], List[Sample], List[Sample]]:
    return (
        load_samples(manifest, plan.train_ids),
        load_samples(manifest, plan.val_ids),
        load_samples(manifest, plan.test_ids),
    )


def _split_tags(plan: SplitPlan) -> Dict[str, str]:
    tags = {sample_id: SPLIT_TRAIN for sample_id in plan.train_ids}
    tags.update({sample_id: SPLIT_VAL for sample_id in plan.val_ids})
    tags.update({sample_id: SPLIT_TEST for sample_id in plan.test_ids})
    return tags


# --- Evaluation ---
def evaluate_checkpoint(
    checkpoint: Union[Checkpoint, ConvAutoencoder],
    samples: Sequence[Sample],
    split: str,
) -> List[MetricRecord]:
    """Per-sample metrics for ``samples`` reconstructed by a frozen model."""
    model = checkpoint.model() if isinstance(checkpoint, Checkpoint) else checkpoint
    records = []
    for sample in samples:
        x_hat, _, _ = reconstruct_sample(model, sample.image)
        records.append(
            evaluate_sample(
                sample.image, x_hat, sample.roi, sample.sample_id, sample.site, split
            )
        )
    return records


def _interpolation_pair(
    records: Sequence[LatentRecord],
) -> Optional[tuple[LatentRecord, LatentRecord]]:
    for split in (SPLIT_TEST, SPLIT_VAL):
        rows = [record for record in records if record.split == split]
        if len(rows) >= 2:
            return rows[0], rows[1]
    return None


# --- Protocol ---
def run_protocol_seed(
    spec: ProtocolSpec,
    manifest: Manifest,
    config: ExperimentConfig,
    seed: int,
    out_dir: Union[str, Path],
) -> SeedRun:
    """One seed end to end: split, both phases, metrics, latents and probes."""
    context = f"{spec.name}/seed-{seed}"
    run_dir = Path(out_dir) / spec.name / f"seed-{seed}"
    cfg = config.train
    held_out = spec.held_out_site or ""

    plan = _base_run_handler(partial(_plan_for, spec, manifest, seed), "Split", context)
    _base_run_handler(
        partial(assert_no_leakage, plan, manifest), "Leakage check", context
    )
    train, val, test = _base_run_handler(
        partial(_load_split, manifest, plan), "Loading samples", context
    )
    _base_run_handler(
        partial(
            write_config_snapshot,
            run_dir,
            config,
            {
                "protocol": spec.name,
                "held_out_site": held_out,
                "seed": seed,
                "enabled_terms": list(spec.enabled_terms),
                "n_train": len(train),
                "n_val": len(val),
                "n_test": len(test),
            },
        ),
        "Config snapshot",
        context,
    )

    model = ConvAutoencoder.initialize(_model_config(config, manifest), seed)
    p1 = _base_run_handler(
        partial(train_phase, model, train, val, PHASE_1, cfg, seed),
        "Phase-1 training",
        context,
    )
    calibration = _base_run_handler(
        partial(
            calibrate_weights,
            p1.checkpoint,
            val[: cfg.batch_size],
            spec.enabled_terms,
            cfg.pin_global_weight,
        ),
        "Calibration",
        context,
    )
    p2 = _base_run_handler(
        partial(
            train_phase,
            p1.checkpoint.model(),
            train,
            val,
            PHASE_2,
            cfg,
            seed,
            calibration.weights,
        ),
        "Phase-2 training",
        context,
    )
    results = {PHASE_1: p1, PHASE_2: p2}

    tags = _split_tags(plan)
    metrics: Dict[str, List[MetricRecord]] = {}
    latents: Dict[str, List[LatentRecord]] = {}
    probes: Dict[str, ProbeReport] = {}
    for phase, result in results.items():
        result.checkpoint.metadata.update(
            {"protocol": spec.name, "held_out_site": held_out}
        )
        checkpoint = result.checkpoint
        metrics[phase] = _base_run_handler(
            lambda: evaluate_checkpoint(checkpoint, val, SPLIT_VAL)
            + evaluate_checkpoint(checkpoint, test, SPLIT_TEST),
            f"{phase} evaluation",
            context,
        )
        latents[phase] = _base_run_handler(
            partial(extract_latents, checkpoint, train + val + test, tags),
            f"{phase} latent extraction",
            context,
        )
        if test and not spec.pooled:
            probes[phase] = _base_run_handler(
                partial(
                    run_probe_battery, latents[phase], held_out, seed, phase, KNN_K
                ),
                f"{phase} probes",
                context,
            )

    _base_run_handler(
        partial(
            assert_no_leakage,
            plan,
            manifest,
            {
                "calibration batch": calibration.batch_ids,
                "validation metrics": [
                    r.id for r in metrics[PHASE_2] if r.split == SPLIT_VAL
                ],
                "latent fit records": [
                    r.id for r in latents[PHASE_2] if r.split != SPLIT_TEST
                ],
            },
        ),
        "Leakage check",
        context,
    )

    def _write_artifacts() -> None:
        for phase, result in results.items():
            save_checkpoint(
                result.checkpoint, run_dir / FILE_CHECKPOINT.format(phase=phase)
            )
            save_trace_csv(result.trace, run_dir / FILE_TRACE.format(phase=phase))
            save_metrics_csv(metrics[phase], run_dir / FILE_METRICS.format(phase=phase))
            save_latents_csv(latents[phase], run_dir / FILE_LATENTS.format(phase=phase))
        calibration.save(run_dir / FILE_CALIBRATION)
        if probes:
            write_json(
                {
                    phase: report.as_dict(include_scores=True)
                    for phase, report in probes.items()
                },
                run_dir / FILE_PROBES,
            )
        pair = _interpolation_pair(latents[PHASE_2])
        if pair is not None:
            frames = latent_interpolate(
                p2.checkpoint, pair[0].z, pair[1].z, INTERPOLATION_STEPS
            )
            np.save(run_dir / FILE_INTERPOLATION, frames)

    _base_run_handler(_write_artifacts, "Writing artifacts", context)
    _LOGGER.info(
        "Run '%s' done: best epochs P1=%d, P2=%d", context, p1.best_epoch, p2.best_epoch
    )
    return SeedRun(
        protocol=spec.name,
        held_out_site=held_out,
        seed=seed,
        run_dir=run_dir,
        results=results,
        calibration=calibration,
        metrics=metrics,
        probes=probes,
    )


def protocol_fragment(
    spec: ProtocolSpec, runs: Sequence[SeedRun], out_dir: Union[str, Path]
) -> Dict[str, Any]:
    """Per-seed summaries plus mean/std aggregates across the finished seeds."""
    root = Path(out_dir)
    summaries = []
    for run in runs:
        metric_means = {
            phase: {
                split: dict(values) for split, values in split_means(records).items()
            }
            for phase, records in run.metrics.items()
        }
        summaries.append(
            run_summary(
                name=spec.name,
                seed=run.seed,
                best_epochs={
                    phase: result.best_epoch for phase, result in run.results.items()
                },
                metric_means=metric_means,
                weights=run.calibration.weights.as_dict(),
                balance_residual=run.calibration.balance_residual,
                extra={
                    "run_dir": run.run_dir.relative_to(root).as_posix(),
                    "probes": {
                        phase: report.as_dict() for phase, report in run.probes.items()
                    },
                },
            )
        )
    return {
        "kind": KIND_PROTOCOL,
        "package_version": PACKAGE_VERSION,
        "protocol": spec.name,
        "held_out_site": spec.held_out_site or "",
        "seeds": [run.seed for run in runs],
        "enabled_terms": list(spec.enabled_terms),
        "metrics": list(spec.metrics),
        "runs": summaries,
        "summary": summarize_runs(summaries),
    }


def run_protocol(
    spec: ProtocolSpec,
    manifest: Manifest,
    config: ExperimentConfig,
    out_dir: Union[str, Path],
) -> Dict[str, Any]:
    """Every seed of ``spec`` through the coordinator; writes the fragment JSON."""
    coordinator = ExperimentCoordinator(
        config.max_concurrent_runs, config.run_timeout, name=spec.name
    )
    jobs = [
        Job(
            f"{spec.name}/seed-{seed}",
            partial(run_protocol_seed, spec, manifest, config, seed, out_dir),
        )
        for seed in spec.seeds
    ]
    runs = coordinator.run_jobs(jobs)
    fragment = protocol_fragment(spec, runs, out_dir)
    write_json(fragment, Path(out_dir) / spec.name / FILE_FRAGMENT)
    _LOGGER.info(
        "Protocol '%s' finished with %d of %d seed(s)",
        spec.name,
        len(runs),
        len(spec.seeds),
    )
    return fragment


# --- Ablation ---
def _variant_slug(terms: Sequence[str]) -> str:
    return "-".join(terms)


def _run_ablation_variant(
    spec: AblationSpec,
    label: str,
    terms: tuple[str, ...],
    shared_p1: Checkpoint,
    config: ExperimentConfig,
    samples: tuple[List[Sample], List[Sample], List[Sample]],
    out_dir: Path,
) -> Dict[str, Any]:
    context = f"{spec.name}/{label}"
    train, val, test = samples
    cfg = config.train
    variant_dir = out_dir / spec.name / _variant_slug(terms)
    calibration = _base_run_handler(
        partial(
            calibrate_weights,
            shared_p1,
            val[: cfg.batch_size],
            terms,
            cfg.pin_global_weight,
        ),
        "Calibration",
        context,
    )
    result = _base_run_handler(
        partial(
            train_phase,
            shared_p1.model(),
            train,
            val,
            PHASE_2,
            cfg,
            spec.seed,
            calibration.weights,
            spec.horizon,
        ),
        "Fixed-horizon Phase-2 training",
        context,
    )
    rows = split_means(evaluate_checkpoint(result.checkpoint, val, SPLIT_VAL))
    echo = (
        split_means(evaluate_checkpoint(result.checkpoint, test, SPLIT_TEST))
        if spec.test_echo and test
        else {}
    )

    def _write_artifacts() -> None:
        variant_dir.mkdir(parents=True, exist_ok=True)
        calibration.save(variant_dir / FILE_CALIBRATION)
        save_trace_csv(result.trace, variant_dir / FILE_TRACE.format(phase=PHASE_2))
        save_checkpoint(
            result.checkpoint, variant_dir / FILE_CHECKPOINT.format(phase=PHASE_2)
        )

    _base_run_handler(_write_artifacts, "Writing artifacts", context)
    return {
        "variant": label,
        "terms": list(terms),
        "weights": calibration.weights.as_dict(),
        "val": rows.get(SPLIT_VAL, {}),
        "test": echo.get(SPLIT_TEST, {}),
    }


def run_ablation(
    spec: AblationSpec,
    manifest: Manifest,
    config: ExperimentConfig,
    out_dir: Union[str, Path],
    p1_checkpoint: Optional[Union[Checkpoint, str, Path]] = None,
) -> Dict[str, Any]:
    """Fixed-horizon Phase-2 variants from one shared Phase-1 checkpoint.

    Rows are validation metrics (the selection split); test rows are a
    report-only echo.
    """
    out_dir = Path(out_dir)
    context = spec.name
    plan = _base_run_handler(
        partial(make_split, manifest, spec.held_out_site, spec.seed), "Split", context
    )
    _base_run_handler(
        partial(assert_no_leakage, plan, manifest), "Leakage check", context
    )
    samples = _base_run_handler(
        partial(_load_split, manifest, plan), "Loading samples", context
    )
    train, val, _ = samples
    model_config = _model_config(config, manifest)

    if p1_checkpoint is None:
        p1 = _base_run_handler(
            partial(
                train_phase,
                ConvAutoencoder.initialize(model_config, spec.seed),
                train,
                val,
                PHASE_1,
                config.train,
                spec.seed,
            ),
            "Shared Phase-1 training",
            context,
        )
        shared = p1.checkpoint
        shared.metadata["held_out_site"] = spec.held_out_site
        _base_run_handler(
            partial(save_checkpoint, shared, out_dir / spec.name / FILE_SHARED_P1),
            "Writing shared checkpoint",
            context,
        )
    elif isinstance(p1_checkpoint, Checkpoint):
        shared = p1_checkpoint
    else:
        shared = _base_run_handler(
            partial(load_checkpoint, p1_checkpoint, model_config),
            "Loading shared checkpoint",
            context,
        )
    if shared.phase != PHASE_1:
        raise RunFailedError(
            f"Ablation '{spec.name}' needs a Phase-1 checkpoint, got {shared.phase}",
            error_key="checkpoint_phase",
        )
    write_config_snapshot(
        out_dir / spec.name,
        config,
        {
            "ablation": spec.name,
            "held_out_site": spec.held_out_site,
            "seed": spec.seed,
            "horizon": spec.horizon,
            "variants": [label for label, _ in spec.variants],
        },
    )

    coordinator = ExperimentCoordinator(
        config.max_concurrent_runs, config.run_timeout, name=spec.name
    )
    jobs = [
        Job(
            f"{spec.name}/{label}",
            partial(
                _run_ablation_variant,
                spec,
                label,
                tuple(terms),
                shared,
                config,
                samples,
                out_dir,
            ),
        )
        for label, terms in spec.variants
    ]
    variants = coordinator.run_jobs(jobs)
    fragment = {
        "kind": KIND_ABLATION,
        "package_version": PACKAGE_VERSION,
        "protocol": spec.name,
        "held_out_site": spec.held_out_site,
        "seed": spec.seed,
        "horizon": spec.horizon,
        "weights": {row["variant"]: row["weights"] for row in variants},
        "rows": [
            {"variant": row["variant"], "split": SPLIT_VAL, **row["val"]}
            for row in variants
        ],
        "echo": [
            {"variant": row["variant"], "split": SPLIT_TEST, **row["test"]}
            for row in variants
            if row["test"]
        ],
    }
    write_json(fragment, out_dir / spec.name / FILE_ABLATION_FRAGMENT)
    _LOGGER.info(
        "Ablation '%s' finished: %d variant(s) over %d epochs",
        spec.name,
        len(variants),
        spec.horizon,
    )
    return fragment


# --- Single-step services (CLI subcommands) ---
def resolve_plan(
    manifest: Manifest, held_out_site: Optional[str], seed: int
) -> SplitPlan:
    """Leave-one-site-out split, or the pooled split when no site is held out."""
    plan = (
        make_split(manifest, held_out_site, seed)
        if held_out_site
        else make_pooled_split(manifest, seed)
    )
    assert_no_leakage(plan, manifest)
    return plan


def train_single(
    manifest: Manifest,
    config: ExperimentConfig,
    phase: str,
    seed: int,
    out_dir: Union[str, Path],
    held_out_site: Optional[str] = None,
    from_checkpoint: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """Train one phase and write its checkpoint, trace and (P2) calibration."""
    if phase not in PHASES:
        raise ConfigValidationError(f"Unknown phase '{phase}' (expected {PHASES})")
    context = f"train {phase}/seed-{seed}"
    out_dir = Path(out_dir)
    plan = _base_run_handler(
        partial(resolve_plan, manifest, held_out_site, seed), "Split", context
    )
    train, val, _ = _base_run_handler(
        partial(_load_split, manifest, plan), "Loading samples", context
    )
    model_config = _model_config(config, manifest)
    if from_checkpoint is not None:
        start = _base_run_handler(
            partial(load_checkpoint, from_checkpoint, model_config),
            "Loading checkpoint",
            context,
        )
        if phase == PHASE_2 and start.phase != PHASE_1:
            raise RunFailedError(
                f"Phase-2 training starts from a Phase-1 checkpoint, got {start.phase}",
                error_key="checkpoint_phase",
            )
        model = start.model()
    elif phase == PHASE_2:
        raise ConfigValidationError(
            "Phase-2 training needs a Phase-1 checkpoint to start from"
        )
    else:
        model = ConvAutoencoder.initialize(model_config, seed)

    result = _base_run_handler(
        partial(train_phase, model, train, val, phase, config.train, seed),
        f"{phase} training",
        context,
    )
    result.checkpoint.metadata["held_out_site"] = plan.held_out_site

    def _write_artifacts() -> None:
        write_config_snapshot(
            out_dir,
            config,
            {"phase": phase, "seed": seed, "held_out_site": plan.held_out_site},
        )
        save_checkpoint(
            result.checkpoint, out_dir / FILE_CHECKPOINT.format(phase=phase)
        )
        save_trace_csv(result.trace, out_dir / FILE_TRACE.format(phase=phase))
        if result.calibration is not None:
            result.calibration.save(out_dir / FILE_CALIBRATION)

    _base_run_handler(_write_artifacts, "Writing artifacts", context)
    return result


def calibrate_single(
    checkpoint_path: Union[str, Path],
    manifest: Manifest,
    config: ExperimentConfig,
    held_out_site: Optional[str] = None,
    seed: Optional[int] = None,
) -> CalibrationReport:
    """Calibrate Phase-2 weights from a stored Phase-1 checkpoint.

    The split defaults to the one recorded in the checkpoint metadata.
    """
    checkpoint = _base_run_handler(
        partial(load_checkpoint, checkpoint_path),
        "Loading checkpoint",
        str(checkpoint_path),
    )
    site = held_out_site
    if site is None:
        site = checkpoint.metadata.get("held_out_site")
    run_seed = seed if seed is not None else int(checkpoint.metadata.get("seed", 0))
    context = f"calibrate/seed-{run_seed}"
    plan = _base_run_handler(
        partial(resolve_plan, manifest, site, run_seed), "Split", context
    )
    batch_ids = plan.val_ids[: config.train.batch_size]
    batch = _base_run_handler(
        partial(load_samples, manifest, batch_ids), "Loading samples", context
    )
    return _base_run_handler(
        partial(
            calibrate_weights,
            checkpoint,
            batch,
            config.train.enabled_terms,
            config.train.pin_global_weight,
        ),
        "Calibration",
        context,
    )


def run_probes(
    checkpoint_path: Union[str, Path],
    manifest: Manifest,
    held_out_site: str,
    out_dir: Union[str, Path],
    seed: Optional[int] = None,
) -> ProbeReport:
    """Probe battery on one stored checkpoint; writes latents and probes.json."""
    checkpoint = _base_run_handler(
        partial(load_checkpoint, checkpoint_path),
        "Loading checkpoint",
        str(checkpoint_path),
    )
    run_seed = seed if seed is not None else int(checkpoint.metadata.get("seed", 0))
    context = f"probe {checkpoint.phase}/seed-{run_seed}"
    plan = _base_run_handler(
        partial(resolve_plan, manifest, held_out_site, run_seed), "Split", context
    )
    samples = _base_run_handler(
        partial(load_samples, manifest, plan.train_ids + plan.val_ids + plan.test_ids),
        "Loading samples",
        context,
    )
    records = _base_run_handler(
        partial(extract_latents, checkpoint, samples, _split_tags(plan)),
        "Latent extraction",
        context,
    )
    report = _base_run_handler(
        partial(run_probe_battery, records, held_out_site, run_seed, checkpoint.phase),
        "Probe battery",
        context,
    )
    out_dir = Path(out_dir)

    def _write_artifacts() -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_latents_csv(records, out_dir / FILE_LATENTS.format(phase=checkpoint.phase))
        write_json(
            {checkpoint.phase: report.as_dict(include_scores=True)},
            out_dir / FILE_PROBES,
        )

    _base_run_handler(_write_artifacts, "Writing artifacts", context)
    return report
