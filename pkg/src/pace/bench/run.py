"""Experiment driver: pretraining, calibration, method runners, metrics, persistence."""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..controller import (
    ControllerConfig,
    EmaStats,
    PaceController,
    calibrate_gamma,
    shift_score,
    update_ema,
)
from ..model import (
    AdaptableModel,
    ArchitectureConfig,
    SourceStats,
    compute_source_stats,
    pretrain,
    save_checkpoint,
)
from .stream import (
    DomainSpec,
    StreamConfig,
    format_domain_sequence,
    generate_stream,
    make_source_batches,
    parse_domain_sequence,
)

SUMMARY_SCHEMA_VERSION = 1
CSV_COLUMNS = [
    "batch_index",
    "domain_id",
    "mode",
    "fitness_best",
    "rel_mean_change",
    "U",
    "shift_detected",
    "forward_passes",
    "accuracy_if_labels_available",
]

METHODS = ("noadapt", "pace", "pace-always", "pace-v1", "pace-v2", "pace-v3")


def standard_domain_sequence(batch_count: int = 100) -> tuple[DomainSpec, ...]:
    """The default 4-domain corruption sequence used by the regression gates.

    Four distinct feature-scale patterns: each one is a per-feature affine
    distortion of the inputs, the shift family that normalization offsets can
    actually counteract, so the stream rewards adaptation on every domain.
    The other corruption kinds remain available for custom configs.
    """
    return (
        DomainSpec("feature_scale", 2.2, batch_count),
        DomainSpec("feature_scale", 0.45, batch_count),
        DomainSpec("feature_scale", 1.7, batch_count),
        DomainSpec("feature_scale", 0.55, batch_count),
    )


@dataclass(frozen=True)
class RunConfig:
    """Flat configuration for one benchmark run (mirrors the key=value file format)."""

    method: str = "pace"
    seed: int = 0
    out_dir: str | None = None
    # stream
    base_task: str = "blobs8"
    in_dim: int = 2
    class_count: int = 8
    domain_sequence: str = ""
    batch_size: int = 64
    rounds: int = 1
    blob_radius: float = 4.0
    blob_std: float = 0.7
    blob_center: float = 2.5
    # model / pretraining
    arch: str = "mlp"
    width: int = 64
    res_blocks: int = 4
    train_samples: int = 4096
    train_epochs: int = 60
    learning_rate: float = 3e-3
    # controller
    dim: int = 32
    population: int = 12
    tau0: float = 0.05
    epsilon: float = 0.1
    gamma: float | None = None  # None -> calibrate on held-out clean batches
    beta: float = 0.8
    lambda_weight: float = 0.4
    bank_capacity: int = 30
    # gamma calibration
    source_samples: int = 2000
    calibration_batches: int = 200
    calibration_warmup: int = 20
    gamma_percentile: float = 99.5
    gamma_headroom: float = 2.5

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.arch not in ("mlp", "residual"):
            raise ValueError(f"unknown arch {self.arch!r}")

    def stream_config(self) -> StreamConfig:
        seq = (
            parse_domain_sequence(self.domain_sequence)
            if self.domain_sequence
            else standard_domain_sequence()
        )
        return StreamConfig(
            domain_sequence=seq,
            base_task=self.base_task,
            in_dim=self.in_dim,
            class_count=self.class_count,
            batch_size=self.batch_size,
            rounds=self.rounds,
            seed=self.seed,
            blob_radius=self.blob_radius,
            blob_std=self.blob_std,
            blob_center=self.blob_center,
        )

    def architecture(self) -> ArchitectureConfig:
        return ArchitectureConfig(
            kind=self.arch,
            in_dim=self.in_dim,
            class_count=self.class_count,
            width=self.width,
            blocks=self.res_blocks,
        )

    def stream_fingerprint(self) -> str:
        stream = self.stream_config()
        payload = {
            "base_task": stream.base_task,
            "in_dim": stream.in_dim,
            "class_count": stream.class_count,
            "domains": format_domain_sequence(stream.domain_sequence),
            "batch_size": stream.batch_size,
            "rounds": stream.rounds,
            "seed": stream.seed,
            "blob_radius": stream.blob_radius,
            "blob_std": stream.blob_std,
            "blob_center": stream.blob_center,
        }
        digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode())
        return digest.hexdigest()[:16]

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        kwargs = {}
        valid = {f.name: f for f in fields(cls)}
        for key, raw in mapping.items():
            key = key.replace("-", "_")
            if key not in valid:
                raise ValueError(f"unknown config key: {key}")
            kwargs[key] = _coerce(raw, valid[key])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        mapping = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                key, value = line.split("=", 1)
                mapping[key.strip()] = value.strip()
        return cls.from_mapping(mapping)

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            out[f.name] = getattr(self, f.name)
        if not out["domain_sequence"]:
            out["domain_sequence"] = format_domain_sequence(standard_domain_sequence())
        return out


def _coerce(raw, field_spec):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    name = field_spec.name
    if name in ("gamma", "out_dir") and text.lower() in ("none", "auto", ""):
        return None
    if field_spec.type in ("int", int):
        return int(text)
    if field_spec.type in ("float", float, "float | None"):
        return float(text)
    return text


@dataclass
class RunReport:
    """Per-run metrics plus the per-batch trace."""

    method: str
    seed: int
    stream_fingerprint: str
    gamma: float
    overall_accuracy: float
    per_domain_accuracy: dict[int, float]
    per_round_accuracy: dict[int, float]
    adapted_fraction: float
    adapted_batches_per_round: dict[int, int]
    total_forward_passes: int
    identity_ok: bool
    wall_seconds: float
    telemetry: dict
    batches: list[dict] = field(repr=False, default_factory=list)

    def summary_dict(self) -> dict:
        return {
            "schema_version": SUMMARY_SCHEMA_VERSION,
            "method": self.method,
            "seed": self.seed,
            "stream_fingerprint": self.stream_fingerprint,
            "gamma": self.gamma,
            "overall_accuracy": self.overall_accuracy,
            "per_domain_accuracy": {str(k): v for k, v in self.per_domain_accuracy.items()},
            "per_round_accuracy": {str(k): v for k, v in self.per_round_accuracy.items()},
            "adapted_fraction": self.adapted_fraction,
            "adapted_batches_per_round": {
                str(k): v for k, v in self.adapted_batches_per_round.items()
            },
            "total_forward_passes": self.total_forward_passes,
            "identity_ok": self.identity_ok,
            "wall_seconds": self.wall_seconds,
            "telemetry": self.telemetry,
        }

    @classmethod
    def from_summary_dict(cls, record: dict) -> "RunReport":
        if record.get("schema_version") != SUMMARY_SCHEMA_VERSION:
            raise ValueError(f"unsupported summary schema: {record.get('schema_version')}")
        return cls(
            method=record["method"],
            seed=record["seed"],
            stream_fingerprint=record["stream_fingerprint"],
            gamma=record["gamma"],
            overall_accuracy=record["overall_accuracy"],
            per_domain_accuracy={int(k): v for k, v in record["per_domain_accuracy"].items()},
            per_round_accuracy={int(k): v for k, v in record["per_round_accuracy"].items()},
            adapted_fraction=record["adapted_fraction"],
            adapted_batches_per_round={
                int(k): v for k, v in record["adapted_batches_per_round"].items()
            },
            total_forward_passes=record["total_forward_passes"],
            identity_ok=record["identity_ok"],
            wall_seconds=record["wall_seconds"],
            telemetry=record["telemetry"],
        )


def prepare_assets(config: RunConfig) -> tuple[AdaptableModel, SourceStats, float]:
    """Pretrain the source model, aggregate source statistics, resolve gamma."""
    stream_cfg = config.stream_config()
    train_batches = make_source_batches(stream_cfg, config.train_samples, 256, tag=1)
    X = np.concatenate([b[0] for b in train_batches])
    y = np.concatenate([b[1] for b in train_batches])
    model = pretrain(
        config.architecture(),
        X,
        y,
        seed=config.seed,
        epochs=config.train_epochs,
        learning_rate=config.learning_rate,
    )
    stats_batches = [b[0] for b in make_source_batches(stream_cfg, config.source_samples, tag=2)]
    source_stats = compute_source_stats(model, stats_batches)
    gamma = config.gamma
    if gamma is None:
        gamma = calibrate_gamma_for_config(config, model)
    return model, source_stats, float(gamma)


def calibrate_gamma_for_config(config: RunConfig, model: AdaptableModel) -> float:
    """Shift threshold from the score distribution on held-out clean batches.

    Mirrors deployment: the detector EMA is warmed up and then frozen, and
    scores are collected for the remaining stationary batches.
    """
    stream_cfg = config.stream_config()
    total = config.calibration_batches * config.batch_size
    batches = make_source_batches(stream_cfg, total, config.batch_size, tag=3)
    zero = model.zero_offset()
    ema = None
    scores = []
    for i, (X, _) in enumerate(batches):
        _, stats = model.forward(zero, X)
        batch_stats = EmaStats(stats.stem_mean, stats.stem_var)
        if i < config.calibration_warmup:
            ema = update_ema(ema, batch_stats, config.beta)
        else:
            scores.append(shift_score(ema, batch_stats))
    if not scores:
        raise ValueError("not enough calibration batches after warmup")
    return calibrate_gamma(
        scores, percentile=config.gamma_percentile, headroom=config.gamma_headroom
    )


def controller_config_for_method(config: RunConfig, gamma: float) -> ControllerConfig | None:
    """Translate a method preset into controller flags; None means no adaptation."""
    method = config.method
    if method == "noadapt":
        return None
    kwargs = dict(
        dim=config.dim,
        population_size=config.population,
        tau0=config.tau0,
        epsilon=config.epsilon,
        gamma=gamma,
        beta=config.beta,
        lambda_weight=config.lambda_weight,
        bank_capacity=config.bank_capacity,
        seed=config.seed,
    )
    if method == "pace-always":
        kwargs["epsilon"] = 0.0
    elif method == "pace-v1":
        kwargs["stop_enabled"] = False
        kwargs["shift_enabled"] = False
    elif method == "pace-v2":
        kwargs["stop_enabled"] = False
        kwargs["shift_while_adapting"] = True
    elif method == "pace-v3":
        kwargs["bank_capacity"] = 0
    return ControllerConfig(**kwargs)


def run_prepared(
    config: RunConfig,
    model: AdaptableModel,
    source_stats: SourceStats,
    gamma: float,
) -> RunReport:
    """Execute the configured method over the stream with prepared assets."""
    stream_cfg = config.stream_config()
    controller_cfg = controller_config_for_method(config, gamma)
    controller = (
        PaceController(model, source_stats, controller_cfg)
        if controller_cfg is not None
        else None
    )
    zero = model.zero_offset() if controller is None else None

    rows = []
    start = time.perf_counter()
    seq_len = len(stream_cfg.domain_sequence)
    batches_per_round = stream_cfg.total_batches // stream_cfg.rounds
    for batch in generate_stream(stream_cfg):
        features = batch.features  # labels and domain id stay on the metrics side
        if controller is None:
            probs = model.forward(zero, features)[0]
            row = {
                "batch_index": batch.index,
                "mode": "frozen",
                "fitness_best": np.nan,
                "rel_mean_change": np.nan,
                "U": np.nan,
                "shift_detected": False,
                "forward_passes": 1,
            }
        else:
            probs, report = controller.process_batch(features)
            row = {
                "batch_index": report.batch_index,
                "mode": report.mode,
                "fitness_best": report.fitness_best,
                "rel_mean_change": report.rel_mean_change,
                "U": report.shift_score,
                "shift_detected": report.shift_detected,
                "forward_passes": report.forward_passes,
            }
        predictions = np.argmax(probs, axis=1)
        row["accuracy_if_labels_available"] = float(
            100.0 * np.mean(predictions == batch.labels)
        )
        row["domain_id"] = batch.domain_id
        row["round"] = batch.index // batches_per_round
        rows.append(row)
    wall = time.perf_counter() - start

    if controller is not None:
        telemetry = controller.telemetry
        identity_ok = telemetry.identity_holds(controller.config.population_size)
        if not identity_ok:
            raise RuntimeError("forward-pass accounting identity violated")
        adapted = telemetry.adapted_batches
        total_fp = telemetry.forward_passes
        telem_dict = telemetry.as_dict()
    else:
        adapted = 0
        total_fp = len(rows)
        identity_ok = True
        telem_dict = {"batches": len(rows), "forward_passes": total_fp}

    per_domain = {}
    for did in range(seq_len):
        accs = [r["accuracy_if_labels_available"] for r in rows if r["domain_id"] == did]
        per_domain[did] = float(np.mean(accs))
    per_round = {}
    adapted_per_round = {}
    for rnd in range(stream_cfg.rounds):
        in_round = [r for r in rows if r["round"] == rnd]
        per_round[rnd] = float(np.mean([r["accuracy_if_labels_available"] for r in in_round]))
        adapted_per_round[rnd] = sum(1 for r in in_round if r["mode"] == "adapting")

    report = RunReport(
        method=config.method,
        seed=config.seed,
        stream_fingerprint=config.stream_fingerprint(),
        gamma=gamma,
        overall_accuracy=float(np.mean([r["accuracy_if_labels_available"] for r in rows])),
        per_domain_accuracy=per_domain,
        per_round_accuracy=per_round,
        adapted_fraction=float(adapted / len(rows)),
        adapted_batches_per_round=adapted_per_round,
        total_forward_passes=int(total_fp),
        identity_ok=identity_ok,
        wall_seconds=float(wall),
        telemetry=telem_dict,
        batches=rows,
    )
    if config.out_dir:
        _write_outputs(config, report, model, source_stats, controller)
    return report


def run(config: RunConfig) -> RunReport:
    model, source_stats, gamma = prepare_assets(config)
    return run_prepared(config, model, source_stats, gamma)


def _write_outputs(config, report, model, source_stats, controller):
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "batches.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in report.batches:
            writer.writerow(row)
    summary = report.summary_dict()
    summary["config"] = config.as_dict()
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    save_checkpoint(out / "model.ckpt", model, source_stats)
    if controller is not None and controller.bank.count > 0:
        controller.bank.save(out / "bank.json")


def compare(report_a: RunReport, report_b: RunReport) -> dict:
    """Per-domain and overall deltas (B minus A) for runs over the same stream."""
    if report_a.stream_fingerprint != report_b.stream_fingerprint:
        raise ValueError(
            "stream fingerprints do not match: "
            f"{report_a.stream_fingerprint} vs {report_b.stream_fingerprint}"
        )
    domains = sorted(report_a.per_domain_accuracy)
    return {
        "method_a": report_a.method,
        "method_b": report_b.method,
        "overall_accuracy_delta": report_b.overall_accuracy - report_a.overall_accuracy,
        "per_domain_accuracy_delta": {
            d: report_b.per_domain_accuracy[d] - report_a.per_domain_accuracy[d]
            for d in domains
        },
        "adapted_fraction_delta": report_b.adapted_fraction - report_a.adapted_fraction,
        "forward_passes_delta": report_b.total_forward_passes - report_a.total_forward_passes,
    }


def load_summary(path) -> RunReport:
    with open(path, "r", encoding="utf-8") as fh:
        return RunReport.from_summary_dict(json.load(fh))


def sweep_presets(base: RunConfig | None = None) -> dict[str, list[RunConfig]]:
    """Hyperparameter sweep grids over the stopping threshold, subspace
    dimensionality, bank capacity and shift threshold, anchored at the
    defaults.  Each grid varies one knob of the fixed base configuration.
    """
    base = base or RunConfig()
    return {
        "epsilon": [replace(base, epsilon=e) for e in (0.045, 0.08, 0.1, 0.125, 0.14)],
        "dim": [replace(base, dim=d) for d in (8, 16, 32, 64)],
        "bank_capacity": [replace(base, bank_capacity=p) for p in (0, 5, 15, 30, 40, 50)],
        "gamma": [replace(base, gamma=g) for g in (0.05, 0.1, 0.2, 0.4, 0.8)],
    }
