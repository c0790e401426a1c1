"""Experiment runner for the (layers x rounding x variant) accuracy grid."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import __version__, oracle
from .data import Dataset, batches, one_hot
from .fixedpoint import FixedPoint, RandomStream, RoundingMode
from .nn import FixedDomain, FloatDomain, backward, forward, init, sgd_step
from .outputs import OutputVariant, VariantParams, cross_entropy

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# spawn keys of the rounding and evaluation substreams
ROUND_KEY = 0
EVAL_KEY = 3

EVAL_CHUNK = 2000
REPORT_EPOCHS = (5, 10, 15, 20)

# divergence rule thresholds
CHANCE_ACCURACY = 0.20
CHANCE_AFTER_EPOCHS = 3
OVERFLOW_RATE = 1e-3

# learning-rate divisors tried before a configuration is declared divergent
LR_SWEEP = (1, 4, 16)


@dataclass(frozen=True)
class TrainConfig:
    layers: int = 1
    variant: OutputVariant = OutputVariant.SOFTMAX
    rounding: RoundingMode = RoundingMode.PROBABILISTIC
    epochs: int = 20
    learning_rate: float = 0.03
    batch_size: int = 128
    seed: int = 0
    fraction_bits: int = 16
    total_bits: int = 48
    precision: str = "fixed"
    epsilon_flow: float = 0.1
    train_limit: int | None = None
    test_limit: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", OutputVariant.parse(self.variant))
        object.__setattr__(self, "rounding", RoundingMode.parse(self.rounding))
        if self.layers not in (1, 2, 3):
            raise ValueError("layers must be 1, 2 or 3")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.precision == "fixed" and self.learning_rate >= 2.0 ** (self.total_bits - 1 - self.fraction_bits):
            raise ValueError("learning_rate is not representable in the fixed-point format")
        if self.precision not in ("fixed", "float"):
            raise ValueError("precision must be 'fixed' or 'float'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["rounding"] = self.rounding.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def label(self) -> str:
        return f"{self.layers}L/{self.rounding.value}/{self.variant.value}/{self.precision}"


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    test_accuracy: float
    train_accuracy: float
    mean_loss: float  # nan: variant has no loss; inf: every sample infinite
    infinite_losses: int
    overflow_events: int
    truncations: int
    diverged: bool

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_loss"] = _encode_loss(self.mean_loss)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpochReport":
        d = dict(d)
        d["mean_loss"] = _decode_loss(d["mean_loss"])
        return cls(**{f.name: d[f.name] for f in fields(cls)})


def _encode_loss(v: float):
    if math.isnan(v):
        return None
    if math.isinf(v):
        return "inf"
    return v


def _decode_loss(v) -> float:
    if v is None:
        return math.nan
    if v == "inf":
        return math.inf
    return float(v)


@dataclass
class RunManifest:
    config: TrainConfig
    version: str = __version__
    schema_version: int = SCHEMA_VERSION
    epoch_seconds: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "version": self.version,
            "schema_version": self.schema_version,
            "epoch_seconds": list(self.epoch_seconds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(
            config=TrainConfig.from_dict(d["config"]),
            version=d["version"],
            schema_version=d["schema_version"],
            epoch_seconds=list(d.get("epoch_seconds", [])),
        )


@dataclass
class RunResult:
    manifest: RunManifest
    reports: list[EpochReport]
    # learning rate -> reports, for every attempt of the sweep
    attempts: list[tuple[float, list[EpochReport]]] = field(default_factory=list)
    error: str | None = None

    @property
    def config(self) -> TrainConfig:
        return self.manifest.config

    @property
    def diverged(self) -> bool:
        return bool(self.reports) and self.reports[-1].diverged

    @property
    def final_accuracy(self) -> float:
        return self.reports[-1].test_accuracy if self.reports else math.nan

    def accuracy_at(self, epoch: int) -> float | None:
        for r in self.reports:
            if r.epoch == epoch:
                return r.test_accuracy
        return None


def detect_divergence(history: list[EpochReport]) -> bool:
    """Divergence rule applied to the latest completed epoch.

    Fires on chance-level test accuracy from the third epoch on, on an
    overflow rate above 0.1% of roundings, or on an epoch whose every
    reported loss is infinite.
    """
    if not history:
        raise ValueError("need at least one completed epoch")
    last = history[-1]
    if last.epoch >= CHANCE_AFTER_EPOCHS and last.test_accuracy < CHANCE_ACCURACY:
        return True
    if last.truncations and last.overflow_events > OVERFLOW_RATE * last.truncations:
        return True
    return math.isinf(last.mean_loss)


def _make_domain(config: TrainConfig, rng: RandomStream | None):
    params = VariantParams(epsilon_flow=config.epsilon_flow)
    if config.precision == "float":
        return FloatDomain(params)
    ctx = FixedPoint(f=config.fraction_bits, k=config.total_bits, mode=config.rounding, rng=rng)
    return FixedDomain(ctx, params)


def _sample_losses(variant: OutputVariant, logits: np.ndarray, onehot: np.ndarray, p) -> np.ndarray:
    if variant is OutputVariant.RELU_GRAD:
        return np.full(len(logits), math.nan)
    if p is not None:
        return cross_entropy(p, onehot)
    with np.errstate(all="ignore"):
        return oracle.relu_prob_loss(np.nan_to_num(logits, nan=0.0), onehot)


def evaluate(net, data: Dataset, domain, chunk: int = EVAL_CHUNK) -> float:
    """Test accuracy by argmax of the logits."""
    correct = 0
    for start in range(0, len(data), chunk):
        sl = slice(start, start + chunk)
        logits, _ = forward(net, domain.pixels(data.images[sl]), domain)
        correct += int(np.count_nonzero(np.argmax(logits, axis=1) == data.labels[sl]))
    return correct / len(data)


def run_experiment(
    config: TrainConfig,
    train: Dataset,
    test: Dataset,
    on_epoch: Callable[[EpochReport], None] | None = None,
    manifest: RunManifest | None = None,
) -> list[EpochReport]:
    """Train for ``config.epochs`` or until divergence, one report per epoch."""
    if config.train_limit:
        train = train.subset(config.train_limit)
    if config.test_limit:
        test = test.subset(config.test_limit)
    base = RandomStream(config.seed)
    domain = _make_domain(config, base.derive(ROUND_KEY))
    net = init(config.layers, config.seed, domain)
    variant = config.variant
    reports: list[EpochReport] = []

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        domain.reset_counters()
        correct = 0
        loss_sum = 0.0
        finite = infinite = 0
        for idx in batches(train, config.batch_size, config.seed, epoch):
            x = domain.pixels(train.images[idx])
            y = one_hot(train.labels[idx])
            logits, cache = forward(net, x, domain)
            g, p = domain.output_gradient(variant, logits, y)
            net = sgd_step(net, backward(net, cache, g, domain), config.learning_rate, domain)

            correct += int(np.count_nonzero(np.argmax(logits, axis=1) == train.labels[idx]))
            losses = _sample_losses(variant, domain.decode(logits), y, domain.probs_to_float(p))
            ok = np.isfinite(losses)
            finite += int(ok.sum())
            infinite += int(np.isinf(losses).sum())
            loss_sum += float(losses[ok].sum())
        counters = domain.counters()

        eval_domain = _make_domain(config, base.derive(EVAL_KEY, epoch))
        test_acc = evaluate(net, test, eval_domain)
        if not variant.has_loss:
            mean_loss = math.nan
        elif finite:
            mean_loss = loss_sum / finite
        else:
            mean_loss = math.inf
        report = EpochReport(
            epoch=epoch,
            test_accuracy=test_acc,
            train_accuracy=correct / len(train),
            mean_loss=mean_loss,
            infinite_losses=infinite,
            overflow_events=counters["overflows"],
            truncations=counters["truncations"],
            diverged=False,
        )
        report = replace(report, diverged=detect_divergence(reports + [report]))
        reports.append(report)
        if manifest is not None:
            manifest.epoch_seconds.append(time.perf_counter() - t0)
        log.info(
            "%s epoch %d: test %.4f train %.4f loss %s overflow %d%s",
            config.label(), epoch, report.test_accuracy, report.train_accuracy,
            _encode_loss(report.mean_loss), report.overflow_events,
            " DIVERGED" if report.diverged else "",
        )
        if on_epoch is not None:
            on_epoch(report)
        if report.diverged:
            break
    return reports


def run_with_sweep(
    config: TrainConfig,
    train: Dataset,
    test: Dataset,
    divisors: Iterable[int] = LR_SWEEP,
    on_epoch: Callable[[EpochReport], None] | None = None,
) -> RunResult:
    """Run, retrying a diverged run at smaller learning rates.

    The result carries the last attempt; it is divergent only when every
    learning rate of the sweep diverged.
    """
    attempts = []
    result = None
    for d in divisors:
        cfg = replace(config, learning_rate=config.learning_rate / d)
        manifest = RunManifest(cfg)
        reports = run_experiment(cfg, train, test, on_epoch=on_epoch, manifest=manifest)
        attempts.append((cfg.learning_rate, reports))
        result = RunResult(manifest, reports, attempts)
        if not reports[-1].diverged:
            break
    return result


# -- grid ----------------------------------------------------------------------

DEFAULT_AXES = {
    "layers": (1, 2, 3),
    "rounding": (RoundingMode.PROBABILISTIC, RoundingMode.NEAREST),
    "variant": (OutputVariant.SOFTMAX, OutputVariant.RELU_PROB, OutputVariant.RELU_GRAD),
}


def derive_seed(seed: int, layers: int, rounding: RoundingMode, variant: OutputVariant) -> int:
    """Seed for one grid cell; shared by all variants of a (layers, rounding)
    pair so that they start from the same weights and see the same order."""
    del variant
    rounding_index = list(RoundingMode).index(RoundingMode.parse(rounding))
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(layers, rounding_index))
    return int(seq.generate_state(1)[0])


def grid_configs(template: TrainConfig, axes: dict | None = None) -> list[TrainConfig]:
    axes = {**DEFAULT_AXES, **(axes or {})}
    out = []
    for layers, rounding, variant in itertools.product(axes["layers"], axes["rounding"], axes["variant"]):
        seed = derive_seed(template.seed, layers, rounding, variant)
        out.append(replace(template, layers=layers, rounding=rounding, variant=variant, seed=seed))
    return out


def grid(
    template: TrainConfig,
    train: Dataset,
    test: Dataset,
    axes: dict | None = None,
    on_run: Callable[[RunResult], None] | None = None,
    sweep: bool = True,
) -> list[RunResult]:
    """Every cell of the grid in sequence; a failing cell is recorded and the
    grid continues."""
    results = []
    for cfg in grid_configs(template, axes):
        try:
            result = run_with_sweep(cfg, train, test, divisors=LR_SWEEP if sweep else (1,))
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            log.exception("grid cell %s failed", cfg.label())
            result = RunResult(RunManifest(cfg), [], error=f"{type(exc).__name__}: {exc}")
        results.append(result)
        if on_run is not None:
            on_run(result)
    return results


def aggregate_table(results: list[RunResult], epochs: Iterable[int] = REPORT_EPOCHS) -> list[dict]:
    """Rows of (layers, rounding, variant) with accuracy in percent at the
    report epochs; divergent cells read ``"⊥"``, missing epochs ``""``."""
    rows = []
    for res in results:
        cfg = res.config
        row = {"layers": cfg.layers, "rounding": cfg.rounding.value, "variant": cfg.variant.value}
        for n in epochs:
            if res.error:
                row[f"n={n}"] = "error"
            elif res.diverged:
                row[f"n={n}"] = "⊥"
            else:
                acc = res.accuracy_at(n)
                row[f"n={n}"] = "" if acc is None else f"{100 * acc:.1f}"
        row["lr"] = cfg.learning_rate
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    lines += ["  ".join(str(r[c]).ljust(widths[c]) for c in cols) for r in rows]
    return "\n".join(lines)


# -- reports -------------------------------------------------------------------

REPORT_FIELDS = [f.name for f in fields(EpochReport)]
CONFIG_FIELDS = [f.name for f in fields(TrainConfig)]


def report_rows(result: RunResult) -> list[dict]:
    cfg = result.config.to_dict()
    return [{**cfg, **r.to_dict()} for r in result.reports]


def to_csv(results: list[RunResult]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["schema_version"] + CONFIG_FIELDS + REPORT_FIELDS)
    writer.writeheader()
    for res in results:
        for row in report_rows(res):
            row["mean_loss"] = "" if row["mean_loss"] is None else row["mean_loss"]
            writer.writerow({"schema_version": SCHEMA_VERSION, **row})
    return buf.getvalue()


def to_json(results: list[RunResult]) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "runs": [
            {
                "manifest": res.manifest.to_dict(),
                "reports": [r.to_dict() for r in res.reports],
                "attempts": [{"learning_rate": lr, "epochs": len(reps)} for lr, reps in res.attempts],
                "error": res.error,
            }
            for res in results
        ],
    }


def from_json(doc: dict) -> list[RunResult]:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {doc.get('schema_version')}")
    return [
        RunResult(
            RunManifest.from_dict(run["manifest"]),
            [EpochReport.from_dict(r) for r in run["reports"]],
            error=run.get("error"),
        )
        for run in doc["runs"]
    ]


def emit_report(results: RunResult | list[RunResult], path, fmt: str = "csv") -> Path:
    if isinstance(results, RunResult):
        results = [results]
    path = Path(path)
    if fmt == "csv":
        path.write_text(to_csv(results))
    elif fmt == "json":
        path.write_text(json.dumps(to_json(results), indent=2, ensure_ascii=False))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def replay(manifest: RunManifest, train: Dataset, test: Dataset) -> list[EpochReport]:
    """Re-run a manifest; reports are bit-identical to the original run."""
    return run_experiment(manifest.config, train, test)


JSON_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "runs"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "runs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["manifest", "reports"],
                "properties": {
                    "manifest": {
                        "type": "object",
                        "required": ["config", "version", "schema_version", "epoch_seconds"],
                        "properties": {
                            "config": {
                                "type": "object",
                                "required": CONFIG_FIELDS,
                                "properties": {
                                    "variant": {"enum": [v.value for v in OutputVariant]},
                                    "rounding": {"enum": [m.value for m in RoundingMode]},
                                    "precision": {"enum": ["fixed", "float"]},
                                    "layers": {"enum": [1, 2, 3]},
                                },
                            },
                            "epoch_seconds": {"type": "array", "items": {"type": "number"}},
                        },
                    },
                    "reports": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": REPORT_FIELDS,
                            "properties": {
                                "epoch": {"type": "integer", "minimum": 1},
                                "test_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                                "train_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                                "mean_loss": {"anyOf": [{"type": "number"}, {"const": "inf"}, {"type": "null"}]},
                                "infinite_losses": {"type": "integer", "minimum": 0},
                                "overflow_events": {"type": "integer", "minimum": 0},
                                "truncations": {"type": "integer", "minimum": 0},
                                "diverged": {"type": "boolean"},
                            },
                        },
                    },
                },
            },
        },
    },
}
