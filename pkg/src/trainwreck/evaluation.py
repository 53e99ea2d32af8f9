"""Target-model evaluation, the attack cost model, and poison-rate sweeps.

A run trains a target model on (clean or poisoned) training data and records
the test top-1 accuracy after every epoch. The reported accuracy is the best
value over the final 10 epochs (or over all epochs for shorter runs), which
suppresses early-epoch noise. Attack damage is the clean-minus-attacked
reported accuracy; the attack's financial cost is modeled as the integral of
a cost curve over the attack duration, with the constant-curve shortcut
damage * duration as the standard surrogate.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datasets import ImageDataset, materialize_poisoned
from .models import TrainingConfig, train_classifier
from .utils import ComparisonError, NonFiniteLossError, atomic_write_text

logger = logging.getLogger(__name__)

REPORT_WINDOW = 10  # final epochs considered for the reported accuracy


def windowed_best(curve) -> float:
    """Best accuracy over the final REPORT_WINDOW epochs (all epochs if shorter)."""
    curve = list(curve)
    if not curve:
        return 0.0
    return float(max(curve[-REPORT_WINDOW:]))


@dataclass
class EvaluationReport:
    """Record of one target-model training run."""

    dataset_id: str
    attack_name: str  # "clean" for unpoisoned baselines
    poison_rate: float
    architecture_id: str
    seed: int
    epochs: int
    accuracy_curve: list = field(default_factory=list)
    reported_accuracy: float = 0.0
    clean_reference_accuracy: float | None = None
    delta_perf: float | None = None
    n_classes: int | None = None
    status: str = "ok"
    started_at: str = ""
    duration_seconds: float = 0.0

    def __post_init__(self):
        if self.accuracy_curve:
            expected = windowed_best(self.accuracy_curve)
            if abs(self.reported_accuracy - expected) > 1e-12:
                raise ValueError(
                    f"reported_accuracy {self.reported_accuracy} does not equal the "
                    f"windowed best {expected}"
                )
        if self.clean_reference_accuracy is not None and self.delta_perf is not None:
            expected = self.clean_reference_accuracy - self.reported_accuracy
            if abs(self.delta_perf - expected) > 1e-12:
                raise ValueError(
                    f"delta_perf {self.delta_perf} does not equal reference minus "
                    f"reported ({expected})"
                )

    @property
    def random_guess_accuracy(self) -> float | None:
        return 1.0 / self.n_classes if self.n_classes else None

    def to_dict(self) -> dict:
        record = dataclasses.asdict(self)
        record["random_guess_accuracy"] = self.random_guess_accuracy
        return record

    @classmethod
    def from_dict(cls, record: dict) -> "EvaluationReport":
        record = dict(record)
        record.pop("random_guess_accuracy", None)
        return cls(**record)


def evaluate_target(
    train: ImageDataset,
    test: ImageDataset,
    architecture_id: str,
    epochs: int,
    seed: int,
    training_config: TrainingConfig | None = None,
    finetune: bool = False,
    attack_name: str = "clean",
    poison_rate: float = 0.0,
    clean_reference_accuracy: float | None = None,
    test_manifest=None,
) -> EvaluationReport:
    """Train a target model and produce its evaluation report.

    The test split must be untouched by any recipe; pass `test_manifest` (a
    HashManifest of the canonical clean test split) to enforce this before
    training starts. A run whose loss turns non-finite is marked failed with
    the epoch index rather than raising.
    """
    if test_manifest is not None:
        from .defense import verify_manifest

        verification = verify_manifest(test, test_manifest)
        if not verification.passed:
            raise ValueError(
                f"test split does not match the canonical manifest: "
                f"{verification.summary()}"
            )
    started = time.time()
    status = "ok"
    curve: list = []
    try:
        _, curve = train_classifier(train, test, architecture_id, epochs, seed,
                                    config=training_config, finetune=finetune)
    except NonFiniteLossError as exc:
        status = f"failed:non-finite-loss@epoch{exc.epoch}"
        logger.warning("training run failed: %s", status)
    reported = windowed_best(curve)
    return EvaluationReport(
        dataset_id=train.dataset_id,
        attack_name=attack_name,
        poison_rate=poison_rate,
        architecture_id=architecture_id,
        seed=seed,
        epochs=epochs,
        accuracy_curve=curve,
        reported_accuracy=reported,
        clean_reference_accuracy=clean_reference_accuracy,
        delta_perf=(clean_reference_accuracy - reported
                    if clean_reference_accuracy is not None else None),
        n_classes=train.n_classes,
        status=status,
        started_at=time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        duration_seconds=time.time() - started,
    )


def delta_perf(clean_report: EvaluationReport, attacked_report: EvaluationReport) -> float:
    """Clean-minus-attacked reported accuracy; may be negative and is returned as-is."""
    for attribute in ("dataset_id", "architecture_id", "epochs"):
        clean_value = getattr(clean_report, attribute)
        attacked_value = getattr(attacked_report, attribute)
        if clean_value != attacked_value:
            raise ComparisonError(
                f"reports are not comparable: {attribute} differs "
                f"({clean_value!r} vs {attacked_value!r})"
            )
    return clean_report.reported_accuracy - attacked_report.reported_accuracy


def surrogate_total_cost(delta_perf_value: float, duration: float) -> float:
    """Constant-cost-curve attack cost: performance damage times attack duration."""
    if duration < 0:
        raise ValueError(f"attack duration must be nonnegative, got {duration}")
    return delta_perf_value * duration


def total_cost(cost_samples, duration: float) -> float:
    """Trapezoidal integral of a sampled cost curve over [0, duration].

    `cost_samples` is an ordered list of (time, cost) pairs; sample times must
    be sorted and cover the full [0, duration] interval.
    """
    if duration < 0:
        raise ValueError(f"attack duration must be nonnegative, got {duration}")
    samples = [(float(t), float(c)) for t, c in cost_samples]
    if len(samples) < 2:
        raise ValueError("cost curve needs at least two samples")
    times = np.array([t for t, _ in samples])
    costs = np.array([c for _, c in samples])
    if (np.diff(times) < 0).any():
        raise ValueError("cost samples must be sorted by time")
    if times[0] > 0 or times[-1] < duration:
        raise ValueError(
            f"cost samples cover [{times[0]}, {times[-1]}], "
            f"need [0, {duration}]"
        )
    if duration == 0:
        return 0.0
    grid = np.unique(np.concatenate([times[(times > 0) & (times < duration)],
                                     [0.0, duration]]))
    values = np.interp(grid, times, costs)
    return float(np.trapezoid(values, grid))


def _sweep_run(payload):
    """Worker for one sweep point; top-level so it pickles for process pools."""
    (train, test, recipe, architecture_id, epochs, seed, training_config,
     finetune, clean_reference) = payload
    poisoned = materialize_poisoned(train, recipe)
    return evaluate_target(
        poisoned, test, architecture_id, epochs, seed,
        training_config=training_config, finetune=finetune,
        attack_name=recipe.attack_name, poison_rate=recipe.poison_rate,
        clean_reference_accuracy=clean_reference,
    )


def poison_rate_sweep(
    train: ImageDataset,
    test: ImageDataset,
    config_template,
    poison_rates,
    architecture_id: str,
    epochs: int,
    seed: int,
    out_dir=None,
    training_config: TrainingConfig | None = None,
    finetune: bool = False,
    clean_reference_accuracy: float | None = None,
    jobs: int = 1,
    surrogate=None,
    divergence=None,
) -> list:
    """One recipe + one training run per poison rate.

    The surrogate and divergence matrix are rate-independent and computed once
    (or injected), then reused across every rate. Per-run failures are
    recorded as failed reports and the sweep continues. When `out_dir` is
    given, a JSONL results table and an accuracy-vs-rate plot are written.

    Duplicate rates are run independently and all reported.
    """
    from .attacks import PERTURBATION_ATTACKS, craft_attack, _divergence_for, _surrogate_for

    needs_divergence = config_template.attack_name in ("trainwreck", "jsd_swap")
    needs_surrogate = config_template.attack_name in PERTURBATION_ATTACKS
    if any(rate > 0 for rate in poison_rates):
        if needs_divergence:
            divergence = _divergence_for(train, config_template, divergence)
        if needs_surrogate:
            surrogate = _surrogate_for(train, test, config_template, surrogate)

    slots: list = []
    for rate in poison_rates:
        config = dataclasses.replace(config_template, poison_rate=rate)
        try:
            recipe = craft_attack(train, test, config, divergence=divergence,
                                  surrogate=surrogate)
        except Exception as exc:
            logger.warning("craft failed at rate %s: %s", rate, exc)
            slots.append(EvaluationReport(
                dataset_id=train.dataset_id, attack_name=config.attack_name,
                poison_rate=rate, architecture_id=architecture_id, seed=seed,
                epochs=epochs, status=f"failed:craft:{exc}", n_classes=train.n_classes,
            ))
            continue
        slots.append((train, test, recipe, architecture_id, epochs, seed,
                      training_config, finetune, clean_reference_accuracy))

    pending = [(i, slot) for i, slot in enumerate(slots) if isinstance(slot, tuple)]
    if jobs > 1 and len(pending) > 1:
        import multiprocessing as mp

        with ProcessPoolExecutor(max_workers=jobs,
                                 mp_context=mp.get_context("spawn")) as pool:
            futures = [(i, payload, pool.submit(_sweep_run, payload))
                       for i, payload in pending]
            for i, payload, future in futures:
                slots[i] = _collect(payload, future.result, architecture_id,
                                    epochs, seed, train.n_classes)
    else:
        for i, payload in pending:
            slots[i] = _collect(payload, lambda p=payload: _sweep_run(p),
                                architecture_id, epochs, seed, train.n_classes)
    reports = slots

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_results_table(reports, os.path.join(out_dir, "results.jsonl"))
        plot_sweep(reports, os.path.join(out_dir, "accuracy_vs_poison_rate.png"),
                   clean_reference_accuracy=clean_reference_accuracy)
    return reports


def _collect(payload, producer, architecture_id, epochs, seed, n_classes):
    recipe = payload[2]
    try:
        return producer()
    except Exception as exc:
        logger.warning("sweep run failed at rate %s: %s", recipe.poison_rate, exc)
        return EvaluationReport(
            dataset_id=payload[0].dataset_id, attack_name=recipe.attack_name,
            poison_rate=recipe.poison_rate, architecture_id=architecture_id,
            seed=seed, epochs=epochs, status=f"failed:run:{exc}", n_classes=n_classes,
        )


def write_results_table(reports, path) -> None:
    """One JSON record per run, machine-readable, including the random-guess floor."""
    lines = [json.dumps(report.to_dict(), sort_keys=True) for report in reports]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_results_table(path) -> list:
    with open(path, "r", encoding="utf-8") as handle:
        return [EvaluationReport.from_dict(json.loads(line))
                for line in handle if line.strip()]


def plot_sweep(reports, path, clean_reference_accuracy: float | None = None) -> None:
    """Accuracy-versus-poison-rate figure for the sweep results."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    figure, axis = plt.subplots(figsize=(6, 4))
    by_attack: dict = {}
    for report in reports:
        if report.status == "ok":
            by_attack.setdefault(report.attack_name, []).append(
                (report.poison_rate, report.reported_accuracy))
    for attack_name, points in sorted(by_attack.items()):
        points.sort()
        axis.plot([p for p, _ in points], [a for _, a in points],
                  marker="o", label=attack_name)
    if clean_reference_accuracy is not None:
        axis.axhline(clean_reference_accuracy, linestyle="--", color="gray",
                     label="clean")
    floors = {r.random_guess_accuracy for r in reports if r.random_guess_accuracy}
    for floor in floors:
        axis.axhline(floor, linestyle=":", color="red", label="random guess")
    axis.set_xlabel("poison rate")
    axis.set_ylabel("test top-1 accuracy")
    axis.set_ylim(0.0, 1.0)
    axis.legend()
    figure.tight_layout()
    figure.savefig(path, dpi=120)
    plt.close(figure)
