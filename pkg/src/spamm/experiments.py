"""The four benchmark experiments: mixture recovery, two ground-truth
functions, and semi-supervised classification of synthetic edge images.

Each experiment samples data, runs the coupling-selection fit, and
records the positive log likelihood of truth and fit, relative L1/L2
errors, and the recovered coupling weights, aggregated as mean and
standard deviation over independent repeats.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateDirectionError, InvalidParameterError
from .model import (
    SparseMixture,
    WeightedSampleBatch,
    WrappedComponent,
    component_log_pdf,
    effective_truncation,
    neg_log_likelihood,
    sample,
    save_model,
)
from .selection import FitReport, SelectionConfig, select_and_fit
from .targets import (
    TargetDensity,
    friedman1_target,
    mc_relative_error,
    mixture_target,
    rejection_sample,
    spline_f1_target,
)
from .torus import arctan_star

__all__ = [
    "ExperimentResult",
    "ImageExperimentResult",
    "RepeatResult",
    "build_ground_truth",
    "generate_image",
    "generate_orientation_dataset",
    "gradient_orientations",
    "run_function_experiment",
    "run_image_experiment",
    "run_mixture_experiment",
    "write_experiment_dir",
]

GROUND_TRUTH_D = 10
GROUND_TRUTH_COUPLINGS = ((0, 1), (2, 3), (4, 5, 6), (6, 7), (8, 9), (2,))
GROUND_TRUTH_ALPHA = (0.2, 0.2, 0.2, 0.2, 0.1, 0.1)
GROUND_TRUTH_SIGMA2 = 0.01

ERROR_MC_SAMPLES = 100_000

IMAGE_ROWS, IMAGE_COLS = 7, 10
IMAGE_NOISE_STD = 0.2

# Per class: mean/std of the two gray values a and b, the split axis
# ("col" or "row"), and the last 1-based index painted with a.
IMAGE_CLASSES = {
    1: ((0.1, 0.05), (0.9, 0.1), "col", 2),
    2: ((0.9, 0.1), (0.1, 0.05), "col", 4),
    3: ((0.2, 0.025), (0.6, 0.05), "col", 6),
    4: ((0.7, 0.1), (0.1, 0.05), "col", 8),
    5: ((0.2, 0.1), (0.9, 0.025), "row", 4),
}

# Interior pixel positions (1-based) whose gradient orientations form the
# observation vector; chosen so the participating pixels never overlap.
GRADIENT_POSITIONS = (
    (2, 2), (2, 3), (2, 6), (2, 7),
    (4, 4), (4, 5), (4, 8), (4, 9),
    (6, 2), (6, 3), (6, 6), (6, 7),
)


def build_ground_truth(setting: str) -> SparseMixture:
    """The six-component wrapped mixture with couplings up to size three.

    Setting "a" uses isotropic 0.01 covariances; "b" adds correlations
    (0.5, 0.5, -0.6, 0.1 on the pair components and a fixed pattern on
    the triple).
    """
    if setting not in ("a", "b"):
        raise InvalidParameterError(f"setting must be 'a' or 'b', got {setting!r}")
    s2 = GROUND_TRUTH_SIGMA2
    comps = []
    if setting == "a":
        sigmas = [s2 * np.eye(len(u)) for u in GROUND_TRUTH_COUPLINGS]
    else:
        corr = {0: 0.5, 1: 0.5, 3: -0.6, 4: 0.1}
        sigmas = []
        for k, u in enumerate(GROUND_TRUTH_COUPLINGS):
            if k == 2:
                sigmas.append(
                    s2
                    * np.array(
                        [[1.0, 0.3, 0.2], [0.3, 1.0, 0.1], [0.2, 0.1, 1.0]]
                    )
                )
            elif k == 5:
                sigmas.append(s2 * np.eye(1))
            else:
                c = corr[k]
                sigmas.append(s2 * np.array([[1.0, c], [c, 1.0]]))
    for u, sigma in zip(GROUND_TRUTH_COUPLINGS, sigmas):
        comps.append(WrappedComponent(u, np.full(len(u), 0.5), sigma))
    return SparseMixture(GROUND_TRUTH_D, np.asarray(GROUND_TRUTH_ALPHA), tuple(comps))


@dataclass
class RepeatResult:
    """Metrics of one sampled-and-fitted repeat."""

    log_likelihood_truth: float
    log_likelihood_fit: float
    e_l1: float
    e_l2: float
    model: SparseMixture
    report: FitReport


@dataclass
class ExperimentResult:
    """All repeats of one experiment configuration."""

    label: str
    repeats: List[RepeatResult]

    def _mean_std(self, values: Sequence[float]) -> Tuple[float, float]:
        arr = np.asarray(values, dtype=float)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        return float(arr.mean()), std

    def table_row(self) -> dict:
        row = {"label": self.label}
        for name, values in (
            ("L_f", [r.log_likelihood_truth for r in self.repeats]),
            ("L_phat", [r.log_likelihood_fit for r in self.repeats]),
            ("e_L1", [r.e_l1 for r in self.repeats]),
            ("e_L2", [r.e_l2 for r in self.repeats]),
        ):
            mean, std = self._mean_std(values)
            row[f"{name}_mean"] = mean
            row[f"{name}_std"] = std
        return row


def _run_repeat(
    batch: WeightedSampleBatch,
    target: TargetDensity,
    truth_ll: float,
    cfg: SelectionConfig,
    fit_seed,
    error_seed,
    n_mc_error: int,
) -> RepeatResult:
    model, report = select_and_fit(batch, cfg, fit_seed)
    ll_fit = -neg_log_likelihood(model, batch, cfg.em.trunc)
    e1 = mc_relative_error(target, model, 1, n_mc_error, error_seed)
    e2 = mc_relative_error(target, model, 2, n_mc_error, error_seed)
    report.metrics.update(
        {"L_f": truth_ll, "L_phat": ll_fit, "e_L1": e1, "e_L2": e2}
    )
    return RepeatResult(
        log_likelihood_truth=truth_ll,
        log_likelihood_fit=ll_fit,
        e_l1=e1,
        e_l2=e2,
        model=model,
        report=report,
    )


def _map_repeats(jobs, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(job) for job in jobs]
        return [f.result() for f in futures]


def run_mixture_experiment(
    setting: str,
    family: str,
    n_samples: int,
    n_repeats: int,
    cfg: Optional[SelectionConfig] = None,
    seed=0,
    n_mc_error: int = ERROR_MC_SAMPLES,
    threads: int = 1,
) -> ExperimentResult:
    """Sample from a ground-truth mixture and recover it n_repeats times."""
    truth = build_ground_truth(setting)
    target = mixture_target(truth)
    cfg = cfg if cfg is not None else SelectionConfig(family=family, d_s=3)
    if cfg.family != family:
        cfg = SelectionConfig(**{**cfg.__dict__, "family": family})
    repeat_seeds = np.random.SeedSequence(seed).spawn(n_repeats)

    def make_job(r):
        def job():
            sample_seed, fit_seed, error_seed = repeat_seeds[r].spawn(3)
            batch = sample(truth, n_samples, sample_seed)
            truth_ll = -neg_log_likelihood(truth, batch)
            return _run_repeat(batch, target, truth_ll, cfg, fit_seed, error_seed, n_mc_error)

        return job

    repeats = _map_repeats([make_job(r) for r in range(n_repeats)], threads)
    return ExperimentResult(label=f"mixture_{setting}_{family}", repeats=repeats)


def run_function_experiment(
    which: str,
    family: str,
    n_samples: int,
    n_repeats: int,
    cfg: Optional[SelectionConfig] = None,
    seed=0,
    n_mc_error: int = ERROR_MC_SAMPLES,
    threads: int = 1,
) -> ExperimentResult:
    """Rejection-sample a normalized ground-truth function and fit it."""
    if which == "f1":
        target = spline_f1_target()
        default_ds = 3
    elif which == "f2":
        target = friedman1_target()
        default_ds = 2
    else:
        raise InvalidParameterError(f"unknown function {which!r}, expected 'f1' or 'f2'")
    cfg = cfg if cfg is not None else SelectionConfig(family=family, d_s=default_ds)
    if cfg.family != family:
        cfg = SelectionConfig(**{**cfg.__dict__, "family": family})
    repeat_seeds = np.random.SeedSequence(seed).spawn(n_repeats)

    def make_job(r):
        def job():
            sample_seed, fit_seed, error_seed = repeat_seeds[r].spawn(3)
            batch = rejection_sample(target, n_samples, sample_seed)
            truth_ll = float(np.sum(batch.weights * np.log(target(batch.points))))
            return _run_repeat(batch, target, truth_ll, cfg, fit_seed, error_seed, n_mc_error)

        return job

    repeats = _map_repeats([make_job(r) for r in range(n_repeats)], threads)
    return ExperimentResult(label=f"{which}_{family}", repeats=repeats)


# ---------------------------------------------------------------------------
# Synthetic image experiment
# ---------------------------------------------------------------------------


def generate_image(class_id: int, rng: np.random.Generator) -> np.ndarray:
    """A noisy piecewise-constant 7x10 image with one straight edge."""
    if class_id not in IMAGE_CLASSES:
        raise InvalidParameterError(f"class id must be in 1..5, got {class_id}")
    (a_mean, a_std), (b_mean, b_std), axis, split = IMAGE_CLASSES[class_id]
    a = a_mean + a_std * rng.standard_normal()
    b = b_mean + b_std * rng.standard_normal()
    image = np.full((IMAGE_ROWS, IMAGE_COLS), b)
    if axis == "col":
        image[:, :split] = a
    else:
        image[:split, :] = a
    return image + IMAGE_NOISE_STD * rng.standard_normal(image.shape)


def gradient_orientations(image: np.ndarray) -> np.ndarray:
    """Central-gradient orientations at the fixed interior positions.

    omega = arctan*(vertical difference / horizontal difference) / (2 pi),
    one value in [0, 1) per position.  Raises for an exactly zero
    gradient, which has probability zero under continuous noise.
    """
    image = np.asarray(image, dtype=float)
    if image.shape != (IMAGE_ROWS, IMAGE_COLS):
        raise InvalidParameterError(f"expected a {IMAGE_ROWS}x{IMAGE_COLS} image")
    out = np.empty(len(GRADIENT_POSITIONS))
    for idx, (i, j) in enumerate(GRADIENT_POSITIONS):
        r, c = i - 1, j - 1  # 1-based interior positions
        s = image[r + 1, c] - image[r - 1, c]
        co = image[r, c + 1] - image[r, c - 1]
        out[idx] = arctan_star(s, co) / (2.0 * np.pi)
    return out


def _orientation_sample(class_id: int, rng: np.random.Generator) -> np.ndarray:
    while True:
        try:
            return gradient_orientations(generate_image(class_id, rng))
        except DegenerateDirectionError:
            continue  # redraw the pixel noise; probability-zero event


def generate_orientation_dataset(
    n: int, class_priors: Sequence[float], rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """n orientation vectors with hidden class labels."""
    priors = np.asarray(class_priors, dtype=float)
    labels = rng.choice(len(priors), size=n, p=priors) + 1
    points = np.stack([_orientation_sample(int(c), rng) for c in labels])
    return points, labels


@dataclass
class ImageExperimentResult:
    accuracy: float
    model: SparseMixture
    report: FitReport
    component_classes: List[int]
    classes_without_component: List[int] = field(default_factory=list)


def _assign_components_to_classes(
    model: SparseMixture, labeled: dict
) -> List[int]:
    """Class of each component by labeled-sample component log likelihood."""
    trunc = effective_truncation(model)
    assignment = []
    for comp in model.components:
        scores = []
        for c in sorted(labeled):
            pts = labeled[c]
            scores.append(float(np.sum(component_log_pdf(comp, pts, trunc))))
        assignment.append(int(np.argmax(scores)) + 1)
    return assignment


def _classify(model: SparseMixture, assignment: List[int], points: np.ndarray) -> np.ndarray:
    trunc = effective_truncation(model)
    scores = np.zeros((points.shape[0], len(IMAGE_CLASSES)))
    for k, comp in enumerate(model.components):
        if model.alpha[k] == 0.0:
            continue
        dens = model.alpha[k] * np.exp(component_log_pdf(comp, points, trunc))
        scores[:, assignment[k] - 1] += dens
    return np.argmax(scores, axis=1) + 1


def run_image_experiment(
    n_train: int = 10_000,
    n_test: int = 1_000,
    n_labeled: int = 3,
    cfg: Optional[SelectionConfig] = None,
    seed=0,
    class_priors: Optional[Sequence[float]] = None,
    threads: int = 1,
) -> ImageExperimentResult:
    """Semi-supervised classification from gradient orientations.

    Fits an unsupervised sparse mixture on training orientations, assigns
    each component to the class whose few labeled samples it explains
    best, and scores test points by the summed density of each class's
    components.
    """
    cfg = cfg if cfg is not None else SelectionConfig(family="vonmises", d_s=4)
    priors = (
        np.asarray(class_priors, dtype=float)
        if class_priors is not None
        else np.full(len(IMAGE_CLASSES), 1.0 / len(IMAGE_CLASSES))
    )
    root = np.random.SeedSequence(seed)
    train_ss, label_ss, test_ss, fit_ss = root.spawn(4)

    train_points, _ = generate_orientation_dataset(
        n_train, priors, np.random.default_rng(train_ss)
    )
    batch = WeightedSampleBatch.with_unit_weights(train_points)

    label_rng = np.random.default_rng(label_ss)
    labeled = {
        c: np.stack([_orientation_sample(c, label_rng) for _ in range(n_labeled)])
        for c in sorted(IMAGE_CLASSES)
    }

    test_points, test_labels = generate_orientation_dataset(
        n_test, priors, np.random.default_rng(test_ss)
    )

    model, report = select_and_fit(batch, cfg, fit_ss)
    assignment = _assign_components_to_classes(model, labeled)
    predicted = _classify(model, assignment, test_points)
    accuracy = float(np.mean(predicted == test_labels))
    missing = sorted(set(IMAGE_CLASSES) - set(assignment))
    return ImageExperimentResult(
        accuracy=accuracy,
        model=model,
        report=report,
        component_classes=assignment,
        classes_without_component=missing,
    )


# ---------------------------------------------------------------------------
# Results directory layout
# ---------------------------------------------------------------------------


def write_experiment_dir(out_dir, result: ExperimentResult) -> None:
    """table.csv, couplings.csv, trace.csv, and model.json for one result.

    The table aggregates all repeats; couplings carry one row group per
    repeat (each group's weights sum to one); trace and model come from
    the first repeat.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    row = result.table_row()
    with open(out / "table.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        header = list(row)
        writer.writerow(header)
        writer.writerow([row[h] if h == "label" else repr(row[h]) for h in header])

    with open(out / "couplings.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["repeat", "coupling_label", "aggregated_weight"])
        for r, repeat in enumerate(result.repeats):
            for u, w in repeat.report.couplings:
                label = "{" + ",".join(str(i) for i in u) + "}"
                writer.writerow([r, label, repr(float(w))])

    first = result.repeats[0]
    with open(out / "trace.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "iteration", "L_lambda", "nnz_alpha", "K_alive"])
        for round_idx, trace in enumerate(first.report.traces):
            for it, obj, nnz, k_alive in trace.rows():
                writer.writerow([round_idx, it, repr(obj), nnz, k_alive])

    save_model(first.model, out / "model.json")
    first.report.write_json(out / "report.json", trace_file="trace.csv")
