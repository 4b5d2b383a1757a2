"""Synthetic data, metrics, and the epsilon-sweep experiment runner.

A sweep is a grid over (mechanism, epsilon, seed). Each cell calibrates
on the public split only, privatizes every private record exactly once,
and scores the public model on the privatized records. Cells carry
independently derived RNG streams, so results are bit-identical for a
given (config, master seed) regardless of worker count.
"""

from __future__ import annotations

import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .dataio import format_float, read_column_csv, read_feature_csv, write_json
from .errors import PrivateAccessError
from .mechanisms import PrivacyBudget
from .models import fit_ols, train_classifier
from .pipeline import calibrate, privatize_batch
from .rng import derive_rng, derive_seed_words

__all__ = [
    "SplitDataset",
    "gen_synthetic_regression",
    "gen_synthetic_classification",
    "rmse",
    "accuracy",
    "ExperimentConfig",
    "TrialResult",
    "SweepResult",
    "PrivateDataGuard",
    "run_sweep",
    "write_sweep_outputs",
]

KNOWN_BASE_MECHANISMS = ("laplace", "agm", "privunit2", "privunitg", "cw")


@dataclass
class SplitDataset:
    """Features plus targets or labels, with a public/private row split."""

    task: str
    features: np.ndarray
    public_index: np.ndarray
    private_index: np.ndarray
    targets: np.ndarray | None = None
    labels: np.ndarray | None = None

    @property
    def public_features(self):
        return self.features[self.public_index]

    @property
    def private_features(self):
        return self.features[self.private_index]

    def public_response(self):
        return (self.targets if self.task == "regression" else self.labels)[self.public_index]

    def private_response(self):
        return (self.targets if self.task == "regression" else self.labels)[self.private_index]


def gen_synthetic_regression(n, m, seed, noise_std=0.05):
    """Sliding-window series whose target is a rank-1 functional.

    An AR(1) series is windowed into overlapping length-m feature
    vectors; the target is a fixed decaying-weight combination of the
    window plus ``noise_std`` Gaussian noise. Public windows precede the
    private ones with an m-step gap so the splits share no raw samples.
    """
    if n <= 2 * m:
        raise ValueError(f"need n > 2m windows, got n={n}, m={m}")
    rng = np.random.default_rng(seed)
    n_public = n // 2
    gap = m
    length = n + gap + m
    series = np.empty(length + m)
    series[0] = rng.standard_normal()
    for t in range(1, series.size):
        series[t] = 0.8 * series[t - 1] + rng.standard_normal()
    windows = np.lib.stride_tricks.sliding_window_view(series, m)[: n + gap]
    weights = 0.75 ** np.arange(m - 1, -1, -1)
    weights /= np.linalg.norm(weights)
    raw_targets = windows @ weights + 0.3
    noisy_targets = raw_targets + noise_std * rng.standard_normal(n + gap)
    keep = np.concatenate([np.arange(n_public), np.arange(n_public + gap, n + gap)])
    return SplitDataset(
        task="regression",
        features=np.ascontiguousarray(windows[keep]),
        targets=noisy_targets[keep],
        public_index=np.arange(n_public),
        private_index=np.arange(n_public, keep.size),
    )


def gen_synthetic_classification(
    n, m, classes, discriminative_rank, seed, separation=6.0, within_std=1.0
):
    """Gaussian blobs whose class means span a low-dimensional subspace.

    Means live in a random ``min(classes, discriminative_rank)``-
    dimensional subspace; the isotropic within-class noise makes every
    other direction pure nuisance. The split is stratified per class.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if not 1 <= discriminative_rank < m:
        raise ValueError(f"discriminative_rank must lie in [1, m), got {discriminative_rank}")
    rng = np.random.default_rng(seed)
    span = min(classes, discriminative_rank)
    basis, _ = np.linalg.qr(rng.standard_normal((m, span)))
    if classes <= span:
        # Orthogonal placement guarantees pairwise mean distance
        # separation * sqrt(2) up to the jitter.
        coords = np.eye(classes, span) + 0.15 * rng.standard_normal((classes, span))
    else:
        coords = rng.standard_normal((classes, span))
        coords *= 1.4 / np.linalg.norm(coords, axis=1, keepdims=True)
    means = separation * coords @ basis.T
    labels = np.tile(np.arange(classes), n // classes + 1)[:n]
    features = means[labels] + within_std * rng.standard_normal((n, m))
    perm = rng.permutation(n)
    features, labels = features[perm], labels[perm]
    public_mask = np.zeros(n, dtype=bool)
    for k in range(classes):
        idx = np.nonzero(labels == k)[0]
        public_mask[idx[: idx.size // 2]] = True
    public_index = np.nonzero(public_mask)[0]
    private_index = np.nonzero(~public_mask)[0]
    return SplitDataset(
        task="classification",
        features=features,
        labels=labels,
        public_index=public_index,
        private_index=private_index,
    )


def rmse(pred, truth):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.size == 0 or pred.shape != truth.shape:
        raise ValueError("predictions and truth must be non-empty and equal length")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def accuracy(pred_labels, truth_labels):
    pred = np.asarray(pred_labels).ravel()
    truth = np.asarray(truth_labels).ravel()
    if pred.size == 0 or pred.shape != truth.shape:
        raise ValueError("predictions and truth must be non-empty and equal length")
    return float(np.mean(pred == truth))


class PrivateDataGuard:
    """One-shot gate around private records.

    Locked while calibration runs; any access then raises. ``consume``
    counts reads so the runner can assert each record enters exactly
    one mechanism invocation per trial.
    """

    def __init__(self, array):
        self._array = array
        self._locked = False
        self.consumed = 0

    @contextmanager
    def locked(self):
        self._locked = True
        try:
            yield self
        finally:
            self._locked = False

    def consume(self):
        if self._locked:
            raise PrivateAccessError("private records accessed during calibration")
        self.consumed += 1
        return self._array


def parse_mechanism_id(mechanism_id):
    """Split "base[+pa]" into (base, reshape). "none" means no mechanism."""
    parts = mechanism_id.split("+")
    base = parts[0]
    reshape = False
    if len(parts) == 2 and parts[1] == "pa":
        reshape = True
    elif len(parts) != 1:
        raise ValueError(f"malformed mechanism id {mechanism_id!r}")
    if base == "none":
        if reshape:
            raise ValueError("the no-randomization row takes no +pa suffix")
        return base, False
    if base not in KNOWN_BASE_MECHANISMS:
        raise ValueError(f"unknown mechanism {base!r}")
    if base == "cw" and not reshape:
        raise ValueError("cw without the transform is plain Laplace; use 'laplace'")
    return base, reshape


def parse_rank_rule(text):
    """Parse "fixed:R" or "energy:TAU"; None passes through."""
    if text is None:
        return None
    kind, _, value = str(text).partition(":")
    if kind == "fixed":
        return ("fixed", int(value))
    if kind == "energy":
        return ("energy", float(value))
    raise ValueError(f"malformed rank rule {text!r}")


@dataclass
class ExperimentConfig:
    """Declarative description of one epsilon sweep."""

    task: str
    m: int
    mechanisms: list
    epsilons: list
    seeds: int = 20
    master_seed: int = 0
    n_public: int = 1000
    n_private: int = 2000
    classes: int = 10
    discriminative_rank: int = 10
    arch: dict | None = None
    rank_rule: str | None = None
    percentile: float = 0.9
    jacobian_samples: int = 500
    null_mode: str = "floor"
    null_constant: float = 100.0
    delta: float = 1e-5
    budget_split: float | None = None
    dataset: dict = field(default_factory=lambda: {"source": "synthetic"})
    workers: int | None = None

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        eps = [float(e) for e in self.epsilons]
        if not eps or any(e <= 0 for e in eps) or sorted(eps) != eps:
            raise ValueError("epsilons must be positive and ascending")
        self.epsilons = eps
        if isinstance(self.seeds, int):
            self.seeds = list(range(self.seeds))
        if not self.seeds:
            raise ValueError("need at least one seed")
        for mechanism_id in self.mechanisms:
            parse_mechanism_id(mechanism_id)
        parse_rank_rule(self.rank_rule)
        if self.task == "classification" and self.arch is None:
            self.arch = {"type": "mlp", "hidden": [10, 32], "activation": "relu"}

    @staticmethod
    def from_dict(doc):
        return ExperimentConfig(**doc)

    def to_dict(self):
        return {
            "task": self.task,
            "m": self.m,
            "mechanisms": list(self.mechanisms),
            "epsilons": list(self.epsilons),
            "seeds": list(self.seeds),
            "master_seed": self.master_seed,
            "n_public": self.n_public,
            "n_private": self.n_private,
            "classes": self.classes,
            "discriminative_rank": self.discriminative_rank,
            "arch": self.arch,
            "rank_rule": self.rank_rule,
            "percentile": self.percentile,
            "jacobian_samples": self.jacobian_samples,
            "null_mode": self.null_mode,
            "null_constant": self.null_constant,
            "delta": self.delta,
            "budget_split": self.budget_split,
            "dataset": self.dataset,
            "workers": self.workers,
        }


@dataclass
class TrialResult:
    mechanism: str
    epsilon: float
    seed: int
    metric: str
    value: float
    clip_fraction: float
    wall_time: float
    error: str = ""


@dataclass
class SweepResult:
    config: ExperimentConfig
    rows: list

    @property
    def failures(self):
        return [r for r in self.rows if r.error]

    def summary_cells(self):
        """Per (mechanism, epsilon): mean, std (ddof=1), seed count."""
        cells = {}
        for mech in self.config.mechanisms:
            for eps in self.config.epsilons:
                values = [
                    r.value
                    for r in self.rows
                    if r.mechanism == mech and r.epsilon == eps and not r.error
                ]
                arr = np.asarray(values)
                cells[(mech, eps)] = {
                    "mean": float(arr.mean()) if arr.size else float("nan"),
                    "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
                    "count": int(arr.size),
                }
        return cells


def load_dataset(config):
    source = config.dataset.get("source", "synthetic")
    if source == "synthetic":
        data_seed = config.dataset.get(
            "data_seed", derive_seed_words(config.master_seed, "data")
        )
        n = config.n_public + config.n_private
        if config.task == "regression":
            return gen_synthetic_regression(
                n, config.m, data_seed, noise_std=config.dataset.get("noise_std", 0.05)
            )
        return gen_synthetic_classification(
            n,
            config.m,
            config.classes,
            config.discriminative_rank,
            data_seed,
            separation=config.dataset.get("separation", 6.0),
            within_std=config.dataset.get("within_std", 1.0),
        )
    if source == "csv":
        _, features = read_feature_csv(config.dataset["features"])
        n = features.shape[0]
        n_public = int(config.dataset.get("n_public", config.n_public))
        if not 0 < n_public < n:
            raise ValueError("csv datasets need 0 < n_public < n rows public")
        split = dict(
            public_index=np.arange(n_public), private_index=np.arange(n_public, n)
        )
        if config.task == "regression":
            _, targets = read_column_csv(config.dataset["targets"], dtype=float)
            return SplitDataset(task="regression", features=features, targets=targets, **split)
        _, labels = read_column_csv(config.dataset["labels"], dtype=int)
        return SplitDataset(task="classification", features=features, labels=labels, **split)
    raise ValueError(f"unknown dataset source {source!r}")


def train_public_model(config, data):
    if config.task == "regression":
        return fit_ols(data.public_features, data.public_response())
    arch = config.arch or {"type": "mlp", "hidden": [10, 32], "activation": "relu"}
    seed = derive_seed_words(config.master_seed, "model")
    if arch.get("type") == "linear":
        return train_classifier(
            data.public_features, data.public_response(), arch="linear",
            step_size=arch.get("step_size", 0.5), epochs=arch.get("epochs", 150),
            seed=seed,
        )
    return train_classifier(
        data.public_features,
        data.public_response(),
        arch="mlp",
        hidden=tuple(arch.get("hidden", (10, 32))),
        activation=arch.get("activation", "relu"),
        step_size=arch.get("step_size", 0.05),
        epochs=arch.get("epochs", 150),
        seed=seed,
    )


@dataclass
class _SweepContext:
    config: ExperimentConfig
    model: object
    public_features: np.ndarray
    private_features: np.ndarray
    private_response: np.ndarray


def _calibrate_for_cell(ctx, base, reshape, epsilon, guard):
    """Calibration step; runs with the private guard locked."""
    config = ctx.config
    delta = config.delta if base == "agm" else 0.0
    return calibrate(
        ctx.public_features,
        ctx.model,
        rank_rule=parse_rank_rule(config.rank_rule),
        percentile=config.percentile,
        jacobian_sample_count=min(config.jacobian_samples, ctx.public_features.shape[0]),
        mechanism=base,
        budget=PrivacyBudget(epsilon, delta),
        null_mode=config.null_mode,
        null_constant=config.null_constant,
        reshape=reshape,
        budget_split=config.budget_split,
    )


def _evaluate(ctx, features):
    if ctx.config.task == "regression":
        preds = ctx.model.forward_batch(features)[:, 0]
        return "rmse", rmse(preds, ctx.private_response)
    return "accuracy", accuracy(ctx.model.predict_labels(features), ctx.private_response)


def _run_cell(ctx, mech_idx, eps_idx, seed_idx):
    config = ctx.config
    mechanism_id = config.mechanisms[mech_idx]
    epsilon = config.epsilons[eps_idx]
    seed = config.seeds[seed_idx]
    start = time.perf_counter()
    try:
        guard = PrivateDataGuard(ctx.private_features)
        if mechanism_id == "none":
            metric, value = _evaluate(ctx, guard.consume())
            clip_fraction = 0.0
        else:
            base, reshape = parse_mechanism_id(mechanism_id)
            rng = derive_rng(config.master_seed, "trial", mechanism_id, eps_idx, seed_idx)
            with guard.locked():
                cell_config, _ = _calibrate_for_cell(ctx, base, reshape, epsilon, guard)
            privatized, clip_fraction = privatize_batch(guard.consume(), cell_config, rng)
            metric, value = _evaluate(ctx, privatized)
        if guard.consumed != 1:
            raise PrivateAccessError(
                f"private records consumed {guard.consumed} times in one trial"
            )
        return TrialResult(
            mechanism=mechanism_id,
            epsilon=epsilon,
            seed=seed,
            metric=metric,
            value=value,
            clip_fraction=clip_fraction,
            wall_time=time.perf_counter() - start,
        )
    except PrivateAccessError:
        raise
    except Exception as exc:  # recorded per-cell; the sweep continues
        return TrialResult(
            mechanism=mechanism_id,
            epsilon=epsilon,
            seed=seed,
            metric="error",
            value=float("nan"),
            clip_fraction=0.0,
            wall_time=time.perf_counter() - start,
            error=f"{type(exc).__name__}: {exc}",
        )


_POOL_CTX = None


def _pool_init(ctx):
    global _POOL_CTX
    _POOL_CTX = ctx


def _pool_run(indices):
    return _run_cell(_POOL_CTX, *indices)


def resolve_workers(config_workers=None):
    """Worker count; the ANISO_LDP_THREADS env var acts as a hard cap."""
    env = os.environ.get("ANISO_LDP_THREADS")
    cap = max(1, int(env)) if env else None
    workers = config_workers or cap or 1
    if cap is not None:
        workers = min(workers, cap)
    return max(1, int(workers))


def run_sweep(config):
    """Run every (mechanism, epsilon, seed) cell of the sweep.

    Calibration and model training touch the public split only; the
    private guard enforces this and the one-invocation-per-record rule.
    """
    data = load_dataset(config)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = train_public_model(config, data)
    ctx = _SweepContext(
        config=config,
        model=model,
        public_features=data.public_features,
        private_features=data.private_features,
        private_response=data.private_response(),
    )
    indices = [
        (mi, ei, si)
        for mi in range(len(config.mechanisms))
        for ei in range(len(config.epsilons))
        for si in range(len(config.seeds))
    ]
    workers = resolve_workers(config.workers)
    if workers == 1 or len(indices) == 1:
        rows = [_run_cell(ctx, *idx) for idx in indices]
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_pool_init, initargs=(ctx,)
        ) as pool:
            rows = list(pool.map(_pool_run, indices, chunksize=1))
    return SweepResult(config=config, rows=rows)


def format_summary_table(result):
    """Aligned mean-(std) table, one mechanism per row, epsilons across."""
    cells = result.summary_cells()
    eps_list = result.config.epsilons
    name_width = max(len(m) for m in result.config.mechanisms) + 2
    header = "mechanism".ljust(name_width) + "".join(
        f"eps={e:g}".rjust(20) for e in eps_list
    )
    lines = [header, "-" * len(header)]
    for mech in result.config.mechanisms:
        line = mech.ljust(name_width)
        for eps in eps_list:
            cell = cells[(mech, eps)]
            if cell["count"] == 0:
                line += "failed".rjust(20)
            else:
                line += f"{cell['mean']:.4f} ({cell['std']:.4f})".rjust(20)
        lines.append(line)
    return "\n".join(lines)


def write_sweep_outputs(result, outdir):
    """Write results.csv, timings.csv, summary.txt, and summary.json.

    results.csv is the deterministic artifact (bit-identical given the
    config and master seed); wall-clock timings go to a separate file.
    """
    os.makedirs(outdir, exist_ok=True)
    paths = {
        "results": os.path.join(outdir, "results.csv"),
        "timings": os.path.join(outdir, "timings.csv"),
        "summary_txt": os.path.join(outdir, "summary.txt"),
        "summary_json": os.path.join(outdir, "summary.json"),
    }
    with open(paths["results"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write("mechanism,epsilon,seed,metric,value,clip_fraction,error\n")
        for r in result.rows:
            error = r.error.replace(",", ";").replace("\n", " ")
            fh.write(
                f"{r.mechanism},{format_float(r.epsilon)},{r.seed},{r.metric},"
                f"{format_float(r.value)},{format_float(r.clip_fraction)},{error}\n"
            )
    with open(paths["timings"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write("mechanism,epsilon,seed,wall_time\n")
        for r in result.rows:
            fh.write(
                f"{r.mechanism},{format_float(r.epsilon)},{r.seed},{format_float(r.wall_time)}\n"
            )
    table = format_summary_table(result)
    with open(paths["summary_txt"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table + "\n")
    cells = result.summary_cells()
    write_json(
        paths["summary_json"],
        {
            "config": result.config.to_dict(),
            "cells": [
                {"mechanism": mech, "epsilon": eps, **stats}
                for (mech, eps), stats in sorted(cells.items())
            ],
            "failures": [
                {"mechanism": r.mechanism, "epsilon": r.epsilon, "seed": r.seed, "error": r.error}
                for r in result.failures
            ],
        },
    )
    return paths
