"""Clustering evaluation: optimal cluster-to-class matching and experiment
drivers.

Unsupervised accuracy maximizes the matched diagonal of the contingency
table over one-to-one mappings, solved with the Hungarian algorithm
(scipy's linear_sum_assignment). Per-class accuracies are reported on true
classes after the mapping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass
class Contingency:
    counts: np.ndarray  # (k, k): rows predicted clusters, cols true classes
    n: int
    pred_alphabet: np.ndarray
    true_alphabet: np.ndarray


@dataclass
class EvalReport:
    acc: float
    mapping: np.ndarray  # cluster index -> class index
    per_class: dict
    confusion: np.ndarray  # (class, class) after mapping

    def as_dict(self):
        return {
            "acc": self.acc,
            "mapping": self.mapping.tolist(),
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "confusion": self.confusion.tolist(),
        }


def build_contingency(pred, truth):
    """Square count matrix, zero-padded when fewer clusters were predicted."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {truth.shape} labels")
    if pred.size == 0:
        raise ValueError("empty input")
    pred_alpha = np.unique(pred)
    true_alpha = np.unique(truth)
    k = max(len(pred_alpha), len(true_alpha), int(pred.max()) + 1, int(truth.max()) + 1)
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (pred, truth), 1)
    return Contingency(counts, int(pred.size), pred_alpha, true_alpha)


def hungarian_match(cost):
    """Permutation (row -> col) minimizing total cost of a square matrix."""
    cost = np.asarray(cost)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm


def clustering_accuracy(pred, truth):
    """Accuracy under the best one-to-one cluster-to-class mapping."""
    table = build_contingency(pred, truth)
    counts = table.counts
    mapping = hungarian_match(counts.max() - counts)
    acc = counts[np.arange(len(mapping)), mapping].sum() / table.n

    pred = np.asarray(pred)
    truth = np.asarray(truth)
    mapped = mapping[pred]
    k = counts.shape[0]
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (truth, mapped), 1)
    per_class = {}
    for cls in table.true_alphabet:
        members = truth == cls
        per_class[int(cls)] = float((mapped[members] == cls).mean())
    return EvalReport(float(acc), mapping, per_class, confusion)


def nearest_centroid_accuracy(features, labels):
    """Plain accuracy of per-class centroids fit on the given labels."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    centroids = np.stack([features[labels == c].mean(axis=0) for c in classes])
    d2 = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = classes[np.argmin(d2, axis=1)]
    return float((pred == labels).mean())


def pca_2d(features):
    """First two principal components (SVD), for scatter exports."""
    x = np.asarray(features, dtype=np.float64)
    x = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    return x @ vt[:2].T


# ---------------------------------------------------------------------------
# imbalanced-data experiment


@dataclass(frozen=True)
class DropSpec:
    classes: tuple  # class indices to thin out
    fractions: tuple = (0.0, 0.1, 0.2, 0.3, 0.4)
    schedules: tuple = ("constant", "variable")


# tolerance (primary, overcluster) per drop fraction under the variable rule
_VARIABLE_DELTAS = {
    0.0: (1e-4, 1e-2),
    0.1: (1e-4, 2e-2),
    0.2: (1e-3, 2e-2),
    0.3: (1e-3, 5e-2),
    0.4: (2e-3, 5e-2),
}
_CONSTANT_DELTAS = (1e-4, 1e-2)


def subsample_drop(labels, classes, fraction, rng):
    """Keep-indices after dropping ``fraction`` of each named class."""
    labels = np.asarray(labels)
    keep = np.ones(len(labels), dtype=bool)
    for cls in classes:
        members = np.flatnonzero(labels == cls)
        n_drop = int(round(fraction * len(members)))
        if len(members) and n_drop >= len(members):
            raise ValueError(f"drop fraction {fraction} would empty class {cls}")
        if n_drop:
            drop = rng.choice(members, size=n_drop, replace=False)
            keep[drop] = False
    return np.flatnonzero(keep)


def schedule_deltas(schedule, fraction):
    if schedule == "constant":
        return _CONSTANT_DELTAS
    if schedule == "variable":
        key = min(_VARIABLE_DELTAS, key=lambda f: abs(f - fraction))
        return _VARIABLE_DELTAS[key]
    raise ValueError(f"unknown delta schedule {schedule!r}")


def imbalance_experiment(features, labels, drop_spec: DropSpec, bank_config,
                         heads_builder, seeds):
    """Retrain the bank on class-thinned subsets; per-class accuracy rows.

    ``heads_builder(delta_primary, delta_over)`` returns the head list;
    ``bank_config`` is a ClusterConfig template. Returns a list of dicts, one
    per (drop fraction, schedule, seed) with overall and per-class accuracy.
    """
    from dataclasses import replace

    from .cluster import assign_clusters, build_bank, select_best_head, train_bank

    features = np.asarray(features)
    labels = np.asarray(labels)
    rows = []
    for fraction in drop_spec.fractions:
        for schedule in drop_spec.schedules:
            dp, do = schedule_deltas(schedule, fraction)
            for seed in seeds:
                rng = np.random.default_rng(seed + 7919)
                keep = subsample_drop(labels, drop_spec.classes, fraction, rng)
                sub_f, sub_l = features[keep], labels[keep]
                cfg = replace(bank_config, seed=seed)
                bank = build_bank(sub_f.shape[1], heads_builder(dp, do), cfg)
                history = train_bank(bank, sub_f, None, cfg)
                best = select_best_head(history[-1])
                report = clustering_accuracy(assign_clusters(bank, best, sub_f), sub_l)
                rows.append({
                    "drop": fraction,
                    "schedule": schedule,
                    "seed": seed,
                    "best_head": best,
                    "acc": report.acc,
                    "per_class": report.per_class,
                })
    return rows


def imbalance_csv_rows(rows):
    """Flatten experiment records to (drop%, schedule, class, accuracy)."""
    table = {}
    for row in rows:
        for cls, acc in row["per_class"].items():
            key = (row["drop"], row["schedule"], cls)
            table.setdefault(key, []).append(acc)
    out = []
    for (drop, schedule, cls), accs in sorted(table.items()):
        out.append((int(round(drop * 100)), schedule, cls, f"{np.mean(accs):.4f}"))
    return out
