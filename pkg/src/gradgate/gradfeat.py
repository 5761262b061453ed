"""Gradient-norm input representations elicited by confounding labels.

A confounding label is a target vector the classifier never saw in
training (the default is all ones over the classes). Scoring a sample
means computing binary cross-entropy between the sample's logits and the
confounding label, backpropagating, and recording the squared L2 norm of
the gradient for every parameter set in ordinal order. Inputs the model
represents poorly need larger parameter updates, so their gradient norms
sit in visibly different ranges than training-like inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import storage
from .autodiff import Tensor, as_tensor, backward, bce_with_logits

UNLABELED = -1


class FeatureError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConfoundingLabel:
    """A {0,1} target vector that matches no one-hot training label."""

    vector: np.ndarray
    descriptor: str

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all((v == 0.0) | (v == 1.0)):
            raise ValueError("confounding label must be a flat 0/1 vector")
        if v.sum() == 1.0:
            raise ValueError("a one-hot vector is a seen training label, not confounding")
        object.__setattr__(self, "vector", v)


LABEL_KINDS = ("all-ones", "all-zeros", "k-hot")


def make_confounding_label(num_classes: int, kind: str = "all-ones",
                           k: int | None = None, seed: int = 0) -> ConfoundingLabel:
    """Build a confounding label over ``num_classes`` classes.

    ``all-ones`` is the default used throughout; the alternatives exist for
    ablation. ``k-hot`` requires 2 <= k <= num_classes since a single-hot
    vector would coincide with a training label.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if kind == "all-ones":
        return ConfoundingLabel(np.ones(num_classes), "all-ones")
    if kind == "all-zeros":
        return ConfoundingLabel(np.zeros(num_classes), "all-zeros")
    if kind == "k-hot":
        if k is None or not (2 <= k <= num_classes):
            raise ValueError("k-hot requires 2 <= k <= num_classes")
        rng = np.random.default_rng(seed)
        vec = np.zeros(num_classes)
        vec[rng.choice(num_classes, size=k, replace=False)] = 1.0
        return ConfoundingLabel(vec, f"k-hot-{k}-seed{seed}")
    raise ValueError(f"unknown confounding label kind {kind!r}")


def bce_confounding_loss(logits, label) -> Tensor:
    """Mean binary cross-entropy between sigmoid(logits) and the label.

    Accepts (N,) or (batch, N) logits; evaluated in saturating form, so
    finite logits never produce a non-finite loss.
    """
    t = as_tensor(logits)
    vec = label.vector if isinstance(label, ConfoundingLabel) else np.asarray(label, dtype=np.float64)
    if t.data.ndim == 1:
        targets = vec
    elif t.data.ndim == 2:
        targets = np.broadcast_to(vec, t.data.shape)
    else:
        targets = vec  # let the op report the shape mismatch
    return bce_with_logits(t, targets)


@dataclass
class FeatureSet:
    """A batch of per-sample feature vectors with row-level provenance."""

    values: np.ndarray               # (n, P)
    sample_ids: np.ndarray           # (n,) int
    anomaly_labels: np.ndarray       # (n,) int in {0, 1, -1}
    tags: list                       # source tag per row
    feature_names: list = field(default_factory=list)
    label_descriptor: str = ""

    def __len__(self) -> int:
        return len(self.values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def subset(self, indices) -> "FeatureSet":
        idx = np.asarray(indices)
        return FeatureSet(self.values[idx], self.sample_ids[idx], self.anomaly_labels[idx],
                          [self.tags[i] for i in idx], self.feature_names, self.label_descriptor)

    def with_anomaly_label(self, label: int) -> "FeatureSet":
        return FeatureSet(self.values, self.sample_ids,
                          np.full(len(self), label, dtype=np.int64),
                          list(self.tags), self.feature_names, self.label_descriptor)


def concat_features(sets) -> FeatureSet:
    sets = list(sets)
    dims = {fs.dim for fs in sets}
    if len(dims) != 1:
        raise FeatureError(f"cannot concatenate feature sets of dims {sorted(dims)}")
    return FeatureSet(
        np.concatenate([fs.values for fs in sets]),
        np.concatenate([fs.sample_ids for fs in sets]),
        np.concatenate([fs.anomaly_labels for fs in sets]),
        [t for fs in sets for t in fs.tags],
        sets[0].feature_names,
        sets[0].label_descriptor,
    )


def extract_gradient_features(model, images: np.ndarray, label: ConfoundingLabel,
                              source_tag: str = "") -> FeatureSet:
    """Per-parameter-set squared gradient norms of the confounding loss.

    Each sample gets its own single-sample graph; parameters are read-only
    throughout, so extraction may be distributed over samples freely.
    """
    n = len(images)
    names = model.param_names()
    values = np.empty((n, len(names)))
    for i in range(n):
        logits, _ = model.forward(images[i:i + 1])
        loss = bce_confounding_loss(logits, label)
        grads = backward(loss)
        for p, ps in enumerate(model.params):
            g = grads[ps.tensor]
            values[i, p] = float(np.dot(g.reshape(-1), g.reshape(-1)))
        if not np.all(np.isfinite(values[i])):
            raise FeatureError(f"non-finite gradient feature for sample {i} ({source_tag})")
    return FeatureSet(values, np.arange(n), np.full(n, UNLABELED, dtype=np.int64),
                      [source_tag] * n, names, label.descriptor)


def extract_activation_features(model, images: np.ndarray, source_tag: str = "",
                                batch_size: int = 256) -> FeatureSet:
    """Per-layer L2 norms of the post-nonlinearity outputs (forward only)."""
    n = len(images)
    chunks = []
    for start in range(0, n, batch_size):
        _, acts = model.forward(images[start:start + batch_size])
        per_layer = [np.sqrt((a.data.reshape(len(a.data), -1) ** 2).sum(axis=1)) for a in acts]
        chunks.append(np.stack(per_layer, axis=1))
    values = np.concatenate(chunks)
    names = [f"layer{i}" for i in range(len(model.arch.layers))]
    return FeatureSet(values, np.arange(n), np.full(n, UNLABELED, dtype=np.int64),
                      [source_tag] * n, names, "")


def norm_summary(values: np.ndarray, tags) -> dict:
    """Exact order statistics (min, quartiles, max) per feature per tag."""
    values = np.asarray(values, dtype=np.float64)
    tags = list(tags)
    if len(values) == 0 or len(tags) != len(values):
        raise ValueError("norm_summary needs one tag per nonempty row")
    summary: dict = {}
    for tag in dict.fromkeys(tags):  # first-seen order
        rows = values[[i for i, t in enumerate(tags) if t == tag]]
        if len(rows) == 0:
            raise ValueError(f"empty group {tag!r}")
        stats = []
        for j in range(values.shape[1]):
            col = rows[:, j]
            q1, med, q3 = np.quantile(col, [0.25, 0.5, 0.75])
            stats.append((float(col.min()), float(q1), float(med), float(q3), float(col.max())))
        summary[tag] = stats
    return summary


CSV_FIXED_COLUMNS = ("sample_id", "anomaly_label", "source_tag")


def save_features_csv(fs: FeatureSet, path) -> None:
    """Write ``sample_id,anomaly_label,source_tag,f0..f{P-1}`` rows; floats
    carry 17 significant digits so parse -> serialize is byte-identical."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(CSV_FIXED_COLUMNS) + [f"f{j}" for j in range(fs.dim)])
        for i in range(len(fs)):
            row = [str(int(fs.sample_ids[i])), str(int(fs.anomaly_labels[i])), fs.tags[i]]
            row += [storage.fmt_float(v) for v in fs.values[i]]
            writer.writerow(row)


def load_features_csv(path) -> FeatureSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:3]) != CSV_FIXED_COLUMNS:
            raise FeatureError(f"{path}: not a feature CSV (header {header})")
        dim = len(header) - 3
        ids, labels, tags, rows = [], [], [], []
        for row in reader:
            if len(row) != dim + 3:
                raise FeatureError(f"{path}: row with {len(row)} fields, expected {dim + 3}")
            ids.append(int(row[0]))
            labels.append(int(row[1]))
            tags.append(row[2])
            rows.append([float(v) for v in row[3:]])
    values = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return FeatureSet(values, np.array(ids), np.array(labels, dtype=np.int64), tags,
                      [f"f{j}" for j in range(dim)], "")
