"""Trainable model, synthetic data, and the centralized training oracle.

The model is multinomial logistic regression without an intercept: a flat
parameter vector of length feature_dim * class_count, interpreted as the
(class_count, feature_dim) weight matrix in row-major order. Training is
deterministic full-batch gradient descent, so identical seeds and configs
reproduce results bit for bit on a given kernel backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fogsim import kernels
from fogsim.errors import ConfigError, DataError


@dataclass
class Dataset:
    """Labeled samples held by one node.

    features: (n, feature_dim) float64, labels: (n,) int64 in [0, class_count).
    Treated as immutable; operations that change contents build new instances.
    """

    features: np.ndarray
    labels: np.ndarray
    owner: int | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise DataError("features must be 2-D and labels 1-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError("features and labels disagree on sample count")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], owner=self.owner)

    def without(self, indices) -> "Dataset":
        mask = np.ones(len(self), dtype=bool)
        mask[np.asarray(indices, dtype=np.int64)] = False
        return Dataset(self.features[mask], self.labels[mask], owner=self.owner)

    def extend(self, other: "Dataset") -> "Dataset":
        """New dataset with other's samples appended after the existing ones."""
        if len(other) == 0:
            return Dataset(self.features, self.labels, owner=self.owner)
        return Dataset(
            np.concatenate([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            owner=self.owner,
        )

    def label_histogram(self, class_count: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=class_count).astype(np.float64)

    @staticmethod
    def empty(feature_dim: int, owner: int | None = None) -> "Dataset":
        return Dataset(
            np.empty((0, feature_dim), dtype=np.float64),
            np.empty(0, dtype=np.int64),
            owner=owner,
        )

    @staticmethod
    def concatenate(parts: list["Dataset"], owner: int | None = None) -> "Dataset":
        nonempty = [p for p in parts if len(p) > 0]
        if not nonempty:
            raise DataError("cannot pool zero samples")
        return Dataset(
            np.concatenate([p.features for p in nonempty]),
            np.concatenate([p.labels for p in nonempty]),
            owner=owner,
        )


@dataclass
class LossReport:
    loss: float
    accuracy: float
    sample_count: int


def init_model(feature_dim: int, class_count: int) -> np.ndarray:
    """All-zeros parameter vector of length feature_dim * class_count."""
    if feature_dim < 1:
        raise ConfigError("feature_dim must be >= 1")
    if class_count < 2:
        raise ConfigError("class_count must be >= 2")
    return np.zeros(feature_dim * class_count, dtype=np.float64)


def _check_batch(params: np.ndarray, data: Dataset):
    if len(data) == 0:
        raise DataError("empty batch")
    if params.size % data.feature_dim != 0:
        raise DataError(
            f"parameter length {params.size} does not match feature_dim {data.feature_dim}"
        )


def compute_gradient(params: np.ndarray, batch: Dataset) -> np.ndarray:
    """Mean cross-entropy gradient over the batch, same length as params."""
    _check_batch(params, batch)
    _, grad = kernels.softmax_loss_grad(
        np.ascontiguousarray(params, dtype=np.float64), batch.features, batch.labels
    )
    return np.asarray(grad)


def compute_loss(params: np.ndarray, batch: Dataset) -> float:
    _check_batch(params, batch)
    loss, _ = kernels.softmax_loss_grad(
        np.ascontiguousarray(params, dtype=np.float64), batch.features, batch.labels
    )
    return float(loss)


def local_update(params: np.ndarray, data: Dataset, steps: int, lr: float) -> np.ndarray:
    """Apply full-batch gradient descent steps with a fixed step size.

    An empty dataset is the passive-device case: the parameters are returned
    unchanged and the caller is responsible for flagging the device.
    """
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    if lr <= 0:
        raise ConfigError("lr must be > 0")
    if len(data) == 0 or steps == 0:
        return np.array(params, dtype=np.float64, copy=True)
    _check_batch(params, data)
    out = kernels.gd_steps(
        np.ascontiguousarray(params, dtype=np.float64),
        data.features,
        data.labels,
        int(steps),
        float(lr),
    )
    return np.asarray(out)


def evaluate(params: np.ndarray, data: Dataset) -> LossReport:
    """Mean cross-entropy (nats) and argmax accuracy; ties go to the lowest class."""
    if len(data) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    _check_batch(params, data)
    loss, correct = kernels.eval_loss_correct(
        np.ascontiguousarray(params, dtype=np.float64), data.features, data.labels
    )
    return LossReport(loss=float(loss), accuracy=correct / len(data), sample_count=len(data))


def centralized_train(
    all_data: Dataset, rounds: int, steps: int, lr: float, class_count: int | None = None
) -> np.ndarray:
    """Full-batch gradient descent on the pooled dataset for rounds*steps steps."""
    if len(all_data) == 0:
        raise DataError("cannot train on an empty dataset")
    if rounds < 0:
        raise ConfigError("rounds must be >= 0")
    if class_count is None:
        class_count = max(int(all_data.labels.max()) + 1, 2)
    params = init_model(all_data.feature_dim, class_count)
    return local_update(params, all_data, rounds * steps, lr)


@dataclass
class PartitionSet:
    device_data: list[Dataset]
    test_data: Dataset
    class_means: np.ndarray = field(repr=False)


def generate_partitions(
    device_count: int,
    samples_per_device: int,
    feature_dim: int,
    class_count: int,
    dirichlet_alpha: float,
    seed: int,
    test_samples: int = 1000,
    class_separation: float = 2.0,
) -> PartitionSet:
    """Synthetic non-IID partitions.

    Features are unit-variance Gaussian clusters around one mean per class;
    each device's label mix is drawn from a symmetric Dirichlet, so small
    alpha concentrates a device on few classes and large alpha approaches the
    uniform global mix. The held-out test set draws labels uniformly.
    """
    if min(device_count, samples_per_device, feature_dim, test_samples) < 1:
        raise ConfigError("all counts must be positive")
    if class_count < 2:
        raise ConfigError("class_count must be >= 2")
    if dirichlet_alpha <= 0:
        raise ConfigError("dirichlet_alpha must be > 0")

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0DA7A]))
    means = rng.normal(0.0, 1.0, size=(class_count, feature_dim)) * class_separation

    def draw(labels: np.ndarray, owner: int | None) -> Dataset:
        feats = means[labels] + rng.normal(0.0, 1.0, size=(labels.size, feature_dim))
        return Dataset(feats, labels, owner=owner)

    def apportion(mix: np.ndarray, total: int) -> np.ndarray:
        """Largest-remainder counts so the histogram tracks the mix exactly."""
        ideal = mix * total
        counts = np.floor(ideal).astype(np.int64)
        remainder = ideal - counts
        short = total - counts.sum()
        for c in np.argsort(-remainder, kind="stable")[:short]:
            counts[c] += 1
        return counts

    device_data = []
    for dev in range(device_count):
        mix = rng.dirichlet(np.full(class_count, dirichlet_alpha))
        counts = apportion(mix, samples_per_device)
        labels = np.repeat(np.arange(class_count, dtype=np.int64), counts)
        labels = rng.permutation(labels)
        device_data.append(draw(labels, owner=dev))

    test_labels = rng.integers(0, class_count, size=test_samples, dtype=np.int64)
    test_data = draw(test_labels, owner=None)
    return PartitionSet(device_data=device_data, test_data=test_data, class_means=means)


def distribution_similarity(local: Dataset, global_: Dataset) -> float:
    """1 minus the total-variation distance between the label histograms."""
    if len(local) == 0 or len(global_) == 0:
        raise DataError("similarity requires nonempty datasets")
    classes = int(max(local.labels.max(), global_.labels.max())) + 1
    p = local.label_histogram(classes)
    q = global_.label_histogram(classes)
    p /= p.sum()
    q /= q.sum()
    return float(1.0 - 0.5 * np.abs(p - q).sum())
