"""
Synthetic labeled data, non-i.i.d. client partitions and the distributional
heterogeneity (DH) metric.
"""

import json
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .config import ConfigurationError
from .tensor import ContractError, DomainError

logger = logging.getLogger(__name__)

SHARE_LOW = 0.4
SHARE_HIGH = 0.6


def _empty_indices() -> np.ndarray:
    return np.array([], dtype=np.int64)


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ContractError(
                f"inputs {self.inputs.shape} do not match labels {self.labels.shape}"
            )
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise DomainError(f"labels must lie in [0, {self.num_classes})")
        missing = np.setdiff1d(np.arange(self.num_classes), self.labels)
        if missing.size:
            raise ContractError(f"classes without samples: {missing.tolist()}")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def take(self, indices) -> Tuple[np.ndarray, np.ndarray]:
        indices = np.asarray(indices, dtype=np.int64)
        return self.inputs[indices], self.labels[indices]

    def subset(self, indices) -> "LabeledDataset":
        inputs, labels = self.take(indices)
        return LabeledDataset(inputs, labels, self.num_classes)


@dataclass(frozen=True)
class ClassEmbedding:
    """
    Entry j is the fraction of class j's training samples held by one client.
    """

    values: np.ndarray

    def __post_init__(self):
        if np.any(self.values < 0.0) or np.any(self.values > 1.0):
            raise DomainError("embedding entries must lie in [0, 1]")

    def __len__(self):
        return int(self.values.shape[0])


@dataclass(frozen=True)
class Partition:
    """
    Disjoint per-client sample indices and the client x class count matrix.
    """

    assignments: Tuple[np.ndarray, ...]
    class_count_matrix: np.ndarray

    def __post_init__(self):
        if self.class_count_matrix.shape[0] != len(self.assignments):
            raise ContractError(
                f"{len(self.assignments)} clients but count matrix "
                f"{self.class_count_matrix.shape}"
            )
        sizes = self.class_count_matrix.sum(axis=1)
        for client, indices in enumerate(self.assignments):
            if sizes[client] != len(indices):
                raise ContractError(
                    f"client {client}: {len(indices)} indices "
                    f"but {sizes[client]} counted"
                )
        if self.assignments:
            merged = np.concatenate(self.assignments)
        else:
            merged = _empty_indices()
        if np.unique(merged).size != merged.size:
            raise ContractError("client index lists overlap")

    @classmethod
    def from_assignments(
        cls, assignments: Sequence, labels, num_classes: int
    ) -> "Partition":
        labels = np.asarray(labels)
        assignments = tuple(
            np.sort(np.asarray(indices, dtype=np.int64)) for indices in assignments
        )
        matrix = np.zeros((len(assignments), num_classes), dtype=np.int64)
        for client, indices in enumerate(assignments):
            matrix[client] = np.bincount(labels[indices], minlength=num_classes)
        return cls(assignments, matrix)

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    @property
    def num_classes(self) -> int:
        return int(self.class_count_matrix.shape[1])

    def client_classes(self, client: int) -> np.ndarray:
        return np.flatnonzero(self.class_count_matrix[client] > 0)

    def fraction_matrix(self) -> np.ndarray:
        """Client x class matrix of each class's share held by each client."""
        totals = self.class_count_matrix.sum(axis=0)
        safe = np.where(totals > 0, totals, 1)
        return np.where(totals > 0, self.class_count_matrix / safe, 0.0)


def make_blobs(
    num_classes: int, per_class: int, dim: int, spread: float, seed: int
) -> LabeledDataset:
    """
    Isotropic Gaussian blobs. Class j is centered on the hypercube vertex
    {-s, +s}^dim picked by the binary code of j with s = 4 * spread (1 when
    spread is 0), so any two centers are at least 8 * spread apart.
    """
    if num_classes < 2 or per_class < 1:
        raise ContractError(
            f"need >= 2 classes and >= 1 sample per class, "
            f"got {num_classes}, {per_class}"
        )
    bits = max(1, (num_classes - 1).bit_length())
    if dim < bits:
        raise ContractError(f"{num_classes} classes need dim >= {bits}, got {dim}")

    side = 4.0 * spread if spread > 0 else 1.0
    codes = np.zeros((num_classes, dim))
    codes[:, :bits] = (np.arange(num_classes)[:, None] >> np.arange(bits)[None, :]) & 1
    centers = side * (2.0 * codes - 1.0)

    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    inputs = centers[labels] + rng.normal(0.0, spread, size=(labels.size, dim))
    return LabeledDataset(inputs, labels, num_classes)


def partition(
    dataset: LabeledDataset, num_clients: int, classes_per_client: int, seed: int
) -> Partition:
    """
    Give every client ``classes_per_client`` classes, round-robin over a seeded
    class shuffle, then split each class among its holders in proportion to
    shares s ~ U(0.4, 0.6). Shares are floored; the rounding residue goes to
    the holder with the largest draw.
    """
    num_classes = dataset.num_classes
    if not 1 <= classes_per_client <= num_classes:
        raise ConfigurationError(
            f"classes_per_client must lie in [1, {num_classes}], "
            f"got {classes_per_client}"
        )
    if num_clients * classes_per_client < num_classes:
        raise ConfigurationError(
            f"{num_clients} clients x {classes_per_client} classes "
            f"cannot cover {num_classes} classes"
        )

    rng = np.random.default_rng(seed)
    order = rng.permutation(num_classes)
    holders: List[List[int]] = [[] for _ in range(num_classes)]
    for client in range(num_clients):
        for k in range(classes_per_client):
            slot = (client * classes_per_client + k) % num_classes
            holders[order[slot]].append(client)

    assignments: List[List[np.ndarray]] = [[] for _ in range(num_clients)]
    for label in range(num_classes):
        indices = rng.permutation(dataset.class_indices(label))
        draws = rng.uniform(SHARE_LOW, SHARE_HIGH, size=len(holders[label]))
        counts = np.floor(draws / draws.sum() * indices.size).astype(np.int64)
        counts[np.argmax(draws)] += indices.size - counts.sum()
        chunks = np.split(indices, np.cumsum(counts)[:-1])
        for client, chunk in zip(holders[label], chunks):
            assignments[client].append(chunk)

    merged = [
        np.concatenate(chunks) if chunks else _empty_indices()
        for chunks in assignments
    ]
    result = Partition.from_assignments(merged, dataset.labels, num_classes)
    logger.debug(
        f"Partitioned {len(dataset)} samples over {num_clients} clients, "
        f"{classes_per_client} classes each"
    )
    return result


def distributional_heterogeneity(p: Partition) -> float:
    """
    DH = 1 - sum_j c_j / (N * C), where c_j is the number of clients holding
    class j, or 0 when a single client holds it.
    """
    holders = (p.class_count_matrix > 0).sum(axis=0)
    if np.any(holders == 0):
        unheld = np.flatnonzero(holders == 0).tolist()
        raise ContractError(f"classes without holders: {unheld}")
    shared = np.where(holders == 1, 0, holders)
    return float(1.0 - shared.sum() / (p.num_classes * p.num_clients))


def class_embedding(p: Partition, client: int) -> ClassEmbedding:
    if not 0 <= client < p.num_clients:
        raise ContractError(f"no client {client} in a partition of {p.num_clients}")
    return ClassEmbedding(p.fraction_matrix()[client])


def train_test_split_indices(
    dataset: LabeledDataset, fraction: float, seed: int
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Stratified split: each class keeps floor(fraction * n_c + 0.5) samples for
    training and the rest for testing, both sides non-empty.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"split fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in range(dataset.num_classes):
        indices = rng.permutation(dataset.class_indices(label))
        keep = int(np.floor(fraction * indices.size + 0.5))
        if keep < 1 or keep >= indices.size:
            raise ConfigurationError(
                f"class {label} has {indices.size} samples, "
                f"too few to split at {fraction}"
            )
        train.append(indices[:keep])
        test.append(indices[keep:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def train_test_split(
    dataset: LabeledDataset, fraction: float, seed: int
) -> Tuple[LabeledDataset, LabeledDataset]:
    train, test = train_test_split_indices(dataset, fraction, seed)
    return dataset.subset(train), dataset.subset(test)


def save_partition(path: str, p: Partition):
    document = {
        "num_clients": p.num_clients,
        "num_classes": p.num_classes,
        "dh": distributional_heterogeneity(p),
        "clients": {
            str(client): indices.tolist()
            for client, indices in enumerate(p.assignments)
        },
        "class_count_matrix": p.class_count_matrix.tolist(),
        "class_fractions": p.fraction_matrix().tolist(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2)


def load_partition(path: str) -> Partition:
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except (OSError, ValueError) as ex:
        raise ConfigurationError(f"cannot read partition {path}: {ex}") from None
    try:
        clients = document["clients"]
        assignments = tuple(
            np.asarray(clients[str(i)], dtype=np.int64) for i in range(len(clients))
        )
        matrix = np.asarray(document["class_count_matrix"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as ex:
        raise ConfigurationError(f"malformed partition {path}: {ex!r}") from None
    return Partition(assignments, matrix)
