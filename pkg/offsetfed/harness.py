"""
Experiment orchestration: build a federation from an ExperimentConfig, run the
dispatch / local training / aggregation / evaluation loop for R rounds, and
write metrics, logs, the partition and the final checkpoint.
"""

import logging
import os
from concurrent import futures
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import datagen, dualnet
from .client import ClientState, evaluate_local, local_round
from .config import (
    ConfigurationError,
    ExperimentConfig,
    Mode,
    Strategy,
    SweepAxis,
    write_config_file,
)
from .datagen import ClassEmbedding, LabeledDataset, Partition
from .dualnet import Alpha, ModelParams, Offset
from .server import FedServer, ServerRoundLog
from .tensor import ContractError
from .util import SimUtil

logger = logging.getLogger(__name__)

GLOBAL_ROW = -1
CONFIG_FILE = "config.txt"
METRICS_HEADER = [
    "round",
    "client",
    "train_loss",
    "test_acc",
    "dh",
    "strategy",
    "bytes_up",
    "bytes_down",
]
SERVER_HEADER = [
    "round",
    "dh",
    "strategy",
    "aggregator_loss_initial",
    "aggregator_loss_final",
]
STEPS_HEADER = ["round", "client", "epoch", "batch", "phase", "loss"]
OVERHEAD_HEADER = [
    "single_channel_bytes",
    "weight_bytes",
    "offset_bytes",
    "delta_percent",
]
SWEEP_HEADER = ["value", "final_accuracy", "dh", "strategy"]
DEFAULT_OVERHEAD_SHAPE = (64, 64, 3)
DEFAULT_OVERHEAD_CLASSES = 10

# seed stream keys
_SPLIT, _PARTITION, _MODEL, _CLIENT, _NEGATIVES, _AGGREGATOR = range(1, 7)


@dataclass
class RoundRecord:
    round: int
    train_losses: List[float]
    client_accuracies: List[float]
    test_acc: float
    dh: float
    strategy: Strategy
    bytes_up: List[int]
    bytes_down: List[int]


@dataclass
class Federation:
    """Everything a run needs, built deterministically from one config."""

    config: ExperimentConfig
    train: LabeledDataset
    test: LabeledDataset
    partition: Partition
    dh: float
    embeddings: List[ClassEmbedding]
    clients: List[ClientState]
    test_sets: List[Tuple[np.ndarray, np.ndarray]]
    server: FedServer
    alpha: Alpha


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    dh: float
    partition: Partition
    records: List[RoundRecord]
    server_log: List[ServerRoundLog]
    final_model: ModelParams
    final_offsets: List[Offset]
    steps: List[tuple] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].test_acc


@dataclass(frozen=True)
class OverheadReport:
    single_channel_bytes: int
    weight_bytes: int
    offset_bytes: int
    delta_percent: float


def build_partition(
    cfg: ExperimentConfig,
) -> Tuple[LabeledDataset, LabeledDataset, Partition]:
    """
    Blobs dataset, stratified train/test split, and the client partition of
    the training split (generated, or loaded from ``partition_path``).
    Partition indices refer to the training split.
    """
    try:
        dataset = datagen.make_blobs(
            cfg.num_classes, cfg.per_class, cfg.dim, cfg.spread, cfg.seed
        )
    except ContractError as ex:
        raise ConfigurationError(str(ex)) from None
    train, test = datagen.train_test_split(
        dataset, cfg.train_fraction, SimUtil.derive_seed(cfg.seed, _SPLIT)
    )
    if cfg.partition_path is None:
        p = datagen.partition(
            train,
            cfg.num_clients,
            cfg.classes_per_client,
            SimUtil.derive_seed(cfg.seed, _PARTITION),
        )
        return train, test, p

    loaded = datagen.load_partition(cfg.partition_path)
    if loaded.num_clients != cfg.num_clients or loaded.num_classes != cfg.num_classes:
        raise ConfigurationError(
            f"partition {cfg.partition_path} has {loaded.num_clients} clients and "
            f"{loaded.num_classes} classes, config asks for {cfg.num_clients} and "
            f"{cfg.num_classes}"
        )
    merged = np.concatenate(loaded.assignments)
    if merged.size and (merged.min() < 0 or merged.max() >= len(train)):
        raise ConfigurationError(
            f"partition {cfg.partition_path} indexes outside the training split"
        )
    recounted = Partition.from_assignments(
        loaded.assignments, train.labels, cfg.num_classes
    )
    if not np.array_equal(recounted.class_count_matrix, loaded.class_count_matrix):
        raise ConfigurationError(
            f"partition {cfg.partition_path} does not match this dataset"
        )
    return train, test, recounted


def _client_test_set(test: LabeledDataset, classes: np.ndarray):
    mask = np.isin(test.labels, classes)
    return test.inputs[mask], test.labels[mask]


def _with_negatives(test: LabeledDataset, classes: np.ndarray, rng, client: int):
    """
    The client's own test samples plus as many other-class samples, the
    latter labeled REJECT.
    """
    inputs, labels = _client_test_set(test, classes)
    others = np.flatnonzero(~np.isin(test.labels, classes))
    if others.size == 0:
        logger.warning(f"Client {client} holds every class, no negative samples")
        return inputs, labels
    picks = rng.choice(others, size=labels.size, replace=others.size < labels.size)
    negatives = np.full(picks.size, dualnet.REJECT, dtype=labels.dtype)
    return (
        np.concatenate([inputs, test.inputs[picks]]),
        np.concatenate([labels, negatives]),
    )


def build_federation(cfg: ExperimentConfig) -> Federation:
    cfg = cfg.resolved()
    train, test, partition = build_partition(cfg)
    dh = datagen.distributional_heterogeneity(partition)
    embeddings = [datagen.class_embedding(partition, i) for i in range(cfg.num_clients)]
    alpha = Alpha(cfg.alpha)
    offset_shape = train.input_shape

    clients = []
    for i, indices in enumerate(partition.assignments):
        if indices.size == 0:
            raise ConfigurationError(f"client {i} received no training samples")
        inputs, labels = train.take(indices)
        seed = SimUtil.derive_seed(cfg.seed, _CLIENT, i)
        clients.append(ClientState(i, inputs, labels, Offset.zeros(offset_shape), seed))

    rng = np.random.default_rng(SimUtil.derive_seed(cfg.seed, _NEGATIVES))
    test_sets = []
    for i in range(cfg.num_clients):
        classes = partition.client_classes(i)
        if cfg.negative_eval:
            test_sets.append(_with_negatives(test, classes, rng, i))
        else:
            test_sets.append(_client_test_set(test, classes))

    model = dualnet.init_params(
        cfg.dim,
        cfg.num_classes,
        cfg.hidden,
        cfg.dense_width,
        cfg.channels,
        SimUtil.derive_seed(cfg.seed, _MODEL),
    )
    server = FedServer(
        model,
        embeddings,
        offset_shape,
        dh,
        cfg.dh_threshold,
        cfg.strategy,
        cfg.aggregator_hidden,
        cfg.aggregator_lr,
        cfg.aggregator_steps,
        cfg.aggregator_warm_start,
        SimUtil.derive_seed(cfg.seed, _AGGREGATOR),
    )
    return Federation(
        cfg, train, test, partition, dh, embeddings, clients, test_sets, server, alpha
    )


def _payload_bytes(cfg: ExperimentConfig, model: ModelParams, offset: Offset) -> int:
    offset_bytes = 0 if cfg.mode == Mode.FEDAVG else dualnet.offset_nbytes(offset)
    return dualnet.model_nbytes(model.tensors()) + offset_bytes


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """
    Run R rounds of the protocol. Clients of a round train on a pool of
    ``cfg.workers`` threads; aggregation, evaluation and bookkeeping happen
    after all results of the round are in, in client order.
    """
    fed = build_federation(cfg)
    cfg = fed.config
    server = fed.server
    payload = _payload_bytes(cfg, server.global_model, fed.clients[0].offset)
    logger.info(
        f"Running {cfg.mode.value}: {cfg.num_clients} clients, {cfg.rounds} rounds, "
        f"DH {fed.dh:.3f}, offset strategy {server.strategy.value}"
    )

    records, server_log, steps = [], [], []
    with futures.ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        for r in range(cfg.rounds):
            jobs = []
            for client in fed.clients:
                model, offset = server.dispatch(client.client_id)
                jobs.append(
                    pool.submit(
                        local_round,
                        client,
                        model,
                        offset,
                        cfg.sgd,
                        cfg.epochs,
                        fed.alpha,
                        r,
                        cfg.step_log,
                    )
                )
            results = [job.result() for job in jobs]
            server_log.append(server.aggregate(r, results))

            for client, offset in zip(fed.clients, server.per_client_offsets):
                client.offset = offset
            accuracies = [
                evaluate_local(
                    client, server.global_model, fed.alpha, test_set, cfg.negative_eval
                )
                for client, test_set in zip(fed.clients, fed.test_sets)
            ]
            record = RoundRecord(
                r,
                [result.mean_train_loss for result in results],
                accuracies,
                float(np.mean(accuracies)),
                fed.dh,
                server.strategy,
                [payload] * cfg.num_clients,
                [payload] * cfg.num_clients,
            )
            records.append(record)
            for result in results:
                for step in result.steps:
                    steps.append(
                        (
                            r,
                            result.client_id,
                            step.epoch,
                            step.batch,
                            step.phase,
                            step.loss,
                        )
                    )
            SimUtil.write_debug(
                cfg,
                {
                    "round": r,
                    "train_losses": record.train_losses,
                    "accuracies": accuracies,
                    "offset_norms": [
                        float(np.linalg.norm(client.offset.t.data))
                        for client in fed.clients
                    ],
                },
                f"round_{r:04d}.json",
            )
            logger.info(
                f"Round {r + 1}/{cfg.rounds}: "
                f"train loss {np.mean(record.train_losses):.4f}, "
                f"test accuracy {record.test_acc:.4f}"
            )

    result = ExperimentResult(
        cfg,
        fed.dh,
        fed.partition,
        records,
        server_log,
        server.global_model,
        list(server.per_client_offsets),
        steps,
    )
    if cfg.output_dir is not None:
        write_outputs(result)
    return result


def metrics_rows(records: Sequence[RoundRecord]) -> List[list]:
    """Per-client rows, then one global row (client -1) per round."""
    fmt = SimUtil.format_float
    rows = []
    for record in records:
        strategy = record.strategy.value
        for client, (loss, acc) in enumerate(
            zip(record.train_losses, record.client_accuracies)
        ):
            rows.append(
                [
                    record.round,
                    client,
                    fmt(loss),
                    fmt(acc),
                    fmt(record.dh),
                    strategy,
                    record.bytes_up[client],
                    record.bytes_down[client],
                ]
            )
        rows.append(
            [
                record.round,
                GLOBAL_ROW,
                fmt(np.mean(record.train_losses)),
                fmt(record.test_acc),
                fmt(record.dh),
                strategy,
                sum(record.bytes_up),
                sum(record.bytes_down),
            ]
        )
    return rows


def write_outputs(result: ExperimentResult):
    cfg = result.config
    fmt = SimUtil.format_float
    out = os.path.dirname(cfg.metrics_path)
    SimUtil.ensure_dir(out)
    write_config_file(os.path.join(out, CONFIG_FILE), cfg)
    datagen.save_partition(cfg.partition_export_path, result.partition)
    SimUtil.write_csv(cfg.metrics_path, METRICS_HEADER, metrics_rows(result.records))
    SimUtil.write_csv(
        cfg.server_log_path,
        SERVER_HEADER,
        [
            [
                log.round,
                fmt(log.dh),
                log.strategy.value,
                fmt(log.aggregator_loss_initial),
                fmt(log.aggregator_loss_final),
            ]
            for log in result.server_log
        ],
    )
    if cfg.step_log:
        SimUtil.write_csv(
            cfg.steps_path,
            STEPS_HEADER,
            [
                [r, c, e, b, phase, fmt(loss)]
                for r, c, e, b, phase, loss in result.steps
            ],
        )
    dualnet.save_checkpoint(
        cfg.checkpoint_dir,
        result.final_model,
        Alpha(cfg.alpha),
        result.final_offsets,
    )
    logger.info(f"Wrote metrics and checkpoint to {cfg.output_dir}")


def communication_overhead(params: ModelParams, offset: Offset) -> OverheadReport:
    """
    Bytes on the wire for the double-channel weights and the offset, and the
    percentage they add over the single-channel variant of the same backbone.
    """
    single = dualnet.model_nbytes(dualnet.single_channel_variant(params).tensors())
    weights = dualnet.model_nbytes(params.tensors())
    offset_bytes = dualnet.offset_nbytes(offset)
    delta = (weights + offset_bytes - single) / single * 100.0
    return OverheadReport(single, weights, offset_bytes, delta)


def overhead_for_shape(
    input_shape: Sequence[int] = DEFAULT_OVERHEAD_SHAPE,
    num_classes: int = DEFAULT_OVERHEAD_CLASSES,
    hidden: Sequence[int] = dualnet.DEFAULT_HIDDEN,
    dense_width: int = dualnet.DEFAULT_DENSE_WIDTH,
) -> OverheadReport:
    """Overhead of an MLP over flattened samples of ``input_shape``."""
    input_dim = int(np.prod(input_shape, dtype=np.int64))
    params = dualnet.zero_params(input_dim, num_classes, hidden, dense_width)
    return communication_overhead(params, Offset.zeros(tuple(input_shape)))


def write_overhead_csv(path: str, report: OverheadReport):
    SimUtil.write_csv(
        path,
        OVERHEAD_HEADER,
        [
            [
                report.single_channel_bytes,
                report.weight_bytes,
                report.offset_bytes,
                SimUtil.format_float(report.delta_percent),
            ]
        ],
    )


@dataclass(frozen=True)
class SweepRow:
    value: str
    final_accuracy: float
    dh: float
    strategy: str


def sweep_config(base: ExperimentConfig, axis, value) -> ExperimentConfig:
    """``base`` with the swept field set to ``value`` (a string or typed value)."""
    axis = SweepAxis(axis)
    try:
        if axis == SweepAxis.ALPHA:
            return base.replace(alpha=float(value))
        if axis == SweepAxis.EPOCHS:
            return base.replace(epochs=int(value))
        if axis == SweepAxis.STRATEGY:
            return base.replace(strategy=Strategy(value))
        if axis == SweepAxis.CLASSES_PER_CLIENT:
            return base.replace(classes_per_client=int(value))
        if axis == SweepAxis.CLIENTS:
            return base.replace(num_clients=int(value))
        channels = str(value).strip().lower()
        if channels in ("single", "1"):
            return base.replace(mode=Mode.SINGLE_CHANNEL)
        if channels in ("double", "2"):
            return base.replace(mode=Mode.DISTRANS)
        raise ConfigurationError(f"channels must be single or double, got {value!r}")
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as ex:
        raise ConfigurationError(f"bad {axis.value} value {value!r}: {ex}") from None


def ablation_sweep(
    base: ExperimentConfig, axis, values: Sequence, path: Optional[str] = None
) -> List[SweepRow]:
    """
    One run per value, all sharing the base seed. The table goes to ``path``,
    or to ``sweep_<axis>.csv`` in the base output directory.
    """
    axis = SweepAxis(axis)
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    configs = [sweep_config(base, axis, value) for value in values]

    rows = []
    for value, cfg in zip(values, configs):
        if base.output_dir is not None:
            run_dir = os.path.join(base.output_dir, f"{axis.value}_{value}")
            cfg = cfg.replace(output_dir=run_dir)
        logger.info(f"Sweep {axis.value} = {value}")
        result = run_experiment(cfg)
        rows.append(
            SweepRow(
                str(value),
                result.final_accuracy,
                result.dh,
                result.records[-1].strategy.value,
            )
        )

    if path is None and base.output_dir is not None:
        SimUtil.ensure_dir(base.output_dir)
        path = os.path.join(base.output_dir, f"sweep_{axis.value}.csv")
    if path is not None:
        fmt = SimUtil.format_float
        SimUtil.write_csv(
            path,
            SWEEP_HEADER,
            [
                [row.value, fmt(row.final_accuracy), fmt(row.dh), row.strategy]
                for row in rows
            ],
        )
    return rows
