"""
Central aggregation: the global model is the mean of the clients' models; the
clients' offsets are kept, averaged, or passed through a learned regression
network, depending on the distributional heterogeneity of the federation.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .client import LocalRoundResult
from .config import Strategy
from .datagen import ClassEmbedding
from .dualnet import ModelParams, Offset
from .tensor import ContractError, DomainError, ShapeError, Tensor, TrainingAborted

logger = logging.getLogger(__name__)

DEFAULT_DH_THRESHOLD = 0.5
DIVERGENCE_LIMIT = 1e6


def _anchored_mean(arrays: Sequence[np.ndarray]) -> np.ndarray:
    # mean written as a[0] + mean(a - a[0]) so identical inputs come back exactly
    stack = np.stack(arrays)
    return stack[0] + (stack - stack[0]).sum(axis=0) / len(arrays)


def aggregate_models(models: Sequence[ModelParams]) -> ModelParams:
    """Elementwise mean of every parameter tensor."""
    if not models:
        raise ContractError("no models to aggregate")
    first = models[0]
    shapes = [tensor.shape for tensor in first.tensors()]
    for i, model in enumerate(models[1:], start=1):
        model_shapes = [t.shape for t in model.tensors()]
        if model.channels != first.channels or model_shapes != shapes:
            raise ShapeError(f"model {i} does not match the shapes of model 0")
    columns = zip(*(model.tensors() for model in models))
    return first.with_tensors(
        [Tensor._wrap(_anchored_mean([t.data for t in column])) for column in columns]
    )


def aggregate_offsets_average(offsets: Sequence[Offset]) -> Offset:
    if not offsets:
        raise ContractError("no offsets to aggregate")
    shape = offsets[0].shape
    if any(offset.shape != shape for offset in offsets):
        raise ShapeError("offsets differ in shape")
    return Offset(Tensor._wrap(_anchored_mean([offset.t.data for offset in offsets])))


def select_strategy(dh: float, threshold: float, requested) -> Strategy:
    """
    Explicit requests win. ``auto`` aggregates with the network only while
    DH is strictly below the threshold.
    """
    requested = Strategy(requested)
    if not 0.0 <= dh <= 1.0 or not 0.0 <= threshold <= 1.0:
        raise DomainError(f"dh {dh} and threshold {threshold} must lie in [0, 1]")
    if requested != Strategy.AUTO:
        return requested
    return Strategy.NN if dh < threshold else Strategy.NONE


@dataclass(frozen=True)
class AggregatorFit:
    initial_loss: float
    final_loss: float
    steps: int


class OffsetAggregatorNet:
    """
    Maps a client's (class embedding e, offset t) to its aggregated offset:

        t' = t + relu([t, e] W1 + b1) W2 + b2

    W2 and b2 start at zero, so an untrained net hands every offset back
    unchanged.
    """

    def __init__(
        self,
        offset_shape,
        num_classes: int,
        hidden: int = 64,
        seed: int = 0,
        tensors=None,
    ):
        self.offset_shape = tuple(offset_shape)
        self.num_classes = num_classes
        self.hidden = hidden
        self.seed = seed
        self.last_fit: Optional[AggregatorFit] = None
        if tensors is None:
            rng = np.random.default_rng(seed)
            fan_in = self.offset_dim + num_classes
            tensors = [
                Tensor(rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, hidden))),
                Tensor.zeros((hidden,)),
                Tensor.zeros((hidden, self.offset_dim)),
                Tensor.zeros((self.offset_dim,)),
            ]
        self.w1, self.b1, self.w2, self.b2 = tensors

    @property
    def offset_dim(self) -> int:
        return int(np.prod(self.offset_shape, dtype=np.int64))

    def tensors(self) -> List[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def with_tensors(self, tensors) -> "OffsetAggregatorNet":
        return OffsetAggregatorNet(
            self.offset_shape, self.num_classes, self.hidden, self.seed, list(tensors)
        )

    def fresh(self) -> "OffsetAggregatorNet":
        return OffsetAggregatorNet(
            self.offset_shape, self.num_classes, self.hidden, self.seed
        )

    def _regress(self, tensors, embeddings: np.ndarray, offsets) -> Tensor:
        w1, b1, w2, b2 = tensors
        inputs = T.concat([offsets, Tensor(embeddings)], axis=1)
        residual = T.add(T.matmul(T.relu(T.add(T.matmul(inputs, w1), b1)), w2), b2)
        return T.add(offsets, residual)

    def _stack(
        self, embeddings: Sequence[ClassEmbedding], offsets: Sequence[Offset]
    ) -> Tuple[np.ndarray, Tensor]:
        if len(embeddings) != len(offsets):
            raise ContractError(
                f"{len(embeddings)} embeddings for {len(offsets)} offsets"
            )
        for embedding in embeddings:
            if len(embedding) != self.num_classes:
                raise ShapeError(
                    f"embedding of length {len(embedding)}, expected {self.num_classes}"
                )
        for offset in offsets:
            if offset.shape != self.offset_shape:
                raise ShapeError(f"offset {offset.shape}, expected {self.offset_shape}")
        e = np.stack([embedding.values for embedding in embeddings]).astype(np.float64)
        t = Tensor._wrap(np.stack([offset.t.data.reshape(-1) for offset in offsets]))
        return e, t

    def apply(
        self, embeddings: Sequence[ClassEmbedding], offsets: Sequence[Offset]
    ) -> List[Offset]:
        e, t = self._stack(embeddings, offsets)
        out = self._regress(self.tensors(), e, t).data
        return [Offset(Tensor(row.reshape(self.offset_shape))) for row in out]

    def __call__(self, embedding: ClassEmbedding, offset: Offset) -> Offset:
        return self.apply([embedding], [offset])[0]


def _regression_loss(net, tensors, embeddings, inputs, targets) -> Tensor:
    return T.row_norms_sum(T.sub(net._regress(tensors, embeddings, inputs), targets))


def train_aggregator(
    net: OffsetAggregatorNet,
    pairs: Sequence[Tuple[ClassEmbedding, Offset, Offset]],
    lr: float,
    steps: int,
) -> OffsetAggregatorNet:
    """
    Fit the net on (embedding, current offset, previous aggregated offset)
    triples by gradient descent on sum_i ||net(e_i, t_i) - t_i'||_2.

    The returned net records the loss before the first and after the last step
    in ``last_fit``.
    """
    if not pairs:
        raise ContractError("no training pairs for the offset aggregator")
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")

    embeddings, currents, previous = zip(*pairs)
    e, x = net._stack(embeddings, currents)
    _, y = net._stack(embeddings, previous)

    params = net.tensors()
    initial = None
    for step in range(steps):
        tape = T.Tape()
        leaves = tape.watch_all(params)
        loss = _regression_loss(net, leaves, e, x, y)
        value = loss.item()
        if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
            raise TrainingAborted(
                f"offset aggregator diverged at step {step}: loss {value}"
            )
        if initial is None:
            initial = value
        grads = T.backward(tape, loss)
        params = [
            T.sgd_step(param, grads[leaf], lr) for param, leaf in zip(params, leaves)
        ]

    final = _regression_loss(net, params, e, x, y).item()
    if not np.isfinite(final) or final > DIVERGENCE_LIMIT:
        raise TrainingAborted(
            f"offset aggregator diverged after {steps} steps: loss {final}"
        )
    trained = net.with_tensors(params)
    trained.last_fit = AggregatorFit(initial, final, steps)
    logger.debug(
        f"Offset aggregator loss {initial:.6f} -> {final:.6f} in {steps} steps"
    )
    return trained


def aggregate_offsets_nn(
    net: OffsetAggregatorNet,
    embeddings: Sequence[ClassEmbedding],
    offsets: Sequence[Offset],
) -> List[Offset]:
    """Per-client aggregated offsets, in client order."""
    return net.apply(embeddings, offsets)


@dataclass(frozen=True)
class ServerRoundLog:
    round: int
    dh: float
    strategy: Strategy
    aggregator_loss_initial: Optional[float] = None
    aggregator_loss_final: Optional[float] = None


class FedServer:
    """
    Holds the global model, the offset each client receives next round, and
    (for the nn strategy) the offset aggregation network.
    """

    def __init__(
        self,
        global_model: ModelParams,
        embeddings: Sequence[ClassEmbedding],
        offset_shape,
        dh: float,
        dh_threshold: float = DEFAULT_DH_THRESHOLD,
        strategy=Strategy.AUTO,
        aggregator_hidden: int = 64,
        aggregator_lr: float = 1e-2,
        aggregator_steps: int = 200,
        warm_start: bool = True,
        seed: int = 0,
    ):
        if not 0.0 <= dh_threshold <= 1.0:
            raise DomainError(f"dh_threshold must lie in [0, 1], got {dh_threshold}")
        self.global_model = global_model
        self.embeddings = list(embeddings)
        self.per_client_offsets = [Offset.zeros(offset_shape) for _ in self.embeddings]
        self.dh = dh
        self.dh_threshold = dh_threshold
        self.strategy = select_strategy(dh, dh_threshold, strategy)
        self.aggregator_lr = aggregator_lr
        self.aggregator_steps = aggregator_steps
        self.warm_start = warm_start
        self.aggregator = None
        if self.strategy == Strategy.NN:
            self.aggregator = OffsetAggregatorNet(
                offset_shape, len(self.embeddings[0]), aggregator_hidden, seed
            )
        self.previous_aggregated: Optional[List[Offset]] = None
        logger.info(
            f"Server: DH {dh:.3f}, threshold {dh_threshold}, "
            f"offset strategy {self.strategy.value}"
        )

    @property
    def num_clients(self) -> int:
        return len(self.embeddings)

    def dispatch(self, client: int) -> Tuple[ModelParams, Offset]:
        return self.global_model, self.per_client_offsets[client]

    def aggregate(
        self, round_index: int, results: Sequence[LocalRoundResult]
    ) -> ServerRoundLog:
        """
        Fold one round of client results into the global model and the
        per-client offsets. Results must be in client order.
        """
        if len(results) != self.num_clients:
            raise ContractError(
                f"expected {self.num_clients} client results, got {len(results)}"
            )
        self.global_model = aggregate_models([result.model for result in results])
        offsets = [result.offset for result in results]

        fit = None
        if self.strategy == Strategy.NONE:
            self.per_client_offsets = offsets
        elif self.strategy == Strategy.AVERAGE:
            averaged = aggregate_offsets_average(offsets)
            self.per_client_offsets = [averaged] * self.num_clients
        else:
            if not self.warm_start:
                self.aggregator = self.aggregator.fresh()
            if self.previous_aggregated is not None:
                pairs = list(zip(self.embeddings, offsets, self.previous_aggregated))
                self.aggregator = train_aggregator(
                    self.aggregator, pairs, self.aggregator_lr, self.aggregator_steps
                )
                fit = self.aggregator.last_fit
            self.per_client_offsets = aggregate_offsets_nn(
                self.aggregator, self.embeddings, offsets
            )
            self.previous_aggregated = self.per_client_offsets

        return ServerRoundLog(
            round_index,
            self.dh,
            self.strategy,
            fit.initial_loss if fit else None,
            fit.final_loss if fit else None,
        )
