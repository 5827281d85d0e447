"""
One federated client: local joint optimization of the offset and the model,
and evaluation of the shared model on the client's own test split.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from . import dualnet
from . import tensor as T
from .config import SgdConfig
from .dualnet import Alpha, ModelParams, Offset
from .tensor import ContractError, ShapeError, Tensor, TrainingAborted

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    batch: int
    phase: str
    loss: float


@dataclass
class ClientState:
    client_id: int
    inputs: np.ndarray
    labels: np.ndarray
    offset: Offset
    rng_seed: int

    def __post_init__(self):
        if self.labels.shape[0] < 1:
            raise ContractError(f"client {self.client_id} has no training data")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"client {self.client_id}: {self.inputs.shape[0]} inputs, "
                f"{self.labels.shape[0]} labels"
            )
        if self.offset.shape != tuple(self.inputs.shape[1:]):
            raise ShapeError(
                f"client {self.client_id}: offset {self.offset.shape} "
                f"vs input {self.inputs.shape[1:]}"
            )

    @property
    def num_samples(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class LocalRoundResult:
    client_id: int
    model: ModelParams
    offset: Offset
    mean_train_loss: float
    samples_seen: int
    steps: List[StepRecord] = field(default_factory=list)


def _abort(state: ClientState, round_index: int, epoch: int, batch: int, what: str):
    raise TrainingAborted(
        f"client {state.client_id}: {what} in round {round_index}, "
        f"epoch {epoch}, batch {batch}"
    )


def _check_finite(
    loss: float,
    state: ClientState,
    round_index: int,
    epoch: int,
    batch: int,
    phase: str,
):
    if not np.isfinite(loss):
        what = f"non-finite loss {loss} ({phase} step)"
        _abort(state, round_index, epoch, batch, what)


def _check_updated(
    tensors: List[Tensor],
    state: ClientState,
    round_index: int,
    epoch: int,
    batch: int,
    name: str,
):
    if not all(np.all(np.isfinite(tensor.data)) for tensor in tensors):
        _abort(state, round_index, epoch, batch, f"non-finite {name} after update")


def local_round(
    state: ClientState,
    global_model: ModelParams,
    incoming_offset: Offset,
    cfg: SgdConfig,
    epochs: int,
    alpha: Alpha,
    round_index: int = 0,
    record_steps: bool = False,
) -> LocalRoundResult:
    """
    Run ``epochs`` passes over the client's data starting from the global model
    and the dispatched offset. Every minibatch first takes one SGD step on the
    offset, then recombines the batch with the updated offset and takes one SGD
    step on the model; each step uses its own forward pass.

    The reported loss is the sample-weighted mean of the losses seen at the
    offset steps.
    """
    if epochs < 1:
        raise ContractError(f"epochs must be >= 1, got {epochs}")
    if incoming_offset.shape != state.offset.shape:
        raise ShapeError(
            f"incoming offset {incoming_offset.shape} vs {state.offset.shape}"
        )

    n = state.num_samples
    batch_size = cfg.batch_size
    if batch_size > n:
        logger.debug(
            f"Client {state.client_id}: batch size {batch_size} clamped to {n}"
        )
        batch_size = n

    rng = np.random.default_rng([state.rng_seed, round_index])
    model = global_model
    t = incoming_offset.t
    steps = []
    weighted_loss = 0.0
    seen = 0

    for epoch in range(epochs):
        order = rng.permutation(n)
        for batch_index, start in enumerate(range(0, n, batch_size)):
            rows = order[start : start + batch_size]
            batch = (state.inputs[rows], state.labels[rows])

            fit = dualnet.loss_and_grads(
                model, batch, Offset(t), alpha, wrt_model=False
            )
            _check_finite(fit.loss, state, round_index, epoch, batch_index, "offset")
            t = T.sgd_step(t, fit.offset, cfg.learning_rate_offset)
            _check_updated([t], state, round_index, epoch, batch_index, "offset")

            refit = dualnet.loss_and_grads(
                model, batch, Offset(t), alpha, wrt_offset=False
            )
            _check_finite(refit.loss, state, round_index, epoch, batch_index, "model")
            model = dualnet.apply_sgd(model, refit.model, cfg.learning_rate_model)
            _check_updated(
                model.tensors(), state, round_index, epoch, batch_index, "model"
            )

            weighted_loss += fit.loss * rows.size
            seen += rows.size
            if record_steps:
                steps.append(StepRecord(epoch, batch_index, "offset", fit.loss))
                steps.append(StepRecord(epoch, batch_index, "model", refit.loss))

    mean_loss = weighted_loss / seen
    logger.debug(
        f"Client {state.client_id} round {round_index}: "
        f"mean loss {mean_loss:.6f} over {seen} samples"
    )
    return LocalRoundResult(state.client_id, model, Offset(t), mean_loss, seen, steps)


def evaluate_local(
    state: ClientState,
    model: ModelParams,
    alpha: Alpha,
    test_set: Tuple[np.ndarray, np.ndarray],
    reject: bool = False,
) -> float:
    """
    Fraction of the client's test samples the model classifies correctly when
    each input is combined with the client's own offset.
    """
    inputs, labels = test_set
    if len(labels) == 0:
        raise ContractError(f"client {state.client_id}: empty test set")
    if reject:
        predictions = dualnet.predict_with_reject(model, inputs, state.offset, alpha)
    else:
        predictions = dualnet.predict_batch(model, inputs, state.offset, alpha)
    return float(np.mean(predictions == np.asarray(labels)))
