"""
Double-input-channel classifier.

Each input x is mixed with the client's offset t into two channels,
ch1 = (1 - alpha) x + alpha t and ch2 = (1 + alpha) x - alpha t. Both channels
go through one shared MLP backbone; the two feature vectors are concatenated,
passed through a linear dense layer, and a logits layer produces class scores.
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import ContractError, DomainError, ShapeError, Tensor

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.3
DEFAULT_HIDDEN = (128,)
DEFAULT_DENSE_WIDTH = 128
REJECT = -1
MODEL_HEADER_BYTES = 4
CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_BLOB = "tensors.bin"

LayerPair = Tuple[Tensor, Tensor]


@dataclass(frozen=True)
class Alpha:
    value: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise DomainError(f"alpha must lie in [0, 1], got {self.value}")


@dataclass(frozen=True)
class Offset:
    t: Tensor

    @classmethod
    def zeros(cls, shape) -> "Offset":
        return cls(Tensor.zeros(shape))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.t.shape


@dataclass(frozen=True)
class ModelParams:
    """
    Weights of the double-input-channel net. ``backbone`` is applied to every
    channel with the same tensors; ``dense_weight`` has one row block per
    channel, in channel order.
    """

    backbone: Tuple[LayerPair, ...]
    dense_weight: Tensor
    dense_bias: Tensor
    logits_weight: Tensor
    logits_bias: Tensor
    channels: int = 2

    def __post_init__(self):
        if self.channels not in (1, 2):
            raise ContractError(f"channels must be 1 or 2, got {self.channels}")
        if not self.backbone:
            raise ContractError("backbone needs at least one layer")
        width = self.backbone[0][0].shape[0]
        for i, (weight, bias) in enumerate(self.backbone):
            square = weight.ndim == 2 and weight.shape[0] == width
            if not square or bias.shape != (weight.shape[1],):
                raise ShapeError(
                    f"backbone layer {i}: weight {weight.shape}, bias {bias.shape}, "
                    f"input width {width}"
                )
            width = weight.shape[1]
        dense = self.dense_weight
        if dense.ndim != 2 or dense.shape[0] != self.channels * width:
            raise ShapeError(
                f"dense weight {dense.shape} does not take "
                f"{self.channels} x {width} features"
            )
        if self.dense_bias.shape != (self.dense_weight.shape[1],):
            raise ShapeError(f"dense bias {self.dense_bias.shape}")
        logits = self.logits_weight
        if logits.ndim != 2 or logits.shape[0] != dense.shape[1]:
            raise ShapeError(f"logits weight {logits.shape} after dense {dense.shape}")
        if self.logits_bias.shape != (self.logits_weight.shape[1],):
            raise ShapeError(f"logits bias {self.logits_bias.shape}")

    @property
    def input_dim(self) -> int:
        return self.backbone[0][0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.backbone[-1][0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.logits_weight.shape[1]

    def named_tensors(self) -> List[Tuple[str, Tensor]]:
        named = []
        for i, (weight, bias) in enumerate(self.backbone):
            named.append((f"backbone.{i}.weight", weight))
            named.append((f"backbone.{i}.bias", bias))
        named.append(("dense.weight", self.dense_weight))
        named.append(("dense.bias", self.dense_bias))
        named.append(("logits.weight", self.logits_weight))
        named.append(("logits.bias", self.logits_bias))
        return named

    def tensors(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_tensors()]

    def with_tensors(self, tensors: Sequence[Tensor]) -> "ModelParams":
        """Same structure, tensors replaced in ``named_tensors`` order."""
        tensors = list(tensors)
        expected = 2 * len(self.backbone) + 4
        if len(tensors) != expected:
            raise ContractError(f"expected {expected} tensors, got {len(tensors)}")
        backbone = tuple(
            (tensors[2 * i], tensors[2 * i + 1]) for i in range(len(self.backbone))
        )
        rest = tensors[2 * len(self.backbone) :]
        return ModelParams(backbone, rest[0], rest[1], rest[2], rest[3], self.channels)

    @classmethod
    def from_named(cls, named: Dict[str, Tensor], channels: int = 2) -> "ModelParams":
        layers = 0
        while f"backbone.{layers}.weight" in named:
            layers += 1
        try:
            backbone = tuple(
                (named[f"backbone.{i}.weight"], named[f"backbone.{i}.bias"])
                for i in range(layers)
            )
            return cls(
                backbone,
                named["dense.weight"],
                named["dense.bias"],
                named["logits.weight"],
                named["logits.bias"],
                channels,
            )
        except KeyError as ex:
            raise ContractError(f"missing tensor {ex}") from None


def init_params(
    input_dim: int,
    num_classes: int,
    hidden: Sequence[int] = DEFAULT_HIDDEN,
    dense_width: int = DEFAULT_DENSE_WIDTH,
    channels: int = 2,
    seed: int = 0,
) -> ModelParams:
    """
    He-normal backbone weights (ReLU layers), Glorot-normal dense and logits
    weights, zero biases.
    """
    rng = np.random.default_rng(seed)

    def normal(fan_in, fan_out, std):
        return Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)))

    backbone = []
    width = input_dim
    for out in hidden:
        weight = normal(width, out, np.sqrt(2.0 / width))
        backbone.append((weight, Tensor.zeros((out,))))
        width = out
    merged = channels * width
    dense_weight = normal(merged, dense_width, np.sqrt(2.0 / (merged + dense_width)))
    logits_std = np.sqrt(2.0 / (dense_width + num_classes))
    logits_weight = normal(dense_width, num_classes, logits_std)
    return ModelParams(
        tuple(backbone),
        dense_weight,
        Tensor.zeros((dense_width,)),
        logits_weight,
        Tensor.zeros((num_classes,)),
        channels,
    )


def zero_params(
    input_dim: int,
    num_classes: int,
    hidden: Sequence[int] = DEFAULT_HIDDEN,
    dense_width: int = DEFAULT_DENSE_WIDTH,
    channels: int = 2,
) -> ModelParams:
    params = init_params(input_dim, num_classes, hidden, dense_width, channels)
    return params.with_tensors(
        [Tensor.zeros(tensor.shape) for tensor in params.tensors()]
    )


def single_channel_variant(params: ModelParams) -> ModelParams:
    """
    The same backbone and heads sized for one channel; used as the baseline
    for overhead accounting.
    """
    if params.channels == 1:
        return params
    dense_weight = Tensor.zeros((params.feature_dim, params.dense_weight.shape[1]))
    return ModelParams(
        params.backbone,
        dense_weight,
        params.dense_bias,
        params.logits_weight,
        params.logits_bias,
        channels=1,
    )


def combine(x, offset: Offset, alpha: Alpha) -> Tuple[Tensor, Tensor]:
    """
    Mix the offset into the input: ((1 - a) x + a t, (1 + a) x - a t).

    ``x`` may be one sample or a batch with samples along the first axis. With
    alpha = 0 the offset is not used at all, so it stays out of the graph.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    t = offset.t
    if x.shape[x.ndim - t.ndim :] != t.shape:
        raise ShapeError(f"input {x.shape} does not match offset {t.shape}")
    a = alpha.value
    if a == 0.0:
        return x, x
    scaled_t = T.scale(t, a)
    ch1 = T.add(T.scale(x, 1.0 - a), scaled_t)
    ch2 = T.sub(T.scale(x, 1.0 + a), scaled_t)
    return ch1, ch2


def _backbone(params: ModelParams, h: Tensor) -> Tensor:
    for weight, bias in params.backbone:
        h = T.relu(T.add(T.matmul(h, weight), bias))
    return h


def forward(params: ModelParams, ch1, ch2=None) -> Tensor:
    """
    Logits for one sample ([d] -> [K]) or a batch ([B x d] -> [B x K]).
    Single-channel params ignore ``ch2``.
    """
    ch1 = ch1 if isinstance(ch1, Tensor) else Tensor(ch1)
    single = ch1.ndim == 1
    channels = [ch1]
    if params.channels == 2:
        if ch2 is None:
            raise ContractError("double-channel model needs both channels")
        ch2 = ch2 if isinstance(ch2, Tensor) else Tensor(ch2)
        if ch2.shape != ch1.shape:
            raise ShapeError(f"channel shapes differ: {ch1.shape} vs {ch2.shape}")
        channels.append(ch2)
    if single:
        channels = [T.reshape(channel, (1, -1)) for channel in channels]
    if channels[0].ndim != 2 or channels[0].shape[1] != params.input_dim:
        raise ShapeError(f"backbone takes {params.input_dim} inputs, got {ch1.shape}")

    features = [_backbone(params, channel) for channel in channels]
    merged = T.concat(features, axis=1) if len(features) > 1 else features[0]
    dense = T.add(T.matmul(merged, params.dense_weight), params.dense_bias)
    logits = T.add(T.matmul(dense, params.logits_weight), params.logits_bias)
    if single:
        logits = T.reshape(logits, (params.num_classes,))
    return logits


def loss_batch(params: ModelParams, batch, offset: Offset, alpha: Alpha) -> Tensor:
    inputs, labels = batch
    if len(labels) == 0:
        raise ContractError("loss over an empty batch")
    ch1, ch2 = combine(inputs, offset, alpha)
    return T.softmax_cross_entropy(forward(params, ch1, ch2), labels)


@dataclass
class LossGrads:
    loss: float
    model: Optional[ModelParams]
    offset: Optional[Tensor]


def watch_params(tape: T.Tape, params: ModelParams) -> ModelParams:
    return params.with_tensors(tape.watch_all(params.tensors()))


def loss_and_grads(
    params: ModelParams,
    batch,
    offset: Offset,
    alpha: Alpha,
    wrt_model: bool = True,
    wrt_offset: bool = True,
) -> LossGrads:
    """
    One fresh forward and backward pass of the batch loss, with gradients for
    the requested leaves.
    """
    tape = T.Tape()
    model_leaves = watch_params(tape, params) if wrt_model else params
    offset_leaf = Offset(tape.watch(offset.t)) if wrt_offset else offset
    loss = loss_batch(model_leaves, batch, offset_leaf, alpha)
    if loss.tape is None:
        # only the offset was watched and alpha = 0 kept it out of the graph
        zero = Tensor.zeros(offset.shape) if wrt_offset else None
        return LossGrads(loss.item(), None, zero)
    grads = T.backward(tape, loss)
    model_grads = None
    if wrt_model:
        model_grads = params.with_tensors(
            [grads[leaf] for leaf in model_leaves.tensors()]
        )
    offset_grad = grads[offset_leaf.t] if wrt_offset else None
    return LossGrads(loss.item(), model_grads, offset_grad)


def apply_sgd(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    return params.with_tensors(
        [
            T.sgd_step(param, grad, lr)
            for param, grad in zip(params.tensors(), grads.tensors())
        ]
    )


def predict_batch(
    params: ModelParams, inputs, offset: Offset, alpha: Alpha
) -> np.ndarray:
    ch1, ch2 = combine(inputs, offset, alpha)
    logits = forward(params, ch1, ch2).data
    # np.argmax returns the first maximum, i.e. the lowest tied class
    return np.argmax(logits.reshape(-1, params.num_classes), axis=1)


def predict(params: ModelParams, x, offset: Offset, alpha: Alpha) -> int:
    return int(predict_batch(params, x, offset, alpha)[0])


def predict_with_reject(
    params: ModelParams, inputs, offset: Offset, alpha: Alpha
) -> np.ndarray:
    """
    Like ``predict_batch`` but answers REJECT when the top softmax probability
    is less than 1/K above uniform.
    """
    ch1, ch2 = combine(inputs, offset, alpha)
    probs = T.softmax(forward(params, ch1, ch2)).reshape(-1, params.num_classes)
    labels = np.argmax(probs, axis=1)
    confident = probs.max(axis=1) >= 2.0 / params.num_classes
    return np.where(confident, labels, REJECT)


def model_nbytes(tensors: Sequence[Tensor]) -> int:
    """Wire size of a model payload: tensor count, then one record per tensor."""
    records = sum(T.serialized_nbytes(tensor.shape) for tensor in tensors)
    return MODEL_HEADER_BYTES + records


def offset_nbytes(offset: Offset) -> int:
    return T.serialized_nbytes(offset.shape)


def model_to_bytes(params: ModelParams) -> bytes:
    tensors = params.tensors()
    header = np.array([len(tensors)], dtype=T.HEADER_DTYPE).tobytes()
    return header + b"".join(T.to_bytes(tensor) for tensor in tensors)


@dataclass
class Checkpoint:
    params: ModelParams
    alpha: Alpha
    offsets: List[Offset]


def save_checkpoint(
    directory: str,
    params: ModelParams,
    alpha: Alpha,
    offsets: Sequence[Offset] = (),
):
    """
    Write ``manifest.json`` (names, shapes, byte ranges, alpha) and
    ``tensors.bin`` (the tensor records back to back).
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    blobs = []
    position = 0

    def add(kind, name, tensor):
        nonlocal position
        blob = T.to_bytes(tensor)
        entries.append(
            {
                "kind": kind,
                "name": name,
                "shape": list(tensor.shape),
                "start": position,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        position += len(blob)

    for name, tensor in params.named_tensors():
        add("model", name, tensor)
    for client, offset in enumerate(offsets):
        add("offset", str(client), offset.t)

    manifest = {"alpha": alpha.value, "channels": params.channels, "tensors": entries}
    with open(os.path.join(directory, CHECKPOINT_MANIFEST), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    with open(os.path.join(directory, CHECKPOINT_BLOB), "wb") as f:
        f.write(b"".join(blobs))
    logger.debug(f"Saved checkpoint with {len(entries)} tensors to {directory}")


def load_checkpoint(directory: str) -> Checkpoint:
    with open(os.path.join(directory, CHECKPOINT_MANIFEST), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    with open(os.path.join(directory, CHECKPOINT_BLOB), "rb") as f:
        blob = f.read()

    named = {}
    offsets = []
    for entry in manifest["tensors"]:
        tensor, end = T.from_bytes(blob, entry["start"])
        size_ok = end - entry["start"] == entry["nbytes"]
        if not size_ok or list(tensor.shape) != entry["shape"]:
            raise ContractError(f"checkpoint entry {entry['name']} is corrupt")
        if entry["kind"] == "model":
            named[entry["name"]] = tensor
        else:
            offsets.append(Offset(tensor))
    params = ModelParams.from_named(named, manifest["channels"])
    return Checkpoint(params, Alpha(manifest["alpha"]), offsets)
