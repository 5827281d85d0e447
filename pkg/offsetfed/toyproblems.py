"""
Two small motivating problems for input offsets.

* Cosine fitting: two clients fit y = cos(w x) with different true w. A
  brute-force search over per-client offsets q makes their loss curves over w
  agree.
* Two-client federated linear regression: the clients hold different true
  weights. Without offsets the averaged model stalls between them. With a
  jointly learned per-client offset both clients are fit by one shared w.

An offset transforms the input before the model sees it. ``shift`` reads the
offset as x + p x + q. ``gain`` reads it as x + (p + q) x, one q per input
dimension.
"""

import enum
import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .tensor import ContractError, TrainingAborted
from .util import SimUtil

logger = logging.getLogger(__name__)

DEFAULT_P = 0.1
GRID_STEP = 0.05
DIVERGENCE_LIMIT = 1e9
COSINE_CSV = "cosine_curves.csv"
REGRESSION_CSV = "regression.csv"
COSINE_HEADER = (
    "w",
    "loss_client1",
    "loss_client2",
    "loss_client1_offset",
    "loss_client2_offset",
)
REGRESSION_HEADER = ("round", "loss_without_offsets", "loss_with_offsets")


class OffsetForm(str, enum.Enum):
    SHIFT = "shift"
    GAIN = "gain"


def default_w_grid() -> np.ndarray:
    """[-5, 5] in steps of 0.05, with 0 hit exactly."""
    return np.arange(-100, 101) * GRID_STEP


def default_q_grid() -> np.ndarray:
    """[-3, 3] in steps of 0.05, with 0 hit exactly."""
    return np.arange(-60, 61) * GRID_STEP


@dataclass(frozen=True)
class ToyClientSpec:
    """
    One toy client. ``w_true`` is a scalar for the cosine problem and a
    vector for linear regression. Inputs are standard normal.
    """

    w_true: Union[float, Tuple[float, ...]]
    noise_std: float = 0.0
    n: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ContractError(f"a toy client needs n >= 2, got {self.n}")
        if self.noise_std < 0:
            raise ContractError(f"noise_std must be >= 0, got {self.noise_std}")

    def cosine_data(self) -> Tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        x = rng.normal(size=self.n)
        y = np.cos(float(self.w_true) * x) + rng.normal(0.0, self.noise_std, self.n)
        return x, y

    def linear_data(self) -> Tuple[np.ndarray, np.ndarray]:
        w = np.atleast_1d(np.asarray(self.w_true, dtype=np.float64))
        rng = np.random.default_rng(self.seed)
        x = rng.normal(size=(self.n, w.size))
        y = x @ w + rng.normal(0.0, self.noise_std, self.n)
        return x, y


@dataclass(frozen=True)
class LinearOffsetSpec:
    """The offset p x + q with p fixed and q per client."""

    p: float = DEFAULT_P
    q: Union[float, np.ndarray] = 0.0
    form: OffsetForm = OffsetForm.GAIN

    def __post_init__(self):
        if not np.isfinite(self.p):
            raise ContractError(f"p must be finite, got {self.p}")

    def apply(self, x: np.ndarray) -> np.ndarray:
        q = np.asarray(self.q, dtype=np.float64)
        if OffsetForm(self.form) == OffsetForm.GAIN:
            return (1.0 + self.p + q) * x
        return (1.0 + self.p) * x + q


def _cosine_losses(x: np.ndarray, y: np.ndarray, w_grid: np.ndarray) -> np.ndarray:
    residual = np.cos(np.outer(w_grid, x)) - y[None, :]
    return np.mean(residual * residual, axis=1)


def cosine_loss_curve(
    spec: ToyClientSpec,
    offset: Optional[LinearOffsetSpec],
    w_grid: Sequence[float],
) -> List[Tuple[float, float]]:
    """Mean squared error of cos(w x~) on the client's data, for every w."""
    w_grid = np.asarray(w_grid, dtype=np.float64)
    if w_grid.size == 0:
        raise ContractError("w_grid is empty")
    x, y = spec.cosine_data()
    x_tilde = x if offset is None else offset.apply(x)
    losses = _cosine_losses(x_tilde, y, w_grid)
    return [(float(w), float(loss)) for w, loss in zip(w_grid, losses)]


def curve_discrepancy(curve1, curve2) -> float:
    """Sum of squared pointwise differences of two loss curves on one grid."""
    a = np.array([loss for _, loss in curve1])
    b = np.array([loss for _, loss in curve2])
    if a.shape != b.shape:
        raise ContractError(f"curves of {a.size} and {b.size} points")
    return float(np.sum((a - b) ** 2))


def brute_force_q(
    spec1: ToyClientSpec,
    spec2: ToyClientSpec,
    p: float,
    q_grid: Sequence[float],
    w_grid: Optional[Sequence[float]] = None,
    form: OffsetForm = OffsetForm.GAIN,
) -> Tuple[float, float]:
    """
    Exhaustive search over (q1, q2) in q_grid x q_grid for the pair whose loss
    curves disagree least. Ties go to the first pair in grid order.
    """
    q_grid = np.asarray(q_grid, dtype=np.float64)
    if q_grid.size == 0:
        raise ContractError("q_grid is empty")
    w_grid = default_w_grid() if w_grid is None else np.asarray(w_grid, dtype=float)

    def curves(spec):
        x, y = spec.cosine_data()
        return np.stack(
            [
                _cosine_losses(LinearOffsetSpec(p, q, form).apply(x), y, w_grid)
                for q in q_grid
            ]
        )

    first, second = curves(spec1), curves(spec2)
    gaps = first[:, None, :] - second[None, :, :]
    discrepancy = np.sum(gaps * gaps, axis=2)
    i, j = np.unravel_index(np.argmin(discrepancy), discrepancy.shape)
    logger.debug(
        f"Best offsets q1={q_grid[i]:.2f} q2={q_grid[j]:.2f}, "
        f"discrepancy {discrepancy[i, j]:.6f}"
    )
    return float(q_grid[i]), float(q_grid[j])


@dataclass
class RegressionResult:
    losses: List[float]
    w: np.ndarray
    q: List[np.ndarray]


def federated_linear_regression(
    specs: Sequence[ToyClientSpec],
    with_offsets: bool,
    rounds: int,
    lr: float,
    seed: int,
    p: float = DEFAULT_P,
    learn_q: bool = True,
    form: OffsetForm = OffsetForm.GAIN,
    batch_size: int = 10,
) -> RegressionResult:
    """
    FedAvg on a linear model y = w . x~. Each round every client runs one
    shuffled epoch of minibatch SGD from the averaged w, updating its own q as
    well when offsets are on; the server then averages w.

    ``losses[r]`` is the averaged model's squared error after round r, meaned
    over both clients' offset data.
    """
    if rounds < 1:
        raise ContractError(f"rounds must be >= 1, got {rounds}")
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")

    data = [spec.linear_data() for spec in specs]
    dim = data[0][0].shape[1]
    p = p if with_offsets else 0.0
    train_q = with_offsets and learn_q
    rng = np.random.default_rng(seed)
    w = np.zeros(dim)
    q = [np.zeros(dim) for _ in specs]
    losses = []

    for r in range(rounds):
        local = []
        for k, (x, y) in enumerate(data):
            wk = w.copy()
            order = rng.permutation(x.shape[0])
            for start in range(0, x.shape[0], batch_size):
                rows = order[start : start + batch_size]
                xb = x[rows]
                x_tilde = LinearOffsetSpec(p, q[k], form).apply(xb)
                residual = x_tilde @ wk - y[rows]
                grad_w = 2.0 * x_tilde.T @ residual / rows.size
                if train_q:
                    if OffsetForm(form) == OffsetForm.GAIN:
                        grad_q = 2.0 * np.mean(residual[:, None] * (wk * xb), axis=0)
                    else:
                        grad_q = 2.0 * np.mean(residual) * wk
                    q[k] = q[k] - lr * grad_q
                wk = wk - lr * grad_w
            local.append(wk)
        w = np.mean(local, axis=0)

        loss = float(
            np.mean(
                [
                    np.mean((LinearOffsetSpec(p, q[k], form).apply(x) @ w - y) ** 2)
                    for k, (x, y) in enumerate(data)
                ]
            )
        )
        if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise TrainingAborted(f"toy regression diverged in round {r}: loss {loss}")
        losses.append(loss)

    logger.debug(
        f"Toy regression (offsets={with_offsets}): final loss {losses[-1]:.6g}"
    )
    return RegressionResult(losses, w, q)


# fixtures for the motivating runs; constants of this package, not measurements
def cosine_fixture(seed: int = 0) -> Tuple[ToyClientSpec, ToyClientSpec]:
    return (
        ToyClientSpec(1.0, noise_std=0.05, n=500, seed=seed),
        ToyClientSpec(2.0, noise_std=0.05, n=500, seed=seed + 1),
    )


def regression_fixture(seed: int = 0) -> Tuple[ToyClientSpec, ToyClientSpec]:
    return (
        ToyClientSpec((1.0, 2.0), noise_std=0.05, n=100, seed=seed),
        ToyClientSpec((3.0, 1.0), noise_std=0.05, n=100, seed=seed + 1),
    )


def write_cosine_csv(path: str, w_grid, raw_curves, offset_curves):
    fmt = SimUtil.format_float
    rows = (
        [
            fmt(w),
            fmt(raw_curves[0][i][1]),
            fmt(raw_curves[1][i][1]),
            fmt(offset_curves[0][i][1]),
            fmt(offset_curves[1][i][1]),
        ]
        for i, w in enumerate(w_grid)
    )
    SimUtil.write_csv(path, COSINE_HEADER, rows)


def write_regression_csv(path: str, without_offsets, with_offsets):
    fmt = SimUtil.format_float
    rows = (
        [r, fmt(plain), fmt(shifted)]
        for r, (plain, shifted) in enumerate(zip(without_offsets, with_offsets))
    )
    SimUtil.write_csv(path, REGRESSION_HEADER, rows)


def motivate(
    output_dir: str,
    seed: int = 0,
    rounds: int = 100,
    lr: float = 0.02,
    form: OffsetForm = OffsetForm.GAIN,
):
    """Run both motivating problems and write their CSVs into ``output_dir``."""
    SimUtil.ensure_dir(output_dir)
    w_grid = default_w_grid()

    spec1, spec2 = cosine_fixture(seed)
    q1, q2 = brute_force_q(spec1, spec2, DEFAULT_P, default_q_grid(), w_grid, form)
    raw = [cosine_loss_curve(spec, None, w_grid) for spec in (spec1, spec2)]
    shifted = [
        cosine_loss_curve(spec, LinearOffsetSpec(DEFAULT_P, q, form), w_grid)
        for spec, q in ((spec1, q1), (spec2, q2))
    ]
    write_cosine_csv(os.path.join(output_dir, COSINE_CSV), w_grid, raw, shifted)
    logger.info(
        f"Cosine curves: discrepancy {curve_discrepancy(*raw):.4f} without offsets, "
        f"{curve_discrepancy(*shifted):.4f} with q=({q1:.2f}, {q2:.2f})"
    )

    specs = regression_fixture(seed)
    plain = federated_linear_regression(specs, False, rounds, lr, seed, form=form)
    offset = federated_linear_regression(specs, True, rounds, lr, seed, form=form)
    write_regression_csv(
        os.path.join(output_dir, REGRESSION_CSV), plain.losses, offset.losses
    )
    logger.info(
        f"Linear regression: final loss {plain.losses[-1]:.4g} without offsets, "
        f"{offset.losses[-1]:.4g} with offsets"
    )
