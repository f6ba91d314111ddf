"""Finite-difference gradient checker.

An operation output is reduced to a scalar with fixed random weights `R`, `f(x) = Σ op(x)·R`, and the
analytic gradient of `f` from :py:func:`~vizecg.tensor.backward` is compared with central differences

.. code-block::

    (f(x + h·e_j) − f(x − h·e_j)) / 2h

The error of one input is norm-wise relative: `max|a − n| / max(max|a|, max|n|, floor)`.

>>> import numpy as np
>>> from vizecg.tensor import Tensor, matmul
>>> rng = np.random.default_rng(0)
>>> a, b = Tensor(rng.normal(size=(3, 4)), requires_grad=True), Tensor(rng.normal(size=(4, 2)), requires_grad=True)
>>> gradcheck(matmul, [a, b]).passed
True
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
import uvlog

from vizecg.bases import Logger
from vizecg.data import N_CLASSES, N_LEADS
from vizecg.model import ModelConfig, forward_train, init_model
from vizecg.tensor import (
    Tensor,
    adaptive_avg_pool_tokens,
    add,
    backward,
    channel_norm,
    conv1d,
    conv2d,
    global_avg_pool,
    log,
    matmul,
    mean_over_axis,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_rows,
    sum_all,
    transpose2d,
)
from vizecg.train import TrainConfig, bce_multilabel, kd_kl, total_loss

__all__ = ["GradcheckReport", "gradcheck", "op_cases", "model_case", "run_suite"]

Op = Callable[..., Tensor]


@dataclass(frozen=True)
class GradcheckReport:
    """Result of a gradient check, one error per input requiring a gradient."""

    name: str
    errors: tuple[float, ...]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def json_repr(self) -> dict[str, Any]:
        return {"name": self.name, "errors": list(self.errors), "max_error": self.max_error, "passed": self.passed}


def gradcheck(
    op: Op,
    inputs: Sequence[Tensor],
    step: float = 1e-6,
    tol: float = 1e-6,
    *,
    floor: float = 1e-8,
    samples: int | None = None,
    seed: int = 0,
    name: str | None = None,
) -> GradcheckReport:
    """Compare analytic and numeric gradients of `op(*inputs)`.

    :param op: differentiable function of the input tensors
    :param inputs: tensors, only those with `requires_grad` are checked
    :param step: finite difference step `h`
    :param tol: maximum allowed relative error
    :param floor: lower bound of the error denominator
    :param samples: check only this many random coordinates of each input, all by default
    :param seed: seed of the output weights and of the sampled coordinates
    """
    rng = np.random.default_rng(seed)
    inputs = list(inputs)
    for tensor in inputs:
        tensor.data = np.ascontiguousarray(tensor.data)
        tensor.zero_grad()
    with no_grad():
        weights = Tensor(rng.normal(size=op(*inputs).shape))

    def objective() -> float:
        with no_grad():
            return float(np.sum(op(*inputs).data * weights.data))

    backward(sum_all(mul(op(*inputs), weights)))

    errors = []
    for tensor in inputs:
        if not tensor.requires_grad:
            continue
        flat = tensor.data.reshape(-1)
        analytic = np.zeros(tensor.size) if tensor.grad is None else tensor.grad.reshape(-1)
        if samples is None or samples >= tensor.size:
            coords = np.arange(tensor.size)
        else:
            coords = np.sort(rng.choice(tensor.size, size=samples, replace=False))
        numeric = np.empty(len(coords))
        for pos, coord in enumerate(coords):
            original = flat[coord]
            flat[coord] = original + step
            plus = objective()
            flat[coord] = original - step
            minus = objective()
            flat[coord] = original
            numeric[pos] = (plus - minus) / (2.0 * step)
        analytic = analytic[coords]
        scale_ = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
        errors.append(float(np.abs(analytic - numeric).max(initial=0.0) / scale_))
    return GradcheckReport(name or getattr(op, "__name__", "op"), tuple(errors), tol)


def _param(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _away_from_zero(rng: np.random.Generator, *shape: int) -> Tensor:
    """Values with `|x| >= 0.1`, far from the relu kink compared with the difference step."""
    values = rng.normal(size=shape)
    return Tensor(np.sign(values) * (0.1 + np.abs(values)), requires_grad=True)


def op_cases(rng: np.random.Generator) -> list[tuple[str, Op, list[Tensor]]]:
    """Random instances of every differentiable tensor operation."""
    return [
        ("matmul", matmul, [_param(rng, 3, 4), _param(rng, 4, 2)]),
        ("softmax_rows", softmax_rows, [_param(rng, 3, 5)]),
        ("conv1d", lambda x, w: conv1d(x, w, stride=2, padding=1), [_param(rng, 2, 9), _param(rng, 3, 2, 3)]),
        (
            "conv1d_batched",
            lambda x, w: conv1d(x, w, stride=1, padding=2),
            [_param(rng, 2, 2, 7), _param(rng, 3, 2, 4)],
        ),
        ("conv2d", lambda x, w: conv2d(x, w, stride=2, padding=1), [_param(rng, 2, 5, 5), _param(rng, 3, 2, 3, 3)]),
        (
            "conv2d_batched",
            lambda x, w: conv2d(x, w, stride=1, padding=0),
            [_param(rng, 2, 1, 4, 4), _param(rng, 2, 1, 2, 2)],
        ),
        ("relu", relu, [_away_from_zero(rng, 4, 5)]),
        ("sigmoid", sigmoid, [_param(rng, 4, 5)]),
        ("log", log, [Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)]),
        ("add", add, [_param(rng, 3, 4), _param(rng, 4)]),
        ("mul", mul, [_param(rng, 3, 4), _param(rng, 3, 4)]),
        ("scale", lambda x: scale(x, -2.5), [_param(rng, 3, 4)]),
        ("mean_over_axis", lambda x: mean_over_axis(x, 1), [_param(rng, 3, 4, 2)]),
        ("transpose2d", transpose2d, [_param(rng, 3, 4)]),
        ("reshape", lambda x: reshape(x, (2, 6)), [_param(rng, 3, 4)]),
        ("channel_norm", channel_norm, [_param(rng, 3, 7), _param(rng, 3), _param(rng, 3)]),
        (
            "channel_norm_2d",
            lambda x, g, b: channel_norm(x, g, b, spatial_dims=2),
            [_param(rng, 2, 3, 4), _param(rng, 2), _param(rng, 2)],
        ),
        ("global_avg_pool", global_avg_pool, [_param(rng, 3, 5)]),
        ("adaptive_avg_pool_tokens", lambda x: adaptive_avg_pool_tokens(x, 3), [_param(rng, 4, 7)]),
    ]


def model_case(seed: int, batch: int = 2) -> tuple[Op, list[Tensor]]:
    """Total training loss of the tiny model on a random batch as a function of all its parameters."""
    config = ModelConfig.tiny()
    state = init_model(config, seed=seed)
    rng = np.random.default_rng(seed)
    signals = [rng.normal(size=(N_LEADS, config.signal_length)) for _ in range(batch)]
    images = [rng.uniform(0.0, 1.0, size=(config.image_height, config.image_width)) for _ in range(batch)]
    labels = [rng.random(N_CLASSES) < 0.5 for _ in range(batch)]
    train = TrainConfig()

    def loss(*_params: Tensor) -> Tensor:
        total = Tensor(0.0)
        for signal, image, label in zip(signals, images, labels):
            p_s, p_i = forward_train(state, signal, image)
            cls = add(bce_multilabel(label, p_s, train.eps), bce_multilabel(label, p_i, train.eps))
            total = add(total, total_loss(cls, kd_kl(p_s, p_i, train.eps), train.lambda1, train.lambda2))
        return scale(total, 1.0 / batch)

    return loss, list(state.params.values())


def run_suite(
    seeds: Sequence[int] = range(10),
    *,
    step: float = 1e-6,
    tol: float = 1e-6,
    model_tol: float = 1e-4,
    model_floor: float = 1e-3,
    model_samples: int = 3,
    model_seeds: int | None = None,
    logger: Logger | None = None,
) -> list[GradcheckReport]:
    """Check every tensor operation and the end-to-end tiny model on each seed.

    `model_seeds` limits the model check to the first seeds. Reports are merged per operation keeping the worst
    error over seeds.
    """
    logger = logger or uvlog.get_logger("vizecg.gradcheck")
    worst: dict[str, GradcheckReport] = {}

    def keep(report: GradcheckReport) -> None:
        if report.name not in worst or report.max_error > worst[report.name].max_error:
            worst[report.name] = report

    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, op, inputs in op_cases(rng):
            keep(gradcheck(op, inputs, step, tol, seed=seed, name=name))
    for seed in list(seeds)[:model_seeds]:
        op, params = model_case(seed)
        keep(
            gradcheck(
                op, params, step, model_tol, floor=model_floor, samples=model_samples, seed=seed, name="model"
            )
        )
    reports = list(worst.values())
    for report in reports:
        logger.info("gradcheck", op=report.name, max_error=report.max_error, passed=report.passed)
    return reports
