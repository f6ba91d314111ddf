"""Losses, optimizer, learning rate schedule, training loop and metrics.

The training objective for one record is

.. code-block::

    total = λ1 · (bce(t, p_s) + bce(t, p_i)) + λ2 · kd_kl(p_s, p_i)

averaged over a mini-batch. Records of a batch are run through separate graphs and their gradients are
accumulated into the parameters before a single Adam step.

The training log is a list of JSON records, one `step` record per optimizer step and one `epoch` record per
epoch (including epoch 0, the validation before training). It contains no timestamps so identical seeds give
byte-identical logs.
"""

import csv
import json
from collections.abc import Mapping, Sequence
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields, replace
from math import ceil, cos, isfinite, pi
from pathlib import Path
from statistics import median
from typing import Any, Literal

import numpy as np
import uvlog

from vizecg.bases import Logger
from vizecg.data import CLASS_NAMES, N_CLASSES, Dataset, EcgRecord, detrend
from vizecg.errors import ConfigurationError, ContractError, GraphError, NonFiniteError
from vizecg.model import ModelConfig, ModelState, forward_distill, forward_infer, forward_train, init_model
from vizecg.raster import EcgImage, LayoutSpec, render_record
from vizecg.tensor import Tensor, add, backward, check_finite, clip, detach, log, mul, no_grad, scale, sub, sum_all

__all__ = [
    "TrainConfig",
    "MetricsReport",
    "TrainingLog",
    "AdamState",
    "AblationRow",
    "ABLATIONS",
    "bce_multilabel",
    "kd_kl",
    "total_loss",
    "adam_step",
    "cosine_lr",
    "prepare_inputs",
    "fit",
    "compute_metrics",
    "evaluate",
    "run_ablation",
]

EvalMode = Literal["signal", "image"]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings, defaults follow the full-scale recipe."""

    lr_max: float = 1e-3
    lr_min: float = 1e-6
    batch_size: int = 16
    epochs: int = 300
    lambda1: float = 1.0
    lambda2: float = 1.0
    seed: int = 0
    kd_teacher_detach: bool = False  #: stop the KD gradient from flowing into the signal stream
    enable_cmam: bool = True
    enable_smam: bool = True
    threshold: float = 0.5
    eps: float = 1e-7  #: probability clamp before logarithms
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    check_finite: bool = False  #: assert finite outputs of every op, slower

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigurationError(
                f"Invalid learning rates {self.lr_min}, {self.lr_max}\n\nFix: Use 0 < lr_min <= lr_max."
            )
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("Batch size must be at least 1 and epochs non-negative.")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("Loss weights must be non-negative.")
        if not 0 < self.threshold < 1 or not 0 < self.eps < 0.5:
            raise ConfigurationError("Threshold must lie in (0, 1) and eps in (0, 0.5).")

    @classmethod
    def desk(cls) -> "TrainConfig":
        return cls(epochs=30)

    @classmethod
    def from_dict(cls, settings: dict[str, Any], /) -> "TrainConfig":
        settings = dict(settings)
        preset = settings.pop("preset", None)
        base = {"desk": cls.desk, "paper": cls}
        if preset is not None and preset not in base:
            raise ConfigurationError(f"Unknown train preset: {preset}\n\nFix: Use one of {', '.join(base)}.")
        unknown = set(settings) - {_field.name for _field in fields(cls)}
        if unknown:
            raise ConfigurationError(
                f"Unknown train settings: {', '.join(sorted(unknown))}\n\nFix: Use TrainConfig field names.",
                keys=sorted(unknown),
            )
        return replace(base[preset or "desk"](), **settings)

    def json_repr(self) -> dict[str, Any]:
        return asdict(self)


def _labels(t: Sequence[bool] | np.ndarray) -> np.ndarray:
    return np.asarray(t, dtype=np.float64)


def bce_multilabel(t: Sequence[bool] | np.ndarray, p: Tensor, eps: float = 1e-7) -> Tensor:
    """Sum of per-class binary cross-entropies.

    >>> round(bce_multilabel([True, False], Tensor([0.5, 1e-12])).item(), 6)
    0.693147
    """
    t = _labels(t)
    p = clip(p, eps, 1.0 - eps)
    positive = mul(Tensor(t), log(p))
    negative = mul(Tensor(1.0 - t), log(sub(1.0, p)))
    return scale(sum_all(add(positive, negative)), -1.0)


def kd_kl(p_s: Tensor, p_i: Tensor, eps: float = 1e-7, teacher_detach: bool = False) -> Tensor:
    """Sum over classes of `KL(Bernoulli(p_s) ‖ Bernoulli(p_i))`.

    Per-class terms are clamped at zero against rounding, so the result is never negative.

    >>> round(kd_kl(Tensor([0.8]), Tensor([0.5])).item(), 5)
    0.19274
    """
    if teacher_detach:
        p_s = detach(p_s)
    p_s = clip(p_s, eps, 1.0 - eps)
    p_i = clip(p_i, eps, 1.0 - eps)
    q_s, q_i = sub(1.0, p_s), sub(1.0, p_i)
    terms = add(mul(p_s, sub(log(p_s), log(p_i))), mul(q_s, sub(log(q_s), log(q_i))))
    return sum_all(clip(terms, 0.0, np.inf))


def total_loss(cls: Tensor | float, kd: Tensor | float, lambda1: float = 1.0, lambda2: float = 1.0) -> Tensor:
    """Weighted sum `λ1·cls + λ2·kd`.

    >>> total_loss(0.5, 0.25).item()
    0.75
    """
    cls = cls if isinstance(cls, Tensor) else Tensor(cls)
    kd = kd if isinstance(kd, Tensor) else Tensor(kd)
    return add(scale(cls, lambda1), scale(kd, lambda2))


@dataclass
class AdamState:
    """Adam moment estimates, persisted across steps."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update of `params` from their accumulated `.grad`.

    :raises GraphError: if a parameter has no gradient
    """
    missing = [name for name, param in params.items() if param.grad is None]
    if missing:
        raise GraphError(
            f"Parameters without gradients: {', '.join(missing[:5])}\n\nFix: Run backward before the optimizer step.",
            params=missing,
        )
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, param in params.items():
        grad = param.grad
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * grad
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        param.data = param.data - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)


def cosine_lr(step: int, total_steps: int, lr_max: float = 1e-3, lr_min: float = 1e-6) -> float:
    """Cosine annealing from `lr_max` at step 0 down to `lr_min` at `total_steps`, no restarts.

    >>> cosine_lr(0, 100), cosine_lr(100, 100)
    (0.001, 1e-06)
    """
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ContractError(f"Step {step} is out of range [0, {total_steps}].", step=step, total_steps=total_steps)
    weight = 0.5 * (1.0 + cos(pi * step / total_steps))
    return lr_max * weight + lr_min * (1.0 - weight)


@dataclass
class MetricsReport:
    """Per-class confusion counts and the derived precision, recall and F1."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @staticmethod
    def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
        return np.divide(num, den, out=np.zeros(len(num)), where=den > 0)

    @property
    def precision(self) -> np.ndarray:
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> np.ndarray:
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> np.ndarray:
        p, r = self.precision, self.recall
        return self._ratio(2.0 * p * r, p + r)

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())

    def rows(self) -> list[dict[str, Any]]:
        """Table rows, one per class and a final `macro` row with summed counts."""
        rows = []
        for idx, name in enumerate(CLASS_NAMES):
            rows.append(
                {
                    "class": name,
                    "precision": float(self.precision[idx]),
                    "recall": float(self.recall[idx]),
                    "f1": float(self.f1[idx]),
                    "tp": int(self.tp[idx]),
                    "fp": int(self.fp[idx]),
                    "fn": int(self.fn[idx]),
                    "tn": int(self.tn[idx]),
                }
            )
        rows.append(
            {
                "class": "macro",
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1": self.macro_f1,
                "tp": int(self.tp.sum()),
                "fp": int(self.fp.sum()),
                "fn": int(self.fn.sum()),
                "tn": int(self.tn.sum()),
            }
        )
        return rows

    def write_csv(self, path: str | Path, /) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["class", "precision", "recall", "f1", "tp", "fp", "fn", "tn"])
            writer.writeheader()
            writer.writerows(self.rows())

    def format_table(self) -> str:
        lines = [f"{'class':<8}{'precision':>10}{'recall':>10}{'f1':>10}"]
        for row in self.rows():
            lines.append(f"{row['class']:<8}{row['precision']:>10.4f}{row['recall']:>10.4f}{row['f1']:>10.4f}")
        return "\n".join(lines)

    def json_repr(self) -> dict[str, Any]:
        return {"classes": self.rows()[:-1], "macro": self.rows()[-1]}


def compute_metrics(
    predictions: Sequence[Sequence[float]] | np.ndarray,
    labels: Sequence[Sequence[bool]] | np.ndarray,
    threshold: float = 0.5,
) -> MetricsReport:
    """Score probabilities against labels, a class is predicted positive when `p >= threshold`.

    >>> report = compute_metrics([[0.9] * 6, [0.1] * 6], [[True] * 6, [False] * 6])
    >>> report.macro_f1
    1.0
    """
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1, N_CLASSES)
    labels = np.asarray(labels, dtype=bool).reshape(-1, N_CLASSES)
    if len(predictions) != len(labels):
        raise ContractError(
            f"Got {len(predictions)} predictions for {len(labels)} labels.",
            predictions=len(predictions),
            labels=len(labels),
        )
    if not 0 < threshold < 1:
        raise ContractError(f"Threshold must lie in (0, 1), got {threshold}.")
    positive = predictions >= threshold
    return MetricsReport(
        tp=(positive & labels).sum(axis=0),
        fp=(positive & ~labels).sum(axis=0),
        fn=(~positive & labels).sum(axis=0),
        tn=(~positive & ~labels).sum(axis=0),
    )


def prepare_inputs(state: ModelState, record: EcgRecord, /) -> tuple[EcgRecord, EcgImage]:
    """Detrended record and its 8-bit quantized rendering, the pair the model is trained on."""
    record = detrend(record)
    config = state.config
    image = render_record(record, state.layout, config.image_height, config.image_width).quantized()
    return record, image


@dataclass
class TrainingLog:
    """Deterministic record of a training run."""

    records: list[dict[str, Any]] = field(default_factory=list)

    def append(self, record: dict[str, Any], /) -> None:
        self.records.append(record)

    @property
    def steps(self) -> list[dict[str, Any]]:
        return [record for record in self.records if record["type"] == "step"]

    @property
    def epochs(self) -> list[dict[str, Any]]:
        return [record for record in self.records if record["type"] == "epoch"]

    def dumps(self) -> str:
        return "".join(json.dumps(record, sort_keys=True) + "\n" for record in self.records)

    def write(self, path: str | Path, /) -> None:
        Path(path).write_text(self.dumps())


class _InputCache:
    """Model inputs per record index, images are kept as 8-bit payloads and widened on access."""

    def __init__(self, state: ModelState, records: Sequence[EcgRecord]):
        self._state = state
        self._records = records
        self._images: dict[int, bytes] = {}

    def __getitem__(self, idx: int) -> tuple[EcgRecord, EcgImage]:
        config = self._state.config
        payload = self._images.get(idx)
        if payload is None:
            record, image = prepare_inputs(self._state, self._records[idx])
            self._images[idx] = image.to_bytes()
            return record, image
        return detrend(self._records[idx]), EcgImage.from_bytes(payload, config.image_height, config.image_width)

    @property
    def nbytes(self) -> int:
        return sum(len(payload) for payload in self._images.values())


def _validate(state: ModelState, inputs: _InputCache, indices: Sequence[int], config: TrainConfig) -> dict[str, float]:
    p_signal, p_image, kd_values, labels = [], [], [], []
    with no_grad():
        for idx in indices:
            record, image = inputs[idx]
            p_s, p_i = forward_train(
                state, record, image, enable_cmam=config.enable_cmam, enable_smam=config.enable_smam
            )
            kd_values.append(kd_kl(p_s, p_i, config.eps).item())
            p_signal.append(p_s.data)
            p_image.append(forward_infer(state, image, enable_smam=config.enable_smam).data)
            labels.append(record.labels)
    return {
        "val_f1": compute_metrics(p_image, labels, config.threshold).macro_f1,
        "val_signal_f1": compute_metrics(p_signal, labels, config.threshold).macro_f1,
        "val_kd_kl": float(np.mean(kd_values)),
    }


def fit(
    state: ModelState,
    dataset: Dataset,
    config: TrainConfig,
    *,
    logger: Logger | None = None,
) -> TrainingLog:
    """Train `state` in place on the train split and validate on the val split after every epoch.

    :raises ContractError: if the train split is empty
    :raises NonFiniteError: if the loss of a record is not finite, names the step and the record
    """
    logger = logger or uvlog.get_logger("vizecg.train")
    split = dataset.split()
    train_idx, val_idx = split.train, split.val
    if len(train_idx) == 0:
        raise ContractError("Training split is empty.\n\nFix: Use a larger dataset or a larger train fraction.")
    state.enable_cmam, state.enable_smam = config.enable_cmam, config.enable_smam
    inputs = _InputCache(state, dataset.records)
    params = state.trainable(enable_cmam=config.enable_cmam, enable_smam=config.enable_smam)
    n_batches = ceil(len(train_idx) / config.batch_size)
    total_steps = max(config.epochs * n_batches, 1)
    adam = AdamState()
    log_ = TrainingLog()
    modules = {"enable_cmam": config.enable_cmam, "enable_smam": config.enable_smam}
    finite = check_finite if config.check_finite else nullcontext

    if len(val_idx):
        log_.append({"type": "epoch", "epoch": 0, **_validate(state, inputs, val_idx, config)})

    step = 0
    for epoch in range(1, config.epochs + 1):
        order = train_idx[np.random.default_rng([config.seed, epoch]).permutation(len(train_idx))]
        epoch_sums = np.zeros(3)
        for batch_start in range(0, len(order), config.batch_size):
            batch = order[batch_start : batch_start + config.batch_size]
            lr = cosine_lr(step, total_steps, config.lr_max, config.lr_min)
            state.zero_grad()
            sums = np.zeros(3)
            for idx in batch:
                record, image = inputs[idx]
                with finite():
                    if config.kd_teacher_detach:
                        p_s, p_i, p_student = forward_distill(state, record, image, **modules)
                    else:
                        p_s, p_i = forward_train(state, record, image, **modules)
                        p_student = p_i
                    t = record.labels
                    cls = add(bce_multilabel(t, p_s, config.eps), bce_multilabel(t, p_i, config.eps))
                    kd = kd_kl(p_s, p_student, config.eps, config.kd_teacher_detach)
                    total = total_loss(cls, kd, config.lambda1, config.lambda2)
                value = total.item()
                if not isfinite(value):
                    raise NonFiniteError(
                        f"Non-finite loss at step {step} (epoch {epoch}, record {int(idx)}).",
                        step=step,
                        epoch=epoch,
                        record=int(idx),
                    )
                backward(scale(total, 1.0 / len(batch)))
                sums += (cls.item(), config.lambda2 * kd.item(), value)
            adam_step(params, adam, lr, config.beta1, config.beta2, config.adam_eps)
            means = sums / len(batch)
            log_.append(
                {
                    "type": "step",
                    "epoch": epoch,
                    "step": step,
                    "lr": lr,
                    "cls": float(means[0]),
                    "kd": float(means[1]),
                    "total": float(means[2]),
                }
            )
            epoch_sums += sums
            step += 1
        epoch_record = {"type": "epoch", "epoch": epoch}
        epoch_record.update(zip(("cls", "kd", "total"), (float(value) for value in epoch_sums / len(train_idx))))
        if len(val_idx):
            epoch_record.update(_validate(state, inputs, val_idx, config))
        log_.append(epoch_record)
        logger.info("epoch finished", **{key: value for key, value in epoch_record.items() if key != "type"})
    return log_


def evaluate(
    state: ModelState,
    records: Sequence[EcgRecord],
    mode: EvalMode = "image",
    *,
    threshold: float = 0.5,
    enable_cmam: bool | None = None,
    enable_smam: bool | None = None,
) -> MetricsReport:
    """Score the model in signal-inference (two-stream `p_s`) or image-inference (image only) mode.

    Attention modules default to the ones `state` was trained with.
    """
    if mode not in ("signal", "image"):
        raise ContractError(f"Unknown evaluation mode: {mode}", mode=mode)
    predictions, labels = [], []
    with no_grad():
        for record in records:
            record, image = prepare_inputs(state, record)
            if mode == "signal":
                p = forward_train(state, record, image, enable_cmam=enable_cmam, enable_smam=enable_smam)[0]
            else:
                p = forward_infer(state, image, enable_smam=enable_smam)
            predictions.append(p.data)
            labels.append(record.labels)
    return compute_metrics(np.array(predictions).reshape(-1, N_CLASSES), labels, threshold)


ABLATIONS: tuple[tuple[str, bool, bool], ...] = (
    ("full", True, True),
    ("w/o SMAM", True, False),
    ("w/o CMAM", False, True),
    ("w/o both", False, False),
)  #: name, enable_cmam, enable_smam


@dataclass
class AblationRow:
    name: str
    enable_cmam: bool
    enable_smam: bool
    f1: list[float]  #: image-inference macro F1 on the test split per seed

    @property
    def median_f1(self) -> float:
        return float(median(self.f1))


def run_ablation(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seeds: Sequence[int],
    *,
    layout: LayoutSpec | None = None,
    logger: Logger | None = None,
) -> list[AblationRow]:
    """Train every attention-module configuration once per seed and score it on the test split."""
    logger = logger or uvlog.get_logger("vizecg.train")
    test = dataset.subset(dataset.split().test)
    rows = []
    for name, enable_cmam, enable_smam in ABLATIONS:
        row = AblationRow(name, enable_cmam, enable_smam, [])
        for seed in seeds:
            config = replace(train_config, seed=seed, enable_cmam=enable_cmam, enable_smam=enable_smam)
            state = init_model(model_config, seed=seed, layout=layout)
            fit(state, dataset, config, logger=logger)
            report = evaluate(state, test, "image", threshold=config.threshold)
            row.f1.append(report.macro_f1)
            logger.info("ablation run finished", config=name, seed=seed, f1=report.macro_f1)
        rows.append(row)
    return rows
