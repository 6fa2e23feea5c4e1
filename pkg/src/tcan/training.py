"""Losses, optimisers, the training loop and deterministic evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import LONG, TrainConfig
from .data import batch_iter, collate
from .metrics import MetricsReport, evaluate_predictions
from .model import TCAN
from .tensor import ContractError, Tape, Tensor

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "loss_multi", "loss_uni", "loss_total", "val_mae", "val_corr",
                   "val_acc7", "val_acc2", "val_f1")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _labels(y_gt, k: int) -> Tensor:
    y = y_gt if isinstance(y_gt, Tensor) else Tensor(np.asarray(y_gt, dtype=np.float32))
    if y.size != k:
        raise ContractError(f"{k} predictions but {y.size} labels")
    return T.reshape(y, (k,)) if y.shape != (k,) else y


def loss_multi(y_pred: Tensor, y_gt) -> Tensor:
    """Mean absolute error over the batch."""
    k = y_pred.size
    if k == 0:
        raise ContractError("loss over an empty batch")
    pred = T.reshape(y_pred, (k,)) if y_pred.shape != (k,) else y_pred
    return T.mean_all(T.absolute(T.sub(pred, _labels(y_gt, k))))


def loss_uni(y_uni, y_gt) -> Tensor:
    """Per-sample sum over modalities of the absolute error, averaged over the batch.

    ``y_uni`` is either a mapping of per-modality ``Tensor[K]`` predictions or
    a single ``Tensor[K x M]``.
    """
    if isinstance(y_uni, Mapping):
        total = None
        for pred in y_uni.values():
            term = loss_multi(pred, y_gt)
            total = term if total is None else T.add(total, term)
        if total is None:
            raise ContractError("loss_uni needs at least one modality")
        return total
    k = y_uni.shape[0]
    if k == 0:
        raise ContractError("loss over an empty batch")
    y = T.reshape(_labels(y_gt, k), (k, 1))
    return T.scale(T.sum_all(T.absolute(T.sub(y_uni, y))), 1.0 / k)


def loss_total(l_multi: Tensor, l_uni: Optional[Tensor], lam: float) -> Tensor:
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    if l_uni is None:
        return l_multi
    return T.add(l_multi, T.scale(l_uni, lam))


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------

def _check_finite(params: Mapping[str, Tensor]) -> None:
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(name)


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                          for p in params.values() if p.grad is not None))
    if total > max_norm > 0:
        factor = np.float32(max_norm / (total + 1e-6))
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return total


class Adam:
    """Adam with bias correction; moments are kept in one flat float32 buffer."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self._names = list(params)
        sizes = [params[n].size for n in self._names]
        self._bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self._m = np.zeros(int(self._bounds[-1]), dtype=np.float32)
        self._v = np.zeros_like(self._m)

    def _flat_grad(self) -> np.ndarray:
        parts = []
        for n in self._names:
            g = self.params[n].grad
            parts.append(g.reshape(-1) if g is not None else np.zeros(self.params[n].size, np.float32))
        flat = np.concatenate(parts) if parts else np.zeros(0, np.float32)
        if not np.isfinite(flat).all():
            _check_finite(self.params)
        return flat

    def step(self) -> None:
        g = self._flat_grad()
        self.t += 1
        # complements are formed in float64; 1 - float32(0.999) loses four digits
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        r1, r2 = np.float32(1.0 - self.beta1), np.float32(1.0 - self.beta2)
        c1 = np.float32(1.0 - self.beta1 ** self.t)
        c2 = np.float32(1.0 - self.beta2 ** self.t)
        m, v = self._m, self._v
        m *= b1
        m += r1 * g
        v *= b2
        v += r2 * (g * g)
        update = np.float32(self.lr) * (m / c1) / (np.sqrt(v / c2) + np.float32(self.eps))
        for i, n in enumerate(self._names):
            p = self.params[n]
            p.data -= update[self._bounds[i]:self._bounds[i + 1]].reshape(p.shape)

    @property
    def m(self) -> dict:
        return self._unflatten(self._m)

    @property
    def v(self) -> dict:
        return self._unflatten(self._v)

    def _unflatten(self, flat: np.ndarray) -> dict:
        return {n: flat[self._bounds[i]:self._bounds[i + 1]].reshape(self.params[n].shape)
                for i, n in enumerate(self._names)}

    def state_dict(self) -> dict:
        return {"kind": "adam", "step": self.t,
                "tensors": {**{f"m/{n}": a for n, a in self.m.items()},
                            **{f"v/{n}": a for n, a in self.v.items()}}}

    def load_state_dict(self, state: dict) -> None:
        _expect_kind(state, "adam")
        self.t = int(state["step"])
        for i, n in enumerate(self._names):
            lo, hi = self._bounds[i], self._bounds[i + 1]
            self._m[lo:hi] = np.asarray(state["tensors"][f"m/{n}"], dtype=np.float32).reshape(-1)
            self._v[lo:hi] = np.asarray(state["tensors"][f"v/{n}"], dtype=np.float32).reshape(-1)


class SGD:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-2, momentum: float = 0.9):
        self.params = params
        self.lr, self.momentum = lr, momentum
        self.t = 0
        self.buf = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self) -> None:
        _check_finite(self.params)
        self.t += 1
        lr, mu = np.float32(self.lr), np.float32(self.momentum)
        for name, p in self.params.items():
            if p.grad is None:
                continue
            b = self.buf[name]
            b *= mu
            b += p.grad
            p.data -= lr * b

    def state_dict(self) -> dict:
        return {"kind": "sgd", "step": self.t,
                "tensors": {f"buf/{n}": a for n, a in self.buf.items()}}

    def load_state_dict(self, state: dict) -> None:
        _expect_kind(state, "sgd")
        self.t = int(state["step"])
        for n in self.params:
            self.buf[n] = np.array(state["tensors"][f"buf/{n}"], dtype=np.float32)


def _expect_kind(state: dict, kind: str) -> None:
    if state.get("kind") != kind:
        raise ValueError(f"optimizer state is for {state.get('kind')!r}, not {kind!r}")


def make_optimizer(params: Mapping[str, Tensor], cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SGD(params, cfg.learning_rate, cfg.momentum)


def optimizer_step(optimizer) -> None:
    optimizer.step()


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def model_modalities(model: TCAN) -> tuple:
    return tuple(LONG[m] for m in model.config.used_modalities)


def predict(model: TCAN, samples: Sequence, batch_size: int = 64) -> np.ndarray:
    """Predictions in sample order; no tape is active, so nothing is recorded."""
    mods = model_modalities(model)
    out = []
    for start in range(0, len(samples), batch_size):
        batch = collate(samples[start:start + batch_size], mods)
        out.append(model.predict(batch.inputs))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def evaluate(model: TCAN, samples: Sequence, batch_size: int = 64,
             f1_average: str = "binary") -> Optional[MetricsReport]:
    if not samples:
        return None
    preds = predict(model, samples, batch_size)
    labels = np.array([s.label for s in samples], dtype=np.float32)
    return evaluate_predictions(preds, labels, f1_average)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss_multi: float
    loss_uni: float
    loss_total: float
    val: Optional[MetricsReport]

    def row(self) -> dict:
        nan = float("nan")
        v = self.val
        return {"epoch": self.epoch, "loss_multi": self.loss_multi, "loss_uni": self.loss_uni,
                "loss_total": self.loss_total,
                "val_mae": v.mae if v else nan, "val_corr": v.corr if v else nan,
                "val_acc7": v.acc7 if v else nan, "val_acc2": v.acc2 if v else nan,
                "val_f1": v.f1 if v else nan}


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_metrics: Optional[MetricsReport] = None
    best_params: dict = field(default_factory=dict)
    checkpoint_path: Optional[Path] = None
    optimizer: object = None


def train_step(model: TCAN, batch, optimizer, lam: float, clip_norm: float = 0.0) -> tuple:
    """One optimisation step; returns ``(loss_multi, loss_uni or nan, loss_total)``."""
    model.zero_grads()
    with Tape() as tape:
        out = model.forward(batch.inputs, training=True)
        lm = loss_multi(out.y_pred, batch.labels)
        lu = loss_uni(out.y_uni, batch.labels) if out.y_uni else None
        lt = loss_total(lm, lu, lam)
    tape.backward(lt)
    if clip_norm > 0:
        clip_grad_norm(model.params, clip_norm)
    optimizer.step()
    return float(lm.data), float(lu.data) if lu is not None else float("nan"), float(lt.data)


def train(model: TCAN, train_samples: Sequence, val_samples: Sequence, cfg: TrainConfig,
          run_config: Optional[dict] = None) -> TrainResult:
    """Train with per-epoch validation and keep the parameters with the lowest val MAE.

    On return the model holds the selected parameters. When
    ``cfg.checkpoint_dir`` is set, ``best.tckp`` and ``history.csv`` are
    written there as training progresses.
    """
    from .checkpoint import save_checkpoint

    optimizer = make_optimizer(model.params, cfg)
    mods = model_modalities(model)
    lam = model.config.lambda_
    result = TrainResult(optimizer=optimizer)
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    best_score = math.inf
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(3)
        count = 0
        for batch in batch_iter(train_samples, cfg.batch_size, cfg.seed, epoch, modalities=mods):
            losses = train_step(model, batch, optimizer, lam, cfg.clip_norm)
            sums += np.array(losses) * len(batch)
            count += len(batch)
        means = sums / max(count, 1)
        val = evaluate(model, val_samples, cfg.eval_batch_size)
        record = EpochRecord(epoch, float(means[0]), float(means[1]), float(means[2]), val)
        result.history.append(record)
        score = val.mae if val is not None else record.loss_multi
        logger.info("epoch %d loss_multi=%.4f loss_total=%.4f val_mae=%s", epoch,
                    record.loss_multi, record.loss_total, f"{val.mae:.4f}" if val else "-")
        if score < best_score:
            best_score = score
            stale = 0
            result.best_epoch = epoch
            result.best_metrics = val
            result.best_params = {n: p.data.copy() for n, p in model.params.items()}
            if ckpt_dir:
                result.checkpoint_path = ckpt_dir / "best.tckp"
                save_checkpoint(result.checkpoint_path, model, optimizer,
                                extra={"epoch": epoch, "run": run_config or {}})
        else:
            stale += 1
        if ckpt_dir:
            write_history_csv(result.history, ckpt_dir / "history.csv")
        if cfg.patience and stale >= cfg.patience:
            break
    for n, arr in result.best_params.items():
        model.params[n].data[...] = arr
    return result


def write_history_csv(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for rec in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.row().items()})


def read_history_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def fit(model_cfg, ds, train_cfg: TrainConfig, run_config: Optional[dict] = None) -> tuple:
    """Build a model seeded by ``train_cfg.seed`` and train it on ``ds``.

    This is the single code path behind the train command and every ablation
    cell, so both produce identical numbers for identical settings.
    """
    model = TCAN(model_cfg, ds.dims, seed=train_cfg.seed)
    result = train(model, ds.train, ds.val, train_cfg, run_config)
    return model, result
