"""Training loops: permutation pretraining, regression fine-tuning,
SGD with cosine decay, early stopping, and evaluation metrics.

Pretraining walks the two-axis curriculum: each epoch draws one
permutation per sample from the current Boltzmann sampler, shuffles
band segments, and minimizes the mean negative log-probability of the
true segment origins. Validation accuracy (exact-match over uniformly
drawn permutations) feeds the phase machine; a phase change rebuilds
the permutation head for the new segment count while the encoder
persists. Fine-tuning attaches the regression head and minimizes MSE
end to end, early-stopping on validation R^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import curriculum as C
from . import data as D
from . import model as M
from . import tensor as T
from .tensor import NonFiniteError, Tape, Tensor

__all__ = [
    "TrainConfig",
    "SGD",
    "MetricsReport",
    "DivergenceError",
    "PretrainResult",
    "FinetuneResult",
    "pretrain",
    "evaluate_pretext",
    "permutation_accuracy",
    "finetune",
    "compute_metrics",
    "metrics_banner",
    "fit_input_norm",
    "apply_input_norm",
    "PRETRAIN_EPOCHS",
    "FINETUNE_EPOCHS",
    "PRETRAIN_LR",
    "FINETUNE_LR",
]

PRETRAIN_EPOCHS = 200
FINETUNE_EPOCHS = 150
PRETRAIN_LR = 0.03
FINETUNE_LR = 0.01


def fit_input_norm(cubes: np.ndarray) -> tuple:
    """Scalar (mean, sd) over every value in the training cubes.

    One global affine, not per-band: per-band centering would give every
    band the same mean and erase the cross-band structure the pretext
    task has to read. Flat data degrades to sd = 1.
    """
    mu = float(np.mean(cubes, dtype=np.float64))
    sd = float(np.std(cubes, dtype=np.float64))
    return mu, sd if sd > 0.0 else 1.0


def apply_input_norm(cubes: np.ndarray, norm: tuple) -> np.ndarray:
    mu, sd = norm
    return ((cubes - np.float32(mu)) / np.float32(sd)).astype(np.float32)


@dataclass(frozen=True)
class TrainConfig:
    """Loop hyperparameters; one instance per training phase."""

    epochs: int = PRETRAIN_EPOCHS
    batch_size: int = 64
    lr: float = PRETRAIN_LR
    seed: int = 0
    patience: int = 20
    clip_norm: float = 1.0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.clip_norm < 0:
            raise ValueError(f"clip_norm must be >= 0, got {self.clip_norm}")

    @staticmethod
    def finetune_defaults(**overrides) -> "TrainConfig":
        base = {"epochs": FINETUNE_EPOCHS, "lr": FINETUNE_LR}
        base.update(overrides)
        return TrainConfig(**base)


class SGD:
    """Momentum SGD with a whole-run cosine learning-rate decay.

    Effective lr at step s is lr0 * 0.5 * (1 + cos(pi * s / horizon)),
    clamped to zero past the horizon. Velocity slots are keyed by
    tensor identity so freshly registered tensors (a rebuilt head)
    start from zero momentum while older slots persist.

    clip_norm > 0 rescales each step's gradients to that global L2
    norm when they exceed it. Typical norms here sit near 0.1, so a
    bound of ~1 never touches healthy steps; it only arrests the
    spikes that otherwise feed back into weight growth and collapse.
    """

    def __init__(self, lr: float, horizon: int, momentum: float = 0.9,
                 clip_norm: float = 0.0):
        if horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {horizon}")
        self.lr0 = lr
        self.horizon = horizon
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.step_index = 0
        self._velocity = {}

    def effective_lr(self) -> float:
        frac = min(self.step_index / self.horizon, 1.0)
        return self.lr0 * 0.5 * (1.0 + math.cos(math.pi * frac))

    def register(self, tensors) -> None:
        for t in tensors:
            if id(t) not in self._velocity:
                self._velocity[id(t)] = (t, np.zeros_like(t.data))

    def forget(self, tensors) -> None:
        for t in tensors:
            self._velocity.pop(id(t), None)

    def step(self, grads: dict) -> None:
        lr = self.effective_lr()
        scale = 1.0
        if self.clip_norm > 0.0:
            sq = 0.0
            for t, _ in self._velocity.values():
                g = grads.get(t)
                if g is not None:
                    sq += float(np.sum(np.square(g, dtype=np.float64)))
            total = math.sqrt(sq)
            if total > self.clip_norm:
                scale = self.clip_norm / total
        for t, vel in self._velocity.values():
            g = grads.get(t)
            if g is None:
                continue
            vel *= self.momentum
            vel += g if scale == 1.0 else g * scale
            t.data = t.data - (lr * vel).astype(t.data.dtype)
        self.step_index += 1


class DivergenceError(RuntimeError):
    """Raised when training hits a non-finite loss; carries the last
    finite parameter snapshot and the logs up to the failure."""

    def __init__(self, message, checkpoint=None, logs=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.logs = logs or []


# ------------------------------------------------------------- metrics


@dataclass(frozen=True)
class MetricsReport:
    """Regression and pretext evaluation summary."""

    r2: float
    rmse: float
    mae: float
    rpd: float
    r2_defined: bool = True
    rpd_defined: bool = True
    perm_exact_match_acc: float = float("nan")
    perm_per_segment_acc: float = float("nan")
    epoch: int = 0

    def to_dict(self) -> dict:
        return {
            "r2": self.r2,
            "rmse": self.rmse,
            "mae": self.mae,
            "rpd": self.rpd,
            "r2_defined": self.r2_defined,
            "rpd_defined": self.rpd_defined,
            "perm_exact_match_acc": self.perm_exact_match_acc,
            "perm_per_segment_acc": self.perm_per_segment_acc,
            "epoch": self.epoch,
        }


def compute_metrics(predictions, targets, epoch: int = 0) -> MetricsReport:
    """R^2, RMSE, MAE, and RPD = sd(targets)/RMSE with sd over n-1.

    Zero target variance leaves R^2 and RPD undefined: both report 0.0
    with their defined-flags cleared. A perfect fit (RMSE = 0) with
    spread targets reports infinite RPD.
    """
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if pred.shape != y.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} predictions vs {y.shape[0]} targets")
    if y.size < 2:
        raise ValueError(f"need at least 2 samples, got {y.size}")
    residuals = pred - y
    rmse = float(np.sqrt(np.mean(residuals**2)))
    mae = float(np.mean(np.abs(residuals)))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return MetricsReport(0.0, rmse, mae, 0.0, r2_defined=False, rpd_defined=False, epoch=epoch)
    r2 = 1.0 - float(np.sum(residuals**2)) / ss_tot
    sd = float(np.std(y, ddof=1))
    rpd = math.inf if rmse == 0.0 else sd / rmse
    return MetricsReport(r2, rmse, mae, rpd, epoch=epoch)


def metrics_banner(report: MetricsReport) -> str:
    """One-line summary; RPD above 3.0 earns the excellent label."""
    if not report.rpd_defined:
        return f"R2 undefined (flat targets), RMSE {report.rmse:.4f}, MAE {report.mae:.4f}"
    line = f"R2 {report.r2:.4f}, RMSE {report.rmse:.4f}, MAE {report.mae:.4f}, RPD {report.rpd:.4f}"
    if report.rpd > 3.0:
        line += " -- excellent (RPD > 3.0)"
    return line


# ------------------------------------------------------------ pretext


def permutation_accuracy(decoded: np.ndarray, truth: np.ndarray) -> tuple:
    """(exact_match, per_segment) fractions for decoded vs true maps."""
    decoded = np.asarray(decoded)
    truth = np.asarray(truth)
    if decoded.shape != truth.shape or decoded.ndim != 2:
        raise ValueError(f"need matching (samples, n) maps, got {decoded.shape} and {truth.shape}")
    exact = float(np.mean(np.all(decoded == truth, axis=1)))
    per_segment = float(np.mean(decoded == truth))
    return exact, per_segment


def _uniform_maps(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permuted(np.tile(np.arange(n), (count, 1)), axis=1)


def _forward_batches(cubes, params, head, n, batch_size):
    for i in range(0, len(cubes), batch_size):
        xb = cubes[i : i + batch_size]
        z = M.encode(Tensor(xb), params)
        yield i, M.perm_head(z, head, n)


def evaluate_pretext(params, head, cubes, rng, batch_size: int = 128) -> tuple:
    """Exact-match and per-segment accuracy over uniformly drawn
    permutations (one per sample), argmax decoding."""
    if len(cubes) == 0:
        raise ValueError("validation set is empty")
    n = head.n_segments
    maps = _uniform_maps(n, len(cubes), rng)
    shuffled = D.permute_bands_batch(cubes, maps, n)
    decoded = np.empty_like(maps)
    for i, p in _forward_batches(shuffled, params, head, n, batch_size):
        decoded[i : i + batch_size] = M.decode_argmax(p.data)
    return permutation_accuracy(decoded, maps)


def _snapshot(params: M.EncoderParams, head) -> dict:
    arrays = {name: t.data.copy() for name, t in M.encoder_state(params).items()}
    if head is not None:
        arrays.update({f"head.{n}": t.data.copy() for n, t in head.named()})
    return arrays


@dataclass
class PretrainResult:
    params: M.EncoderParams
    head: M.PermHeadParams
    state: C.CurriculumState
    logs: list = field(default_factory=list)
    transitions: list = field(default_factory=list)
    converged_epoch: int = -1
    input_norm: tuple = (0.0, 1.0)


def pretrain(
    train_set: D.SpectraDataset,
    val_set: D.SpectraDataset,
    config: TrainConfig,
    encoder_config: M.EncoderConfig,
    schedule: C.Schedule = C.Schedule(),
    state: C.CurriculumState = C.CurriculumState(),
    fixed_n: int = 0,
    stop_at_exact: float = 0.0,
    input_norm: tuple = None,
    progress=None,
) -> PretrainResult:
    """Curriculum pretraining loop; returns live parameters plus logs.

    ``fixed_n`` > 0 disables the curriculum: the segment count stays
    fixed and permutations are drawn uniformly (the direct-training
    baseline). ``stop_at_exact`` > 0 stops early once validation
    exact-match reaches it. A non-finite loss raises DivergenceError
    carrying the last finite epoch's snapshot. Inputs are standardized
    by one global (mean, sd) fit on the training cubes unless
    ``input_norm`` supplies the pair; the pair used is reported on the
    result and must be reused for any later pass over this encoder.
    """
    rng = np.random.default_rng(config.seed)
    init_rng = np.random.default_rng(rng.integers(2**63))
    head_rng = np.random.default_rng(rng.integers(2**63))
    val_rng = np.random.default_rng(rng.integers(2**63))

    params = M.EncoderParams(encoder_config, init_rng)
    n = fixed_n if fixed_n else state.current_n
    head = M.PermHeadParams(encoder_config.embed_dim, n, head_rng)

    steps_per_epoch = max(1, math.ceil(len(train_set) / config.batch_size))
    opt = SGD(config.lr, horizon=steps_per_epoch * config.epochs, clip_norm=config.clip_norm)
    opt.register(params.tensors())
    opt.register(head.tensors())

    norm = fit_input_norm(train_set.cubes) if input_norm is None else tuple(input_norm)
    cubes = apply_input_norm(train_set.cubes, norm)
    val_cubes = apply_input_norm(val_set.cubes, norm)
    result = PretrainResult(params, head, state, input_norm=norm)
    last_good = _snapshot(params, head)

    for epoch in range(config.epochs):
        if fixed_n:
            sampler = None
            temp = math.inf
        else:
            n, sampler = C.task_spec(state, schedule)
            temp = sampler.temperature
            if n != head.n_segments:
                opt.forget(head.tensors())
                head = M.PermHeadParams(encoder_config.embed_dim, n, head_rng)
                opt.register(head.tensors())
                result.head = head

        order = rng.permutation(len(cubes))
        losses = []
        try:
            for i in range(0, len(order), config.batch_size):
                idx = order[i : i + config.batch_size]
                if sampler is None:
                    maps = _uniform_maps(n, len(idx), rng)
                else:
                    maps = sampler.sample_index_batch(len(idx), rng)
                xb = D.permute_bands_batch(cubes[idx], maps, n)
                with Tape() as tape:
                    z = M.encode(Tensor(xb), params)
                    p = M.perm_head(z, head, n)
                    loss = M.pretext_loss(p, maps)
                if not np.isfinite(loss.data):
                    raise NonFiniteError("pretext loss is not finite")
                grads = tape.gradients(loss, params.tensors() + head.tensors())
                opt.step(grads)
                losses.append(float(loss.data))
            # forward-only, so a larger batch is safe and faster
            exact, seg = evaluate_pretext(params, head, val_cubes, val_rng, max(config.batch_size, 128))
        except NonFiniteError as e:
            raise DivergenceError(
                f"diverged at epoch {epoch}: {e}", checkpoint=last_good, logs=result.logs
            ) from e

        record = {
            "epoch": epoch,
            "phase_n": n,
            "temperature": temp,
            "train_loss": float(np.mean(losses)),
            "val_exact_acc": exact,
            "val_seg_acc": seg,
            "lr": opt.effective_lr(),
        }
        result.logs.append(record)
        if progress is not None:
            progress(record)
        last_good = _snapshot(params, head)

        if not fixed_n:
            state, transition = C.update(state, exact, schedule)
            result.state = state
            if transition is not None:
                result.transitions.append(transition.record())
        if stop_at_exact and exact >= stop_at_exact:
            result.converged_epoch = epoch
            break

    return result


# ------------------------------------------------------------ finetune


@dataclass
class FinetuneResult:
    params: M.EncoderParams
    head: M.RegressionHeadParams
    report: MetricsReport
    logs: list = field(default_factory=list)
    target_mean: float = 0.0
    target_sd: float = 1.0
    predictions: np.ndarray = None
    test_targets: np.ndarray = None
    input_norm: tuple = (0.0, 1.0)


def _predict(cubes, params, head, mean, sd, batch_size) -> np.ndarray:
    out = np.empty(len(cubes), dtype=np.float64)
    for i in range(0, len(cubes), batch_size):
        z = M.encode(Tensor(cubes[i : i + batch_size]), params)
        pred = M.regression_forward(z, head)
        out[i : i + batch_size] = pred.data.astype(np.float64) * sd + mean
    return out


def finetune(
    params: M.EncoderParams,
    labeled: D.SpectraDataset,
    config: TrainConfig,
    freeze_encoder: bool = False,
    input_norm: tuple = None,
    progress=None,
) -> FinetuneResult:
    """Regression fine-tuning with early stopping on validation R^2.

    The labeled set is split 70/15/15 (stratified on targets) inside;
    targets are standardized with training-split statistics for the
    loss and mapped back for all reported numbers. The encoder is
    updated unless ``freeze_encoder``. A pretrained encoder should get
    the same ``input_norm`` pair it was trained with; by default the
    pair is fit on the internal training split. Returns the
    best-validation parameters and the test-split metrics report.
    """
    if labeled.targets is None:
        raise ValueError("finetune needs a labeled dataset")
    if len(labeled) < 10:
        raise ValueError(f"need at least 10 labeled samples, got {len(labeled)}")

    rng = np.random.default_rng(config.seed)
    head = M.RegressionHeadParams(params.config.embed_dim, np.random.default_rng(rng.integers(2**63)))
    train, val, test = D.split_dataset(labeled, seed=config.seed)
    norm = fit_input_norm(train.cubes) if input_norm is None else tuple(input_norm)
    train_cubes = apply_input_norm(train.cubes, norm)
    val_cubes = apply_input_norm(val.cubes, norm)
    test_cubes = apply_input_norm(test.cubes, norm)

    # float64 so identical float32 targets give exactly zero spread
    y_mean = float(train.targets.mean(dtype=np.float64))
    y_sd = float(train.targets.std(dtype=np.float64))
    sd_flat = y_sd == 0.0
    if sd_flat:
        y_sd = 1.0
    ytr = ((train.targets - y_mean) / y_sd).astype(np.float32)

    trainable = head.tensors() if freeze_encoder else params.tensors() + head.tensors()
    steps_per_epoch = max(1, math.ceil(len(train) / config.batch_size))
    opt = SGD(config.lr, horizon=steps_per_epoch * config.epochs, clip_norm=config.clip_norm)
    opt.register(trainable)

    result = FinetuneResult(params, head, None, target_mean=y_mean, target_sd=y_sd, input_norm=norm)
    best_score = -math.inf
    best_epoch = -1
    best_arrays = None
    stale = 0

    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        losses = []
        try:
            for i in range(0, len(order), config.batch_size):
                idx = order[i : i + config.batch_size]
                with Tape() as tape:
                    z = M.encode(Tensor(train_cubes[idx]), params)
                    pred = M.regression_forward(z, head)
                    diff = T.sub(pred, Tensor(ytr[idx]))
                    loss = T.mean_all(T.mul(diff, diff))
                if not np.isfinite(loss.data):
                    raise NonFiniteError("finetune loss is not finite")
                grads = tape.gradients(loss, trainable)
                opt.step(grads)
                losses.append(float(loss.data))
        except NonFiniteError as e:
            raise DivergenceError(
                f"diverged at epoch {epoch}: {e}", checkpoint=best_arrays, logs=result.logs
            ) from e

        val_pred = _predict(val_cubes, params, head, y_mean, y_sd, config.batch_size)
        val_report = compute_metrics(val_pred, val.targets, epoch=epoch)
        # flat validation targets leave R^2 undefined; fall back to
        # negative RMSE so improvement tracking still works
        score = val_report.r2 if val_report.r2_defined else -val_report.rmse
        record = {
            "epoch": epoch,
            "train_mse": float(np.mean(losses)),
            "val_r2": val_report.r2,
            "val_rmse": val_report.rmse,
            "lr": opt.effective_lr(),
        }
        result.logs.append(record)
        if progress is not None:
            progress(record)

        if score > best_score:
            best_score = score
            best_epoch = epoch
            best_arrays = _snapshot(params, head)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    if best_arrays is not None:
        for name, t in M.encoder_state(params).items():
            t.data = best_arrays[name]
        for name, t in head.named():
            t.data = best_arrays[f"head.{name}"]

    test_pred = _predict(test_cubes, params, head, y_mean, y_sd, config.batch_size)
    result.report = compute_metrics(test_pred, test.targets, epoch=best_epoch)
    result.predictions = test_pred
    result.test_targets = test.targets.astype(np.float64)
    return result
