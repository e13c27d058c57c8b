"""Penalized maximum-likelihood training.

The loss of one batch is

    mean(-log_prob) + sp_scale * [ sum_smooth lam * g'Pg
                                   + sum_ridge la * |w|^2
                                   + sum_lasso la * (|u|^2 + |v|^2)/2 ]
                    + custom_penalty(params)

with sp_scale defaulting to 1/n so that the implied full-data objective is
the classic penalized negative log-likelihood.  Lasso terms use the
multiplicative reparameterization w = u*v whose quadratic penalty on (u, v)
induces an L1 penalty on w at the optimum.

Optimizers are minimal: sgd (optional momentum), rmsprop, adam (the
default), and adadelta; all support the hyperbolic decay
lr_t = lr / (1 + decay * t) with t counting completed steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .graph import ParamStore, Tape, backward, forward

_DEFAULT_LR = {"sgd": 0.01, "adam": 0.001, "rmsprop": 0.001, "adadelta": 1.0}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float | None = None
    decay: float = 0.0
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    rho: float | None = None
    eps: float = 1e-7
    validation_split: float = 0.0
    early_stopping: bool = False
    patience: int = 5
    shuffle: bool = True
    seed: int = 0
    sp_scale: float | None = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in _DEFAULT_LR:
            raise ConfigError(
                f"unknown optimizer {self.optimizer!r}; known: {sorted(_DEFAULT_LR)}"
            )
        if not 0.0 <= self.validation_split < 1.0:
            raise ConfigError("validation_split must lie in [0, 1)")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.lr is not None and self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.sp_scale is not None and self.sp_scale < 0:
            raise ConfigError("sp_scale must be nonnegative")


@dataclass
class FitHistory:
    loss: list[float] = field(default_factory=list)
    val_loss: list[float] | None = None
    best_epoch: int = 0  # 1-based
    stop_epoch: int = 0


# ---------------------------------------------------------------------------
# optimizers


class Sgd:
    def __init__(self, lr=0.01, momentum=0.0, decay=0.0):
        self.lr, self.momentum, self.decay = lr, momentum, decay
        self.steps = 0
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore) -> None:
        lr = self.lr / (1.0 + self.decay * self.steps)
        for name, g in store.grads.items():
            if self.momentum:
                v = self.velocity.setdefault(name, np.zeros_like(g))
                v *= self.momentum
                v -= lr * g
                store.values[name] += v
            else:
                store.values[name] -= lr * g
        self.steps += 1


class RmsProp:
    def __init__(self, lr=0.001, rho=0.9, eps=1e-7, decay=0.0):
        self.lr, self.rho, self.eps, self.decay = lr, rho, eps, decay
        self.steps = 0
        self.sq: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore) -> None:
        lr = self.lr / (1.0 + self.decay * self.steps)
        for name, g in store.grads.items():
            s = self.sq.setdefault(name, np.zeros_like(g))
            s *= self.rho
            s += (1.0 - self.rho) * g * g
            store.values[name] -= lr * g / (np.sqrt(s) + self.eps)
        self.steps += 1


class Adam:
    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-7, decay=0.0):
        self.lr, self.b1, self.b2, self.eps, self.decay = lr, beta1, beta2, eps, decay
        self.steps = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore) -> None:
        lr = self.lr / (1.0 + self.decay * self.steps)
        self.steps += 1
        t = self.steps
        for name, g in store.grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            mhat = m / (1.0 - self.b1**t)
            vhat = v / (1.0 - self.b2**t)
            store.values[name] -= lr * mhat / (np.sqrt(vhat) + self.eps)


class AdaDelta:
    def __init__(self, lr=1.0, rho=0.95, eps=1e-7, decay=0.0):
        self.lr, self.rho, self.eps, self.decay = lr, rho, eps, decay
        self.steps = 0
        self.sq_grad: dict[str, np.ndarray] = {}
        self.sq_delta: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore) -> None:
        lr = self.lr / (1.0 + self.decay * self.steps)
        for name, g in store.grads.items():
            sg = self.sq_grad.setdefault(name, np.zeros_like(g))
            sd = self.sq_delta.setdefault(name, np.zeros_like(g))
            sg *= self.rho
            sg += (1.0 - self.rho) * g * g
            delta = -np.sqrt(sd + self.eps) / np.sqrt(sg + self.eps) * g
            sd *= self.rho
            sd += (1.0 - self.rho) * delta * delta
            store.values[name] += lr * delta
        self.steps += 1


def make_optimizer(config: TrainConfig):
    lr = config.lr if config.lr is not None else _DEFAULT_LR[config.optimizer]
    if config.optimizer == "sgd":
        return Sgd(lr=lr, momentum=config.momentum, decay=config.decay)
    if config.optimizer == "rmsprop":
        return RmsProp(lr=lr, rho=config.rho if config.rho is not None else 0.9,
                       eps=config.eps, decay=config.decay)
    if config.optimizer == "adadelta":
        return AdaDelta(lr=lr, rho=config.rho if config.rho is not None else 0.95,
                        eps=config.eps, decay=config.decay)
    return Adam(lr=lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps,
                decay=config.decay)


# ---------------------------------------------------------------------------
# loss assembly


@dataclass
class BatchEval:
    loss: float
    nll: float
    penalty: float
    eta: np.ndarray
    eta_grad: np.ndarray
    tapes: list[tuple[object, Tape]]  # (bound network term, its tape)


def penalty_value(model) -> float:
    """Quadratic/reparameterized penalty over all structured terms."""
    total = 0.0
    for binding in model.bindings:
        for bt in binding.terms:
            total += bt.penalty_value(model.params)
    return total


def assemble_loss(model, idx: np.ndarray, training: bool = False,
                  rng: np.random.Generator | None = None,
                  sp_scale: float | None = None) -> BatchEval:
    """Forward pass on rows ``idx``; loss plus the d(loss)/d(eta) seed."""
    if rng is None:
        rng = np.random.default_rng(0)
    sp = model.resolve_sp_scale(sp_scale)
    eta, tapes = model.forward_batch(idx, training=training, rng=rng)
    fam = model.family
    theta = fam.apply_response(eta)
    lp = fam.impl.log_prob(theta, model.y[idx])
    nll = -float(np.mean(lp))
    pen = penalty_value(model)
    loss = nll + sp * pen
    if model.custom_penalty is not None:
        loss += float(model.custom_penalty[0](model.params.values))
    if not math.isfinite(loss):
        raise NumericError(_diagnose_nonfinite(model, eta, theta, lp, pen))
    n_b = idx.shape[0]
    eta_grad = -(1.0 / n_b) * fam.impl.dlogprob(theta, model.y[idx]) * fam.response_deriv(eta)
    return BatchEval(loss, nll, pen, eta, eta_grad, tapes)


def _diagnose_nonfinite(model, eta, theta, lp, pen) -> str:
    if not np.all(np.isfinite(eta)):
        rows, cols = np.nonzero(~np.isfinite(eta))
        name = model.family.param_names[cols[0]]
        return f"non-finite predictor for parameter {name!r} (batch row {rows[0]})"
    if not np.all(np.isfinite(lp)):
        bad = int(np.flatnonzero(~np.isfinite(lp))[0])
        return f"non-finite log-likelihood at batch row {bad}"
    if not math.isfinite(pen):
        for binding in model.bindings:
            for bt in binding.terms:
                if not math.isfinite(bt.penalty_value(model.params)):
                    return f"non-finite penalty for term {bt.term_id!r}"
    return "non-finite loss"


def backward_batch(model, idx: np.ndarray, ev: BatchEval,
                   sp_scale: float | None = None) -> None:
    """Accumulate gradients for one evaluated batch into the param store."""
    sp = model.resolve_sp_scale(sp_scale)
    model.backprop_eta(idx, ev.eta_grad, ev.tapes)
    for binding in model.bindings:
        for bt in binding.terms:
            bt.penalty_grad(model.params, sp)
    if model.custom_penalty is not None:
        for name, g in model.custom_penalty[1](model.params.values).items():
            model.params.add_grad(name, g)


def eval_loss(model, idx: np.ndarray, sp_scale: float | None = None) -> float:
    ev = assemble_loss(model, idx, training=False, sp_scale=sp_scale)
    return ev.loss


# ---------------------------------------------------------------------------
# fit loop


def fit(model, config: TrainConfig | None = None, n_val: int | None = None) -> FitHistory:
    """Train the model in place; returns (and stores) the loss history.

    The validation split takes the trailing ``floor(split * n)`` rows;
    with ``early_stopping`` the monitored loss (validation when present,
    else training) stops the run after ``patience`` epochs without
    improvement and the best-epoch weights are restored.
    """
    config = config or TrainConfig()
    config.validate()
    n = model.n
    if n_val is None:
        n_val = int(math.floor(config.validation_split * n))
    n_train = n - n_val
    if n_train < 1:
        raise DataError("validation split leaves no training rows")
    train_idx = np.arange(n_train)
    val_idx = np.arange(n_train, n)
    sp = model.resolve_sp_scale(config.sp_scale)
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config)
    model.warn_small_batches(config.batch_size)

    history = FitHistory(val_loss=[] if n_val else None)
    best = math.inf
    best_snap = None
    waited = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_train) if config.shuffle else train_idx
        running = 0.0
        for start in range(0, n_train, config.batch_size):
            batch = order[start : start + config.batch_size]
            try:
                ev = assemble_loss(model, batch, training=True, rng=rng, sp_scale=sp)
            except NumericError as exc:
                raise NumericError(
                    f"epoch {epoch}, batch {start // config.batch_size + 1}: {exc}"
                ) from exc
            model.params.zero_grads()
            backward_batch(model, batch, ev, sp_scale=sp)
            opt.step(model.params)
            running += ev.loss * batch.shape[0]
        train_loss = running / n_train
        history.loss.append(train_loss)
        if n_val:
            vloss = eval_loss(model, val_idx, sp_scale=sp)
            history.val_loss.append(vloss)
            monitored = vloss
        else:
            monitored = train_loss
        if not math.isfinite(monitored):
            raise NumericError(f"non-finite monitored loss at epoch {epoch}")
        if monitored < best:
            best = monitored
            history.best_epoch = epoch
            waited = 0
            if config.early_stopping:
                best_snap = model.params.snapshot()
        else:
            waited += 1
            if config.early_stopping and waited >= config.patience:
                break
    history.stop_epoch = len(history.loss)
    if config.early_stopping and best_snap is not None:
        model.params.restore(best_snap)
    model.history = history
    return history


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CvResult:
    folds: list[tuple[np.ndarray, np.ndarray]]
    histories: list[FitHistory]
    mean_loss: list[float]
    mean_val_loss: list[float]
    best_epoch: int  # 1-based argmin of mean validation loss
    final_val_losses: list[float]


def make_folds(n: int, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Contiguous blocks of one seeded shuffle; fold i tests block i."""
    if k < 2:
        raise ConfigError(f"cross-validation needs at least 2 folds, got {k}")
    if k > n:
        raise ConfigError(f"more folds ({k}) than rows ({n})")
    perm = np.random.default_rng(seed).permutation(n)
    blocks = np.array_split(perm, k)
    folds = []
    for i in range(k):
        test = blocks[i]
        train = np.concatenate([blocks[j] for j in range(k) if j != i])
        folds.append((train, test))
    return folds


def check_folds(folds, n: int) -> None:
    for i, (train, test) in enumerate(folds):
        train, test = np.asarray(train), np.asarray(test)
        if np.intersect1d(train, test).size:
            raise ConfigError(f"fold {i + 1}: train and test indices overlap")
        all_idx = np.concatenate([train, test])
        if all_idx.size == 0 or all_idx.min() < 0 or all_idx.max() >= n:
            raise ConfigError(f"fold {i + 1}: indices out of range")


def _ragged_mean(curves: list[list[float]]) -> list[float]:
    depth = max(len(c) for c in curves)
    out = []
    for e in range(depth):
        vals = [c[e] for c in curves if len(c) > e]
        out.append(float(np.mean(vals)))
    return out


def cross_validate(y, data, spec, cv_folds, config: TrainConfig | None = None,
                   n_workers: int = 1) -> CvResult:
    """Refit the model per fold; fold test rows serve as validation.

    ``cv_folds`` is an integer fold count or an explicit list of
    (train_indices, test_indices) pairs.  Fold i trains with seed
    ``config.seed + i`` from a fresh initialization.
    """
    from .model import build  # local import to avoid a cycle

    config = config or TrainConfig()
    config.validate()
    from . import data as data_mod

    table = data_mod.as_table(data)
    y = np.asarray(y, float)
    n = y.shape[0]
    if isinstance(cv_folds, int):
        folds = make_folds(n, cv_folds, config.seed)
    else:
        folds = [(np.asarray(tr, int), np.asarray(te, int)) for tr, te in cv_folds]
        check_folds(folds, n)

    def run_fold(i: int) -> FitHistory:
        train, test = folds[i]
        order = np.concatenate([train, test])
        sub = {k: v[order] for k, v in table.items()}
        fold_seed = config.seed + i
        model = build(y[order], sub, spec, seed=fold_seed)
        fold_config = replace(config, seed=fold_seed, validation_split=0.0)
        return fit(model, fold_config, n_val=test.shape[0])

    if n_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=min(n_workers, len(folds))) as pool:
            histories = list(pool.map(run_fold, range(len(folds))))
    else:
        histories = [run_fold(i) for i in range(len(folds))]

    mean_loss = _ragged_mean([h.loss for h in histories])
    mean_val = _ragged_mean([h.val_loss for h in histories])
    best_epoch = int(np.argmin(mean_val)) + 1
    return CvResult(
        folds=folds,
        histories=histories,
        mean_loss=mean_loss,
        mean_val_loss=mean_val,
        best_epoch=best_epoch,
        final_val_losses=[h.val_loss[-1] for h in histories],
    )
