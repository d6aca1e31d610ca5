"""Warmup, search and fine-tuning phases of the channel search.

warmup
    weights only, task loss, every gate frozen at theta = 1.
search
    weights and gates jointly on ``task + lam*|S - s*| + mu*O``; early stop on
    the validation task loss, restoring the best snapshot.
finetune
    weights only, task loss, gates frozen at the learned values.

Gates are frozen by switching off ``requires_grad`` on theta, so no theta
gradient is ever computed outside the search phase.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .cost import CostReport, exact_counts
from .data import Dataset
from .loss import LossBreakdown, TargetEqualsSeedError, check_strengths, composite_loss, compute_lambda
from .masks import project
from .model import Model, build_seed, task_loss
from .optim import Adam
from .spec import NetworkSpec

log = logging.getLogger(__name__)

_PHASE_IDS = {"warmup": 1, "search": 2, "finetune": 3, "calibrate": 4}


class ConfigError(ValueError):
    pass


@dataclass
class SearchConfig:
    s_star_fraction: float = 0.5
    mu: float = 0.0
    epochs_warmup: int = 10
    epochs_finetune: int = 6
    max_search_epochs: int = 30
    patience: int = 10
    lr_w: float = 5e-3
    lr_theta: float = 5e-3
    batch_size: int = 64
    rng_seed: int = 0
    val_fraction: float = 0.10
    # search epochs count as early-stop candidates only inside this band around s*
    size_tolerance: float = 0.03
    recalibrate_bn: bool = True
    # multiplies the closed-form lambda; for sensitivity experiments only
    lambda_scale: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 < self.s_star_fraction <= 1:
            raise ConfigError(f"s_star_fraction must be in (0, 1], got {self.s_star_fraction}")
        if self.mu < 0:
            raise ConfigError(f"mu must be non-negative, got {self.mu}")
        for name in ("epochs_warmup", "epochs_finetune", "max_search_epochs", "patience", "batch_size"):
            val = getattr(self, name)
            if not isinstance(val, int) or val < 1:
                raise ConfigError(f"{name} must be a positive integer, got {val!r}")
        if self.lr_w <= 0 or self.lr_theta <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 < self.val_fraction < 0.5:
            raise ConfigError(f"val_fraction must be in (0, 0.5), got {self.val_fraction}")
        if self.size_tolerance <= 0:
            raise ConfigError(f"size_tolerance must be positive, got {self.size_tolerance}")
        if self.lambda_scale <= 0:
            raise ConfigError(f"lambda_scale must be positive, got {self.lambda_scale}")

    @classmethod
    def from_spec(cls, spec: NetworkSpec, **overrides) -> "SearchConfig":
        """Defaults from the network file's ``training`` section, then overrides."""
        known = {f.name for f in dataclasses.fields(cls)}
        values = {k: v for k, v in spec.training.items() if k in known}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def replace(self, **changes) -> "SearchConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SeedStats:
    task_loss: float
    size: int
    ops: int
    epochs: int


@dataclass
class SearchOutcome:
    epochs: int
    best_epoch: int
    best_val_loss: float
    last_val_loss: float
    stopped_early: bool


@dataclass
class RunResult:
    model: Model
    channel_config: dict[str, int]
    cost: CostReport
    val_accuracy: float
    test_accuracy: float
    post_search_test_accuracy: float
    lam: float
    mu: float
    s_star: float
    epochs_used: dict[str, int]
    loss_trace: list[LossBreakdown] = field(default_factory=list)
    seed: SeedStats | None = None


# ------------------------------------------------------------------- data


def split_validation(train: Dataset, fraction: float, rng_seed: int) -> tuple[Dataset, Dataset]:
    """Stratified random split; class shares of the validation part are within one sample of ideal."""
    if not 0 < fraction < 0.5:
        raise ConfigError(f"val_fraction must be in (0, 0.5), got {fraction}")
    rng = np.random.default_rng([rng_seed, 0x5EED])
    labels = train.y
    classes, counts = np.unique(labels, return_counts=True)
    small = classes[counts < 2]
    if len(small):
        raise ConfigError(f"classes {small.tolist()} have fewer than 2 samples; cannot stratify")
    ideal = fraction * counts
    take = np.floor(ideal).astype(int)
    remaining = int(round(fraction * len(labels))) - int(take.sum())
    if remaining > 0:
        order = np.argsort(-(ideal - take), kind="stable")
        take[order[:remaining]] += 1
    val_idx = []
    for cls, k in zip(classes, take):
        idx = np.flatnonzero(labels == cls)
        val_idx.append(rng.permutation(idx)[:k])
    val_idx = np.sort(np.concatenate(val_idx))
    mask = np.ones(len(labels), dtype=bool)
    mask[val_idx] = False
    return train.subset(np.flatnonzero(mask)), train.subset(val_idx)


def _phase_rng(cfg: SearchConfig, phase: str) -> np.random.Generator:
    return np.random.default_rng([cfg.rng_seed, _PHASE_IDS[phase]])


def evaluate(model: Model, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean task loss and accuracy in inference mode."""
    was = model.training
    model.eval()
    total = 0.0
    correct = 0
    with T.no_grad():
        for i in range(0, len(data), batch_size):
            xb, yb = data.x[i : i + batch_size], data.y[i : i + batch_size]
            logits = model.forward(xb)
            total += task_loss(logits, yb).item() * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    model.train(was)
    return total / len(data), correct / len(data)


Objective = Callable[[Model, np.ndarray, np.ndarray], "tuple[T.Tensor, LossBreakdown | None]"]


def _task_objective(model, xb, yb):
    return task_loss(model.forward(xb), yb), None


def _check_data(model: Model, data: Dataset) -> None:
    if tuple(data.x.shape[1:]) != model.spec.input_shape:
        raise ConfigError(
            f"data images have shape {tuple(data.x.shape[1:])}, network expects {model.spec.input_shape}"
        )
    if data.num_classes > model.spec.output_classes:
        raise ConfigError(
            f"data has labels up to {data.num_classes - 1}, network has {model.spec.output_classes} outputs"
        )


def train_epoch(
    model: Model,
    data: Dataset,
    batch_size: int,
    rng: np.random.Generator,
    opt_w: Adam,
    opt_theta: Adam | None = None,
    objective: Objective = _task_objective,
) -> tuple[float, list[LossBreakdown]]:
    model.train()
    order = rng.permutation(len(data))
    parts: list[LossBreakdown] = []
    running = 0.0
    for i in range(0, len(order), batch_size):
        idx = order[i : i + batch_size]
        loss, br = objective(model, data.x[idx], data.y[idx])
        T.backward(loss)
        opt_w.step()
        if opt_theta is not None:
            opt_theta.step()
            project(model.masks.values())
        running += loss.item() * len(idx)
        if br is not None:
            parts.append(br)
    return running / len(data), parts


def _mean_breakdown(parts: list[LossBreakdown]) -> LossBreakdown | None:
    if not parts:
        return None
    fields = [f.name for f in dataclasses.fields(LossBreakdown)]
    return LossBreakdown(**{k: float(np.mean([getattr(p, k) for p in parts])) for k in fields})


class RunLog:
    """JSON-lines epoch log; a no-op when ``path`` is None."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **record) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")


# ----------------------------------------------------------------- phases


def warmup(model: Model, train: Dataset, cfg: SearchConfig, run_log: RunLog | None = None) -> SeedStats:
    """Train the full seed on the task loss and report its loss and size."""
    _check_data(model, train)
    model.freeze_masks(True)
    if any(m.alive_count() != len(m) for m in model.masks.values()):
        raise ConfigError("warmup expects every channel alive (theta = 1)")
    run_log = run_log or RunLog(None)
    rng = _phase_rng(cfg, "warmup")
    opt = Adam(model.weight_params(), cfg.lr_w)
    for epoch in range(1, cfg.epochs_warmup + 1):
        loss, _ = train_epoch(model, train, cfg.batch_size, rng, opt)
        run_log.write(phase="warmup", epoch=epoch, train_loss=loss)
    seed_loss, _ = evaluate(model, train)
    rep = exact_counts(model)
    return SeedStats(seed_loss, rep.total_params, rep.total_ops, cfg.epochs_warmup)


def search(
    model: Model,
    train: Dataset,
    val: Dataset,
    cfg: SearchConfig,
    lam: float,
    mu: float,
    s_star: float,
    run_log: RunLog | None = None,
) -> tuple[SearchOutcome, list[LossBreakdown]]:
    """Joint weight/gate training with early stopping on validation task loss.

    An epoch is a snapshot candidate only when its exact size lies within
    ``cfg.size_tolerance`` of ``s_star`` (always, when ``lam == 0``); the
    patience counter starts with the first candidate.  If no epoch qualifies
    the epoch closest to the target is restored.  With ``lam == mu == 0`` no
    cost term acts on the gates, so they stay frozen and only weights train.
    """
    run_log = run_log or RunLog(None)
    check_strengths(lam, mu)
    rng = _phase_rng(cfg, "search")
    gates_free = lam > 0 or mu > 0
    model.freeze_masks(not gates_free)
    opt_w = Adam(model.weight_params(), cfg.lr_w)
    opt_t = Adam(model.theta_params(), cfg.lr_theta) if gates_free else None

    def objective(m, xb, yb):
        return composite_loss(task_loss(m.forward(xb), yb), m, s_star, lam, mu)

    trace: list[LossBreakdown] = []
    best_state, best_loss, best_epoch = None, math.inf, 0
    near_state, near_gap, near_epoch, near_loss = None, math.inf, 0, math.inf
    wait = 0
    started = False
    stopped = False
    last_val = math.inf
    epoch = 0
    for epoch in range(1, cfg.max_search_epochs + 1):
        train_loss, parts = train_epoch(model, train, cfg.batch_size, rng, opt_w, opt_t, objective)
        br = _mean_breakdown(parts)
        trace.append(br)
        val_loss, val_acc = evaluate(model, val)
        last_val = val_loss
        rep = exact_counts(model)
        gap = abs(rep.total_params - s_star) / s_star
        eligible = lam == 0 or gap <= cfg.size_tolerance
        run_log.write(
            phase="search", epoch=epoch, train_loss=train_loss, val_loss=val_loss, val_acc=val_acc,
            size=rep.total_params, ops=rep.total_ops, eligible=eligible,
            breakdown=br.to_dict() if br else None,
        )
        if gap < near_gap:
            near_state, near_gap, near_epoch, near_loss = model.state_dict(), gap, epoch, val_loss
        if eligible and val_loss < best_loss:
            best_state, best_loss, best_epoch = model.state_dict(), val_loss, epoch
            started = True
            wait = 0
        elif started:
            wait += 1
            if wait >= cfg.patience:
                stopped = True
                break
    if best_state is None:
        log.warning("no search epoch within %.1f%% of the target; restoring the closest one",
                    100 * cfg.size_tolerance)
        best_state, best_epoch, best_loss = near_state, near_epoch, near_loss
    model.load_state_dict(best_state)
    model.freeze_masks(True)
    return SearchOutcome(epoch, best_epoch, best_loss, last_val, stopped), trace


def recalibrate_bn(model: Model, data: Dataset, batch_size: int) -> None:
    """Recompute batch-norm running statistics with one pass over ``data``."""
    for st in model.bn_stats.values():
        st["running_mean"][:] = 0.0
        st["running_var"][:] = 0.0
        st["count"] = 0
    mom = model.bn_momentum
    model.bn_momentum = None
    model.train()
    with T.no_grad():
        for i in range(0, len(data), batch_size):
            model.forward(data.x[i : i + batch_size])
    model.bn_momentum = mom


def finetune(
    model: Model,
    train: Dataset,
    cfg: SearchConfig,
    run_log: RunLog | None = None,
) -> int:
    """Weights-only training with the gates frozen at their learned values."""
    run_log = run_log or RunLog(None)
    model.freeze_masks(True)
    if cfg.recalibrate_bn:
        recalibrate_bn(model, train, cfg.batch_size)
    rng = _phase_rng(cfg, "finetune")
    opt = Adam(model.weight_params(), cfg.lr_w)
    for epoch in range(1, cfg.epochs_finetune + 1):
        loss, _ = train_epoch(model, train, cfg.batch_size, rng, opt)
        run_log.write(phase="finetune", epoch=epoch, train_loss=loss)
    return cfg.epochs_finetune


# --------------------------------------------------------------- pipeline


def save_warmup(path: str | Path, model: Model, stats: SeedStats) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path.with_suffix(".npz"))
    path.with_suffix(".json").write_text(json.dumps(dataclasses.asdict(stats)))


def load_warmup(path: str | Path, model: Model) -> SeedStats:
    path = Path(path)
    model.load(path.with_suffix(".npz"))
    return SeedStats(**json.loads(path.with_suffix(".json").read_text()))


def prepare_warmup(spec: NetworkSpec, train: Dataset, cfg: SearchConfig, ckpt: str | Path | None = None,
                   run_log: RunLog | None = None) -> tuple[Model, SeedStats]:
    """Build the seed and warm it up, or restore a saved warmup checkpoint."""
    model = build_seed(spec, cfg.rng_seed)
    fit, _ = split_validation(train, cfg.val_fraction, cfg.rng_seed)
    if ckpt is not None and Path(ckpt).with_suffix(".npz").is_file():
        return model, load_warmup(ckpt, model)
    stats = warmup(model, fit, cfg, run_log)
    if ckpt is not None:
        save_warmup(ckpt, model, stats)
    return model, stats


def run_search(
    spec: NetworkSpec,
    train: Dataset,
    test: Dataset,
    cfg: SearchConfig,
    warmup_ckpt: str | Path | None = None,
    log_path: str | Path | None = None,
    warm: tuple[Model, SeedStats] | None = None,
) -> RunResult:
    """Full warmup -> search -> finetune pipeline for one (s*, mu) point.

    ``warm`` lets a caller pass an already warmed-up model (it is copied, not
    mutated); otherwise ``warmup_ckpt`` is reused or created.
    """
    run_log = RunLog(log_path)
    fit, val = split_validation(train, cfg.val_fraction, cfg.rng_seed)
    if warm is not None:
        src_model, stats = warm
        model = build_seed(spec, cfg.rng_seed)
        model.load_state_dict(src_model.state_dict())
    else:
        model, stats = prepare_warmup(spec, train, cfg, warmup_ckpt, run_log)
    _check_data(model, fit)

    s_star = cfg.s_star_fraction * stats.size
    try:
        lam = cfg.lambda_scale * compute_lambda(stats.task_loss, stats.size, s_star)
    except TargetEqualsSeedError:
        lam = 0.0
    outcome, trace = search(model, fit, val, cfg, lam, cfg.mu, s_star, run_log)
    _, post_search_acc = evaluate(model, test)
    ft_epochs = finetune(model, fit, cfg, run_log)
    _, val_acc = evaluate(model, val)
    _, test_acc = evaluate(model, test)
    rep = exact_counts(model)
    run_log.write(phase="final", size=rep.total_params, ops=rep.total_ops, val_acc=val_acc,
                  test_acc=test_acc, best_epoch=outcome.best_epoch)
    return RunResult(
        model=model,
        channel_config=model.channel_config(),
        cost=rep,
        val_accuracy=val_acc,
        test_accuracy=test_acc,
        post_search_test_accuracy=post_search_acc,
        lam=lam,
        mu=cfg.mu,
        s_star=s_star,
        epochs_used={"warmup": stats.epochs, "search": outcome.epochs, "finetune": ft_epochs},
        loss_trace=trace,
        seed=stats,
    )
