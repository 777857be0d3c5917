"""Fleet pre-training and per-entity fine-tuning.

Every frame is normalized with stats fit on its own training range. The
training range is the leading ``train_fraction`` of the frame; its final
``val_fraction`` is held out of gradient updates and used for validation
loss and threshold calibration. Window starts are shuffled per epoch with
the step RNG; training windows use stride 1.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .checkpoint import Checkpoint, checkpoint_from_model
from .data import SEGMENTS, SeriesFrame, fit_normalize, windows_array
from .errors import ContractError, DataError
from .model import ModelConfig, ReconstructionModel
from .optim import adam_init, adam_step


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 0       # 0 = constant learning rate
    seed: int = 0
    shuffle_buffer: int = 0     # 0 = full-epoch shuffle
    val_fraction: float = 0.2   # tail of the training range held out of gradients
    train_fraction: float = 0.5  # leading fraction of the frame used for training
    log_every: int = 100
    eval_every: int = 0         # 0 = no validation-loss trace
    context_corruption: float = 0.0  # per-window chance of corrupted context metrics

    def __post_init__(self):
        if self.steps < 0:
            raise ContractError("steps must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ContractError("val_fraction must be in [0, 1)")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ContractError("train_fraction must be in (0, 1]")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_log: list[tuple[int, float]] = field(default_factory=list)
    val_log: list[tuple[int, float]] = field(default_factory=list)


def split_points(n_points: int, config: TrainConfig) -> tuple[int, int]:
    """(gradient_end, train_end): gradients use [0, gradient_end), validation
    targets live in [gradient_end, train_end)."""
    train_end = int(round(config.train_fraction * n_points))
    val_len = int(round(config.val_fraction * train_end))
    return train_end - val_len, train_end


class _StartPool:
    """Per-epoch shuffled queue of window start indices."""

    def __init__(self, n_starts: int):
        self.n_starts = n_starts
        self.queue: deque[int] = deque()

    def draw(self, count: int, rng: np.random.Generator) -> np.ndarray:
        picks = np.empty(count, dtype=np.intp)
        for i in range(count):
            if not self.queue:
                self.queue.extend(rng.permutation(self.n_starts))
            picks[i] = self.queue.popleft()
        return picks


def _rng_digest(rng: np.random.Generator) -> str:
    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=str)
    return hashlib.sha256(state.encode("utf-8")).hexdigest()


def log_cosh_error(delta: np.ndarray) -> np.ndarray:
    ax = np.abs(delta)
    return ax + np.log1p(np.exp(-2.0 * ax)) - math.log(2.0)


def validation_windows(n_points: int, t_e: int, grad_end: int, train_end: int) -> list[int]:
    """Starts of windows whose target segment lies inside the validation tail."""
    window = SEGMENTS * t_e
    first = max(0, grad_end - (SEGMENTS - 1) * t_e)
    starts = [s for s in range(first, train_end - window + 1, t_e)]
    return starts


def validation_loss(model: ReconstructionModel, values: np.ndarray,
                    grad_end: int, train_end: int) -> float:
    """Mean log-cosh reconstruction error over the validation tail, all metrics."""
    t_e = model.config.t_e
    starts = validation_windows(values.shape[1], t_e, grad_end, train_end)
    if not starts:
        raise DataError("validation slice too short for a single window")
    windows = windows_array(values, np.asarray(starts), t_e)
    recon = mdl.reconstruct_many(model, windows)
    target = windows[:, :, mdl.TARGET_SEG, :]
    return float(log_cosh_error(recon - target).mean())


def _corrupt_context(windows: np.ndarray, plan: tuple[int, ...],
                     prob: float, rng: np.random.Generator) -> np.ndarray:
    """Inject anomaly-shaped garbage into the context of some windows.

    Non-masked metrics may be corrupted anywhere; masked metrics only in
    their history segments. Loss targets (masked metrics' final segment)
    stay untouched, so this only teaches the model to distrust aberrant
    context, including a metric's own recent past.
    """
    B, N, S, te = windows.shape
    masked = set(plan)
    span = S * te
    history = (S - 1) * te
    for b in range(B):
        if rng.random() >= prob:
            continue
        for _ in range(int(rng.integers(1, 4))):
            m = int(rng.integers(N))
            limit = history if m in masked else span
            length = int(rng.integers(4, 41))
            start = int(rng.integers(0, limit - length + 1))
            row = windows[b, m].reshape(-1)
            kind = int(rng.integers(3))
            if kind == 0:
                row[start:start + length] += rng.uniform(0.4, 1.2) * (1 if rng.random() < 0.5 else -1)
            elif kind == 1:
                row[start:start + length] = row[max(start - 1, 0)]
            else:
                row[start:start + length] = rng.uniform(-0.1, 1.1, size=length)
    return windows


def _train_loop(model: ReconstructionModel, entities: list[np.ndarray],
                config: TrainConfig, grad_ends: list[int], train_ends: list[int],
                val_entity: int = 0) -> tuple[list[tuple[int, float]], list[tuple[int, float]], str]:
    cfg = model.config
    window = SEGMENTS * cfg.t_e
    rng = np.random.default_rng(config.seed)
    pools = []
    for values, grad_end in zip(entities, grad_ends):
        n_starts = grad_end - window + 1
        if n_starts < 1:
            raise DataError(
                f"frame too short to train: gradient range {grad_end} < window {window}"
            )
        pools.append(_StartPool(n_starts))

    state = adam_init({k: t.data for k, t in model.params.items()}, lr=config.lr)
    recent: deque[float] = deque(maxlen=config.log_every)
    loss_log: list[tuple[int, float]] = []
    val_log: list[tuple[int, float]] = []
    for step in range(1, config.steps + 1):
        e = int(rng.integers(len(entities))) if len(entities) > 1 else 0
        starts = pools[e].draw(config.batch_size, rng)
        windows = windows_array(entities[e], starts, cfg.t_e)
        plan = mdl.build_mask_plan(cfg.n_metrics, cfg.mask_ratio, rng)
        if config.context_corruption > 0.0:
            windows = _corrupt_context(windows, plan.indices,
                                       config.context_corruption, rng)
        train_rng = rng if cfg.dropout > 0.0 else None
        for t in model.params.values():
            t.grad = None
        recon = mdl.forward_batch(model, windows, plan.indices, train_rng=train_rng,
                                  params=model.params)
        loss = mdl.masked_loss_batch(recon, windows, plan.indices)
        loss.backward()
        lr = config.lr
        if config.warmup_steps > 0:
            lr = config.lr * min(1.0, step / config.warmup_steps)
        values = {k: t.data for k, t in model.params.items()}
        grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data)
                 for k, t in model.params.items()}
        new_values, state = adam_step(state, values, grads, lr=lr)
        for k, t in model.params.items():
            t.data = new_values[k]
        recent.append(float(loss.data))
        if step % config.log_every == 0:
            loss_log.append((step, float(np.mean(recent))))
        if config.eval_every and step % config.eval_every == 0:
            val_log.append((step, validation_loss(
                model, entities[val_entity], grad_ends[val_entity], train_ends[val_entity])))
    return loss_log, val_log, _rng_digest(rng)


def pretrain(fleet: list[SeriesFrame], config: TrainConfig,
             model_config: ModelConfig) -> TrainResult:
    """Train a fresh model over a fleet: each step samples one entity uniformly,
    draws a window batch and a fresh mask plan, and minimizes the masked loss."""
    if not fleet:
        raise ContractError("pretrain: fleet is empty")
    names = fleet[0].metric_names
    for frame in fleet:
        if frame.metric_names != names:
            raise ContractError(
                "pretrain: fleet entities must share metric names and order"
            )
    if model_config.n_metrics != len(names):
        raise ContractError(
            f"model expects {model_config.n_metrics} metrics, fleet has {len(names)}"
        )
    entities, grad_ends, train_ends = [], [], []
    for frame in fleet:
        grad_end, train_end = split_points(frame.n_points, config)
        normalized, _ = fit_normalize(frame, (0, train_end))
        entities.append(normalized.values)
        grad_ends.append(grad_end)
        train_ends.append(train_end)
    model = ReconstructionModel.initialize(model_config)
    loss_log, val_log, digest = _train_loop(model, entities, config, grad_ends, train_ends)
    ckpt = checkpoint_from_model(model, stats=None, step=config.steps, rng_digest=digest)
    return TrainResult(checkpoint=ckpt, loss_log=loss_log, val_log=val_log)


def finetune(base: Checkpoint | None, frame: SeriesFrame, config: TrainConfig,
             scratch: bool = False, model_config: ModelConfig | None = None) -> TrainResult:
    """Continue training on one entity from a warm start (or from scratch).

    The optimizer always restarts fresh; the warm path keeps the base model's
    mask series and weights. The returned checkpoint carries the entity's own
    normalization stats.
    """
    if scratch:
        cfg = model_config or (base.model_config if base is not None else None)
        if cfg is None:
            raise ContractError("scratch fine-tune needs a model config")
        model = ReconstructionModel.initialize(cfg)
    else:
        if base is None:
            raise ContractError("warm fine-tune needs a base checkpoint")
        model = base.to_model()
    if model.config.n_metrics != frame.n_metrics:
        raise DataError(
            f"entity has {frame.n_metrics} metrics but model expects {model.config.n_metrics}"
        )
    if frame.n_points < SEGMENTS * model.config.t_e:
        raise DataError(
            f"frame too short: {frame.n_points} points, need {SEGMENTS * model.config.t_e}"
        )
    grad_end, train_end = split_points(frame.n_points, config)
    normalized, stats = fit_normalize(frame, (0, train_end))
    loss_log, val_log, digest = _train_loop(model, [normalized.values], config,
                                            [grad_end], [train_end])
    ckpt = checkpoint_from_model(model, stats=stats, step=config.steps, rng_digest=digest)
    return TrainResult(checkpoint=ckpt, loss_log=loss_log, val_log=val_log)
