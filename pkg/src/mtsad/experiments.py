"""End-to-end experiment harnesses used by scripts/ and the acceptance suite.

Three studies:

* detection: train from scratch on one recipe-synthetic entity and measure
  point-adjusted precision/recall/F1 on the held-out test half.
* transfer: pre-train on a 32-entity fleet, then compare warm-started
  fine-tuning against from-scratch training on a short held-out entity.
* memorization: drive training loss to the floor on a tiny noise-free fleet.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .data import SeriesFrame, apply_normalization
from .detection import calibrate, detect_two_level, point_adjust, prf1, score
from .model import ModelConfig
from .synthetic import SyntheticSpec, default_spec, generate_entity
from .training import TrainConfig, TrainResult, finetune, pretrain, split_points


def anomaly_rate_from_meta(frame: SeriesFrame) -> float:
    """Mean per-metric fraction of anomalous points, from the injection records."""
    events = frame.meta.get("anomalies", [])
    mass = sum(ev["length"] * len(ev["metrics"]) for ev in events)
    return mass / (frame.n_metrics * frame.n_points)


# ---------------------------------------------------------------------------
# detection quality (scratch-trained model on the default entity)
# ---------------------------------------------------------------------------


@dataclass
class DetectionOutcome:
    precision: float
    recall: float
    f1: float
    eta: float
    gate_entity: int
    segments: list[dict]
    train_loss: float


def detection_experiment(
    seed: int = 0,
    steps: int = 3000,
    batch_size: int = 8,
    entity: int = 0,
    spec: SyntheticSpec | None = None,
) -> DetectionOutcome:
    """Criterion-style run: scratch-train on the default synthetic entity's
    training half, calibrate on its validation tail, evaluate on the test half."""
    spec = spec or default_spec()
    frame = generate_entity(spec, entity)
    config = TrainConfig(steps=steps, batch_size=batch_size, lr=1e-3,
                         warmup_steps=200, seed=seed, context_corruption=0.9,
                         val_fraction=0.3)
    model_config = ModelConfig(n_metrics=frame.n_metrics, dropout=0.0, seed=seed)
    result = finetune(None, frame, config, scratch=True, model_config=model_config)
    ckpt = result.checkpoint

    normalized = apply_normalization(frame, ckpt.stats)
    errors = score(normalized, ckpt)
    lead = frame.n_points - errors.errors.shape[1]
    grad_end, train_end = split_points(frame.n_points, config)
    val_errors = errors.sliced(grad_end - lead, train_end - lead)
    th = calibrate(val_errors, frame.labels[grad_end:train_end],
                   anomaly_rate_from_meta(frame))
    detection = detect_two_level(errors, th)
    pred = detection.entity_flags[train_end - lead:]
    truth = frame.labels[train_end:]
    report = prf1(point_adjust(pred, truth), truth)
    return DetectionOutcome(
        precision=report.precision, recall=report.recall, f1=report.f1,
        eta=th.eta, gate_entity=th.gate_entity, segments=report.segments,
        train_loss=result.loss_log[-1][1] if result.loss_log else float("nan"),
    )


# ---------------------------------------------------------------------------
# fleet pre-training and transfer
# ---------------------------------------------------------------------------


def transfer_fleet_spec(seed: int = 11) -> SyntheticSpec:
    """A lighter fleet for the transfer study: 8 metrics, no anomalies."""
    return SyntheticSpec(n_metrics=8, n_points=1920, n_entities=32, seed=seed,
                         anomalies=[])


def transfer_model_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(n_metrics=8, dropout=0.0, seed=seed)


def pretrain_fleet(spec: SyntheticSpec | None = None, steps: int = 2000,
                   seed: int = 0) -> TrainResult:
    spec = spec or transfer_fleet_spec()
    fleet = [generate_entity(spec, e) for e in range(spec.n_entities)]
    config = TrainConfig(steps=steps, batch_size=8, lr=1e-3, warmup_steps=200,
                         seed=seed)
    return pretrain(fleet, config, transfer_model_config(seed))


def held_out_entity(spec: SyntheticSpec | None = None) -> SeriesFrame:
    """Entity index == fleet size, so it shares structure but was never trained on.

    960 points: the leading 480 are the training range, per the desk-scale regime.
    """
    spec = spec or transfer_fleet_spec()
    short = dataclasses.replace(spec, n_points=960)
    return generate_entity(short, spec.n_entities)


@dataclass
class TransferArm:
    steps: list[int]
    val_losses: list[float]

    def at(self, step: int) -> float:
        return self.val_losses[self.steps.index(step)]

    def best_upto(self, step: int) -> float:
        return min(v for s, v in zip(self.steps, self.val_losses) if s <= step)


@dataclass
class TransferOutcome:
    seed: int
    warm: TransferArm
    scratch: TransferArm


def transfer_run(base_ckpt, frame: SeriesFrame, seed: int,
                 warm_steps: int = 10000, scratch_steps: int = 20000,
                 eval_every: int = 500, batch_size: int = 2) -> TransferOutcome:
    """Paired warm-start vs scratch fine-tune on the held-out entity."""
    def arm(result: TrainResult) -> TransferArm:
        return TransferArm(steps=[s for s, _ in result.val_log],
                           val_losses=[v for _, v in result.val_log])

    common = dict(batch_size=batch_size, lr=1e-3, seed=seed, eval_every=eval_every)
    warm_cfg = TrainConfig(steps=warm_steps, **common)
    scratch_cfg = TrainConfig(steps=scratch_steps, warmup_steps=200, **common)
    warm = finetune(base_ckpt, frame, warm_cfg)
    scratch = finetune(None, frame, scratch_cfg, scratch=True,
                       model_config=transfer_model_config(seed))
    return TransferOutcome(seed=seed, warm=arm(warm), scratch=arm(scratch))


# ---------------------------------------------------------------------------
# memorization floor
# ---------------------------------------------------------------------------


def memorization_fleet() -> list[SeriesFrame]:
    spec = SyntheticSpec(n_metrics=4, n_points=1200, n_entities=2, seed=23,
                         noise=0.0, anomalies=[], waveforms=("sin", "cos"))
    return [generate_entity(spec, e) for e in range(spec.n_entities)]


def memorization_experiment(steps: int = 5000, seed: int = 0) -> TrainResult:
    """Noise-free 2-entity fleet: training loss should fall below 1e-3."""
    fleet = memorization_fleet()
    config = TrainConfig(steps=steps, batch_size=4, lr=1e-3, warmup_steps=200,
                         seed=seed)
    model_config = ModelConfig(n_metrics=4, dropout=0.0, seed=seed)
    return pretrain(fleet, config, model_config)
