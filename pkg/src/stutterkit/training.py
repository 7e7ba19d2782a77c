"""Training loops: stutter-only baseline, multi-task, and adversarial.

Objectives differ only in how the three head losses are combined and which
parameter partitions the optimizer may touch:

  baseline  minimize l_fluent + l_disfluent; the speaker branch is inert.
  mtl       minimize (1 - lambda) * (l_fluent + l_disfluent) + lambda * l_speaker.
  adv       minimize l_fluent + l_disfluent - lambda * l_speaker for the
            encoder while the speaker head still descends l_speaker; realized
            with the gradient reversal layer and a four-stage schedule:
            epochs [0, b1) speaker_only   train {encoder, speaker}
                   [b1, b2) stutter_only  train {encoder, fluent, disfluent}
                   [b2, b3) joint_grl     train all, reversal active
                   [b3, ..) recovery      train {fluent, disfluent}

l_disfluent is averaged over the disfluent clips in the batch and is 0.0
when there are none. Early stopping watches the validation stutter loss
(l_fluent + l_disfluent) and, for the adversarial schedule, only arms itself
once the recovery stage begins. Frozen partitions keep their parameter bits,
optimizer moments, and running statistics untouched, and run eval-mode
semantics in the training forward pass.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import features_of
from .errors import EmptyBatch, InvalidConfig, NumericError
from .model import MultiBranchModel, set_trainable

log = logging.getLogger(__name__)

OBJECTIVES = ("baseline", "mtl", "adv")
LAMBDA_SCHEDULES = ("fixed", "decay10", "sigmoid_ramp")
ADV_STAGES = ("speaker_only", "stutter_only", "joint_grl", "recovery")

LOG_COLUMNS = (
    "epoch",
    "stage",
    "lambda",
    "l_fluent",
    "l_disfluent",
    "l_speaker",
    "l_total",
    "valid_stutter_loss",
    "train_acc",
    "valid_acc",
)


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "baseline"
    lam: float = 0.5
    lambda_schedule: str = "fixed"
    gamma: float = 10.0  # sigmoid_ramp steepness
    sigmoid_paper_sign: bool = False  # flip to 2/(1+exp(+gamma*p))-1
    max_epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    patience: int = 7
    min_delta: float = 1e-6
    stage_bounds: tuple = (25, 50, 75)  # adv stage boundaries b1, b2, b3
    stage1_trains_encoder: bool = True  # speaker_only trains {E, S} vs {S}
    log_path: str | None = None

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise InvalidConfig(f"objective must be one of {OBJECTIVES}")
        if self.lambda_schedule not in LAMBDA_SCHEDULES:
            raise InvalidConfig(f"lambda_schedule must be one of {LAMBDA_SCHEDULES}")
        if not (0.0 <= self.lam <= 1.0):
            raise InvalidConfig(f"lambda must be in [0, 1], got {self.lam}")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise InvalidConfig("max_epochs, batch_size and patience must be >= 1")
        if self.lr <= 0 or self.min_delta < 0:
            raise InvalidConfig("lr must be > 0 and min_delta >= 0")
        b1, b2, b3 = self.stage_bounds
        if not (0 < b1 < b2 < b3):
            raise InvalidConfig(f"stage bounds must increase, got {self.stage_bounds}")


def stage_at(cfg: TrainConfig, epoch: int) -> str:
    """Name of the active training stage; non-adversarial runs have one stage."""
    if cfg.objective != "adv":
        return cfg.objective
    b1, b2, b3 = cfg.stage_bounds
    if epoch < b1:
        return "speaker_only"
    if epoch < b2:
        return "stutter_only"
    if epoch < b3:
        return "joint_grl"
    return "recovery"


def lambda_at(cfg: TrainConfig, epoch: int) -> float:
    """Speaker-loss weight at a given epoch.

    fixed: the configured constant. decay10: 10^(-epoch), so 1 at epoch 0.
    sigmoid_ramp: 2 / (1 + exp(-gamma * p)) - 1 with p = epoch / max_epochs,
    rising from 0 toward 1; the paper-sign variant uses +gamma * p and decays
    from 0 toward -1 instead.
    """
    if cfg.objective == "baseline":
        return 0.0
    if cfg.lambda_schedule == "fixed":
        return cfg.lam
    if cfg.lambda_schedule == "decay10":
        return 10.0 ** (-epoch)
    p = epoch / cfg.max_epochs
    sign = 1.0 if cfg.sigmoid_paper_sign else -1.0
    return 2.0 / (1.0 + np.exp(sign * cfg.gamma * p)) - 1.0


def trainable_partitions(cfg: TrainConfig, stage: str) -> set:
    if stage == "baseline" or stage == "stutter_only":
        return {"encoder", "fluent", "disfluent"}
    if stage == "mtl" or stage == "joint_grl":
        return {"encoder", "fluent", "disfluent", "speaker"}
    if stage == "speaker_only":
        return {"encoder", "speaker"} if cfg.stage1_trains_encoder else {"speaker"}
    if stage == "recovery":
        return {"fluent", "disfluent"}
    raise InvalidConfig(f"unknown stage {stage!r}")


def early_stop_active(cfg: TrainConfig, stage: str) -> bool:
    return stage == "recovery" if cfg.objective == "adv" else True


@dataclass
class BatchLosses:
    """Mean head losses for one batch plus gradients of each mean w.r.t. logits.

    The gradients are unweighted; the caller scales them by the objective's
    loss weights before backpropagation. dld covers the whole batch with zero
    rows for fluent clips; l_disfluent averages over disfluent clips only.
    """

    l_fluent: float
    l_disfluent: float
    l_speaker: float
    n: int
    n_disfluent: int
    dlf: np.ndarray
    dld: np.ndarray
    dls: np.ndarray | None


def compute_losses(lf, ld, ls, y_class, y_speaker=None) -> BatchLosses:
    y_class = np.asarray(y_class)
    n = y_class.shape[0]
    if n == 0:
        raise EmptyBatch("batch has no samples")
    y_fluent = (y_class != 0).astype(np.intp)
    losses_f, grads_f = nn.softmax_cross_entropy(lf, y_fluent)
    dlf = grads_f / n

    idx = np.flatnonzero(y_class != 0)
    dld = np.zeros_like(ld)
    if idx.size:
        losses_d, grads_d = nn.softmax_cross_entropy(ld[idx], y_class[idx] - 1)
        l_disfluent = float(losses_d.mean())
        dld[idx] = grads_d / idx.size
    else:
        l_disfluent = 0.0

    l_speaker, dls = 0.0, None
    if y_speaker is not None:
        losses_s, grads_s = nn.softmax_cross_entropy(ls, np.asarray(y_speaker))
        l_speaker = float(losses_s.mean())
        dls = grads_s / n

    return BatchLosses(
        l_fluent=float(losses_f.mean()),
        l_disfluent=l_disfluent,
        l_speaker=l_speaker,
        n=n,
        n_disfluent=int(idx.size),
        dlf=dlf,
        dld=dld,
        dls=dls,
    )


def loss_total(stage: str, lam: float, l_fluent: float, l_disfluent: float,
               l_speaker: float) -> float:
    """The scalar objective value implied by a stage's loss combination."""
    stutter = l_fluent + l_disfluent
    if stage == "mtl":
        return (1.0 - lam) * stutter + lam * l_speaker
    if stage == "speaker_only":
        return l_speaker
    if stage == "joint_grl":
        return stutter - lam * l_speaker
    return stutter


class EarlyStopper:
    """Stop once the watched loss fails to improve by min_delta for patience epochs."""

    def __init__(self, patience=7, min_delta=1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.count = 0

    def update(self, loss: float) -> bool:
        """Record one epoch's loss; returns True when it is a new best."""
        if self.best - loss > self.min_delta:
            self.best = loss
            self.count = 0
            return True
        self.count += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.count >= self.patience


def speaker_index_map(records) -> dict[str, int]:
    """Stable podcast-id -> speaker-target mapping (sorted ids)."""
    return {pid: i for i, pid in enumerate(sorted({r.podcast_id for r in records}))}


def make_batch(records, indices, speaker_map=None, dtype=np.float32):
    """Stack feature matrices, cropping every clip to the batch's shortest length."""
    feats = [features_of(records[i]) for i in indices]
    t_min = min(f.shape[1] for f in feats)
    x = np.stack([f[:, :t_min] for f in feats]).astype(dtype, copy=False)
    y = np.array([int(records[i].label) for i in indices], dtype=np.intp)
    ys = None
    if speaker_map is not None:
        ys = np.array([speaker_map[records[i].podcast_id] for i in indices], dtype=np.intp)
    return x, y, ys


def _batch_ranges(n, batch_size):
    return [range(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]


def dataset_stutter_loss(model: MultiBranchModel, records, batch_size=64) -> float:
    """Eval-mode l_fluent + l_disfluent over a whole record list."""
    sum_f = sum_d = 0.0
    n = n_dis = 0
    for rng_idx in _batch_ranges(len(records), batch_size):
        idx = list(rng_idx)
        x, y, _ = make_batch(records, idx, dtype=model.dtype)
        _, lf, ld, _ = model.forward(x)
        y_fluent = (y != 0).astype(np.intp)
        losses_f, _ = nn.softmax_cross_entropy(lf, y_fluent)
        sum_f += float(losses_f.sum())
        n += len(idx)
        dis = np.flatnonzero(y != 0)
        if dis.size:
            losses_d, _ = nn.softmax_cross_entropy(ld[dis], y[dis] - 1)
            sum_d += float(losses_d.sum())
            n_dis += int(dis.size)
    if n == 0:
        raise EmptyBatch("no records to evaluate")
    return sum_f / n + (sum_d / n_dis if n_dis else 0.0)


def dataset_accuracy(model: MultiBranchModel, records, batch_size=64) -> float:
    """Five-class accuracy of the two-branch rule over a record list."""
    hits = 0
    for rng_idx in _batch_ranges(len(records), batch_size):
        idx = list(rng_idx)
        x, y, _ = make_batch(records, idx, dtype=model.dtype)
        hits += int((model.predict_batch(x) == y).sum())
    return hits / len(records) if records else float("nan")


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    lam: float
    l_fluent: float
    l_disfluent: float
    l_speaker: float
    l_total: float
    valid_stutter_loss: float
    train_acc: float
    valid_acc: float

    def row(self):
        return [
            self.epoch,
            self.stage,
            format(self.lam, ".6g"),
            format(self.l_fluent, ".6f"),
            format(self.l_disfluent, ".6f"),
            format(self.l_speaker, ".6f"),
            format(self.l_total, ".6f"),
            format(self.valid_stutter_loss, ".6f"),
            format(self.train_acc, ".6f"),
            format(self.valid_acc, ".6f"),
        ]


@dataclass
class TrainResult:
    model: MultiBranchModel
    history: list = field(default_factory=list)
    best_epoch: int | None = None
    best_valid_stutter_loss: float = float("inf")
    stopped_epoch: int | None = None
    speaker_map: dict = field(default_factory=dict)


def train(model: MultiBranchModel, train_records, valid_records, cfg: TrainConfig,
          callback=None) -> TrainResult:
    """Run one full training; returns the model restored to its best epoch.

    "Best" means lowest validation stutter loss among the epochs where early
    stopping was armed; if it never armed (adversarial run that ends before
    recovery, or no validation set), the final weights stand.
    """
    cfg.validate()
    if not train_records:
        raise EmptyBatch("no training records")
    smap = speaker_index_map(train_records)
    uses_speaker_loss = cfg.objective in ("mtl", "adv")
    if uses_speaker_loss and len(smap) != model.arch.n_podcasts:
        raise InvalidConfig(
            f"model speaker head has {model.arch.n_podcasts} outputs but the "
            f"training set has {len(smap)} podcasts"
        )
    # Baseline still logs a diagnostic speaker loss when the head size matches.
    track_speaker = len(smap) == model.arch.n_podcasts

    opt = nn.Adam(lr=cfg.lr)
    result = TrainResult(model=model, speaker_map=smap)
    stopper = None
    best_snapshot = None
    n = len(train_records)

    log_fh = open(cfg.log_path, "w", newline="") if cfg.log_path else None
    writer = None
    if log_fh:
        writer = csv.writer(log_fh)
        writer.writerow(LOG_COLUMNS)

    try:
        for epoch in range(cfg.max_epochs):
            stage = stage_at(cfg, epoch)
            lam = lambda_at(cfg, epoch)
            parts = trainable_partitions(cfg, stage)
            _, name_ok = set_trainable(parts)
            grl = lam if stage == "joint_grl" else None

            order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(n)
            drop_rng = np.random.default_rng([cfg.seed, epoch, 1])

            sum_f = sum_d = sum_s = 0.0
            seen = seen_dis = 0
            for rng_idx in _batch_ranges(n, cfg.batch_size):
                idx = order[list(rng_idx)]
                if idx.size == 1 and n > 1:
                    log.warning("dropping size-1 trailing batch (batch norm needs >= 2)")
                    continue
                x, y, ys = make_batch(
                    records=train_records,
                    indices=idx,
                    speaker_map=smap if track_speaker else None,
                    dtype=model.dtype,
                )
                _, lf, ld, ls = model.forward(x, train=parts, grl_lambda=grl, rng=drop_rng)
                losses = compute_losses(lf, ld, ls, y, ys)

                if stage == "mtl":
                    dlf, dld = (1.0 - lam) * losses.dlf, (1.0 - lam) * losses.dld
                    dls = lam * losses.dls
                elif stage == "speaker_only":
                    dlf = dld = None
                    dls = losses.dls
                elif stage == "joint_grl":
                    # Unit speaker weight: the reversal layer applies -lambda on
                    # the encoder path while the head descends its own loss.
                    dlf, dld, dls = losses.dlf, losses.dld, losses.dls
                else:  # baseline, stutter_only, recovery
                    dlf, dld, dls = losses.dlf, losses.dld, None
                model.backward(dlf=dlf, dld=dld, dls=dls)
                opt.step(model.named_params(), name_ok)

                sum_f += losses.l_fluent * losses.n
                sum_d += losses.l_disfluent * losses.n_disfluent
                sum_s += losses.l_speaker * losses.n
                seen += losses.n
                seen_dis += losses.n_disfluent

            if seen == 0:
                raise EmptyBatch("every batch was dropped; use a larger dataset")
            l_fluent = sum_f / seen
            l_disfluent = sum_d / seen_dis if seen_dis else 0.0
            l_speaker = sum_s / seen
            if not np.isfinite(l_fluent + l_disfluent + l_speaker):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch} stage {stage}: "
                    f"l_fluent={l_fluent} l_disfluent={l_disfluent} l_speaker={l_speaker}"
                )

            if valid_records:
                valid_stutter = dataset_stutter_loss(model, valid_records, cfg.batch_size)
                valid_acc = dataset_accuracy(model, valid_records, cfg.batch_size)
            else:
                valid_stutter = float("nan")
                valid_acc = float("nan")
            rec = EpochRecord(
                epoch=epoch,
                stage=stage,
                lam=lam,
                l_fluent=l_fluent,
                l_disfluent=l_disfluent,
                l_speaker=l_speaker,
                l_total=loss_total(stage, lam, l_fluent, l_disfluent, l_speaker),
                valid_stutter_loss=valid_stutter,
                train_acc=dataset_accuracy(model, train_records, cfg.batch_size),
                valid_acc=valid_acc,
            )
            result.history.append(rec)
            if writer:
                writer.writerow(rec.row())
                log_fh.flush()
            if callback:
                callback(rec, model)

            if valid_records and early_stop_active(cfg, stage):
                if stopper is None:
                    stopper = EarlyStopper(cfg.patience, cfg.min_delta)
                if stopper.update(valid_stutter):
                    result.best_epoch = epoch
                    result.best_valid_stutter_loss = valid_stutter
                    best_snapshot = model.snapshot()
                if stopper.should_stop:
                    result.stopped_epoch = epoch
                    log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                    break
    finally:
        if log_fh:
            log_fh.close()

    if best_snapshot is not None:
        model.load_snapshot(best_snapshot)
    return result
