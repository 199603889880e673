"""Producers of the three federation starting points.

* random: seeded weight draw, no training.
* pretrain: supervised dice training on the proxy set.
* fm_instructed: the proxy run guided by a frozen, prompt-conditioned
  teacher through a per-pixel KL term blended with the dice term.

The teacher is a wider network that sees the image plus a binary
bounding-box prompt channel derived from the ground-truth mask. It is
trained once on a broad sample of the data distribution, then frozen;
distillation never mutates it. All three strategies emit parameter
vectors with the same architecture fingerprint, so any of them can seed
the same federation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .data import augment, bounding_box_channel
from .errors import ConfigError, ContractError, TeacherTrainingError
from .losses import combined_loss, dice_loss, dice_score, kl_distill
from .nets import (
    STUDENT_SPEC, TEACHER_SPEC,
    build_model, export_params, import_params,
)

_TEACHER_STREAM = 0x544348
_INIT_STREAM = 0x494E4954

TEACHER_TARGET_DICE = 0.90
TEACHER_MIN_DICE = 0.70


@dataclass
class DistillConfig:
    alpha: float = 0.6
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    temperature: float = 1.0
    segment_target: str = "gt"  # or "teacher": threshold the teacher's output

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.segment_target not in ("gt", "teacher"):
            raise ConfigError(
                f"segment_target must be 'gt' or 'teacher', got {self.segment_target!r}"
            )


class FrozenTeacher:
    """Read-only wrapper around a trained teacher model."""

    def __init__(self, model):
        model.set_trainable(False)
        self._model = model
        self._snapshot = export_params(model)

    @property
    def spec(self):
        return self._model.spec

    def export_params(self):
        return export_params(self._model)

    def snapshot(self):
        return self._snapshot.copy()

    def unchanged(self):
        return export_params(self._model).equal(self._snapshot)

    def logits(self, images, masks):
        """Forward (image, bbox-prompt) batches; output carries no grad."""
        x = _teacher_input(images, masks)
        return self._model.forward(Tensor(x))


def _teacher_input(images, masks):
    boxes = np.stack([bounding_box_channel(m) for m in masks])
    return np.concatenate([np.stack(list(images)), boxes], axis=1)


def frozen_teacher_from_params(pv, spec=TEACHER_SPEC):
    model = build_model(spec, 0)
    import_params(model, pv)
    return FrozenTeacher(model)


def train_teacher(samples, epochs, seed, spec=TEACHER_SPEC, lr=2e-3,
                  batch_size=8, log=None):
    """Fit the prompt-conditioned teacher until its mean train dice
    reaches 0.90 (or the epoch budget runs out), then freeze it.

    Raises TeacherTrainingError if the final epoch stays below 0.70:
    such a teacher would mislead every downstream distillation.
    """
    ages = [s.age for s in samples]
    if max(ages) - min(ages) < 50.0:
        raise ConfigError(
            "teacher training set must span the age range "
            f"(got [{min(ages):.0f}, {max(ages):.0f}])"
        )
    model = build_model(spec, seed)
    model.set_trainable(True)
    opt = Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), _TEACHER_STREAM)))
    n = len(samples)
    epoch_dice = 0.0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        dices = []
        for start in range(0, n, batch_size):
            batch = [augment(samples[i], rng) for i in order[start : start + batch_size]]
            x = Tensor(_teacher_input([s.image for s in batch], [s.mask for s in batch]))
            y = Tensor(np.stack([s.mask for s in batch]))
            probs = ad.sigmoid(model.forward(x))
            loss = dice_loss(probs, y)
            opt.zero_grad()
            loss.value.backward()
            opt.step()
            hard = (probs.data > 0.5).astype(np.float32)
            dices.extend(dice_score(p, s.mask) for p, s in zip(hard, batch))
        epoch_dice = float(np.mean(dices))
        if log:
            log(f"[teacher] epoch {epoch}/{epochs} train dice={epoch_dice:.4f}")
        if epoch_dice >= TEACHER_TARGET_DICE:
            break
    if epoch_dice < TEACHER_MIN_DICE:
        raise TeacherTrainingError(
            f"teacher reached train dice {epoch_dice:.3f} < {TEACHER_MIN_DICE} "
            f"after {epochs} epochs; unusable as a reference"
        )
    return FrozenTeacher(model)


def evaluate_teacher(teacher, samples, use_bbox=True, threshold=0.5):
    """Mean hard dice of the teacher; optionally with the prompt zeroed
    to measure how much signal the bbox channel carries."""
    scores = []
    for start in range(0, len(samples), 60):
        batch = samples[start : start + 60]
        masks = [s.mask for s in batch]
        if not use_bbox:
            masks = [np.zeros_like(m) for m in masks]
        logits = teacher.logits([s.image for s in batch], masks)
        probs = ad._sigmoid_np(logits.data)
        preds = (probs > threshold).astype(np.float32)
        scores.extend(dice_score(p, s.mask) for p, s in zip(preds, batch))
    return float(np.mean(scores))


def init_random_strategy(seed, spec=STUDENT_SPEC):
    """Seeded random weights; the baseline every other strategy beats."""
    return export_params(build_model(spec, seed))


def fit_student(proxy, teacher, dcfg, seed, spec=STUDENT_SPEC, log=None):
    """Proxy-training loop shared by pretrain and fm_instructed.

    Both strategies consume the identical rng stream (shuffle order and
    augmentation draws), so setting alpha=0 reproduces plain
    pre-training bit for bit, teacher present or not.
    """
    if not proxy:
        raise ContractError("proxy set is empty")
    model = build_model(spec, seed)
    model.set_trainable(True)
    opt = Adam(model.parameters(), lr=dcfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), _INIT_STREAM)))
    n = len(proxy)
    history = {"loss": [], "distill": [], "segment": []}
    for epoch in range(1, dcfg.epochs + 1):
        order = rng.permutation(n)
        totals, distills, segments = [], [], []
        for start in range(0, n, dcfg.batch_size):
            batch = [augment(proxy[i], rng) for i in order[start : start + dcfg.batch_size]]
            images = [s.image for s in batch]
            student_logits = model.forward(Tensor(np.stack(images)))
            probs = ad.sigmoid(student_logits)
            if teacher is not None:
                teacher_logits = teacher.logits(images, [s.mask for s in batch])
                if dcfg.segment_target == "teacher":
                    target = (ad._sigmoid_np(teacher_logits.data) > 0.5).astype(np.float32)
                else:
                    target = np.stack([s.mask for s in batch])
                segment = dice_loss(probs, Tensor(target))
                distill = kl_distill(teacher_logits, student_logits, dcfg.temperature)
                loss = combined_loss(distill, segment, dcfg.alpha)
                distills.append(distill.item())
                segments.append(segment.item())
            else:
                loss = dice_loss(probs, Tensor(np.stack([s.mask for s in batch])))
                segments.append(loss.item())
            totals.append(loss.item())
            opt.zero_grad()
            loss.value.backward()
            opt.step()
        history["loss"].append(float(np.mean(totals)))
        history["segment"].append(float(np.mean(segments)))
        if distills:
            history["distill"].append(float(np.mean(distills)))
        if log:
            log(f"[init] epoch {epoch}/{dcfg.epochs} loss={history['loss'][-1]:.4f}")
    return export_params(model), history


def init_pretrain_strategy(proxy, epochs, seed, lr=1e-3, batch_size=8,
                           spec=STUDENT_SPEC, log=None):
    """Supervised proxy pre-training; epochs=0 degenerates to the
    random strategy."""
    dcfg = DistillConfig(alpha=0.0, epochs=epochs, batch_size=batch_size, lr=lr)
    params, _ = fit_student(proxy, None, dcfg, seed, spec, log)
    return params


def init_fm_instructed(proxy, teacher, dcfg, seed, spec=STUDENT_SPEC, log=None):
    """Distill the frozen teacher into a fresh student on the proxy set.

    The student sees only the raw image; the teacher additionally sees
    the ground-truth bounding-box prompt. That asymmetry is the whole
    point: the prompt-informed predictions are the knowledge being
    transferred.
    """
    if teacher.spec.input_channels != spec.input_channels + 1:
        raise ContractError(
            f"teacher expects {teacher.spec.input_channels} channels, "
            f"student provides {spec.input_channels}; prompt channel missing"
        )
    before = teacher.snapshot()
    params, _ = fit_student(proxy, teacher, dcfg, seed, spec, log)
    if not teacher.unchanged() or not before.equal(teacher.snapshot()):
        raise ContractError("teacher parameters changed during distillation")
    return params


def init_checkpoint_name(strategy, seed):
    return f"init_{strategy}_{seed}.ckpt"
