"""
Epoch loop orchestrating batching, augmentation, optimisation, validation and checkpoints.
"""

from __future__ import annotations

import signal
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from config.settings import RunConfig

from .augment import augment, random_augmentations
from .data_handler import AnnotatedImage, collate
from .detnet import Detector
from .errors import NumericError
from .evaluation import evaluate_images
from .loss import LossWeights
from .optimizer import AdamState, scheduled_lr
from .persistence import TrainingLog, save_checkpoint
from .training import train_step
from .utils import configure_logger

LAST_CHECKPOINT = "last.ckpt"
BEST_CHECKPOINT = "best.ckpt"


@dataclass
class EpochStats:
    epoch: int
    step: int
    lr: float
    loss: float
    box: float
    obj: float
    cls: float
    val_map50: Optional[float] = None
    seconds: float = 0.0


@dataclass
class TrainingSummary:
    epochs_run: int = 0
    history: List[EpochStats] = field(default_factory=list)
    best_metric: Optional[float] = None
    final_train_map50: Optional[float] = None
    last_checkpoint: Optional[Path] = None
    best_checkpoint: Optional[Path] = None
    interrupted: bool = False

    @property
    def initial_loss(self) -> Optional[float]:
        return self.history[0].loss if self.history else None

    @property
    def final_loss(self) -> Optional[float]:
        return self.history[-1].loss if self.history else None


class TrainingRunner:
    """
    Reusable loop controller for a training session.
    """

    def __init__(
        self,
        model: Detector,
        state: AdamState,
        train_images: Sequence[AnnotatedImage],
        run: RunConfig,
        val_images: Sequence[AnnotatedImage] | None = None,
        weights: LossWeights | None = None,
        use_augmentation: bool = True,
        start_epoch: int = 0,
        final_eval: bool = True,
    ) -> None:
        self.model = model
        self.state = state
        self.train_images = list(train_images)
        self.val_images = list(val_images or [])
        self.run = run
        self.weights = weights
        self.use_augmentation = use_augmentation
        self.start_epoch = start_epoch
        self.final_eval = final_eval
        self.out_dir = Path(run.out_dir)
        self.logger = configure_logger("training_runner", self.out_dir / "run.log")
        self.training_log = TrainingLog(self.out_dir)
        self.running = False
        self.summary = TrainingSummary()

    @property
    def steps_per_epoch(self) -> int:
        return max(1, -(-len(self.train_images) // self.run.batch_size))

    def start(self) -> TrainingSummary:
        """
        Train for the configured epochs. Ctrl-C stops after the current batch;
        a non-finite loss stops the run with the last good checkpoint kept.
        """
        if not self.train_images:
            raise ValueError("training set is empty")
        self.logger.info(
            "Starting training: images=%s val=%s epochs=%s batch=%s lr=%s schedule=%s",
            len(self.train_images),
            len(self.val_images),
            self.run.epochs,
            self.run.batch_size,
            self.run.lr,
            self.run.lr_schedule,
        )
        self.running = True
        self.training_log.start(
            resume=self.start_epoch > 0,
            images=len(self.train_images),
            epochs=self.run.epochs,
            batch=self.run.batch_size,
            lr=self.run.lr,
            seed=self.run.seed,
            params=self.model.parameter_count(),
        )
        trap_sigint = threading.current_thread() is threading.main_thread()
        if trap_sigint:
            previous_handler = signal.signal(signal.SIGINT, lambda signum, frame: self.stop())
        try:
            for epoch in range(self.start_epoch, self.run.epochs):
                stats = self._run_epoch(epoch)
                self._end_epoch(stats)
                if not self.running:
                    self.summary.interrupted = True
                    break
            if self.final_eval and self.summary.history and not self.summary.interrupted:
                self.summary.final_train_map50 = evaluate_images(
                    self.model,
                    self.train_images,
                    self.run.conf_threshold,
                    self.run.nms_iou,
                    self.run.batch_size,
                    workers=self.run.threads,
                ).result.map50
        except KeyboardInterrupt:
            self.logger.info("Shutdown requested by user")
            self.summary.interrupted = True
            self.running = False
        except NumericError as exc:
            self.logger.error("Training aborted: %s", exc)
            self.training_log.log_event(f"aborted: {exc}")
            raise
        finally:
            if trap_sigint:
                signal.signal(signal.SIGINT, previous_handler or signal.default_int_handler)
            self._shutdown()
        return self.summary

    def stop(self) -> None:
        if self.running:
            self.logger.info("Shutdown requested by user; stopping after the current batch")
        self.running = False

    def _run_epoch(self, epoch: int) -> EpochStats:
        started = time.perf_counter()
        rng = np.random.default_rng(self.run.seed * 100003 + epoch)
        order = rng.permutation(len(self.train_images))
        totals: Dict[str, float] = {"loss": 0.0, "box": 0.0, "obj": 0.0, "cls": 0.0}
        batches = 0
        lr = self.run.lr
        for start in range(0, len(order), self.run.batch_size):
            chunk = [self.train_images[int(i)] for i in order[start : start + self.run.batch_size]]
            if self.use_augmentation:
                chunk = [augment(image, random_augmentations(rng, image.pixels.shape), rng) for image in chunk]
            images, targets = collate(chunk)
            lr = scheduled_lr(self.run.lr, self.run.lr_schedule, self.state.step, self.run.epochs * self.steps_per_epoch)
            result = train_step(self.model, self.state, images, targets, self.weights, lr=lr)
            for key, value in result.loss.components().items():
                totals[key] += value
            batches += 1
            if not self.running:
                break
        means = {key: value / max(batches, 1) for key, value in totals.items()}
        val_map = None
        if self.val_images:
            val_map = evaluate_images(
                self.model,
                self.val_images,
                self.run.conf_threshold,
                self.run.nms_iou,
                self.run.batch_size,
                workers=self.run.threads,
            ).result.map50
        return EpochStats(
            epoch=epoch,
            step=self.state.step,
            lr=lr,
            val_map50=val_map,
            seconds=time.perf_counter() - started,
            **means,
        )

    def _end_epoch(self, stats: EpochStats) -> None:
        self.summary.history.append(stats)
        self.summary.epochs_run += 1
        self.training_log.log_epoch(**stats.__dict__)
        extra = {"epoch": stats.epoch, "seed": self.run.seed}
        self.summary.last_checkpoint = save_checkpoint(
            self.out_dir / LAST_CHECKPOINT, self.model, self.state, extra=extra
        )
        # higher val mAP wins; without validation, lower training loss wins
        metric = stats.val_map50 if stats.val_map50 is not None else -stats.loss
        if self.summary.best_metric is None or metric > self.summary.best_metric:
            self.summary.best_metric = metric
            self.summary.best_checkpoint = save_checkpoint(
                self.out_dir / BEST_CHECKPOINT, self.model, self.state, extra=extra
            )
            self.logger.info("Epoch %s: new best checkpoint (metric=%.6f)", stats.epoch, metric)
        self.logger.info(
            "Epoch %s done: loss=%.6f box=%.6f obj=%.6f cls=%.6f val_map50=%s (%.1fs)",
            stats.epoch,
            stats.loss,
            stats.box,
            stats.obj,
            stats.cls,
            "absent" if stats.val_map50 is None else f"{stats.val_map50:.4f}",
            stats.seconds,
        )

    def _shutdown(self) -> None:
        self.running = False
        self.training_log.finish(
            epochs=self.summary.epochs_run,
            steps=self.state.step,
            initial_loss=self.summary.initial_loss,
            final_loss=self.summary.final_loss,
            final_train_map50=self.summary.final_train_map50,
            interrupted=self.summary.interrupted,
        )
        self.logger.info(
            "Runner stopping. Epochs=%s Steps=%s FinalLoss=%s",
            self.summary.epochs_run,
            self.state.step,
            self.summary.final_loss,
        )
