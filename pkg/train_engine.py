# train_engine.py

import copy
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

import activation_maps as cam
from dataset_manager import AugmentConfig, Sample, augment, stack_images, stack_labels
from embedding_model import JointModel, ModelConfig, build_model, infer_batched, save_checkpoint
from evaluation import mean_auc
from losses import LossBreakdown, bce_multilabel, combine, rv_loss, triplet_batch
from mining_manager import PoolConfig, TripletMiner

logger = logging.getLogger(__name__)

STEP_COLUMNS = ["step", "epoch", "bce_global", "triplet", "bce_region", "total"]
EPOCH_COLUMNS = ["epoch", "lr", "bce_global", "triplet", "bce_region", "total", "n_triplets", "val_auc"]


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, batch_ids: Sequence[str]):
        super().__init__(f"{message}; batch ids: {', '.join(batch_ids)}")
        self.batch_ids = list(batch_ids)


@dataclass
class TrainConfig:
    max_epochs: int = 30
    batch_size: int = 32
    lr_initial: float = 1e-3
    lr_decay_epoch: int = 15
    lr_decay_factor: float = 10.0
    margin: float = 0.5
    cam_threshold: float = 0.8
    ramp_epochs: int = 10
    seed: int = 0
    use_dl: bool = True
    use_rv: bool = True
    # distance learning
    squared_distance: bool = False
    allow_partial: bool = True
    hard_mining: bool = True
    n_neg: int = 1000
    n_pos_max: int = 500
    partial_frac: float = 0.25
    # optimizer and inference
    beta1: float = 0.9
    beta2: float = 0.999
    average_logits: bool = False
    eval_batch_size: int = 256
    # augmentation
    max_rotation_deg: float = 5.0
    hflip_prob: float = 0.5

    def __post_init__(self):
        positive = ["max_epochs", "batch_size", "lr_initial", "lr_decay_epoch", "lr_decay_factor",
                    "margin", "cam_threshold", "ramp_epochs", "eval_batch_size"]
        bad = [name for name in positive if not getattr(self, name) > 0]
        if bad:
            raise ValueError(f"TrainConfig fields must be positive: {bad}")
        if not 0 < self.cam_threshold < 1:
            raise ValueError(f"cam_threshold must lie in (0, 1), got {self.cam_threshold}")

    def pool_config(self) -> PoolConfig:
        return PoolConfig(n_neg=self.n_neg, n_pos_max=self.n_pos_max, partial_frac=self.partial_frac,
                          allow_partial=self.allow_partial, hard_mining=self.hard_mining,
                          ramp_epochs=self.ramp_epochs)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.max_rotation_deg, self.hflip_prob)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Initial rate, divided by lr_decay_factor from epoch lr_decay_epoch on."""
    if epoch >= config.lr_decay_epoch:
        return config.lr_initial / config.lr_decay_factor
    return config.lr_initial


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    losses: LossBreakdown
    n_triplets: int
    val_auc: float


@dataclass
class TrainLog:
    epochs: List[EpochRecord] = field(default_factory=list)
    steps: List[Dict[str, float]] = field(default_factory=list)
    optimizer: Dict[str, float] = field(default_factory=dict)

    @property
    def best_epoch(self) -> int:
        """Epoch with the highest validation AUC; the earliest wins ties."""
        if not self.epochs:
            raise ValueError("no completed epochs")
        best, best_auc = self.epochs[0].epoch, -math.inf
        for rec in self.epochs:
            auc = rec.val_auc if not math.isnan(rec.val_auc) else -math.inf
            if auc > best_auc:
                best, best_auc = rec.epoch, auc
        return best

    def epoch_frame(self) -> pd.DataFrame:
        rows = [{
            "epoch": r.epoch, "lr": r.lr,
            "bce_global": r.losses.bce_global, "triplet": r.losses.triplet,
            "bce_region": r.losses.bce_region, "total": r.losses.total,
            "n_triplets": r.n_triplets, "val_auc": r.val_auc,
        } for r in self.epochs]
        return pd.DataFrame(rows, columns=EPOCH_COLUMNS)

    def step_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.steps, columns=STEP_COLUMNS)

    def write(self, log_dir: str) -> None:
        os.makedirs(log_dir, exist_ok=True)
        self.epoch_frame().to_csv(os.path.join(log_dir, "train_log.csv"), index=False)
        self.step_frame().to_csv(os.path.join(log_dir, "loss_steps.csv"), index=False)
        with open(os.path.join(log_dir, "train_summary.json"), "w") as f:
            json.dump({"best_epoch": self.best_epoch, "optimizer": self.optimizer}, f, indent=2)


def select_model(log: TrainLog, checkpoints: Dict[int, Dict[str, torch.Tensor]],
                 model_config: ModelConfig) -> JointModel:
    best = log.best_epoch
    if best not in checkpoints:
        raise ValueError(f"no checkpoint stored for best epoch {best}")
    model = JointModel(model_config)
    model.load_state_dict(checkpoints[best])
    model.eval()
    return model


class TrainEngine:
    """
    This class ties a training run together:
    - the joint model and its Adam optimizer with a one-step lr decay
    - the triplet miner (only when distance learning is on)
    - the region-verification branch (only when it is on)
    - per-epoch validation, checkpoints and logs

    Every random stream is derived from config.seed, and the streams for
    mining are separate from the ones that order and augment anchors, so
    switching distance learning off leaves everything else unchanged.
    """

    def __init__(self, config: TrainConfig, model_config: ModelConfig,
                 class_names: Sequence[str], out_dir: Optional[str] = None):
        self.config = config
        self.model_config = model_config
        self.class_names = list(class_names)
        self.out_dir = out_dir

        self.model = build_model(model_config, seed=config.seed)
        params = list(self.model.backbone.parameters()) + list(self.model.head_global.parameters())
        if config.use_rv:
            params += list(self.model.head_rv.parameters())
        self.optimizer = torch.optim.Adam(params, lr=config.lr_initial, betas=(config.beta1, config.beta2))
        self.scheduler = torch.optim.lr_scheduler.MultiStepLR(
            self.optimizer, milestones=[config.lr_decay_epoch], gamma=1.0 / config.lr_decay_factor)

        self.order_rng = np.random.default_rng([config.seed, 0])
        self.aug_rng = np.random.default_rng([config.seed, 1])
        self.mine_rng = np.random.default_rng([config.seed, 2])
        self.triplet_aug_rng = np.random.default_rng([config.seed, 3])

        self.miner: Optional[TripletMiner] = None
        self.checkpoints: Dict[int, Dict[str, torch.Tensor]] = {}
        self.log = TrainLog(optimizer={"name": "adam", "lr": config.lr_initial,
                                       "beta1": config.beta1, "beta2": config.beta2})
        self._step = 0

    # ---------------------------------------------------------------------
    # Main loop
    # ---------------------------------------------------------------------
    def train(self, train_samples: Sequence[Sample],
              val_samples: Sequence[Sample]) -> Tuple[JointModel, TrainLog]:
        cfg = self.config
        if cfg.use_dl:
            self.miner = TripletMiner(train_samples, cfg.pool_config(), seed=cfg.seed)
        by_id = {s.sample_id: s for s in train_samples}

        for epoch in range(cfg.max_epochs):
            lr = self.optimizer.param_groups[0]["lr"]
            losses, n_triplets = self._run_epoch(epoch, train_samples, by_id)
            val_auc = self.validate(val_samples)
            self.log.epochs.append(EpochRecord(epoch, lr, losses, n_triplets, val_auc))
            logger.info(f"epoch {epoch}: lr={lr:.2e} bce={losses.bce_global:.4f} "
                        f"triplet={losses.triplet:.4f} rv={losses.bce_region:.4f} "
                        f"total={losses.total:.4f} val_auc={val_auc:.4f}")

            self.checkpoints[epoch] = copy.deepcopy(self.model.state_dict())
            if self.out_dir:
                ckpt_dir = os.path.join(self.out_dir, "checkpoints")
                os.makedirs(ckpt_dir, exist_ok=True)
                save_checkpoint(self.model, os.path.join(ckpt_dir, f"epoch_{epoch:03d}.pt"), self.class_names)
            self.scheduler.step()

        best = select_model(self.log, self.checkpoints, self.model_config)
        logger.info(f"Best epoch {self.log.best_epoch} "
                    f"(val AUC {self.log.epochs[self.log.best_epoch].val_auc:.4f})")
        if self.out_dir:
            save_checkpoint(best, os.path.join(self.out_dir, "checkpoints", "best.pt"), self.class_names,
                            extra={"best_epoch": self.log.best_epoch, "average_logits": cfg.average_logits,
                                   "cam_threshold": cfg.cam_threshold, "use_rv": cfg.use_rv})
            self.log.write(os.path.join(self.out_dir, "logs"))
        return best, self.log

    def _run_epoch(self, epoch: int, samples: Sequence[Sample],
                   by_id: Dict[str, Sample]) -> Tuple[LossBreakdown, int]:
        order = self.order_rng.permutation(len(samples))
        bs = self.config.batch_size
        sums = np.zeros(3)
        n_batches = 0
        n_triplets = 0
        for start in range(0, len(order), bs):
            batch = [samples[i] for i in order[start:start + bs]]
            parts, used = self.train_step(batch, epoch, by_id)
            sums += (parts.bce_global, parts.triplet, parts.bce_region)
            n_batches += 1
            n_triplets += used
        mean = sums / max(n_batches, 1)
        return LossBreakdown(float(mean[0]), float(mean[1]), float(mean[2])), n_triplets

    def train_step(self, batch: Sequence[Sample], epoch: int,
                   by_id: Dict[str, Sample]) -> Tuple[LossBreakdown, int]:
        cfg = self.config
        model = self.model
        model.train()

        anchors = [augment(s, self.aug_rng, cfg.augment_config()) for s in batch]
        n = len(anchors)
        y = stack_labels(batch)

        triplets = []
        if cfg.use_dl:
            triplets = self.miner.sample([s.sample_id for s in batch], epoch, self.mine_rng)
        n_triplets = len(triplets)
        members = [by_id[t.positive_id] for t in triplets] + [by_id[t.negative_id] for t in triplets]
        members = [augment(s, self.triplet_aug_rng, cfg.augment_config()) for s in members]

        # rows: anchors, then positives, then negatives
        fmap_all, emb_all, logits_all = model(stack_images(anchors + members))
        fmap, emb, logits = fmap_all[:n], emb_all[:n], logits_all[:n]
        bce_global = bce_multilabel(torch.sigmoid(logits), y)

        triplet = bce_global.new_zeros(())
        if triplets:
            row = {s.sample_id: i for i, s in enumerate(batch)}
            f_a = emb[[row[t.anchor_id] for t in triplets]]
            f = emb_all[n:]
            triplet = triplet_batch(f_a, f[:n_triplets], f[n_triplets:], cfg.margin, cfg.squared_distance)

        bce_region = bce_global.new_zeros(())
        if cfg.use_rv:
            masks = cam.region_masks(fmap, model.head_global.weight,
                                     [s.positive_classes for s in batch], cfg.cam_threshold)
            p_region = model.classify_region(fmap * masks.unsqueeze(1))
            bce_region = rv_loss(p_region, y)

        total = combine(bce_global, triplet, bce_region)
        if not torch.isfinite(total):
            ids = [s.sample_id for s in batch]
            self._dump_diverged(ids, epoch)
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {self._step}", ids)

        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()

        parts = LossBreakdown(bce_global.detach().item(), triplet.detach().item(), bce_region.detach().item())
        self.log.steps.append({"step": self._step, "epoch": epoch, "bce_global": parts.bce_global,
                               "triplet": parts.triplet, "bce_region": parts.bce_region,
                               "total": parts.total})
        self._step += 1
        return parts, n_triplets

    def _dump_diverged(self, batch_ids: List[str], epoch: int) -> None:
        logger.error(f"Non-finite loss at epoch {epoch}, step {self._step}; batch: {batch_ids}")
        if self.out_dir:
            log_dir = os.path.join(self.out_dir, "logs")
            os.makedirs(log_dir, exist_ok=True)
            with open(os.path.join(log_dir, "diverged_batch.json"), "w") as f:
                json.dump({"epoch": epoch, "step": self._step, "batch_ids": batch_ids}, f, indent=2)

    # ---------------------------------------------------------------------
    # Validation
    # ---------------------------------------------------------------------
    def validate(self, val_samples: Sequence[Sample]) -> float:
        """Mean per-class AUC; fused probabilities when region verification is on."""
        if not val_samples:
            return float("nan")
        probs = infer_batched(stack_images(val_samples), self.model, self.config.eval_batch_size,
                              region_policy=None, average_logits=self.config.average_logits)
        scores = probs["p_total"] if self.config.use_rv else probs["p_global"]
        labels = np.stack([s.labels for s in val_samples])
        return mean_auc(scores.numpy(), labels)


def train(train_samples: Sequence[Sample], val_samples: Sequence[Sample], config: TrainConfig,
          model_config: ModelConfig, class_names: Sequence[str],
          out_dir: Optional[str] = None) -> Tuple[JointModel, TrainLog]:
    engine = TrainEngine(config, model_config, class_names, out_dir)
    return engine.train(train_samples, val_samples)
