"""Episodic training loop and the data plumbing it needs."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio import standardize
from .autodiff import SGD, lr_schedule
from .cache import read_spectrogram
from .checkpoint import model_digest, save_checkpoint
from .config import RunConfig
from .episodes import DatasetIndex, EpisodeSpec, SplitSpec, hold_out_validation, sample_train_episode
from .evaluation import accuracy_summary, embed_clips, evaluate
from .fewshot import ExtractorBank, episode_loss, make_masks

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, diagnostic):
        super().__init__(message)
        self.diagnostic = diagnostic


def load_clips(index: DatasetIndex, clip_ids, expect_fingerprint: bytes | None = None) -> dict[str, np.ndarray]:
    """Standardised spectrograms for ``clip_ids``, read from the cache files named in ``index``."""
    lookup = index.lookup()
    out = {}
    for cid in clip_ids:
        spec = read_spectrogram(lookup[cid].path)
        if expect_fingerprint is not None and spec.fingerprint != expect_fingerprint:
            raise ValueError(f"cache file for {cid} was built with a different spectrogram config")
        out[cid] = standardize(spec.values)
    return out


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    val_accuracy: float | None


def train(cfg: RunConfig, index: DatasetIndex, split: SplitSpec, out_dir, clips: dict[str, np.ndarray] | None = None,
          input_fingerprint: str = "") -> tuple[ExtractorBank, list[EpochStats]]:
    """Train an extractor bank on base-class episodes; checkpoints after every epoch."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t = cfg.train
    train_classes, val_classes = hold_out_validation(split, t.n_val_classes)
    base_data = index.by_class(train_classes)
    val_data = index.by_class(val_classes)
    if clips is None:
        wanted = [c for v in (*base_data.values(), *val_data.values()) for c in v]
        clips = load_clips(index, wanted)

    masks = make_masks(cfg.mask_mode, cfg.spectrogram.shape, cfg.split_band)
    bank = ExtractorBank.create(cfg.backbone, masks, cfg.seed)
    opt = SGD(bank.parameters(), t.lr, t.weight_decay, t.momentum)
    spec = EpisodeSpec(t.n_way, t.k_shot, t.n_query)
    val_spec = EpisodeSpec(min(5, len(val_data)), 5, 1, t.val_repetitions) if len(val_data) >= 2 else None
    digest = model_digest(cfg.backbone, masks, input_fingerprint)
    meta = {
        "seed": cfg.seed,
        "mask_mode": cfg.mask_mode,
        "split_band": cfg.split_band,
        "distance": cfg.distance,
        "model_digest": digest,
        "input_fingerprint": input_fingerprint,
        "split": {"seed": split.seed, "base": list(split.base_classes), "novel": list(split.novel_classes)},
        "train": asdict(t),
    }

    history = []
    log_path = out_dir / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(["epoch", "lr", "loss", "val_accuracy"])
    for epoch in range(t.epochs):
        opt.lr = lr_schedule(epoch, t.lr, t.step_size)
        rng = np.random.default_rng([cfg.seed, epoch])
        losses = []
        for i in range(t.episodes_per_epoch):
            ep = sample_train_episode(base_data, spec, rng, episode_id=epoch * t.episodes_per_epoch + i)
            sx = np.stack([clips[c] for c in ep.support_ids])
            qx = np.stack([clips[c] for c in ep.query_ids])
            res = episode_loss(sx, ep.support_labels, qx, ep.query_labels, bank, masks, cfg.squared)
            if not math.isfinite(res.loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, episode {ep.episode_id}",
                    {"epoch": epoch, "episode_id": ep.episode_id, "lr": opt.lr, "loss": repr(res.loss),
                     "support_ids": list(ep.support_ids), "query_ids": list(ep.query_ids)},
                )
            opt.step()
            losses.append(res.loss)
        val_acc = None
        if val_spec is not None:
            table = embed_clips(bank, masks, {c: clips[c] for v in val_data.values() for c in v})
            val_acc = accuracy_summary(evaluate(table, val_data, val_spec, cfg.seed, cfg.squared)).mean
        stats = EpochStats(epoch, opt.lr, float(np.mean(losses)), val_acc)
        history.append(stats)
        with open(log_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [epoch, repr(stats.lr), repr(stats.loss), "" if val_acc is None else f"{val_acc:.4f}"])
        log.info("epoch %d lr %.5g loss %.4f val %s", epoch, stats.lr, stats.loss,
                 "-" if val_acc is None else f"{val_acc:.2f}")
        save_checkpoint(out_dir / "checkpoint.ckpt", bank, masks, {**meta, "epoch": epoch + 1})
    save_checkpoint(out_dir / "model.ckpt", bank, masks, {**meta, "epoch": t.epochs})
    return bank, history
