"""Training loop: AdamW updates under a warmup+cosine schedule.

Each optimizer step runs features -> project -> normalize -> logits ->
loss -> analytic gradients -> AdamW, then advances the learning rate.
After every epoch the validation loss is computed and a checkpoint is
written iff it strictly improves on the best seen so far; the best
checkpoint is what training returns. Runs are fully deterministic per
seed.

Loss numbers in logs and reports are per-pair means (batch objective
divided by batch size) so values are comparable across batch sizes.
"""

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import PairedDataset, make_batches
from .errors import DegenerateRowError, DivergenceError, ShapeError
from .loss import LossConfig, loss_backward
from .model import (
    DualEncoderModel,
    checkpoint_bytes,
    checkpoint_from_bytes,
    load_checkpoint,
    save_checkpoint,
)

PARAM_KEYS = ("image_w", "image_b", "text_w", "text_b")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    warmup_steps: int = 50
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    checkpoint_path: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(
                f"batch_size must be >= 2 for contrastive training, got {self.batch_size}"
            )
        if self.lr_max < 0 or self.lr_min < 0 or self.lr_min > self.lr_max:
            raise ValueError(
                f"need 0 <= lr_min <= lr_max, got lr_min={self.lr_min}, lr_max={self.lr_max}"
            )
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class OptimizerState:
    """AdamW first/second-moment accumulators plus the step counter."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


@dataclass
class TrainReport:
    train_loss: list        # per-epoch mean per-pair train loss
    val_loss: list          # per-epoch validation loss
    best_val_loss: float
    best_epoch: int         # 1-based
    checkpointed: list      # per-epoch strict-improvement flags
    checkpoint_writes: int
    wall_seconds: float
    final_lr: float

    def as_dict(self) -> dict:
        return asdict(self)


def lr_at(step, cfg: TrainConfig, total_steps) -> float:
    """Learning rate at a given optimizer step.

    Linear warmup from 0 to lr_max over ``warmup_steps``, then cosine
    decay to lr_min at ``total_steps``; later steps clamp to lr_min. A
    warmup longer than the run is shortened to the run.
    """
    warmup = min(cfg.warmup_steps, total_steps)
    if warmup > 0 and step < warmup:
        return cfg.lr_max * (step / warmup)
    if step > total_steps:
        return cfg.lr_min
    span = total_steps - warmup
    if span == 0:
        return cfg.lr_max
    progress = (step - warmup) / span
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


def adamw_step(params, grads, state: OptimizerState, lr, cfg: TrainConfig):
    """One decoupled-weight-decay Adam update, in place on ``params``.

        m <- b1 m + (1-b1) g          v <- b2 v + (1-b2) g^2
        theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta

    with bias-corrected m_hat = m / (1 - b1^t), v_hat = v / (1 - b2^t).
    """
    for k, p in params.items():
        if k not in grads:
            raise ShapeError(f"missing gradient for parameter {k!r}")
        if grads[k].shape != p.shape:
            raise ShapeError(
                f"gradient shape {grads[k].shape} does not match parameter "
                f"{k!r} shape {p.shape}"
            )
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * (g * g)
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        p -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps) + lr * cfg.weight_decay * p
    return params, state


def model_params(model: DualEncoderModel) -> dict:
    """Live references to the four trainable blocks, keyed by PARAM_KEYS."""
    return {
        "image_w": model.image_head.w,
        "image_b": model.image_head.b,
        "text_w": model.text_head.w,
        "text_b": model.text_head.b,
    }


def evaluate_loss(model, ds: PairedDataset, split, loss_cfg: LossConfig, batch_size) -> float:
    """Mean per-pair loss over a split, batched in pair order (no shuffle).

    Deterministic: consecutive chunks of ``batch_size`` pairs, last chunk
    short. Returns the summed batch objectives divided by the pair count.
    """
    pairs = ds.pairs_for_split(split)
    if not pairs:
        raise ValueError(f"split {split!r} is empty")
    total = 0.0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        img = ds.image_store.rows([p.image_id for p in chunk])
        txt = ds.text_store.rows([p.text_id for p in chunk])
        out, _ = loss_backward(img, txt, model, loss_cfg)
        total += out.total
    return total / len(pairs)


class _JsonlLog:
    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, record):
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")

    def close(self):
        if self._fh is not None:
            self._fh.close()


def train(model: DualEncoderModel, ds: PairedDataset, cfg: TrainConfig):
    """Run the full training loop and return (best model, TrainReport).

    The passed model is trained in place through the final epoch; the
    returned model is the snapshot from the epoch with the best validation
    loss (strictly-improving checkpoints, written to
    ``cfg.checkpoint_path`` when set). Datasets without a val split fall
    back to the epoch's mean train loss for checkpoint selection.

    One seeded shuffle (dropping a final short batch) fixes the batch
    sequence, which every epoch then replays; with a zero learning rate
    the per-epoch train loss is therefore exactly constant.
    """
    t_start = time.perf_counter()
    train_pairs = ds.pairs_for_split("train")
    if not train_pairs:
        raise ValueError("dataset has an empty train split")
    if cfg.batch_size > len(train_pairs):
        raise ValueError(
            f"batch_size {cfg.batch_size} exceeds train split size {len(train_pairs)}"
        )
    batches = make_batches(ds, "train", cfg.batch_size, seed=cfg.seed, drop_last=True)
    total_steps = cfg.epochs * len(batches)
    has_val = bool(ds.pairs_for_split("val"))

    model.meta = dict(model.meta)
    echo = _jsonable(asdict(cfg))
    echo.pop("checkpoint_path", None)  # keep artifacts path-independent
    echo.pop("log_path", None)
    model.meta["train_config"] = echo

    params = model_params(model)
    state = OptimizerState.for_params(params)
    log = _JsonlLog(cfg.log_path)
    best = math.inf
    best_epoch = 0
    best_snapshot = None
    writes = 0
    train_losses, val_losses, flags = [], [], []
    step = 0
    lr = 0.0
    try:
        for epoch in range(1, cfg.epochs + 1):
            loss_sum = 0.0
            rows = 0
            for batch in batches:
                step += 1
                lr = lr_at(step, cfg, total_steps)
                img = ds.image_store.rows(batch.image_ids)
                txt = ds.text_store.rows(batch.text_ids)
                try:
                    out, grads = loss_backward(img, txt, model, cfg.loss)
                except (ValueError, DegenerateRowError) as e:
                    raise DivergenceError(
                        f"training aborted at step {step} (epoch {epoch}): {e}"
                    ) from e
                if not math.isfinite(out.total):
                    raise DivergenceError(
                        f"loss became non-finite at step {step} (epoch {epoch})"
                    )
                adamw_step(params, grads.as_dict(), state, lr, cfg)
                for k in PARAM_KEYS:
                    if not np.isfinite(params[k]).all():
                        raise DivergenceError(
                            f"parameter {k!r} became non-finite after step {step} "
                            f"(epoch {epoch}); try a lower lr_max"
                        )
                n = len(batch.text_ids)
                loss_sum += out.total
                rows += n
                log.write(
                    {
                        "step": step,
                        "epoch": epoch,
                        "lr": lr,
                        "loss": out.total / n,
                        "ce_term": out.ce_term / n,
                        "margin_term": out.margin_term / n,
                    }
                )
            train_loss = loss_sum / rows
            if has_val:
                val = evaluate_loss(model, ds, "val", cfg.loss, cfg.batch_size)
            else:
                val = train_loss
            improved = val < best
            if improved:
                best = val
                best_epoch = epoch
                writes += 1
                if cfg.checkpoint_path:
                    save_checkpoint(model, cfg.checkpoint_path)
                else:
                    best_snapshot = checkpoint_bytes(model)
            train_losses.append(train_loss)
            val_losses.append(val)
            flags.append(improved)
            log.write(
                {"epoch": epoch, "train_loss": train_loss, "val_loss": val, "checkpointed": improved}
            )
    finally:
        log.close()

    if cfg.checkpoint_path:
        best_model = load_checkpoint(cfg.checkpoint_path)
    else:
        best_model = checkpoint_from_bytes(best_snapshot)
    report = TrainReport(
        train_loss=train_losses,
        val_loss=val_losses,
        best_val_loss=best,
        best_epoch=best_epoch,
        checkpointed=flags,
        checkpoint_writes=writes,
        wall_seconds=time.perf_counter() - t_start,
        final_lr=lr,
    )
    return best_model, report


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (str, int, float, bool)) or obj is None:
        return obj
    return str(obj)
