"""Shared optimization protocol: Adam, cosine decay, rollout-MSE training.

Training backpropagates through the autoregressive rollout: each batch
warms on the first h observed frames and predicts the next
train_rollout_steps frames, with MSE averaged over all predicted frames.
Validation after every epoch scores the full closed-loop rollout; the
best-validation parameters are retained.
"""

import csv
import dataclasses
import math
import time

import numpy as np

from . import models as M
from . import ops
from .tensor import Tensor, backward, reset_tape


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    batch_size: int = 4
    total_updates: int = 125_000
    clip_norm: float = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_rollout_steps: int = None  # None = full sequence, T - h

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if self.total_updates < 1:
            raise ValueError("total_updates must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0 when present")


@dataclasses.dataclass
class TrainHistory:
    losses: list = dataclasses.field(default_factory=list)        # per update
    lrs: list = dataclasses.field(default_factory=list)           # per update
    val_rmse: list = dataclasses.field(default_factory=list)      # per epoch, rollout mean
    val_rmse_final: list = dataclasses.field(default_factory=list)  # per epoch, last frame
    epoch_seconds: list = dataclasses.field(default_factory=list)
    best_epoch: int = -1
    best_val_rmse: float = math.inf
    unstable: bool = False
    blowup_step: int = None  # update index of the first blow-up, if any


def updates_per_epoch(n_train, batch_size):
    """Batches per epoch: the last short batch counts as an update."""
    return -(-n_train // batch_size)


def cosine_lr(step, total_updates, lr0):
    """lr = lr0 * 0.5 * (1 + cos(pi * step / total))."""
    if not 0 <= step <= total_updates:
        raise ValueError(f"step {step} outside [0, {total_updates}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_updates))


def _real_view(arr):
    # complex parameters update as their interleaved real pairs
    if np.iscomplexobj(arr):
        return arr.view(np.float64 if arr.dtype == np.complex128 else np.float32)
    return arr


def adam_init(params):
    return {
        "t": 0,
        "m": {k: np.zeros(_real_view(p.data).shape, dtype=np.float32) for k, p in params.items()},
        "v": {k: np.zeros(_real_view(p.data).shape, dtype=np.float32) for k, p in params.items()},
    }


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update in place; rejects non-finite gradients."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for parameter {name!r}")
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        # einsum-produced gradients may be non-contiguous; the float view needs
        # a contiguous last axis
        g = _real_view(np.ascontiguousarray(grads[name]))
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        _real_view(p.data)[...] -= update
    return state


def clip_grad_norm(grads, max_norm):
    """Scale all gradients so the global L2 norm is at most max_norm."""
    if not max_norm > 0:
        raise ValueError("max_norm must be > 0")
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.abs(g) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return grads


def _batch_loss(model, batch, h, steps):
    """Rollout MSE of one [B,h+steps,H,W] batch; gradients flow to the tape."""
    if isinstance(model, M.ConvLSTM):
        state = model.init_state(batch.shape[0], batch.shape[2], batch.shape[3])
        pred = None
        for t in range(h):
            pred, state = model.step_frame(Tensor(np.ascontiguousarray(batch[:, t:t + 1])), state)
        preds = [pred]
        for _ in range(steps - 1):
            pred, state = model.step_frame(pred, state)
            preds.append(pred)
    else:
        window = [Tensor(np.ascontiguousarray(batch[:, t:t + 1])) for t in range(h)]
        preds = []
        for _ in range(steps):
            x = ops.concat(window[-h:], axis=1)
            pred = model.forward(x)
            preds.append(pred)
            window.append(pred)
    target = Tensor(np.ascontiguousarray(batch[:, h:h + steps]))
    return ops.mse(ops.concat(preds, axis=1), target)


def validation_rmse(model, val_data, steps):
    """(rollout-mean RMSE, final-frame RMSE) over a [N,T,H,W] split.

    A validation blow-up scores as infinity rather than an error.
    """
    h = model.config.history_len
    val = np.asarray(val_data, dtype=np.float32)
    try:
        preds = M.rollout_batch(model, val[:, :h], steps)
    except M.BlowUpError:
        return math.inf, math.inf
    err = (preds - val[:, h:h + steps]).astype(np.float64)
    per_lead = np.sqrt(np.mean(err ** 2, axis=(0, 2, 3)))
    return float(per_lead.mean()), float(per_lead[-1])


def train(model, train_data, val_data, config):
    """Optimize `model` in place; returns a TrainHistory.

    Batches are assembled by a deterministic shuffle keyed on
    (config.seed, epoch). The parameters achieving the best validation
    rollout-mean RMSE are restored into the model at the end.
    """
    if not model.params:
        raise ValueError(f"{model.config.family} has no trainable parameters")
    train_arr = np.asarray(train_data, dtype=np.float32)
    val_arr = np.asarray(val_data, dtype=np.float32)
    n, total_t = train_arr.shape[0], train_arr.shape[1]
    h = model.config.history_len
    steps = config.train_rollout_steps or (total_t - h)
    if total_t < h + steps:
        raise ValueError(f"sequences of {total_t} frames cannot cover "
                         f"{h} context + {steps} rollout frames")
    val_steps = total_t - h

    for p in model.params.values():
        p.requires_grad = True
    state = adam_init(model.params)
    history = TrainHistory()
    best_params = model.export_params()
    update = 0
    epoch = 0

    while update < config.total_updates:
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            if update >= config.total_updates:
                break
            rows = order[start:start + config.batch_size]
            batch = train_arr[rows]
            if steps < total_t - h:
                # truncated rollouts sample a random window per sequence so
                # every transition in the data is seen, not just the first
                offsets = rng.integers(0, total_t - h - steps + 1, size=len(rows))
                batch = np.stack([batch[i, o:o + h + steps]
                                  for i, o in enumerate(offsets)])
            loss = _batch_loss(model, batch, h, steps)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                history.unstable = True
                history.blowup_step = update
                reset_tape()
                model.load_params(best_params)
                return history
            backward(loss)
            grads = {name: p.grad for name, p in model.params.items()}
            for p in model.params.values():
                p.zero_grad()
            if config.clip_norm is not None:
                clip_grad_norm(grads, config.clip_norm)
            lr = cosine_lr(update, config.total_updates, config.lr0)
            adam_step(model.params, grads, state, lr,
                      config.beta1, config.beta2, config.eps)
            history.losses.append(loss_value)
            history.lrs.append(lr)
            update += 1
        vm, vf = validation_rmse(model, val_arr, val_steps)
        history.val_rmse.append(vm)
        history.val_rmse_final.append(vf)
        history.epoch_seconds.append(time.perf_counter() - t0)
        if math.isinf(vm):
            history.unstable = True
            if history.blowup_step is None:
                history.blowup_step = update
        if vm < history.best_val_rmse:
            history.best_val_rmse = vm
            history.best_epoch = epoch
            best_params = model.export_params()
        epoch += 1

    model.load_params(best_params)
    return history


def write_history_csv(history, updates_path, epochs_path):
    """Dump (update, loss, lr) and (epoch, val_rmse, val_rmse_final, seconds)."""
    with open(updates_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["update", "loss", "lr"])
        for i, (loss, lr) in enumerate(zip(history.losses, history.lrs)):
            writer.writerow([i, repr(loss), repr(lr)])
    with open(epochs_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "val_rmse", "val_rmse_final", "seconds"])
        rows = zip(history.val_rmse, history.val_rmse_final, history.epoch_seconds)
        for i, (vm, vf, sec) in enumerate(rows):
            writer.writerow([i, repr(vm), repr(vf), repr(sec)])
