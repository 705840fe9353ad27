"""Forecast verification: RMSE/ACC, baselines, stability sweeps, zonal means,
runtime/memory benchmarking, and CSV/SVG reporting."""

import csv
import dataclasses
import math
import time

import numpy as np

from . import models as M
from . import trainer as Tr
from .tensor import active_tape, backward, reset_tape


class UndefinedACCError(ValueError):
    """Anomaly correlation is undefined (zero anomaly variance)."""

    def __init__(self, lead, message=None):
        self.lead = int(lead)
        super().__init__(message or f"ACC undefined at lead {lead}: zero anomaly variance")


@dataclasses.dataclass
class ScoreReport:
    model: str
    family: str
    params: int
    seed: int
    rmse_per_lead: np.ndarray
    acc_per_lead: np.ndarray
    mean_rmse: float
    final_rmse: float
    seconds_per_epoch: float = float("nan")
    peak_mem_bytes: int = 0
    blowup_step: int = None

    def __post_init__(self):
        if len(self.rmse_per_lead) != len(self.acc_per_lead):
            raise ValueError("per-lead arrays must have equal lengths")
        if np.any(np.asarray(self.rmse_per_lead) < 0):
            raise ValueError("RMSE must be non-negative")


def rmse(pred, target, weights=None):
    """Per-lead-time RMSE and its mean over leads.

    pred/target: [S,H,W] (or [N,S,H,W], pooled over N). Optional per-row
    weights (length H) are normalized to mean 1 before use.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"rmse: shape mismatch {pred.shape} vs {target.shape}")
    err2 = (pred - target) ** 2
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (pred.shape[-2],):
            raise ValueError(f"rmse: weights must have length {pred.shape[-2]}")
        weights = weights / weights.mean()
        err2 = err2 * weights[:, None]
    axes = tuple(i for i in range(err2.ndim) if i != err2.ndim - 3)
    per_lead = np.sqrt(err2.mean(axis=axes))
    return per_lead, float(per_lead.mean())


def acc(pred, target, climatology):
    """Per-lead centered anomaly correlation over the grid."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    climatology = np.asarray(climatology, dtype=np.float64)
    if pred.shape != target.shape or pred.shape != climatology.shape:
        raise ValueError("acc: pred/target/climatology shapes must match")
    out = np.empty(pred.shape[0])
    for lead in range(pred.shape[0]):
        f = pred[lead] - climatology[lead]
        o = target[lead] - climatology[lead]
        fvar = float(np.sum(f * f))
        ovar = float(np.sum(o * o))
        if fvar == 0.0 or ovar == 0.0:
            raise UndefinedACCError(lead)
        out[lead] = float(np.sum(f * o)) / math.sqrt(fvar * ovar)
    return out


def climatology(train_split):
    """Per-lead-time mean field over the training split: [N,T,H,W] -> [T,H,W]."""
    train_split = np.asarray(train_split)
    if train_split.ndim != 4 or train_split.shape[0] == 0:
        raise ValueError("climatology: expected a non-empty [N,T,H,W] split")
    return train_split.mean(axis=0, dtype=np.float64)


def persistence_forecast(history, steps):
    """Repeat the last observed frame for every lead time."""
    history = np.asarray(history)
    if history.ndim != 3 or history.shape[0] == 0:
        raise ValueError("persistence_forecast: expected a non-empty [h,H,W] history")
    return np.broadcast_to(history[-1], (steps,) + history.shape[1:]).copy()


def stability_sweep(model, ic, max_steps, blowup_threshold):
    """First forecast step (1-based) whose frame exceeds the threshold or
    goes non-finite; None when the rollout stays bounded for max_steps.

    Blow-up is a result here, not an error.
    """
    if max_steps < 1:
        raise ValueError("stability_sweep: max_steps must be >= 1")
    ic = np.asarray(getattr(ic, "data", ic), dtype=np.float32)
    for index, frame in enumerate(M.rollout_frames(model, ic[None])):
        if index >= max_steps:
            return None
        if not np.isfinite(frame).all() or np.abs(frame).max() > blowup_threshold:
            return index + 1
    return None


def zonal_average(field):
    """Mean over the second (longitude-like) axis for each row."""
    field = np.asarray(field)
    if field.ndim != 2:
        raise ValueError(f"zonal_average: expected a 2D field, got shape {field.shape}")
    return field.mean(axis=1)


def bench(model, data, batch_size=4, n_batches=2):
    """Runtime and memory record for one (partial, extrapolated) training epoch.

    seconds_per_epoch: wall-clock for full-epoch batch count, measured over
    n_batches and extrapolated. peak_mem_bytes: parameters + Adam state
    (two float moments per real scalar) + the tape's maximum simultaneous
    activation footprint. Both are deterministic analytic estimates except
    the wall clock itself.
    """
    data = np.asarray(data, dtype=np.float32)
    n, total_t = data.shape[0], data.shape[1]
    h = model.config.history_len
    steps = max(1, min(2, total_t - h))
    trainable = bool(model.params)
    param_bytes = sum(p.data.nbytes for p in model.params.values())
    adam_bytes = 2 * sum(_real_size(p) * 4 for p in model.params.values())

    if trainable:
        for p in model.params.values():
            p.requires_grad = True
        state = Tr.adam_init(model.params)

    activation_bytes = 0
    n_batches = min(n_batches, -(-n // batch_size))
    t0 = time.perf_counter()
    for b in range(n_batches):
        batch = data[b * batch_size:(b + 1) * batch_size]
        loss = Tr._batch_loss(model, batch, h, steps)
        if trainable:
            activation_bytes = max(activation_bytes, active_tape().activation_bytes())
            backward(loss)
            grads = {k: p.grad for k, p in model.params.items()}
            for p in model.params.values():
                p.zero_grad()
            Tr.adam_step(model.params, grads, state, lr=0.0)
        else:
            reset_tape()
    elapsed = time.perf_counter() - t0
    batches_per_epoch = -(-n // batch_size)
    return {
        "seconds_per_epoch": elapsed / n_batches * batches_per_epoch,
        "param_bytes": param_bytes,
        "adam_bytes": adam_bytes,
        "activation_bytes": activation_bytes,
        "peak_mem_bytes": param_bytes + adam_bytes + activation_bytes,
        "params": M.count_params(model),
        "batch_size": batch_size,
    }


def _real_size(p):
    return p.size * (2 if np.iscomplexobj(p.data) else 1)


def score_rollout(name, model, test_split, clim, seed=0, **extra):
    """Evaluate closed-loop rollouts of a model over a [N,T,H,W] test split.

    Evaluation is pure: repeated calls over the same arrays are bit-identical.
    """
    test = np.asarray(test_split, dtype=np.float32)
    h = model.config.history_len
    steps = test.shape[1] - h
    preds = M.rollout_batch(model, test[:, :h], steps)
    target = test[:, h:]
    per_lead, mean_r = rmse(preds, target)
    # pooled-anomaly ACC per lead over all test samples
    acc_per_lead = np.empty(steps)
    for lead in range(steps):
        f = (preds[:, lead] - clim[h + lead]).ravel()
        o = (target[:, lead] - clim[h + lead]).ravel()
        fvar, ovar = float(f @ f), float(o @ o)
        if fvar == 0.0 or ovar == 0.0:
            raise UndefinedACCError(lead)
        acc_per_lead[lead] = float(f @ o) / math.sqrt(fvar * ovar)
    return ScoreReport(model=name, family=model.config.family,
                       params=M.count_params(model), seed=seed,
                       rmse_per_lead=per_lead, acc_per_lead=acc_per_lead,
                       mean_rmse=mean_r, final_rmse=float(per_lead[-1]), **extra)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def write_lead_csv(reports, path):
    """Per-lead rows: (model, family, params, seed, lead, rmse, acc)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "family", "params", "seed", "lead", "rmse", "acc"])
        for r in reports:
            for lead in range(len(r.rmse_per_lead)):
                writer.writerow([r.model, r.family, r.params, r.seed, lead,
                                 repr(float(r.rmse_per_lead[lead])),
                                 repr(float(r.acc_per_lead[lead]))])


def write_summary_csv(reports, path):
    """Summary rows: (model, params, mean_rmse, seconds_per_epoch, peak_mem_bytes, blowup_step)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "params", "mean_rmse", "final_rmse",
                         "seconds_per_epoch", "peak_mem_bytes", "blowup_step"])
        for r in reports:
            writer.writerow([r.model, r.params, repr(r.mean_rmse), repr(r.final_rmse),
                             repr(r.seconds_per_epoch), r.peak_mem_bytes,
                             "" if r.blowup_step is None else r.blowup_step])


def ranking_flags(reports):
    """Flag budget-matched mean-RMSE inversions of the expected family order.

    Within each parameter bucket (nearest power-of-ten grouping), the
    spectral family is expected to beat the convolutional baselines; any
    inversion is reported, not enforced.
    """
    expected_order = ("tfno2d", "fno2d", "unet", "convlstm")
    flags = []
    by_bucket = {}
    for r in reports:
        if r.family == "persistence" or r.params <= 0:
            continue
        bucket = round(math.log10(r.params) * 2) / 2  # half-decade buckets
        by_bucket.setdefault(bucket, {}).setdefault(r.family, []).append(r.mean_rmse)
    for bucket, families in sorted(by_bucket.items()):
        means = {fam: float(np.mean(v)) for fam, v in families.items()}
        ranked = [f for f in expected_order if f in means]
        for a, b in zip(ranked, ranked[1:]):
            if means[a] >= means[b]:
                flags.append(f"ranking inversion in ~1e{bucket:.1f} bucket: "
                             f"{a} mean RMSE {means[a]:.4f} >= {b} {means[b]:.4f}")
    return flags


def plot_rmse_vs_params(reports, path):
    """RMSE vs parameter count, one line per family with a min-max seed band."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    by_family = {}
    for r in reports:
        if r.params > 0:
            by_family.setdefault(r.family, {}).setdefault(r.params, []).append(r.mean_rmse)
    for family, series in sorted(by_family.items()):
        xs = sorted(series)
        mean = [float(np.mean(series[x])) for x in xs]
        lo = [float(np.min(series[x])) for x in xs]
        hi = [float(np.max(series[x])) for x in xs]
        ax.plot(xs, mean, marker="o", label=family)
        ax.fill_between(xs, lo, hi, alpha=0.2)
    persistence = [r.mean_rmse for r in reports if r.family == "persistence"]
    if persistence:
        ax.axhline(float(np.mean(persistence)), linestyle="--", color="gray",
                   label="persistence")
    ax.set_xscale("log")
    ax.set_xlabel("#params")
    ax.set_ylabel("mean rollout RMSE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_rmse_vs_lead(reports, path):
    """Per-lead RMSE curves, one line per report."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for r in reports:
        leads = np.arange(1, len(r.rmse_per_lead) + 1)
        ax.plot(leads, r.rmse_per_lead, label=f"{r.model} (seed {r.seed})")
    ax.set_xlabel("lead time (frames)")
    ax.set_ylabel("RMSE")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
