"""Adam, step-decay schedules, max-norm projection and the training loop."""
import csv
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import RngStream, backward
from .data import make_batch
from .errors import ConfigError, ContractError, DivergenceError, NonFiniteError
from .ops import softmax_xent_masked

log = logging.getLogger(__name__)

LOG_HEADER = ("iter", "lr", "train_loss", "val_q8")


def lr_schedule(t, base, decay_every, factor=0.5):
    """Step decay: ``base * factor ** floor(t / decay_every)``."""
    if t < 0:
        raise ContractError("iteration must be >= 0")
    return base * factor ** (t // decay_every)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, applied in place to ``params`` (name -> Tensor)."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)
    return params, state


def maxnorm_project(weight, cap, unit_axis=-1):
    """Rescale each unit's incoming weights to L2 norm at most ``cap``.

    ``unit_axis`` indexes output units; the norm runs over every other axis.
    A 1-D ``weight`` is a single unit.
    """
    if cap <= 0:
        raise ContractError("max-norm cap must be positive")
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim == 1:
        axes = (0,)
    else:
        axes = tuple(i for i in range(w.ndim) if i != unit_axis % w.ndim)
    norms = np.sqrt((w * w).sum(axis=axes, keepdims=True))
    scale = np.where(norms > cap, cap / np.maximum(norms, 1e-300), 1.0)
    return (w * scale).astype(np.asarray(weight).dtype)


@dataclass
class TrainPlan:
    base_lr: float = 3.357e-4
    decay_every: int = 100_000
    decay_factor: float = 0.5
    batch_size: int = 54
    max_iterations: int = 1_000_000
    eval_every: int = 1000
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.decay_every < 1:
            raise ConfigError("decay_every must be >= 1")
        if self.eval_every < 1 or self.max_iterations < 0:
            raise ConfigError("eval_every must be >= 1 and max_iterations >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train-plan keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    best_state: dict
    best_val_q8: float
    best_iteration: int
    rows: list
    iterations: int
    stopped_early: bool


def predict_logits(model, records, chunk=16, labels_from_truth=True):
    """Infer-mode logits for ``records``, stacked as (N, grid, classes)."""
    outs = []
    for start in range(0, len(records), chunk):
        batch = make_batch(records, range(start, min(start + chunk, len(records))))
        labels = batch.labels if (model.cfg.conditioned and labels_from_truth) else None
        outs.append(model.forward(batch.features, batch.mask, mode="infer", labels=labels).data)
    return np.concatenate(outs, axis=0)


def validation_q8(model, records):
    """Per-residue argmax accuracy; conditioned models see ground-truth context."""
    logits = predict_logits(model, records)
    pred = logits.argmax(axis=-1)
    truth = np.stack([r.labels for r in records])
    mask = np.stack([r.mask for r in records]) > 0
    return float((pred[mask] == truth[mask]).mean())


def _fmt(x):
    return repr(float(x))


def train_loop(model, train_records, val_records, plan, log_path=None, evaluate=None, on_improve=None):
    """Mini-batch training with early stopping on validation Q8.

    Each iteration samples ``plan.batch_size`` proteins uniformly with
    replacement, takes one Adam step and re-applies the max-norm cap to the
    fully-connected weights. Every ``plan.eval_every`` iterations the model is
    scored with ``evaluate(model, val_records)`` (validation Q8 by default);
    the best state is kept and training stops after ``plan.patience``
    evaluations without improvement (0 disables early stopping).
    """
    if not train_records:
        raise ConfigError("training set is empty")
    if not val_records:
        raise ConfigError("validation set is empty")
    evaluate = evaluate or validation_q8
    cap = model.cfg.maxnorm_cap
    constrained = model.maxnorm_names() if cap else []
    state = AdamState()
    root = RngStream(plan.seed).fork("train")
    sampler = root.fork("batches")
    rows = []
    best_q8, best_iter, best_state = -1.0, 0, model.copy_state()
    bad_evals = 0
    losses = []
    stopped = False
    it = 0
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
    try:
        for it in range(plan.max_iterations):
            idx = sampler.integers(0, len(train_records), plan.batch_size)
            batch = make_batch(train_records, idx)
            labels = batch.labels if model.cfg.conditioned else None
            lr = lr_schedule(it, plan.base_lr, plan.decay_every, plan.decay_factor)
            try:
                logits = model.forward(batch.features, batch.mask, mode="train",
                                       rng=root.fork("dropout", it), labels=labels)
                loss, _ = softmax_xent_masked(logits, batch.labels, batch.mask)
                grads = backward(loss, model.params)
            except NonFiniteError as exc:
                raise DivergenceError(it, f"diverged at iteration {it}: {exc}") from exc
            adam_step(model.params, grads, state, lr)
            for name in constrained:
                p = model.params[name]
                p.data = maxnorm_project(p.data, cap, unit_axis=-1)
            losses.append(float(loss.data))

            if (it + 1) % plan.eval_every == 0 or it + 1 == plan.max_iterations:
                q8 = float(evaluate(model, val_records))
                row = (it + 1, lr, float(np.mean(losses)), q8)
                losses = []
                rows.append(row)
                if writer is not None:
                    writer.writerow([row[0]] + [_fmt(v) for v in row[1:]])
                    fh.flush()
                log.info("iter %d lr %.4g loss %.4f val_q8 %.4f", *row)
                if q8 > best_q8:
                    best_q8, best_iter, bad_evals = q8, it + 1, 0
                    best_state = model.copy_state()
                    if on_improve is not None:
                        on_improve(model, it + 1, q8)
                else:
                    bad_evals += 1
                    if plan.patience and bad_evals >= plan.patience:
                        stopped = True
                        break
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(best_state=best_state, best_val_q8=best_q8, best_iteration=best_iter,
                       rows=rows, iterations=it + 1 if plan.max_iterations else 0, stopped_early=stopped)
