"""Greedy, beam and ensemble-beam decoders plus Q8 evaluation.

The beam machinery works on *step scorers*: callables
``scorer(t, prefixes) -> log_probs`` where ``prefixes`` is an ``(H, t)``
integer array of label hypotheses and ``log_probs`` is ``(H, K)``. Models,
probability tables and blends of them are all adapted to that one shape.
"""
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .ops import log_softmax_array

LOG_FLOOR = 1e-12
NUM_CLASSES = 8


@dataclass
class Hypothesis:
    labels: tuple
    score: float


def _select(cands, beam):
    # highest score first; ties go to the lexicographically smaller prefix
    cands.sort(key=lambda h: (-h.score, h.labels))
    return cands[:beam]


def beam_search_scorer(scorer, length, num_labels, beam):
    """Left-to-right beam search maximising the summed per-step log-probabilities.

    Returns the best complete :class:`Hypothesis`. No length normalisation is
    applied: every hypothesis has the same length.
    """
    if beam < 1:
        raise ConfigError(f"beam size must be >= 1, got {beam}")
    hyps = [Hypothesis((), 0.0)]
    for t in range(length):
        prefixes = np.array([h.labels for h in hyps], dtype=np.int64).reshape(len(hyps), t)
        logp = np.asarray(scorer(t, prefixes), dtype=np.float64)
        if logp.shape != (len(hyps), num_labels):
            raise DimensionError(f"scorer returned {logp.shape}, expected {(len(hyps), num_labels)}")
        cands = [Hypothesis(h.labels + (k,), h.score + float(logp[i, k]))
                 for i, h in enumerate(hyps) for k in range(num_labels)]
        hyps = _select(cands, beam)
    return hyps[0]


def floored_log(probs):
    return np.log(np.maximum(np.asarray(probs, dtype=np.float64), LOG_FLOOR))


def model_log_probs(logits):
    """Log-probabilities from logits, with probabilities floored at 1e-12."""
    return floored_log(np.exp(log_softmax_array(logits)))


def blend_scorers(uncond, cond, blend):
    """Per-step ``(1 - blend) * uncond + blend * cond``."""
    if not 0.0 <= blend <= 1.0:
        raise ConfigError(f"blend factor must lie in [0, 1], got {blend}")

    def scorer(t, prefixes):
        a = uncond(t, prefixes) if blend < 1.0 else 0.0
        b = cond(t, prefixes) if blend > 0.0 else 0.0
        return (1.0 - blend) * a + blend * b

    return scorer


def unconditional_scorer(log_probs):
    """Scorer for a context-free model from its precomputed (L, K) log-probabilities."""
    log_probs = np.asarray(log_probs, dtype=np.float64)

    def scorer(t, prefixes):
        return np.broadcast_to(log_probs[t], (prefixes.shape[0], log_probs.shape[1]))

    return scorer


def conditional_scorer(model, record):
    """Scorer that re-runs a conditioned model on each hypothesis' own labels."""
    if not model.cfg.conditioned:
        raise ConfigError("conditional decoding needs a conditioned model")
    L = record.grid_length

    def scorer(t, prefixes):
        labels = np.zeros((prefixes.shape[0], L), dtype=np.int64)
        labels[:, :t] = prefixes
        known = record.mask.copy()
        known[t:] = 0
        return model_log_probs(model.logits_at(record.features, labels, known, t))

    return scorer


def record_log_probs(model, record):
    """(grid, classes) log-probabilities of an unconditioned model, infer mode."""
    if model.cfg.conditioned:
        raise ConfigError("expected an unconditioned model")
    logits = model.forward(record.features[None], record.mask[None], mode="infer").data[0]
    return model_log_probs(logits)


def _pad_to_grid(labels, record):
    out = np.zeros(record.grid_length, dtype=np.int64)
    out[:len(labels)] = labels
    return out


def greedy_decode(model, record):
    """Per-position argmax of an unconditioned model (ties -> lowest class)."""
    labels = record_log_probs(model, record).argmax(axis=-1)
    return np.where(record.mask > 0, labels, 0).astype(np.int64)


def beam_search(cond_model, record, beam=8):
    n = record.decode_length
    best = beam_search_scorer(conditional_scorer(cond_model, record), n, cond_model.cfg.num_classes, beam)
    return _pad_to_grid(best.labels, record)


def ensemble_beam_search(uncond_model, cond_model, record, beam=8, blend=0.45):
    """Beam search on ``(1 - blend) * log p_uncond + blend * log p_cond`` per step.

    ``blend`` weights the conditioned model, so 0.45 leaves slightly more
    weight on the unconditioned one.
    """
    if not 0.0 <= blend <= 1.0:
        raise ConfigError(f"blend factor must lie in [0, 1], got {blend}")
    n = record.decode_length
    uncond = unconditional_scorer(record_log_probs(uncond_model, record))
    if blend == 0.0:
        cond = uncond  # never evaluated at blend 0
    else:
        cond = conditional_scorer(cond_model, record)
    best = beam_search_scorer(blend_scorers(uncond, cond, blend), n, uncond_model.cfg.num_classes, beam)
    return _pad_to_grid(best.labels, record)


def ensemble_pair_uniform(model_a, model_b, record):
    """Argmax of the mean log-probabilities of two unconditioned models."""
    mean = 0.5 * (record_log_probs(model_a, record) + record_log_probs(model_b, record))
    return np.where(record.mask > 0, mean.argmax(axis=-1), 0).astype(np.int64)


def teacher_forced_predictions(cond_model, records):
    """Argmax predictions with ground-truth labels fed as past context."""
    preds = []
    for r in records:
        logits = cond_model.forward(r.features[None], r.mask[None], mode="infer", labels=r.labels[None]).data[0]
        preds.append(logits.argmax(axis=-1))
    return preds


def teacher_forced_accuracy(cond_model, records):
    preds = teacher_forced_predictions(cond_model, records)
    return q8_accuracy(np.stack(preds), np.stack([r.labels for r in records]),
                       np.stack([r.mask for r in records]))


# ------------------------------------------------------------------ metrics

def q8_accuracy(pred, truth, mask):
    pred, truth, mask = np.asarray(pred), np.asarray(truth), np.asarray(mask)
    if pred.shape != truth.shape or truth.shape != mask.shape:
        raise DimensionError(f"shapes differ: pred {pred.shape}, truth {truth.shape}, mask {mask.shape}")
    valid = mask > 0
    if not valid.any():
        raise ContractError("Q8 over an all-zero mask is undefined")
    return float((pred[valid] == truth[valid]).mean())


def confusion(pred, truth, mask, num_classes=NUM_CLASSES):
    """Counts ``c[true, predicted]`` over valid positions."""
    pred, truth, mask = np.asarray(pred), np.asarray(truth), np.asarray(mask)
    if pred.shape != truth.shape or truth.shape != mask.shape:
        raise DimensionError("pred, truth and mask must share a shape")
    valid = mask > 0
    if not valid.any():
        raise ContractError("confusion over an all-zero mask is undefined")
    c = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(c, (truth[valid].astype(np.int64), pred[valid].astype(np.int64)), 1)
    return c


@dataclass
class EvalReport:
    q8: float
    confusion: np.ndarray
    residues: int

    @classmethod
    def from_predictions(cls, pred, truth, mask):
        c = confusion(pred, truth, mask)
        return cls(q8=float(np.trace(c) / c.sum()), confusion=c, residues=int(c.sum()))

    def to_dict(self):
        return {"q8": self.q8, "confusion": self.confusion.tolist(), "residues": self.residues}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        return cls(q8=d["q8"], confusion=np.asarray(d["confusion"], dtype=np.int64), residues=d["residues"])


def format_label_line(record_id, labels, record):
    """``id<TAB>digits`` over the valid prefix of the protein."""
    n = record.decode_length
    return f"{record_id}\t{''.join(str(int(v)) for v in labels[:n])}"
