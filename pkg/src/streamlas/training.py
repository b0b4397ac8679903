"""Losses, training schedules, chunk-length labels and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as tn
from .decoding import beam_search, greedy_decode
from .speller import EOS, LASModel, forward_train

log = logging.getLogger(__name__)

LABEL_SOURCES = ("greedy", "beam", "external-file")


@dataclass
class TrainRecipe:
    epochs: int = 30
    teacher_force_epochs: int = 11
    ss_ramp: tuple = (12, 17, 0.3)
    lr: float = 0.0002
    lr_halve_from_epoch: int = 24
    label_smoothing: float = 0.1
    weight_decay: float = 1e-5
    mtl_lambda: float = 0.0
    chunk_label_source: str = "greedy"
    chunk_label_threshold: float = 0.01
    batch_size: int = 32
    grad_clip: float = 5.0
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        self.ss_ramp = tuple(self.ss_ramp)
        if len(self.ss_ramp) != 3:
            raise ValueError("ss_ramp must be (start_epoch, end_epoch, final_rate)")
        if not 0.0 <= self.ss_ramp[2] <= 1.0:
            raise ValueError("scheduled sampling final rate must be in [0, 1]")
        if self.ss_ramp[1] < self.ss_ramp[0]:
            raise ValueError("scheduled sampling ramp ends before it starts")
        if not 0.0 <= self.mtl_lambda <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.chunk_label_source not in LABEL_SOURCES:
            raise ValueError(f"chunk_label_source must be one of {LABEL_SOURCES}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")


# ---------------------------------------------------------------------------
# Losses and schedules
# ---------------------------------------------------------------------------
def ce_loss_label_smoothed(logits, targets, smoothing: float = 0.0, mask=None) -> tn.Tensor:
    """Mean cross-entropy against ``(1 - smoothing) * onehot + smoothing / V``.

    ``logits`` (..., V) and integer ``targets`` (...); ``mask`` selects the
    positions that count.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must be in [0, 1)")
    logits = tn.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise tn.ShapeError("ce_loss_label_smoothed", logits.shape, targets.shape)
    q = np.full(logits.shape, smoothing / V, dtype=logits.data.dtype)
    np.put_along_axis(q, targets[..., None], 1.0 - smoothing + smoothing / V, axis=-1)
    mask = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=float)
    logp = tn.log_softmax(logits, axis=-1)
    per_tok = -(logp * q).sum(axis=-1)
    return (per_tok * mask).sum() * (1.0 / max(mask.sum(), 1.0))


def chunk_length_mse(predicted, true, mask=None) -> tn.Tensor:
    predicted = tn.as_tensor(predicted)
    true = np.asarray(true, dtype=predicted.data.dtype)
    if predicted.shape != true.shape:
        raise ValueError(f"length mismatch: predicted {predicted.shape} vs true {true.shape}")
    mask = np.ones(true.shape) if mask is None else np.asarray(mask, dtype=float)
    diff = predicted - true
    return (diff * diff * mask).sum() * (1.0 / max(mask.sum(), 1.0))


def multitask_loss(ce, predicted_lengths, true_lengths, lam: float, mask=None):
    """``(1 - lam) * CE + lam * MSE(predicted, true)``; returns (total, L_W)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    if predicted_lengths is None:
        lw = tn.Tensor(0.0)
    else:
        if len(predicted_lengths) != len(true_lengths):
            raise ValueError("predicted and true length lists differ in length")
        lw = chunk_length_mse(predicted_lengths, true_lengths, mask)
    return tn.as_tensor(ce) * (1.0 - lam) + lw * lam, lw


def scheduled_sampling_rate(epoch: int, recipe: TrainRecipe) -> float:
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    start, end, final = recipe.ss_ramp
    if epoch <= recipe.teacher_force_epochs or epoch < start:
        return 0.0
    if epoch >= end:
        return float(final)
    return float(final) * (epoch - start) / (end - start)


def learning_rate(epoch: int, recipe: TrainRecipe) -> float:
    """Initial rate, halved every epoch from ``lr_halve_from_epoch`` on."""
    if epoch < recipe.lr_halve_from_epoch:
        return recipe.lr
    return recipe.lr * 0.5 ** (epoch - recipe.lr_halve_from_epoch + 1)


# ---------------------------------------------------------------------------
# Chunk-length labels
# ---------------------------------------------------------------------------
def labels_from_attention(rows, threshold: float = 0.01) -> list:
    """Count weights above ``threshold`` in each attention row (at least 1)."""
    return [max(1, int((np.asarray(r) > threshold).sum())) for r in rows]


def extract_chunk_labels(model: LASModel, frames: np.ndarray, n_targets: int | None = None,
                         mode: str = "greedy", threshold: float = 0.01, beam: int = 5):
    """Decode with a global-attention model and read chunk lengths off its attention.

    Returns None when the decode does not produce ``n_targets`` tokens (the
    labels would not line up with the reference).
    """
    if model.cfg.attention.kind != "gsa":
        raise ValueError("chunk labels come from a global soft attention model")
    if mode == "greedy":
        hyp = greedy_decode(model, frames).tokens
    elif mode == "beam":
        hyp = beam_search(model, frames, beam=beam).tokens
    else:
        raise ValueError(f"unknown decode mode {mode!r}")
    if not hyp or (n_targets is not None and len(hyp) != n_targets):
        return None
    with tn.no_grad():
        out = forward_train(model, frames[None], [len(frames)], [hyp], keep_attention=True)
    rows = [b[0] for b in out.betas[:len(hyp)]]
    return labels_from_attention(rows, threshold)


def extract_dataset_labels(model, utterances, mode="greedy", threshold=0.01):
    """Labels for every utterance (None where decoding failed) and the failure count."""
    labels, skipped = {}, 0
    for utt in utterances:
        lab = extract_chunk_labels(model, utt.frames, len(utt.targets), mode, threshold)
        if lab is None:
            skipped += 1
        labels[utt.id] = lab
    if skipped:
        log.warning("chunk labels: %d of %d utterances skipped", skipped, len(utterances))
    return labels, skipped


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------
class Optimizer:
    """SGD (default) or Adam with global-norm clipping and L2 weight decay."""

    def __init__(self, params: list, kind: str = "sgd", clip: float = 5.0, weight_decay: float = 0.0):
        self.params = params
        self.kind = kind
        self.clip = clip
        self.weight_decay = weight_decay
        self.t = 0
        if kind == "adam":
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> float:
        grads = [p.grad + self.weight_decay * p.data for p in self.params]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if self.clip and norm > self.clip:
            grads = [g * (self.clip / norm) for g in grads]
        self.t += 1
        if self.kind == "sgd":
            for p, g in zip(self.params, grads):
                p.data = p.data - lr * g
        else:
            b1, b2, eps = 0.9, 0.999, 1e-8
            for k, (p, g) in enumerate(zip(self.params, grads)):
                self.m[k] = b1 * self.m[k] + (1 - b1) * g
                self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
                mhat = self.m[k] / (1 - b1 ** self.t)
                vhat = self.v[k] / (1 - b2 ** self.t)
                p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
        for p in self.params:
            p.zero_grad()
        return norm


def make_batches(utterances: list, batch_size: int, rng) -> list:
    """Shuffled batches of similar-length utterances."""
    idx = rng.permutation(len(utterances))
    pool = batch_size * 16
    batches = []
    for lo in range(0, len(idx), pool):
        chunk = sorted(idx[lo:lo + pool], key=lambda i: len(utterances[i].frames))
        batches.extend(chunk[k:k + batch_size] for k in range(0, len(chunk), batch_size))
    order = rng.permutation(len(batches))
    return [[utterances[i] for i in batches[o]] for o in order]


def collate(batch: list):
    lengths = np.array([len(u.frames) for u in batch])
    d = batch[0].frames.shape[1]
    feats = np.zeros((len(batch), lengths.max(), d), dtype=tn.get_default_dtype())
    for b, u in enumerate(batch):
        feats[b, :len(u.frames)] = u.frames
    return feats, lengths, [list(u.targets) for u in batch]


def batch_loss(model: LASModel, batch: list, recipe: TrainRecipe, ss_rate: float, rng,
               chunk_labels: dict | None = None):
    feats, lengths, targets = collate(batch)
    out = forward_train(model, feats, lengths, targets, ss_rate, rng)
    ce = ce_loss_label_smoothed(out.logits, out.targets, recipe.label_smoothing, out.mask)
    lam = recipe.mtl_lambda if out.expected_len is not None else 0.0
    if out.expected_len is None:
        return ce, ce, tn.Tensor(0.0)
    true = np.zeros(out.targets.shape)
    lmask = np.zeros(out.targets.shape)
    for b, u in enumerate(batch):
        lab = (chunk_labels or {}).get(u.id)
        if lab is not None:
            true[b, :len(lab)] = lab
            lmask[b, :len(lab)] = 1.0
    total, lw = multitask_loss(ce, out.expected_len, true, lam, lmask)
    return total, ce, lw


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    ce: float
    lw: float
    cer: float | None = None


METRIC_FIELDS = ("epoch", "split", "loss", "ce", "lw", "cer")


def metrics_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([r.epoch, r.split, repr(r.loss), repr(r.ce), repr(r.lw),
                    "" if r.cer is None else repr(r.cer)])
    return buf.getvalue()


def evaluate_cer(model: LASModel, utterances: list, beam: int = 1, temperature: float = 1.0) -> float:
    """Corpus CER: total edit distance over total reference length."""
    from .harness import edit_distance

    errs = total = 0
    for u in utterances:
        if beam == 1:
            hyp = greedy_decode(model, u.frames).tokens
        else:
            hyp = beam_search(model, u.frames, beam=beam, temperature=temperature).tokens
        errs += edit_distance(list(u.targets), hyp)
        total += len(u.targets)
    return errs / max(total, 1)


def dev_loss(model, utterances, recipe, chunk_labels=None, batch_size=64):
    rng = np.random.default_rng(0)
    tot = ce_s = lw_s = 0.0
    n = 0
    with tn.no_grad():
        for lo in range(0, len(utterances), batch_size):
            batch = utterances[lo:lo + batch_size]
            total, ce, lw = batch_loss(model, batch, recipe, 0.0, rng, chunk_labels)
            tot += total.item() * len(batch)
            ce_s += ce.item() * len(batch)
            lw_s += lw.item() * len(batch)
            n += len(batch)
    return tot / n, ce_s / n, lw_s / n


def train(model: LASModel, train_set: list, recipe: TrainRecipe, dev_set: list | None = None,
          init_from=None, chunk_labels: dict | None = None, ckpt_dir=None, metrics_path=None,
          dev_cer: bool = True, on_epoch=None) -> list:
    """Minibatch training; returns the per-epoch metric rows.

    ``init_from`` is a checkpoint stem, a parameter dict or another model;
    parameters it lacks keep their fresh initialisation.
    """
    if init_from is not None:
        if isinstance(init_from, LASModel):
            arrays = init_from.state_arrays()
        elif isinstance(init_from, dict):
            arrays = init_from
        else:
            arrays = checkpoint.load(init_from)
        fresh = model.load_arrays(arrays)
        if fresh:
            log.info("initialised from checkpoint; fresh parameters: %s", ", ".join(fresh))
    rng = np.random.default_rng(recipe.seed)
    opt = Optimizer(model.parameters(), recipe.optimizer, recipe.grad_clip, recipe.weight_decay)
    rows = []
    for epoch in range(1, recipe.epochs + 1):
        ss = scheduled_sampling_rate(epoch, recipe)
        lr = learning_rate(epoch, recipe)
        sums = np.zeros(3)
        n = 0
        for batch in make_batches(train_set, recipe.batch_size, rng):
            total, ce, lw = batch_loss(model, batch, recipe, ss, rng, chunk_labels)
            total.backward()
            opt.step(lr)
            sums += [total.item() * len(batch), ce.item() * len(batch), lw.item() * len(batch)]
            n += len(batch)
        sums /= max(n, 1)
        rows.append(EpochMetrics(epoch, "train", *map(float, sums)))
        if dev_set:
            dl = dev_loss(model, dev_set, recipe, chunk_labels)
            cer = evaluate_cer(model, dev_set) if dev_cer else None
            rows.append(EpochMetrics(epoch, "dev", *dl, cer=cer))
            log.info("epoch %d: train loss %.4f dev loss %.4f dev cer %s", epoch, sums[0], dl[0], cer)
        if ckpt_dir is not None:
            checkpoint.save(Path(ckpt_dir) / f"epoch{epoch:03d}", model.state_arrays())
        if metrics_path is not None:
            checkpoint._atomic_write(Path(metrics_path), metrics_csv(rows).encode())
        if on_epoch is not None:
            on_epoch(epoch, rows)
    if ckpt_dir is not None:
        checkpoint.save(Path(ckpt_dir) / "final", model.state_arrays())
    return rows
