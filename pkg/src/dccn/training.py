"""Adam with the inverse-square-root warmup schedule, and the training loop."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import TrainConfig
from .data import collate, make_batches
from .errors import NumericError, UsageError
from .evaluation import ambiguous_accuracy, translate_examples
from .rng import stream

log = logging.getLogger(__name__)


def lr_schedule(step, d_model, warmup=4000, factor=1.0):
    """factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise UsageError(f"learning-rate schedule is defined for step >= 1, got {step}")
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    """Bias-corrected Adam over a dict of named parameters."""

    def __init__(self, named_params, beta1=0.9, beta2=0.998, eps=1e-9):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step_count = 0

    def step(self, lr):
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for parameter {name}", name=name)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainResult:
    records: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    best_valid_loss: float = float("inf")
    best_step: int = 0
    diverged: bool = False
    steps: int = 0
    seconds: float = 0.0


def batch_loss(model, batch, rng=None):
    return model.loss(batch.src, batch.tgt_in, batch.tgt_out, batch.feats, rng)


def mean_loss(model, examples, src_vocab, tgt_vocab, feature_fn, budget):
    total = count = 0.0
    fn = feature_fn if model.multimodal else None
    with T.no_grad():
        for chunk in make_batches(examples, budget):
            loss, n = batch_loss(model, collate(chunk, src_vocab, tgt_vocab, fn))
            total += loss.item()
            count += n
    return total / count


def train(model, train_examples, src_vocab, tgt_vocab, cfg: TrainConfig, feature_fn=None,
          valid_examples=None, out_dir=None, eval_accuracy=True, checkpoint_meta=None):
    """Train ``model`` in place; the best-validation parameters are restored at the end.

    With ``out_dir`` set, writes ``metrics.jsonl`` (one record per step),
    ``best.ckpt`` (the final parameters when there is no validation set)
    and, every ``checkpoint_every`` steps, ``last.ckpt``.  ``checkpoint_meta``
    is stored in every checkpoint's metadata.
    """
    extra = dict(checkpoint_meta or {})
    cfg.validate()
    optim = Adam(model.named_parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
    dropout_rng = stream(cfg.seed, "dropout") if model.cfg.dropout > 0 else None
    fn = feature_fn if model.multimodal else None
    result = TrainResult()
    best_state = {k: v.copy() for k, v in model.state_dict().items()}
    metrics = open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8") if out_dir else None
    start = time.perf_counter()
    step = 0

    def validate(record):
        if not valid_examples:
            return
        record["valid_loss"] = mean_loss(model, valid_examples, src_vocab, tgt_vocab, feature_fn, cfg.batch_tokens)
        if eval_accuracy:
            hyps = translate_examples(model, valid_examples, src_vocab, tgt_vocab, feature_fn)
            record["ambiguous_accuracy"] = ambiguous_accuracy(hyps, valid_examples)
        if record["valid_loss"] < result.best_valid_loss:
            result.best_valid_loss = record["valid_loss"]
            result.best_step = record["step"]
            best_state.clear()
            best_state.update({k: v.copy() for k, v in model.state_dict().items()})
            if out_dir:
                checkpoint.save_model(os.path.join(out_dir, "best.ckpt"), model, step=record["step"],
                                      valid_loss=record["valid_loss"], **extra)

    try:
        for epoch in range(cfg.epochs):
            batches = make_batches(train_examples, cfg.batch_tokens, seed=cfg.seed, epoch=epoch)
            for b, chunk in enumerate(batches):
                step += 1
                lr = lr_schedule(step, model.cfg.d_model, cfg.warmup, cfg.lr_factor)
                batch = collate(chunk, src_vocab, tgt_vocab, fn)
                if step == 1 and cfg.calibrate_routing:
                    factors = model.calibrate(batch.src, batch.tgt_in, batch.feats)
                    if factors:
                        log.info("routing calibration factors %s", factors)
                loss_sum, ntok = batch_loss(model, batch, dropout_rng)
                loss = T.scale(loss_sum, 1.0 / ntok)
                if not np.isfinite(loss.item()):
                    raise NumericError(f"non-finite training loss at step {step}")
                loss.backward()
                optim.step(lr)
                optim.zero_grad()
                if cfg.calibrate_routing:
                    model.recalibrate()
                result.losses.append(loss.item())
                record = {"step": step, "epoch": epoch, "lr": lr, "train_loss": loss.item(),
                          "valid_loss": None, "ambiguous_accuracy": None}
                last_of_epoch = b == len(batches) - 1
                if (cfg.valid_every and step % cfg.valid_every == 0) or last_of_epoch:
                    validate(record)
                    log.info("step %d epoch %d loss %.4f valid %s acc %s", step, epoch, record["train_loss"],
                             record["valid_loss"], record["ambiguous_accuracy"])
                if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    checkpoint.save_model(os.path.join(out_dir, "last.ckpt"), model, step=step, **extra)
                result.records.append(record)
                if metrics:
                    metrics.write(json.dumps(record) + "\n")
                if cfg.max_steps and step >= cfg.max_steps:
                    raise StopIteration
    except StopIteration:
        pass
    except NumericError as exc:
        log.warning("training diverged: %s; restoring best parameters", exc)
        result.diverged = True
    finally:
        if metrics:
            metrics.close()
    if valid_examples and result.best_step:
        model.load_state_dict(best_state)
    elif result.diverged:
        model.load_state_dict(best_state)
    if out_dir and not (valid_examples and result.best_step):
        checkpoint.save_model(os.path.join(out_dir, "best.ckpt"), model, step=step, **extra)
    result.steps = step
    result.seconds = time.perf_counter() - start
    return result
