"""Glue between a ``RunConfig`` and the data, model and trainer."""

from __future__ import annotations

import dataclasses
import os

from . import checkpoint
from .config import DataConfig, ModelConfig, RunConfig, TrainConfig
from .data import SyntheticTaskSpec, Vocab, generate_synthetic, load_dataset, shuffle_features
from .errors import ConfigError
from .evaluation import ambiguous_accuracy, translate_examples
from .multimodal import DCCNModel
from .training import train


def synthetic_spec(raw) -> SyntheticTaskSpec:
    known = {f.name for f in dataclasses.fields(SyntheticTaskSpec)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config key data.synthetic.{unknown[0]}")
    return SyntheticTaskSpec(**raw).validate()


def prepare_data(cfg: RunConfig):
    """The dataset named by ``cfg.data``, features shuffled if requested.

    Shuffling applies to every split, so the model never sees a sentence
    with its own image.
    """
    data = cfg.data
    if data.synthetic is not None and data.dataset_dir is not None:
        raise ConfigError("set only one of data.synthetic and data.dataset_dir")
    if data.synthetic is not None:
        ds = generate_synthetic(synthetic_spec(data.synthetic))
    elif data.dataset_dir is not None:
        ds = load_dataset(data.dataset_dir)
    else:
        raise ConfigError("no data configured: set data.synthetic or data.dataset_dir")
    if data.shuffle_features:
        ds.splits = {name: shuffle_features(exs, cfg.train.seed + k)
                     for k, (name, exs) in enumerate(sorted(ds.splits.items()))}
    return ds


def resolve(cfg: RunConfig, ds) -> RunConfig:
    """Fill the vocabulary sizes in from the data."""
    model = dataclasses.replace(cfg.model, src_vocab=len(ds.src_vocab), tgt_vocab=len(ds.tgt_vocab))
    return dataclasses.replace(cfg, model=model.validate())


def build_model(cfg: RunConfig):
    return DCCNModel(cfg.model, seed=cfg.train.seed)


def vocab_meta(ds):
    return {"src_itos": ds.src_vocab.itos[4:], "tgt_itos": ds.tgt_vocab.itos[4:]}


def load_for_inference(path):
    """Model plus vocabularies from a checkpoint written by ``run``."""
    model, meta = checkpoint.load_model(path)
    if "src_itos" not in meta or "tgt_itos" not in meta:
        raise ConfigError(f"{path} carries no vocabularies")
    return model, Vocab(meta["src_itos"]), Vocab(meta["tgt_itos"]), meta


def run(cfg: RunConfig, out_dir=None, eval_accuracy=True):
    """Train per ``cfg``; returns ``(model, result, dataset, resolved_cfg)``.

    With ``out_dir``: ``config.json`` (resolved snapshot) plus the trainer's
    ``metrics.jsonl`` and ``best.ckpt`` (vocabularies in its metadata).
    """
    ds = prepare_data(cfg)
    cfg = resolve(cfg, ds)
    model = build_model(cfg)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
            fh.write(cfg.dumps())
    result = train(model, ds.splits["train"], ds.src_vocab, ds.tgt_vocab, cfg.train, ds.features,
                   ds.splits.get("valid"), out_dir=out_dir, eval_accuracy=eval_accuracy,
                   checkpoint_meta=vocab_meta(ds))
    return model, result, ds, cfg


def default_model_config(**overrides) -> ModelConfig:
    return dataclasses.replace(ModelConfig(), **overrides)


# A model small enough to train on the default synthetic task in a few
# minutes on one core; the routing hyperparameters keep their defaults.
SYNTHETIC_MODEL = {"d_model": 32, "n_heads": 4, "n_enc_layers": 1, "n_dec_layers": 1, "d_ff": 64, "dropout": 0.1}
SYNTHETIC_TRAIN = {"epochs": 5, "batch_tokens": 512, "warmup": 300}


def synthetic_run_config(variant="full", shuffle_features=False, seed=1, spec=None) -> RunConfig:
    return RunConfig(
        model=dataclasses.replace(ModelConfig(), variant=variant, **SYNTHETIC_MODEL).validate(),
        train=dataclasses.replace(TrainConfig(), seed=seed, **SYNTHETIC_TRAIN),
        data=DataConfig(synthetic=dict(spec or {}), shuffle_features=shuffle_features),
    )


def synthetic_accuracy(cfg: RunConfig, out_dir=None):
    """Train per ``cfg`` and return ``(ambiguous-token accuracy on the test split, result)``."""
    model, result, ds, _ = run(cfg, out_dir=out_dir, eval_accuracy=False)
    examples = ds.splits["test"]
    hyps = translate_examples(model, examples, ds.src_vocab, ds.tgt_vocab, ds.features)
    return ambiguous_accuracy(hyps, examples), result
