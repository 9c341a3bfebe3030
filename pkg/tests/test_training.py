import json
import math

import numpy as np
import pytest

from dccn import checkpoint
from dccn import tensor as T
from dccn.config import ModelConfig, TrainConfig
from dccn.data import SyntheticTaskSpec, collate, generate_synthetic
from dccn.errors import NumericError, UsageError
from dccn.multimodal import DCCNModel
from dccn.training import Adam, lr_schedule, mean_loss, train


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic(SyntheticTaskSpec(n_train=24, n_valid=6, n_test=0, seed=3, min_len=3, max_len=5))


def model_for(ds, variant="text-only", dropout=0.1, seed=1):
    cfg = ModelConfig(src_vocab=len(ds.src_vocab), tgt_vocab=len(ds.tgt_vocab), d_model=8, n_heads=2,
                      n_enc_layers=1, n_dec_layers=1, d_ff=16, dropout=dropout, variant=variant)
    return DCCNModel(cfg, seed=seed)


# schedule

def test_schedule_peak_at_warmup():
    w = 50
    assert step_branches_equal(w)
    assert lr_schedule(4 * w, 256, w) == pytest.approx(lr_schedule(w, 256, w) / 2, rel=1e-12)


def step_branches_equal(w):
    return math.isclose(w ** -0.5, w * w ** -1.5, rel_tol=1e-12)


def test_schedule_direct_formula():
    expected = 256 ** -0.5 * min(100 ** -0.5, 100 * 4000 ** -1.5)
    assert lr_schedule(100, 256, 4000) == expected
    assert expected == pytest.approx(2.4705294220065464e-05, rel=1e-12)


def test_schedule_shape():
    values = [lr_schedule(s, 64, 20) for s in range(1, 60)]
    assert all(a < b for a, b in zip(values[:19], values[1:20]))
    assert all(a > b for a, b in zip(values[19:], values[20:]))


def test_schedule_step_zero():
    with pytest.raises(UsageError):
        lr_schedule(0, 256)


# Adam

def test_adam_scalar_trace():
    w = T.parameter(np.array([1.0]), "w")
    opt = Adam({"w": w})
    w.grad = np.array([1.0])
    opt.step(0.1)
    w1 = 1.0 - 0.1 / (1.0 + 1e-9)
    assert w.data[0] == pytest.approx(w1, abs=1e-15)
    # second step: m = 0.19, v = 0.003996; both bias-corrected to 1
    w.grad = np.array([1.0])
    opt.step(0.1)
    m_hat = (0.9 * 0.1 + 0.1) / (1 - 0.9 ** 2)
    v_hat = (0.998 * 0.002 + 0.002) / (1 - 0.998 ** 2)
    assert w.data[0] == pytest.approx(w1 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-9), abs=1e-14)


def test_adam_zero_gradient_leaves_parameters():
    w = T.parameter(np.array([1.5, -2.0]), "w")
    opt = Adam({"w": w})
    w.grad = np.zeros(2)
    opt.step(0.1)
    assert np.array_equal(w.data, [1.5, -2.0])


def test_adam_nonfinite_gradient_names_parameter():
    w = T.parameter(np.array([1.0]), "w")
    opt = Adam({"encoder.w": w})
    w.grad = np.array([np.inf])
    with pytest.raises(NumericError, match="encoder.w"):
        opt.step(0.1)


# loss

def test_initial_loss_close_to_uniform(ds):
    model = model_for(ds, dropout=0.0)
    model.W_out.data[:] = 0.0
    b = collate(ds.splits["train"][:4], ds.src_vocab, ds.tgt_vocab)
    loss, n = model.loss(b.src, b.tgt_in, b.tgt_out, None)
    assert loss.item() / n == pytest.approx(math.log(len(ds.tgt_vocab)), rel=1e-12)


def test_loss_gradient_is_sum_of_per_sentence_gradients(ds):
    model = model_for(ds, "full", dropout=0.0)
    exs = ds.splits["train"][:3]
    params = dict(model.named_parameters())

    def grads(chunk):
        model.zero_grad()
        b = collate(chunk, ds.src_vocab, ds.tgt_vocab, ds.features)
        loss, _ = model.loss(b.src, b.tgt_in, b.tgt_out, b.feats)
        loss.backward()
        return {k: p.grad.copy() for k, p in params.items()}

    total = grads(exs)
    parts = [grads([e]) for e in exs]
    for k in params:
        np.testing.assert_allclose(total[k], sum(p[k] for p in parts), atol=1e-9, rtol=0)


def test_one_step_reduces_batch_loss(ds):
    model = model_for(ds, dropout=0.0)
    b = collate(ds.splits["train"][:6], ds.src_vocab, ds.tgt_vocab)
    before, n = model.loss(b.src, b.tgt_in, b.tgt_out, None)
    T.scale(before, 1 / n).backward()
    opt = Adam(model.named_parameters())
    opt.step(1e-3)
    with T.no_grad():
        after, _ = model.loss(b.src, b.tgt_in, b.tgt_out, None)
    assert after.item() < before.item()


# loop

def tc(**kw):
    base = dict(epochs=2, batch_tokens=60, warmup=10, seed=5)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("variant", ["text-only", "full"])
def test_training_is_deterministic(ds, variant):
    runs = []
    for _ in range(2):
        model = model_for(ds, variant)
        r = train(model, ds.splits["train"], ds.src_vocab, ds.tgt_vocab, tc(epochs=1), ds.features,
                  eval_accuracy=False)
        runs.append((r.losses, model.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert np.array_equal(runs[0][1][k], runs[1][1][k])


def test_training_calibrates_once_and_logs(ds, tmp_path):
    model = model_for(ds, "full")
    r = train(model, ds.splits["train"], ds.src_vocab, ds.tgt_vocab, tc(), ds.features, ds.splits["valid"],
              out_dir=str(tmp_path), eval_accuracy=True, checkpoint_meta={"tag": "x"})
    assert model.last.extractors["global"].v_scale[0] != 1.0
    lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [rec["step"] for rec in lines] == list(range(1, r.steps + 1))
    assert set(lines[0]) == {"step", "epoch", "lr", "train_loss", "valid_loss", "ambiguous_accuracy"}
    validated = [rec for rec in lines if rec["valid_loss"] is not None]
    assert len(validated) == 2 and all(0.0 <= rec["ambiguous_accuracy"] <= 1.0 for rec in validated)
    _, meta = checkpoint.load(tmp_path / "best.ckpt")
    assert meta["tag"] == "x" and meta["step"] == r.best_step


def test_calibration_can_be_disabled(ds):
    model = model_for(ds, "full")
    train(model, ds.splits["train"], ds.src_vocab, ds.tgt_vocab, tc(epochs=1, calibrate_routing=False),
          ds.features, eval_accuracy=False)
    assert model.last.extractors["global"].v_scale[0] == 1.0


def test_max_steps_and_best_restore(ds):
    model = model_for(ds)
    r = train(model, ds.splits["train"], ds.src_vocab, ds.tgt_vocab, tc(epochs=5, max_steps=3), None,
              ds.splits["valid"], eval_accuracy=False)
    assert r.steps == 3


def test_checkpoint_round_trip_gives_identical_valid_loss(ds, tmp_path):
    model = model_for(ds, "full")
    train(model, ds.splits["train"], ds.src_vocab, ds.tgt_vocab, tc(epochs=1), ds.features, eval_accuracy=False,
          out_dir=str(tmp_path))
    before = mean_loss(model, ds.splits["valid"], ds.src_vocab, ds.tgt_vocab, ds.features, 60)
    state, _ = checkpoint.load(tmp_path / "best.ckpt")
    fresh = model_for(ds, "full", seed=99)
    fresh.load_state_dict(state)
    assert mean_loss(fresh, ds.splits["valid"], ds.src_vocab, ds.tgt_vocab, ds.features, 60) == before


def test_divergence_restores_parameters(ds):
    model = model_for(ds, dropout=0.0)
    start = {k: v.copy() for k, v in model.state_dict().items()}
    model.W_out.data[0, 0] = np.nan
    start["W_out"] = model.W_out.data.copy()
    r = train(model, ds.splits["train"], ds.src_vocab, ds.tgt_vocab, tc(epochs=1), None, eval_accuracy=False)
    assert r.diverged
    for k, v in start.items():
        np.testing.assert_array_equal(model.state_dict()[k], v)
