import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xrecosa import tensor as T
from xrecosa.corpus import Sample, make_batches
from xrecosa.errors import ContractError, CorruptionError, NumericError, VersionError
from xrecosa.model import ModelConfig, ParamSet, XReCoSa
from xrecosa.tensor import Tensor
from xrecosa.trainer import (
    AdamW, AdamWState, TrainConfig, Trainer, adamw_step, clip_grad_norm, epoch_order, evaluate_nll, load_checkpoint,
    save_checkpoint, train_epoch, train_step,
)


def adam_scalar_oracle(p, gs, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Textbook AdamW on python floats."""
    m = v = 0.0
    for t, g in enumerate(gs, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1 ** t), v / (1 - b2 ** t)
        p = p - lr * wd * p - lr * mh / (math.sqrt(vh) + eps)
    return p


def small_model(seed=0, **kw):
    cfg = ModelConfig(**{**dict(d=16, heads=2, enc_layers=1, dec_layers_intention=1, dec_layers_generation=1,
                                vocab_size=20, max_turns=4, max_sentence_len=8), **kw})
    return XReCoSa(cfg, seed=seed)


def small_batches(n=12, bs=4, seed=0):
    rng = np.random.default_rng(seed)
    samples = [Sample([list(rng.integers(4, 20, size=rng.integers(1, 5))) for _ in range(rng.integers(1, 3))],
                      list(rng.integers(4, 20, size=rng.integers(1, 5)))) for _ in range(n)]
    return make_batches(samples, batch_size=bs, max_turns=4, max_sentence_len=8)


# -- AdamW ----------------------------------------------------------------------


def test_decay_only_case_exact():
    p0 = np.array([1.5, -2.0, 0.25])
    params = {"w": Tensor(p0.copy())}
    st_ = AdamWState(lr=1e-3, weight_decay=0.01)
    adamw_step(st_, params, {"w": np.zeros(3)})
    assert np.array_equal(params["w"].data, p0 * (1 - 1e-3 * 0.01))
    assert st_.t == 1


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=8), st.floats(-3, 3), st.sampled_from([0.0, 0.01, 0.1]))
def test_adamw_matches_scalar_oracle(gs, p0, wd):
    params = {"w": Tensor(np.array([p0]))}
    st_ = AdamWState(lr=1e-3, weight_decay=wd)
    for g in gs:
        adamw_step(st_, params, {"w": np.array([g])})
    assert abs(params["w"].data[0] - adam_scalar_oracle(p0, gs, wd=wd)) < 1e-12


def test_first_step_unit_gradient():
    params = {"w": Tensor(np.array([0.0]))}
    adamw_step(AdamWState(lr=1e-3, weight_decay=0.0), params, {"w": np.array([1.0])})
    assert params["w"].data[0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-15)


def test_identical_histories_identical_updates():
    params = {"a": Tensor(np.array([0.3, 0.7])), "b": Tensor(np.array([0.3, 0.7]))}
    st_ = AdamWState()
    rng = np.random.default_rng(0)
    for _ in range(5):
        g = rng.normal(size=2)
        adamw_step(st_, params, {"a": g, "b": g.copy()})
    assert np.array_equal(params["a"].data, params["b"].data)


def test_nan_gradient_names_parameter_and_leaves_params():
    params = {"enc.gru.W": Tensor(np.ones(2)), "out.b": Tensor(np.ones(2))}
    st_ = AdamWState()
    with pytest.raises(NumericError, match="out.b"):
        adamw_step(st_, params, {"enc.gru.W": np.ones(2), "out.b": np.array([1.0, np.nan])})
    assert st_.t == 0 and np.all(params["enc.gru.W"].data == 1)


def test_adamw_wrapper_warmup():
    ps = ParamSet({"w": np.zeros(1)})
    opt = AdamW(ps, lr=1e-2, warmup_steps=4)
    assert opt.current_lr() == pytest.approx(2.5e-3)
    ps["w"].grad = np.ones(1)
    opt.step()
    assert opt.current_lr() == pytest.approx(5e-3)


# -- clipping ---------------------------------------------------------------------


def test_clip_zero_grads():
    assert clip_grad_norm({"a": np.zeros(3)}, 1.0) == 1.0


def test_clip_three_four():
    g = {"a": np.array([3.0, 4.0])}
    assert clip_grad_norm(g, 1.0) == pytest.approx(0.2)
    np.testing.assert_allclose(g["a"], [0.6, 0.8], atol=1e-15)


def test_clip_non_positive_norm():
    with pytest.raises(ContractError):
        clip_grad_norm({"a": np.ones(2)}, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.floats(1e-3, 10), st.integers(0, 2**31 - 1))
def test_clip_bound_and_direction(n, max_norm, seed):
    rng = np.random.default_rng(seed)
    grads = {f"p{i}": rng.normal(size=rng.integers(1, 6)) * rng.uniform(0.01, 50) for i in range(n)}
    before = np.concatenate([g.copy() for g in grads.values()])
    scale = clip_grad_norm(grads, max_norm)
    after = np.concatenate(list(grads.values()))
    assert np.linalg.norm(after) <= max_norm + 1e-9
    cos = after @ before / (np.linalg.norm(after) * np.linalg.norm(before))
    assert abs(cos - 1.0) <= 1e-12
    np.testing.assert_allclose(after, before * scale, rtol=1e-15)


def test_clip_tensor_grads_in_place():
    t = Tensor(np.ones(2), requires_grad=True)
    t.grad = np.array([6.0, 8.0])
    clip_grad_norm([t], 5.0)
    np.testing.assert_allclose(t.grad, [3.0, 4.0])


# -- training loop ----------------------------------------------------------------


def test_overfit_single_batch():
    model = small_model(seed=1, d=32, heads=4)
    (batch,) = small_batches(n=4, bs=4, seed=2)
    opt = AdamW(model.params, lr=1e-3)
    cfg = TrainConfig(seed=0)
    means = [train_epoch(model, [batch] * 20, opt, cfg).mean_loss for _ in range(10)]
    assert all(b < a for a, b in zip(means, means[1:])), means
    assert means[-1] < 0.5


def test_zero_lr_keeps_params_and_loss():
    model = small_model()
    before = {n: model.params[n].data.copy() for n in model.params}
    batches = small_batches()
    opt = AdamW(model.params, lr=0.0)
    cfg = TrainConfig(seed=0)
    l1 = train_epoch(model, batches, opt, cfg).mean_loss
    l2 = train_epoch(model, batches, opt, cfg).mean_loss
    assert l1 == l2
    assert all(np.array_equal(before[n], model.params[n].data) for n in model.params)


def test_identical_seeds_identical_curves():
    def run():
        model = small_model(seed=3, dropout=0.1)
        tr = Trainer(model, TrainConfig(epochs=2, seed=7), log=lambda s: None)
        tr.fit(small_batches())
        return [h["train_nll"] for h in tr.history]

    a, b = run(), run()
    assert a == b and len(a) == 2


def test_train_step_nan_loss_aborts():
    model = small_model()
    model.params["out.b"].data[:] = np.nan
    with pytest.raises(NumericError):
        train_step(model, small_batches()[0], AdamW(model.params), TrainConfig())
    with pytest.raises(NumericError, match="batch 0"):
        train_epoch(model, small_batches(), AdamW(model.params), TrainConfig())


def test_evaluate_nll_token_weighted():
    model = small_model()
    batches = small_batches(n=7, bs=3)
    manual = sum(float(model.loss(b).data) * b.num_tokens for b in batches) / sum(b.num_tokens for b in batches)
    assert evaluate_nll(model, batches) == pytest.approx(manual, rel=1e-14)


def test_epoch_order_is_permutation():
    o = epoch_order(9, 1, 3)
    assert sorted(o.tolist()) == list(range(9))
    assert np.array_equal(o, epoch_order(9, 1, 3))


def test_fit_logs_and_checkpoints(tmp_path):
    lines = []
    model = small_model()
    tr = Trainer(model, TrainConfig(epochs=2, seed=0, checkpoint_dir=str(tmp_path)), log=lines.append, vocab_hash="abc")
    tr.fit(small_batches(), small_batches(n=4, seed=9))
    assert len(lines) == 2
    rec = dict(kv.split("=") for kv in lines[-1].split())
    assert set(rec) == {"epoch", "step", "train_nll", "dev_nll", "tokens_per_s"}
    assert (tmp_path / "last" / "manifest.json").exists() and (tmp_path / "best" / "tensors.bin").exists()


def test_max_steps_limits_training():
    tr = Trainer(small_model(), TrainConfig(epochs=5, max_steps=4), log=lambda s: None)
    tr.fit(small_batches())
    assert tr.step == 4


# -- checkpoints ------------------------------------------------------------------


def _trained(tmp_path, steps=3):
    model = small_model(seed=4)
    tr = Trainer(model, TrainConfig(seed=0), log=lambda s: None)
    tr.run_steps(small_batches(), steps)
    save_checkpoint(tmp_path / "ck", model, tr.optimizer, {"note": "x"}, vocab_hash="v1")
    return model, tr


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model, tr = _trained(tmp_path)
    m2, opt2, meta = load_checkpoint(tmp_path / "ck", expected_vocab_hash="v1")
    for n in model.params:
        assert model.params[n].data.tobytes() == m2.params[n].data.tobytes()
        assert tr.optimizer.state.m[n].tobytes() == opt2.state.m[n].tobytes()
        assert tr.optimizer.state.v[n].tobytes() == opt2.state.v[n].tobytes()
    assert opt2.state.t == 3 and meta["step"] == 3 and meta["extra"] == {"note": "x"}
    batch = small_batches()[0]
    with T.no_grad():
        assert model.logits(batch).data.tobytes() == m2.logits(batch).data.tobytes()


def test_checkpoint_fixed_point(tmp_path):
    _trained(tmp_path)
    m2, opt2, meta = load_checkpoint(tmp_path / "ck")
    save_checkpoint(tmp_path / "ck2", m2, opt2, meta["extra"], meta["vocab_hash"])
    a = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    b = json.loads((tmp_path / "ck2" / "manifest.json").read_text())
    assert a == b
    assert (tmp_path / "ck" / "tensors.bin").read_bytes() == (tmp_path / "ck2" / "tensors.bin").read_bytes()


def test_checkpoint_layout(tmp_path):
    _trained(tmp_path)
    meta = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    names = list(meta["tensors"])
    assert names == sorted(names)
    offsets = [meta["tensors"][n]["offset"] for n in names]
    assert offsets == sorted(offsets) and offsets[0] == 0
    assert all(info["dtype"].startswith("<") for info in meta["tensors"].values())
    total = sum(info["length"] for info in meta["tensors"].values())
    assert (tmp_path / "ck" / "tensors.bin").stat().st_size == total
    info = meta["tensors"]["param/out.b"]
    raw = (tmp_path / "ck" / "tensors.bin").read_bytes()[info["offset"]: info["offset"] + info["length"]]
    m2, _, _ = load_checkpoint(tmp_path / "ck")
    assert np.array_equal(np.frombuffer(raw, "<f8"), m2.params["out.b"].data)


def test_vocab_hash_refused(tmp_path):
    _trained(tmp_path)
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "ck", expected_vocab_hash="other")


def test_config_mismatch_refused(tmp_path):
    model, _ = _trained(tmp_path)
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "ck", expected_config=model.cfg.replace(decoder_mode="context_only"))


def test_format_version_refused(tmp_path):
    _trained(tmp_path)
    p = tmp_path / "ck" / "manifest.json"
    meta = json.loads(p.read_text())
    meta["format"] = 99
    p.write_text(json.dumps(meta))
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "ck")


def test_corruption_detected(tmp_path):
    _trained(tmp_path)
    p = tmp_path / "ck" / "tensors.bin"
    raw = bytearray(p.read_bytes())
    raw[100] ^= 0x01
    p.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "ck")


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nothing")


@pytest.mark.parametrize("k", [1, 3, 4])
def test_resume_matches_uninterrupted(tmp_path, k):
    batches = small_batches(n=12, bs=4)  # 3 batches per epoch, so k=3 and k=4 cross an epoch boundary

    full = Trainer(small_model(seed=5, dropout=0.1), TrainConfig(seed=2), log=lambda s: None)
    full_losses = full.run_steps(batches, k + 1)

    part = Trainer(small_model(seed=5, dropout=0.1), TrainConfig(seed=2), log=lambda s: None)
    part.run_steps(batches, k)
    save_checkpoint(tmp_path / "ck", part.model, part.optimizer)
    model, opt, _ = load_checkpoint(tmp_path / "ck")
    resumed = Trainer(model, TrainConfig(seed=2), optimizer=opt, log=lambda s: None)
    assert resumed.step == k
    (loss,) = resumed.run_steps(batches, 1)
    assert loss == full_losses[-1]
    for n in model.params:
        assert model.params[n].data.tobytes() == full.model.params[n].data.tobytes()
