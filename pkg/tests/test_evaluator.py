import math

import numpy as np
import pytest

from pvnas import autodiff as ad
from pvnas.evaluator import (
    Adam, AllZeroTruth, EarlyStopping, EvalRecord, Evaluator, LengthMismatch, NonFiniteLoss, SGD,
    TrainConfig, mae, predict, prepare_task, train, train_genotype, wmape,
)
from pvnas.search_space import Genotype, TaskSpec, assemble
from pvnas.synth import synth_pv


@pytest.fixture(scope="module")
def data():
    return prepare_task(synth_pv(30, seed=1), TaskSpec(48, 12), train_step=6)


# --- metrics -------------------------------------------------------------------------------------

def test_mae_examples(rng):
    assert mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mae([0.0, 0.0], [1.0, 3.0]) == 2.0
    a, b = rng.standard_normal(20), rng.standard_normal(20)
    assert mae(a, b) == mae(b, a)
    with pytest.raises(LengthMismatch):
        mae([1.0], [1.0, 2.0])


def test_wmape_examples():
    assert wmape([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert wmape([2.0, 2.0], [1.0, 2.0]) == pytest.approx(0.2, abs=1e-15)
    with pytest.raises(AllZeroTruth):
        wmape([1.0, 1.0], [0.0, 0.0])


# --- optimizers ------------------------------------------------------------------------------------

def test_adam_step_on_quadratic():
    # f(x) = 0.5 * sum(a * x^2), gradient a * x; two steps computed by hand
    a = np.array([1.0, 4.0, 0.25])
    x0 = np.array([1.0, -2.0, 3.0])
    p = ad.Tensor(x0.copy(), requires_grad=True)
    opt = Adam({"x": p}, lr=0.1)
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x, m, v = x0.copy(), np.zeros(3), np.zeros(3)
    for t in (1, 2):
        g = a * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        opt.step({"x": a * p.data})
        assert np.max(np.abs(p.data - x)) <= 1e-12


def test_sgd_step():
    p = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    SGD({"p": p}, 0.5).step({"p": np.array([2.0, -4.0])})
    assert p.data.tolist() == [0.0, 4.0]


# --- early stopping and training ------------------------------------------------------------------

def test_early_stopping_example():
    es = EarlyStopping(3)
    stops = [es.update(v) for v in [5, 4, 4.1, 4.2, 4.3]]
    assert stops == [False, False, False, False, True]
    assert es.best == 4 and es.best_epoch == 2


def test_early_stopping_strict():
    es = EarlyStopping(2)
    assert [es.update(v) for v in [3, 3, 3]] == [False, False, True]


def test_train_restores_best_and_is_deterministic(data):
    g = Genotype(cps="MLP", ln=2, hs=64)
    runs = []
    for _ in range(2):
        m = assemble(g, data.task, data.train_frame, seed=3)
        cfg = TrainConfig(0.001, "Adam", 32, max_epochs=8, patience=2, seed=5)
        res = train(m, data.train_windows, data.val_windows, cfg, data.target_scale)
        runs.append(res)
        pred, truth = predict(m, data.val_windows)
        assert abs(mae(pred, truth) * data.target_scale - res.best_val) <= 1e-9
        assert res.epochs_run <= res.best_epoch + cfg.patience
        assert res.best_val == min(h[1] for h in res.history)
    assert runs[0].history == runs[1].history


def test_detached_model_constant_loss(data):
    m = assemble(Genotype(cps="MLP", ln=1), data.task, data.train_frame)
    for p in m.parameters().values():
        p.requires_grad = False
    res = train(m, data.train_windows, data.val_windows, TrainConfig(max_epochs=4, patience=10))
    losses = [h[0] for h in res.history]
    assert np.allclose(losses, losses[0], rtol=1e-12, atol=0)
    vals = [h[1] for h in res.history]
    assert vals == [vals[0]] * 4


def test_divergence_raises(data):
    m = assemble(Genotype(cps="MLP", ln=3, hs=512), data.task, data.train_frame)
    with np.errstate(all="ignore"), pytest.raises(NonFiniteLoss):
        train(m, data.train_windows, data.val_windows, TrainConfig(1e200, "SGD", 32, max_epochs=3))


def test_divergence_sentinel(data, monkeypatch):
    import pvnas.evaluator as ev

    def boom(*args, **kwargs):
        raise NonFiniteLoss("diverged")
    monkeypatch.setattr(ev, "train", boom)
    g = Genotype()
    rec, state = train_genotype(g, data, ev.fit_mask(g, data.train_frame), 3, 3, 0)
    assert rec.measured_error == math.inf and rec.status == "diverged" and state is None
    assert EvalRecord.from_json(rec.to_json()).measured_error == math.inf


def test_train_needs_windows(data):
    m = assemble(Genotype(), data.task, data.train_frame)
    empty = data.val_windows.__class__(data.val_frame, 48, 12, np.zeros(0, np.int64))
    with pytest.raises(ValueError):
        train(m, data.train_windows, empty, TrainConfig())


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=0)


# --- cached evaluation -------------------------------------------------------------------------------

def test_cache_and_recomputation(data, tmp_path):
    ev = Evaluator(data, max_epochs=3, seed=2, log_path=tmp_path / "log.jsonl", keep_weights=True)
    g = Genotype(cps="TCN", ln=1, hs=64, sm="RevIN")
    r1 = ev.evaluate(g)
    r2 = ev.evaluate(g)
    assert r1 is r2 and ev.train_calls == 1
    # independent recomputation of the measured error from the kept weights
    m = assemble(g, data.task, data.train_frame, mask=ev.mask(g))
    m.load_state(ev.weights_for(g))
    pred, truth = predict(m, data.val_windows)
    y = data.val_windows.batch(np.arange(len(data.val_windows)))[2]
    assert np.array_equal(truth, y)
    assert abs(np.mean(np.abs(pred - y)) * data.target_scale - r1.measured_error) <= 1e-9
    assert r1.param_count == m.param_count() == ev.param_count(g)


def test_inert_fst_shares_entry(data):
    ev = Evaluator(data, max_epochs=1)
    a = Genotype(fsm="NoFilter", fst=0.3)
    b = Genotype(fsm="NoFilter", fst=0.5)
    ev.evaluate_many([a, b, a])
    assert len(ev) == 1 and ev.train_calls == 1


def test_retrained_weights_match(data):
    ev = Evaluator(data, max_epochs=2, keep_weights=False)
    g = Genotype(fem="Decomp")
    rec = ev.evaluate(g)
    m = assemble(g, data.task, data.train_frame, mask=ev.mask(g))
    m.load_state(ev.weights_for(g))
    pred, truth = predict(m, data.val_windows)
    assert abs(mae(pred, truth) * data.target_scale - rec.measured_error) <= 1e-9


def test_log_resume_and_torn_line(data, tmp_path):
    log = tmp_path / "log.jsonl"
    ev = Evaluator(data, max_epochs=1, log_path=log)
    gs = [Genotype(cps=c) for c in ("MLP", "CNN")]
    recs = ev.evaluate_many(gs)
    with open(log, "a") as fh:
        fh.write('{"genotype": {"fsm"')          # interrupted write
    fresh = Evaluator(data, max_epochs=1, log_path=log)
    assert fresh.load_log() == 2
    assert log.read_text().count("\n") == 2
    again = fresh.evaluate_many(gs)
    assert fresh.train_calls == 0
    assert [r.measured_error for r in again] == [r.measured_error for r in recs]


def test_parallel_workers_match_serial(data):
    gs = [Genotype(cps="MLP", ln=2), Genotype(cps="CNN"), Genotype(fem="FreqMix")]
    serial = Evaluator(data, max_epochs=2, seed=4).evaluate_many(gs)
    par = Evaluator(data, max_epochs=2, seed=4, workers=2)
    try:
        out = par.evaluate_many(gs)
    finally:
        par.close()
    assert [r.measured_error for r in out] == [r.measured_error for r in serial]
    assert par.train_calls == 3


def test_eval_record_invariants():
    with pytest.raises(ValueError):
        EvalRecord(Genotype(), -1.0, 10)
    with pytest.raises(ValueError):
        EvalRecord(Genotype(), 1.0, 0)


def test_task2_windows(data):
    d2 = prepare_task(synth_pv(30, seed=1), TaskSpec(48, 12, "task2"), train_step=6)
    x, _, y = d2.val_windows.batch(np.arange(3))
    assert x.shape == (3, 60, 11)
    assert np.all(x[:, 48:, 0] == 0.0)
    x1, _, y1 = data.val_windows.batch(np.arange(3))
    assert np.array_equal(y, y1) and np.array_equal(x[:, :48], x1)
