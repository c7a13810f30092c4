import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcaug import autodiff as ad
from vcaug import data as vd
from vcaug import training as tr
from vcaug.autodiff import Tensor
from vcaug.model import VcModel

from conftest import toy_config


def test_huber_zero_for_equal_inputs():
    y = np.random.default_rng(0).normal(size=(5, 4))
    assert tr.huber(y, y, delta=1.0).item() == 0.0


def test_huber_quadratic_branch():
    assert tr.huber(np.array([0.5]), np.array([0.0]), delta=1.0).item() == pytest.approx(0.125)


def test_huber_linear_branch_and_symmetry():
    assert tr.huber(np.array([2.0]), np.array([0.0]), delta=1.0).item() == pytest.approx(1.5)
    assert tr.huber(np.array([0.0]), np.array([2.0]), delta=1.0).item() == pytest.approx(1.5)


@settings(max_examples=40, deadline=None)
@given(d=st.floats(min_value=-5, max_value=5, allow_nan=False),
       delta=st.floats(min_value=0.1, max_value=3.0))
def test_huber_symmetry_property(d, delta):
    a = tr.huber(np.array([d]), np.array([0.0]), delta=delta).item()
    b = tr.huber(np.array([-d]), np.array([0.0]), delta=delta).item()
    assert a == pytest.approx(b, rel=1e-6, abs=1e-12)


def test_huber_c1_at_threshold():
    # value and one-sided derivatives agree at |d| = delta
    delta = 1.0
    eps = 1e-7
    below = tr.huber(np.array([delta - eps]), np.array([0.0]), delta).item()
    above = tr.huber(np.array([delta + eps]), np.array([0.0]), delta).item()
    at = tr.huber(np.array([delta]), np.array([0.0]), delta).item()
    assert abs(below - at) < 2e-6 and abs(above - at) < 2e-6
    d_below = (at - tr.huber(np.array([delta - 1e-5]), np.array([0.0]), delta).item()) / 1e-5
    d_above = (tr.huber(np.array([delta + 1e-5]), np.array([0.0]), delta).item() - at) / 1e-5
    assert d_below == pytest.approx(d_above, abs=1e-5)


def test_huber_fd_gradient():
    y_hat = Tensor(np.random.default_rng(1).normal(size=(3, 4)).astype(np.float64))
    y = Tensor(np.random.default_rng(2).normal(size=(3, 4)).astype(np.float64))
    report = ad.check_gradients(lambda: tr.huber(y, y_hat, delta=1.0), {"y_hat": y_hat})
    assert report.ok(1e-4), report.per_param


def test_total_loss_unit_weights():
    parts = [Tensor(np.asarray(v)) for v in (1.0, 2.0, 3.0, 4.0)]
    out = tr.total_loss(*parts, tr.LossWeights())
    assert out.item() == pytest.approx(10.0)


def test_total_loss_recon_only():
    parts = [Tensor(np.asarray(v)) for v in (1.5, 2.0, 3.0, 4.0)]
    out = tr.total_loss(*parts, tr.LossWeights(gamma=0.0, epsilon=0.0, eta=0.0))
    assert out.item() == pytest.approx(1.5)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        tr.LossWeights(gamma=-0.1)
    with pytest.raises(ValueError):
        tr.LossWeights(delta=0.0)


def test_adam_zero_gradient_is_noop():
    p = Tensor(np.array([1.0, 2.0], dtype=np.float32))
    opt = tr.Adam({"p": p}, lr=0.1)
    before = p.values.copy()
    p.grad = np.zeros_like(p.values)
    opt.step()
    np.testing.assert_array_equal(p.values, before)


def test_adam_moves_against_gradient():
    p = Tensor(np.array([1.0], dtype=np.float32))
    opt = tr.Adam({"p": p}, lr=0.1)
    p.grad = np.array([1.0], dtype=np.float32)
    opt.step()
    assert p.values[0] < 1.0


def test_ledger_round_trip_and_formatting(tmp_path):
    ledger = tr.MetricsLedger()
    ledger.append(tr.StepMetrics(1, 0.123456789123, 1.0, 0.25, 1.791759, 0.5, 17.0))
    ledger.append(tr.StepMetrics(2, 0.1, 1.0, 0.25, 1.7, 1.0, 18.5))
    path = tmp_path / "m.ledger"
    ledger.write(path)
    text = path.read_text()
    assert text.splitlines()[0] == "1\t0.123456789\t1\t0.25\t1.791759\t0.5\t17"
    back = tr.MetricsLedger.read(path)
    assert len(back) == 2
    assert back.records[0].recon == pytest.approx(0.123456789, abs=1e-9)


def test_ledger_rejects_non_monotonic_steps():
    ledger = tr.MetricsLedger()
    ledger.append(tr.StepMetrics(5, 0, 0, 0, 0, 0, 1))
    with pytest.raises(ValueError, match="increase"):
        ledger.append(tr.StepMetrics(5, 0, 0, 0, 0, 0, 1))


def test_ledger_rejects_non_finite():
    ledger = tr.MetricsLedger()
    with pytest.raises(ValueError, match="non-finite"):
        ledger.append(tr.StepMetrics(1, float("nan"), 0, 0, 0, 0, 1))


def test_final_window_means():
    ledger = tr.MetricsLedger()
    for step in range(1, 101):
        ledger.append(tr.StepMetrics(step, float(step), 0, 0, 0, 0, 1))
    means = ledger.final_window_means(0.1)
    assert means["recon"] == pytest.approx(np.mean(range(91, 101)))


def toy_corpus(n_speakers=2, utts=3, seed=0):
    return vd.synthetic_corpus(n_speakers=n_speakers, utts_per_speaker=utts,
                               seed=seed, duration_s=0.3, n_mels=8)


def toy_train_cfg(**kw):
    defaults = dict(steps=5, lr=1e-3, seed=0, adversarial_weight=0.1,
                    weights=tr.LossWeights(beta=0.0))
    defaults.update(kw)
    return tr.TrainConfig(**defaults)


def test_train_seed_determinism():
    def run():
        model = VcModel(toy_config(seed=1))
        return tr.train(model, toy_corpus(), toy_train_cfg(steps=8))

    a, b = run(), run()
    assert a.ledger.lines() == b.ledger.lines()


def test_train_writes_checkpoints_and_ledger(tmp_path):
    model = VcModel(toy_config(seed=2))
    result = tr.train(model, toy_corpus(), toy_train_cfg(steps=4, out_dir=str(tmp_path)))
    assert (tmp_path / "stepfinal.vcck").exists()
    assert (tmp_path / "metrics.ledger").exists()
    assert result.final_step == 4
    assert len(result.ledger) == 4


def test_train_zero_steps_writes_initial_state(tmp_path):
    model = VcModel(toy_config(seed=3))
    result = tr.train(model, toy_corpus(), toy_train_cfg(steps=0, out_dir=str(tmp_path)))
    assert (tmp_path / "stepfinal.vcck").exists()
    assert len(result.ledger) == 0
    assert (tmp_path / "metrics.ledger").read_text() == ""


def test_train_frozen_encoder_keeps_encoder_bits():
    model = VcModel(toy_config(seed=4, frozen=True))
    enc_before = {k: p.values.copy() for k, p in model.params.items() if k.startswith("enc.")}
    dec_before = model.params["dec.proj.w"].values.copy()
    tr.train(model, toy_corpus(), toy_train_cfg(steps=10))
    for name, before in enc_before.items():
        assert np.array_equal(model.params[name].values, before), name
    assert not np.array_equal(model.params["dec.proj.w"].values, dec_before)


def test_train_divergence_tripwire(tmp_path):
    model = VcModel(toy_config(seed=5))
    model.params["dec.proj.w"].values[:] = np.float32(1e30)  # provoke overflow
    with np.errstate(all="ignore"), pytest.raises(tr.DivergenceError):
        tr.train(model, toy_corpus(), toy_train_cfg(steps=10, out_dir=str(tmp_path)))


def test_train_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        tr.train(VcModel(toy_config()), [], toy_train_cfg())


TABLE_ROWS = [
    tr.CandidateMetrics("0.0", 0.80, 110.0, 0.038),
    tr.CandidateMetrics("0.1", 0.12, 105.0, 0.045),
    tr.CandidateMetrics("0.5", 0.11, 80.0, 0.070),
    tr.CandidateMetrics("1.0", 0.10, 60.0, 0.085),
]


def test_select_model_published_rows():
    report = tr.select_model(TABLE_ROWS, acc_max=0.2, ppl_min=64.0)
    assert report.selected == "0.1"
    assert not report.fallback_used
    assert report.ranking == ["0.1", "0.5"]
    assert report.criteria["0.0"] == {"acc_ok": False, "ppl_ok": True}
    assert report.criteria["1.0"] == {"acc_ok": True, "ppl_ok": False}


def test_select_model_single_candidate():
    report = tr.select_model([TABLE_ROWS[1]])
    assert report.selected == "0.1"
    assert not report.fallback_used


def test_select_model_fallback():
    rows = [
        tr.CandidateMetrics("a", 0.9, 10.0, 0.02),
        tr.CandidateMetrics("b", 0.5, 12.0, 0.01),
    ]
    report = tr.select_model(rows, acc_max=0.2, ppl_min=64.0)
    assert report.fallback_used
    assert report.ranking == ["b", "a"]  # lowest accuracy first
    assert report.selected == "b"
    assert any("no candidate meets criteria" in line for line in report.lines())


def test_select_model_empty_rejected():
    with pytest.raises(ValueError):
        tr.select_model([])


def test_sweep_requires_two_weights():
    with pytest.raises(ValueError, match="two weights"):
        tr.sweep_adversarial_weight([0.1], lambda: None, [(None, 0)], toy_train_cfg())


def test_sweep_runs_and_reports():
    corpus = toy_corpus()

    def factory():
        return VcModel(toy_config(seed=6))

    result = tr.sweep_adversarial_weight(
        [0.0, 1.0], factory, corpus, toy_train_cfg(steps=6), window=0.5
    )
    assert set(result.ledgers) == {"0", "1"}
    assert len(result.report.candidates) == 2
    assert result.report.selected in {"0", "1"}
