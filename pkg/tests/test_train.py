import dataclasses
import math

import numpy as np
import pytest

from lcf_atepc import numerics as nx
from lcf_atepc.corpus import Vocabulary
from lcf_atepc.numerics import ParameterStore, Tensor
from lcf_atepc.train import (AdamW, L2Mode, TaskMode, TrainConfig, adamw_update, apc_loss, ate_loss,
                             batch_loss, format_log, joint_loss, l2_penalty, read_log, train)

from lcf_atepc.corpus import parse_atepc_text

from helpers import TINY_TEXT, fixture_sentences, tiny_batch, tiny_model


def tiny_setup(mode="cdm", **kw):
    sents = parse_atepc_text(TINY_TEXT)
    vocab = Vocabulary.build(sents)
    opts = dict(learning_rate=1e-2, batch_size=2, epochs=3, max_seq_len=6, srd_alpha=1, lcf_mode=mode)
    cfg = TrainConfig(**{**opts, **kw})
    return sents, vocab, cfg, tiny_model(mode, alpha=1, vocab_size=len(vocab))


class TestLosses:
    def test_uniform_apc(self):
        assert apc_loss(np.zeros((1, 3)), np.array([2])).item() == pytest.approx(math.log(3), abs=1e-15)

    def test_two_identical_rows_equal_one(self):
        logits = np.array([[0.3, -1.0, 2.0], [0.3, -1.0, 2.0]])
        assert ate_loss(logits, np.array([1, 1])).item() == pytest.approx(
            ate_loss(logits[:1], np.array([1])).item(), abs=1e-15)

    def test_all_ignored(self):
        assert ate_loss(np.zeros((2, 3)), np.array([-100, -100])).item() == 0.0

    def test_bad_polarity_target(self):
        with pytest.raises(ValueError):
            apc_loss(np.zeros((1, 2)), np.array([2]))

    def test_l2_hand_sum(self):
        a = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
        b = Tensor(np.array([3.0]), requires_grad=True)
        pen = l2_penalty([a, b], 0.5)
        assert pen.item() == 0.5 * (1 + 4 + 9)
        pen.backward()
        np.testing.assert_array_equal(a.grad, [[1.0, -2.0]])

    def test_l2_zero_iff_params_zero(self):
        store = ParameterStore()
        store.bias("b", 4)
        assert l2_penalty(store, 1.0).item() == 0.0
        store["b"].value[1] = 1e-3
        assert l2_penalty(store, 1.0).item() > 0.0

    def test_l2_added_to_task_loss(self):
        a = Tensor(np.array([[2.0]]), requires_grad=True)
        plain = apc_loss(np.zeros((1, 3)), np.array([0])).item()
        assert apc_loss(np.zeros((1, 3)), np.array([0]), [a], 0.1).item() == pytest.approx(plain + 0.4)


class TestJointLoss:
    def test_sum(self):
        total, parts = joint_loss(Tensor(np.array(1.0)), Tensor(np.array(0.5)), "atepc")
        assert total.item() == 1.5 and parts.l_total == 1.5

    def test_single_task(self):
        apc, ate = Tensor(np.array(1.0)), Tensor(np.array(0.5))
        assert joint_loss(apc, ate, TaskMode.ATE_ONLY)[0].item() == 0.5
        assert joint_loss(apc, ate, TaskMode.APC_ONLY)[0].item() == 1.0

    @pytest.mark.parametrize("task, dead", [("ate", "apc"), ("apc", "ate")])
    def test_other_head_gets_no_gradient(self, task, dead):
        batch, _ = tiny_batch()
        model = tiny_model()
        model.store.zero_grad()
        total, _ = batch_loss(model, batch, TrainConfig(srd_alpha=1, max_seq_len=6, task_mode=task))
        total.backward()
        for name in (model.apc_head_names() if dead == "apc" else model.ate_head_names()):
            assert np.all(model.store[name].grad == 0.0)

    def test_loss_mode_includes_l2(self):
        batch, _ = tiny_batch()
        model = tiny_model()
        base = TrainConfig(srd_alpha=1, max_seq_len=6, l2_lambda=1e-2)
        _, dec = batch_loss(model, batch, base)
        _, lit = batch_loss(model, batch, TrainConfig(srd_alpha=1, max_seq_len=6, l2_lambda=1e-2,
                                                      l2_mode=L2Mode.LOSS))
        assert lit.l_apc == pytest.approx(dec.l_apc + dec.l2_term, abs=1e-12)
        assert lit.l_ate == pytest.approx(dec.l_ate + dec.l2_term, abs=1e-12)


class TestAdamW:
    def test_zero_gradient_no_decay(self):
        new, _, _ = adamw_update(np.array([0.7]), np.array([0.0]), np.zeros(1), np.zeros(1), 1, 0.1, 0.0)
        assert new[0] == 0.7

    def test_hand_trace(self):
        theta, g, lr, wd = 0.5, 0.2, 0.1, 0.01
        m = 0.1 * g
        v = 0.001 * g * g
        m_hat = m / (1 - 0.9)
        v_hat = v / (1 - 0.999)
        expected = theta - lr * wd * theta - lr * m_hat / (math.sqrt(v_hat) + 1e-8)
        new, m_out, v_out = adamw_update(np.array(theta), np.array(g), np.zeros(()), np.zeros(()), 1, lr, wd)
        assert abs(float(new) - expected) < 1e-12
        assert abs(float(m_out) - m) < 1e-15 and abs(float(v_out) - v) < 1e-15

    def test_decay_only_shrinks_multiplicatively(self):
        store = ParameterStore()
        w = store.weight("w", (3, 3))
        start = w.value.copy()
        opt = AdamW(store, lr=0.1, weight_decay=0.5)
        for _ in range(3):
            store.zero_grad()
            opt.step()
        np.testing.assert_allclose(w.value, start * 0.95 ** 3, rtol=1e-14)

    def test_non_finite_gradient_aborts(self):
        store = ParameterStore()
        w = store.weight("w", (2, 2))
        before = w.value.copy()
        w.grad[0, 0] = np.nan
        with pytest.raises(nx.NonFiniteError, match="w"):
            AdamW(store, lr=0.1).step()
        np.testing.assert_array_equal(w.value, before)


class TestTrainLoop:
    def test_zero_epochs(self):
        sents, vocab, cfg, model = tiny_setup(epochs=0)
        before = model.store.state()
        res = train(model, vocab, sents, cfg, (0, 1, 2))
        assert res.epoch_log == [] and res.step_log == []
        for k, v in model.store.state().items():
            np.testing.assert_array_equal(v, before[k])

    def test_replay_is_bitwise(self, tmp_path):
        logs = []
        for run in ("a", "b"):
            sents, vocab, cfg, model = tiny_setup()
            res = train(model, vocab, sents, cfg, (0, 1, 2), out_dir=tmp_path / run)
            logs.append((tmp_path / run / "train_log.csv").read_bytes())
            assert len(res.step_log) == 6
        assert logs[0] == logs[1]

    def test_checkpoints_per_epoch(self, tmp_path):
        sents, vocab, cfg, model = tiny_setup()
        train(model, vocab, sents, cfg, (0, 1, 2), out_dir=tmp_path)
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == [
            "epoch_001.ckpt", "epoch_002.ckpt", "epoch_003.ckpt"]
        state, meta = nx.load_checkpoint(tmp_path / "checkpoints" / "epoch_003.ckpt")
        assert meta["epoch"] == 3
        for k, v in model.store.state().items():
            np.testing.assert_array_equal(state[k], v)

    def test_log_round_trip(self, tmp_path):
        sents, vocab, cfg, model = tiny_setup()
        res = train(model, vocab, sents, cfg, (0, 1, 2), out_dir=tmp_path)
        rows = read_log(tmp_path / "train_log.csv")
        assert [r["l_total"] for r in rows] == [s.loss.l_total for s in res.step_log]
        assert format_log(res.step_log).splitlines()[0] == "epoch,step,l_apc,l_ate,l_total"

    def test_best_by_dev_is_restored(self, tmp_path):
        sents, vocab, cfg, model = tiny_setup(epochs=4)
        res = train(model, vocab, sents, cfg, (0, 1, 2), dev=sents, out_dir=tmp_path)
        scores = [r.acc_apc for r in res.dev_reports]
        assert res.best_epoch == 1 + int(np.argmax(scores))
        best, _ = nx.load_checkpoint(tmp_path / "checkpoints" / f"epoch_{res.best_epoch:03d}.ckpt")
        for k, v in model.store.state().items():
            np.testing.assert_array_equal(best[k], v)

    def test_mismatched_model_rejected(self):
        sents, vocab, cfg, model = tiny_setup()
        with pytest.raises(ValueError):
            train(model, vocab, sents, dataclasses.replace(cfg, srd_alpha=3), (0, 1, 2))
        with pytest.raises(ValueError):
            train(model, vocab, [], cfg, (0, 1, 2))

    def test_apc_only_drops_aspectless_sentences(self):
        sents, vocab, cfg, model = tiny_setup(task_mode="apc")
        seen = []
        extra = parse_atepc_text("nothing O -1\nhere O -1\n")
        train(model, vocab, sents + extra, cfg, (0, 1, 2), on_step=lambda m, b, l: seen.extend(b.apc_targets))
        assert -100 not in seen

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(task_mode="both")


def test_epoch_loss_non_increasing_after_epoch_three():
    from lcf_atepc.experiment import ExperimentConfig, run_experiment
    sents = fixture_sentences()
    cfg = ExperimentConfig(d_h=16, heads=2, layers=1, max_seq_len=24, learning_rate=3e-4,
                           batch_size=64, epochs=40, seed=0)
    log = run_experiment(cfg, sents).train_result.epoch_log
    totals = [e.l_total for e in log]
    for k in range(3, len(totals)):
        assert totals[k] <= totals[k - 1], f"epoch {k + 1}: {totals[k]} > {totals[k - 1]}"
