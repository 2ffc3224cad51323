import json
import math

import numpy as np
import pytest

from twotower.data import synth_dataset
from twotower.errors import DivergenceError, ShapeError
from twotower.loss import LossConfig, loss_backward
from twotower.model import checkpoint_bytes, init_model
from twotower.train import (
    OptimizerState,
    TrainConfig,
    adamw_step,
    evaluate_loss,
    lr_at,
    model_params,
    train,
)


def sched_cfg(lr_max=1.0, lr_min=0.1, warmup=10):
    return TrainConfig(lr_max=lr_max, lr_min=lr_min, warmup_steps=warmup)


class TestLrSchedule:
    def test_warmup_start_is_zero(self):
        assert lr_at(0, sched_cfg(), total_steps=100) == 0.0

    def test_warmup_end_is_lr_max(self):
        assert lr_at(10, sched_cfg(), total_steps=100) == 1.0

    def test_cosine_midpoint(self):
        cfg = sched_cfg(lr_max=1.0, lr_min=0.1, warmup=10)
        mid = 10 + (100 - 10) // 2
        assert lr_at(mid, cfg, total_steps=100) == pytest.approx(0.55, abs=1e-12)

    def test_end_is_lr_min(self):
        assert lr_at(100, sched_cfg(), total_steps=100) == pytest.approx(0.1, abs=1e-15)

    def test_beyond_end_clamps(self):
        assert lr_at(250, sched_cfg(), total_steps=100) == 0.1

    def test_warmup_linear(self):
        cfg = sched_cfg()
        assert lr_at(5, cfg, total_steps=100) == pytest.approx(0.5)

    def test_no_warmup(self):
        cfg = sched_cfg(warmup=0)
        assert lr_at(0, cfg, total_steps=10) == 1.0

    def test_warmup_clamped_to_short_runs(self):
        cfg = sched_cfg(warmup=1000)
        assert lr_at(4, cfg, total_steps=4) == 1.0


class TestAdamWStep:
    def _single(self, theta, grad, lr, wd, t_before=0):
        params = {"p": np.array([theta])}
        grads = {"p": np.array([grad])}
        cfg = TrainConfig(weight_decay=wd)
        state = OptimizerState.for_params(params)
        state.t = t_before
        adamw_step(params, grads, state, lr, cfg)
        return params["p"][0], state

    def test_hand_case(self):
        # m_hat = 1, v_hat = 1 at t=1, so theta' = 1 - 0.1/(1 + 1e-8) - 0.1*0.01*1
        theta, state = self._single(1.0, 1.0, lr=0.1, wd=0.01)
        assert theta == pytest.approx(0.899, abs=1e-6)
        expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8) - 0.1 * 0.01 * 1.0
        assert theta == pytest.approx(expected, abs=1e-15)
        assert state.t == 1

    def test_zero_grad_zero_decay_is_identity(self):
        theta, _ = self._single(3.5, 0.0, lr=0.1, wd=0.0)
        assert theta == 3.5

    def test_pure_decay(self):
        theta, _ = self._single(2.0, 0.0, lr=0.1, wd=0.05)
        assert theta == pytest.approx(2.0 - 0.1 * 0.05 * 2.0, abs=1e-15)

    def test_shape_mismatch(self):
        params = {"p": np.zeros((2, 2))}
        grads = {"p": np.zeros(3)}
        state = OptimizerState.for_params(params)
        with pytest.raises(ShapeError):
            adamw_step(params, grads, state, 0.1, TrainConfig())

    def test_missing_grad(self):
        params = {"p": np.zeros(2)}
        state = OptimizerState.for_params(params)
        with pytest.raises(ShapeError):
            adamw_step(params, {}, state, 0.1, TrainConfig())


def tiny_dataset(seed=0, n_images=24, cpi=2):
    return synth_dataset(
        n_images, cpi, latent_dim=4, img_dim=8, txt_dim=6, noise_sigma=0.02, seed=seed
    )


def tiny_cfg(tmp_path=None, **kw):
    defaults = dict(
        epochs=3,
        batch_size=8,
        lr_max=5e-3,
        lr_min=5e-4,
        warmup_steps=4,
        seed=11,
        loss=LossConfig(lam=1.0, margin=0.2),
    )
    defaults.update(kw)
    if tmp_path is not None:
        defaults["checkpoint_path"] = str(tmp_path / "best.ckpt")
    return TrainConfig(**defaults)


class TestTrain:
    def test_zero_lr_is_identity(self):
        ds = tiny_dataset()
        model = init_model(8, 6, 4, seed=1)
        before = {k: v.copy() for k, v in model_params(model).items()}
        cfg = tiny_cfg(lr_max=0.0, lr_min=0.0, weight_decay=0.0)
        best, report = train(model, ds, cfg)
        for key, val in model_params(best).items():
            np.testing.assert_array_equal(val, before[key])
        assert report.train_loss == pytest.approx([report.train_loss[0]] * 3, abs=1e-12)

    def test_same_seed_same_everything(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        outs = []
        for sub in ("a", "b"):
            ds = tiny_dataset(seed=5)
            model = init_model(8, 6, 4, seed=2)
            cfg = tiny_cfg(tmp_path / sub)
            best, report = train(model, ds, cfg)
            outs.append((checkpoint_bytes(best), report))
        assert outs[0][0] == outs[1][0]
        r0, r1 = outs[0][1], outs[1][1]
        assert r0.train_loss == r1.train_loss
        assert r0.val_loss == r1.val_loss
        assert r0.best_epoch == r1.best_epoch
        assert r0.checkpointed == r1.checkpointed
        assert r0.final_lr == r1.final_lr

    def test_best_val_loss_reproducible(self, tmp_path):
        ds = tiny_dataset(seed=3)
        model = init_model(8, 6, 4, seed=4)
        cfg = tiny_cfg(tmp_path, epochs=4)
        best, report = train(model, ds, cfg)
        assert report.best_val_loss == min(report.val_loss)
        re_eval = evaluate_loss(best, ds, "val", cfg.loss, cfg.batch_size)
        assert re_eval == pytest.approx(report.best_val_loss, abs=1e-12)

    def test_checkpoint_writes_count_strict_improvements(self, tmp_path):
        ds = tiny_dataset(seed=6)
        model = init_model(8, 6, 4, seed=7)
        best, report = train(model, ds, tiny_cfg(tmp_path, epochs=5))
        improvements = 0
        best_so_far = math.inf
        for v in report.val_loss:
            if v < best_so_far:
                improvements += 1
                best_so_far = v
        assert report.checkpoint_writes == improvements
        assert sum(report.checkpointed) == improvements
        assert report.checkpointed[report.best_epoch - 1]

    def test_first_epoch_ce_scale_sanity(self):
        # random heads on independent features produce near-uniform softmax
        # rows, so the first batch's cross-entropy sits near N * ln N
        rng = np.random.default_rng(8)
        n = 16
        model = init_model(12, 10, 8, seed=9)
        img, txt = rng.standard_normal((n, 12)), rng.standard_normal((n, 10))
        out, _ = loss_backward(img, txt, model, LossConfig(lam=0.0, temperature=1.0))
        assert abs(out.ce_term - n * math.log(n)) < 0.25 * n * math.log(n)

    def test_training_reduces_loss(self, tmp_path):
        ds = tiny_dataset(seed=10, n_images=40)
        model = init_model(8, 6, 4, seed=11)
        cfg = tiny_cfg(tmp_path, epochs=10, lr_max=5e-3)
        best, report = train(model, ds, cfg)
        assert report.train_loss[-1] < report.train_loss[0]

    def test_divergence_guard(self):
        ds = tiny_dataset(seed=12)
        model = init_model(8, 6, 4, seed=13)
        cfg = tiny_cfg(lr_max=1e200, lr_min=1e200, warmup_steps=0, weight_decay=0.0)
        with pytest.raises(DivergenceError):
            train(model, ds, cfg)

    def test_batch_size_larger_than_split(self):
        ds = tiny_dataset(n_images=4, cpi=1)
        model = init_model(8, 6, 4, seed=0)
        with pytest.raises(ValueError, match="batch_size"):
            train(model, ds, tiny_cfg(batch_size=64))

    def test_log_records(self, tmp_path):
        ds = tiny_dataset(seed=14)
        model = init_model(8, 6, 4, seed=15)
        log_path = tmp_path / "train.jsonl"
        cfg = tiny_cfg(tmp_path, epochs=2, log_path=str(log_path))
        train(model, ds, cfg)
        records = [json.loads(line) for line in log_path.read_text().splitlines()]
        steps = [r for r in records if "step" in r]
        epochs = [r for r in records if "step" not in r]
        n_train = len(ds.pairs_for_split("train"))
        assert len(steps) == 2 * (n_train // cfg.batch_size)
        assert len(epochs) == 2
        assert set(steps[0]) == {"step", "epoch", "lr", "loss", "ce_term", "margin_term"}
        assert set(epochs[0]) == {"epoch", "train_loss", "val_loss", "checkpointed"}

    def test_checkpoint_roundtrip_preserves_training(self, tmp_path):
        # one optimizer step after save/load equals the same step without it
        ds = tiny_dataset(seed=16)
        model_a = init_model(8, 6, 4, seed=17)
        model_b = init_model(8, 6, 4, seed=17)
        from twotower.model import load_checkpoint, save_checkpoint

        p = tmp_path / "m.ckpt"
        save_checkpoint(model_a, p)
        model_a = load_checkpoint(p)

        batch = ds.pairs_for_split("train")[:8]
        img = ds.image_store.rows([q.image_id for q in batch])
        txt = ds.text_store.rows([q.text_id for q in batch])
        outs = []
        for model in (model_a, model_b):
            _, grads = loss_backward(img, txt, model, LossConfig())
            params = model_params(model)
            state = OptimizerState.for_params(params)
            adamw_step(params, grads.as_dict(), state, 1e-3, TrainConfig())
            outs.append({k: v.copy() for k, v in params.items()})
        for key in outs[0]:
            np.testing.assert_array_equal(outs[0][key], outs[1][key])


class TestEvaluateLoss:
    def test_deterministic_and_batch_order_fixed(self):
        ds = tiny_dataset(seed=18)
        model = init_model(8, 6, 4, seed=19)
        a = evaluate_loss(model, ds, "val", LossConfig(), batch_size=4)
        b = evaluate_loss(model, ds, "val", LossConfig(), batch_size=4)
        assert a == b

    def test_empty_split_rejected(self):
        ds = synth_dataset(
            4, 1, latent_dim=2, img_dim=4, txt_dim=4, noise_sigma=0.0, seed=0,
            train_frac=1.0, val_frac=0.0,
        )
        model = init_model(4, 4, 2, seed=0)
        with pytest.raises(ValueError, match="empty"):
            evaluate_loss(model, ds, "val", LossConfig(), batch_size=2)


class TestTrainConfigValidation:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)
        with pytest.raises(ValueError):
            TrainConfig(lr_min=1.0, lr_max=0.5)
        with pytest.raises(ValueError):
            TrainConfig(beta1=1.0)
