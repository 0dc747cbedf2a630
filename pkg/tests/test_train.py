import math

import numpy as np
import pytest

from peftkit import rng as prng
from peftkit import tensor as T
from peftkit.errors import ConfigError, NumericError
from peftkit.nn import Linear, arch_preset, build_head, build_model, toy_head
from peftkit.tensor import GradTape, Tensor
from peftkit.train import (AdamW, ArrayDataset, EarlyStopper, HISTORY_COLUMNS,
                           TrainConfig, Trainer, evaluate, history_to_csv, lr_at,
                           train_loop, train_preset, warmup_steps)

from oracles import adamw_scalar_oracle


class TestSchedule:
    CFG = TrainConfig(peak_lr=1e-4, warmup_ratio=0.03, min_lr_ratio=0.1)

    def test_peak_at_warmup_end(self):
        total = 1000
        w = warmup_steps(self.CFG, total)
        assert lr_at(w, total, self.CFG) == self.CFG.peak_lr

    def test_floor_exactly_at_total(self):
        total = 1000
        assert lr_at(total, total, self.CFG) == 0.1 * self.CFG.peak_lr

    def test_cosine_midpoint(self):
        total = 1000
        w = warmup_steps(self.CFG, total)
        mid = w + (total - w) // 2
        # oracle: direct formula evaluation at the midpoint step
        min_lr = 0.1 * self.CFG.peak_lr
        span = (mid - w) / (total - w)
        want = min_lr + (self.CFG.peak_lr - min_lr) * 0.5 * (1 + math.cos(math.pi * span))
        assert lr_at(mid, total, self.CFG) == pytest.approx(want, abs=0)

    def test_warmup_linear_never_zero(self):
        total = 1000
        w = warmup_steps(self.CFG, total)
        assert lr_at(0, total, self.CFG) == self.CFG.peak_lr / w
        for t in range(w):
            assert lr_at(t, total, self.CFG) > 0

    def test_monotone_nonincreasing_after_warmup(self):
        total = 500
        w = warmup_steps(self.CFG, total)
        values = [lr_at(t, total, self.CFG) for t in range(w, total + 1)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_continuous_at_warmup_boundary(self):
        total = 400
        w = warmup_steps(self.CFG, total)
        assert lr_at(w - 1, total, self.CFG) == pytest.approx(self.CFG.peak_lr, rel=1e-12)
        assert lr_at(w, total, self.CFG) == self.CFG.peak_lr

    def test_total_below_warmup_rejected(self):
        with pytest.raises(ConfigError):
            lr_at(0, 1, TrainConfig(warmup_ratio=0.9))

    def test_presets_carry_published_hyperparameters(self):
        peft = train_preset("peft")
        assert (peft.epochs, peft.micro_batch, peft.grad_accum_steps) == (80, 4, 8)
        assert peft.effective_batch == 32
        assert (peft.peak_lr, peft.weight_decay) == (1e-4, 0.01)
        assert (peft.warmup_ratio, peft.min_lr_ratio) == (0.03, 0.1)
        assert (peft.label_smoothing, peft.patience, peft.seed) == (0.1, 5, 42)
        assert train_preset("scratch_cnn").patience == 10
        assert train_preset("frozen").effective_batch == 32


class TestAdamW:
    def _scalar_param(self, value):
        return {"theta": Tensor(np.array([value]), requires_grad=True)}

    def test_zero_grad_zero_decay_is_identity(self):
        params = self._scalar_param(1.5)
        opt = AdamW(params, TrainConfig(weight_decay=0.0))
        params["theta"].grad = np.array([0.0])
        opt.step(0.1)
        assert params["theta"].data[0] == 1.5

    def test_pure_decay(self):
        params = self._scalar_param(2.0)
        opt = AdamW(params, TrainConfig(weight_decay=0.01))
        params["theta"].grad = np.array([0.0])
        opt.step(0.1)
        assert params["theta"].data[0] == 2.0 * 0.999

    def test_five_steps_vs_recurrence_oracle(self):
        params = self._scalar_param(0.7)
        cfg = TrainConfig(weight_decay=0.01)
        opt = AdamW(params, cfg)
        for _ in range(5):
            params["theta"].grad = np.array([1.0])
            opt.step(0.01)
        want = adamw_scalar_oracle(0.7, [1.0] * 5, lr=0.01, wd=0.01)
        assert abs(params["theta"].data[0] - want) <= 1e-12

    def test_nonfinite_gradient_names_parameter(self):
        params = {"blocks.0.q": Tensor(np.ones(3), requires_grad=True)}
        opt = AdamW(params, TrainConfig())
        params["blocks.0.q"].grad = np.array([1.0, np.nan, 0.0])
        with pytest.raises(NumericError, match="blocks.0.q"):
            opt.step(0.1)

    def test_quadratic_converges_monotonically(self):
        # small enough lr that the iterate never overshoots the optimum
        theta = Tensor(np.array([3.0]), requires_grad=True)
        opt = AdamW({"theta": theta}, TrainConfig(weight_decay=0.0))
        losses = []
        for _ in range(150):
            losses.append(float(theta.data[0] ** 2))
            theta.grad = 2.0 * theta.data
            opt.step(0.01)
        assert all(a >= b - 1e-12 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 0.5 * losses[0]


class TestEarlyStopper:
    def test_scripted_sequence_stops_after_seven(self):
        accs = [0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6]
        stopper = EarlyStopper(patience=5)
        stopped_at = None
        for epoch, acc in enumerate(accs, start=1):
            if stopper.update(epoch, acc):
                stopped_at = epoch
                break
        assert stopped_at == 7
        assert stopper.best_epoch == 2

    def test_ties_do_not_reset(self):
        stopper = EarlyStopper(patience=2)
        assert not stopper.update(1, 0.5)
        assert not stopper.update(2, 0.5)
        assert stopper.update(3, 0.5)

    def test_never_discards_strictly_better(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            accs = rng.random(20)
            stopper = EarlyStopper(patience=3)
            seen = []
            for epoch, acc in enumerate(accs, start=1):
                seen.append(acc)
                if stopper.update(epoch, float(acc)):
                    break
            assert stopper.best == max(seen)


def linear_data(rng, n, d_in=6, classes=3):
    w = rng.standard_normal((classes, d_in))
    x = rng.standard_normal((n, d_in))
    y = (x @ w.T).argmax(axis=1)
    return x, y


class TestAccumulation:
    def test_accumulated_grads_equal_full_batch(self):
        rng = np.random.default_rng(1)
        x, y = linear_data(rng, 32)
        layer = Linear(Tensor(rng.standard_normal((3, 6)), requires_grad=True),
                       Tensor(np.zeros(3), requires_grad=True))

        def grad_of(batch_x, batch_y):
            layer.weight.grad = None
            layer.bias.grad = None
            with GradTape() as tape:
                loss = T.cross_entropy_label_smoothed(
                    layer.forward(Tensor(batch_x)), batch_y, 0.1)
                tape.backward(loss)
            return layer.weight.grad.copy(), layer.bias.grad.copy()

        gw_full, gb_full = grad_of(x, y)
        acc_w = np.zeros_like(gw_full)
        acc_b = np.zeros_like(gb_full)
        for k in range(8):
            gw, gb = grad_of(x[k * 4:(k + 1) * 4], y[k * 4:(k + 1) * 4])
            acc_w += gw
            acc_b += gb
        acc_w /= 8
        acc_b /= 8
        assert np.abs(acc_w - gw_full).max() <= 1e-10
        assert np.abs(acc_b - gb_full).max() <= 1e-10


def tiny_setup(seed=42, dtype=np.float32, n=48):
    arch = arch_preset("vit_toy")
    model = build_model(arch, prng.substream("init", 0, seed=seed), dtype=dtype)
    head = build_head(toy_head(arch.feature_dim, 9),
                      prng.substream("init", 1, seed=seed), dtype=dtype)
    rng = np.random.default_rng(7)
    imgs = rng.random((n, 3, 32, 32)).astype(dtype)
    labels = rng.integers(0, 9, n)
    train = ArrayDataset(imgs[: n - 16], labels[: n - 16])
    val = ArrayDataset(imgs[n - 16:], labels[n - 16:])
    return model, head, train, val


class TestLoopDeterminism:
    def test_same_seed_bit_identical_history(self):
        cfg = TrainConfig(epochs=3, micro_batch=4, grad_accum_steps=2,
                          peak_lr=1e-3, patience=5, seed=42)
        runs = []
        for _ in range(2):
            model, head, train, val = tiny_setup()
            result = train_loop(model, head, train, val, cfg)
            runs.append(result)
        for a, b in zip(runs[0].history, runs[1].history):
            assert (a.epoch, a.train_loss, a.val_loss, a.val_accuracy, a.lr) == \
                   (b.epoch, b.train_loss, b.val_loss, b.val_accuracy, b.lr)
        for k in runs[0].best_params:
            np.testing.assert_array_equal(runs[0].best_params[k],
                                          runs[1].best_params[k])

    def test_shuffle_stream_reproducible(self):
        a = prng.substream("shuffle", 1, seed=42).permutation(100)
        b = prng.substream("shuffle", 1, seed=42).permutation(100)
        np.testing.assert_array_equal(a, b)
        c = prng.substream("shuffle", 1, seed=43).permutation(100)
        assert not np.array_equal(a, c)

    def test_stream_independence(self):
        before = prng.substream("augment", 5, seed=42).random(10)
        _ = prng.substream("dropout", 0, 0, seed=42).random(10000)  # consume a lot
        after = prng.substream("augment", 5, seed=42).random(10)
        np.testing.assert_array_equal(before, after)

    def test_history_csv_columns(self):
        model, head, train, val = tiny_setup()
        cfg = TrainConfig(epochs=1, micro_batch=8, grad_accum_steps=1, patience=5)
        result = train_loop(model, head, train, val, cfg)
        csv = history_to_csv(result.history)
        assert csv.splitlines()[0] == ",".join(HISTORY_COLUMNS)
        assert len(csv.splitlines()) == len(result.history) + 1


class TestCheckpointResume:
    def test_save_load_save_byte_identical(self, tmp_path):
        model, head, train, val = tiny_setup()
        cfg = TrainConfig(epochs=2, micro_batch=8, grad_accum_steps=1,
                          peak_lr=1e-3, patience=5, seed=42)
        trainer = Trainer(model, head, train, val, cfg)
        trainer.run(stop_after=1)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        trainer.save(p1)
        model2, head2, train2, val2 = tiny_setup()
        trainer2 = Trainer(model2, head2, train2, val2, cfg)
        trainer2.load(p1)
        trainer2.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = TrainConfig(epochs=6, micro_batch=4, grad_accum_steps=2,
                          peak_lr=1e-3, patience=10, seed=42)
        model, head, train, val = tiny_setup(dtype=np.float64)
        straight = Trainer(model, head, train, val, cfg).run()

        model2, head2, train2, val2 = tiny_setup(dtype=np.float64)
        t1 = Trainer(model2, head2, train2, val2, cfg)
        t1.run(stop_after=3)
        t1.save(tmp_path / "mid.ckpt")

        model3, head3, train3, val3 = tiny_setup(dtype=np.float64)
        t2 = Trainer(model3, head3, train3, val3, cfg)
        t2.load(tmp_path / "mid.ckpt")
        resumed = t2.run()

        assert len(straight.history) == len(resumed.history)
        for a, b in zip(straight.history, resumed.history):
            assert (a.train_loss, a.val_loss, a.val_accuracy, a.lr) == \
                   (b.train_loss, b.val_loss, b.val_accuracy, b.lr)
        for k in straight.best_params:
            np.testing.assert_array_equal(straight.best_params[k],
                                          resumed.best_params[k])

    def test_load_onto_mismatched_arch_fails(self, tmp_path):
        model, head, train, val = tiny_setup()
        cfg = TrainConfig(epochs=1, micro_batch=8, grad_accum_steps=1, patience=5)
        trainer = Trainer(model, head, train, val, cfg)
        trainer.run()
        trainer.save(tmp_path / "t.ckpt")

        from dataclasses import replace
        arch = replace(arch_preset("vit_toy"), width=16, heads=2, mlp_hidden=32)
        model2 = build_model(arch, prng.substream("init", 0, seed=1))
        head2 = build_head(toy_head(16, 9), prng.substream("init", 1, seed=1))
        rng = np.random.default_rng(0)
        data = ArrayDataset(rng.random((8, 3, 32, 32)).astype(np.float32),
                            rng.integers(0, 9, 8))
        t2 = Trainer(model2, head2, data, data, cfg)
        from peftkit.errors import CheckpointError, ShapeError
        with pytest.raises((ShapeError, CheckpointError)):
            t2.load(tmp_path / "t.ckpt")


def test_evaluate_rejects_empty_split():
    from peftkit.errors import DataError
    model, head, train, val = tiny_setup()
    empty = ArrayDataset(np.zeros((0, 3, 32, 32), dtype=np.float32),
                         np.zeros(0, dtype=np.int64))
    with pytest.raises(DataError):
        evaluate(model, head, empty)
