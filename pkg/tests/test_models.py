import math
import warnings

import numpy as np
import pytest
import torch

from ttakit import models, ranking
from ttakit.data import gen_synthetic
from ttakit.errors import ConsistencyError, DimensionError, FormatError, ParameterError
from ttakit.images import default_space
from ttakit.labels import LossLabelRecord, LabelStore, Perturbation, normalize_relative
from ttakit.models import (
    LossPredictor,
    TargetClassifier,
    TrainConfig,
    load_checkpoint,
    param_fingerprint,
    predictor_forward,
    save_checkpoint,
    target_forward,
    target_forward_batch,
    train_predictor,
    train_target,
)

torch.set_num_threads(1)

TINY = TrainConfig(epochs=2, batch_size=16, ema_momentum=0.5, learning_rate=0.01)


def tiny_data(n=48, classes=4, side=16, seed=0):
    return gen_synthetic(n, classes, side, seed)


def make_store(data, space, raws_fn, target_fp="t" * 16):
    store = LabelStore(space.fingerprint(), target_fp, len(space))
    rng = np.random.default_rng(0)
    for i, img_id in enumerate(data.ids):
        states = [Perturbation()]
        states.append(Perturbation("gaussian_noise", 3, int(rng.integers(1 << 30))))
        states.append(Perturbation("contrast", 2, int(rng.integers(1 << 30))))
        for pert in states:
            raw = raws_fn(int(img_id), pert)
            store.add(
                LossLabelRecord(int(img_id), pert, raw, normalize_relative(raw))
            )
    return store


class TestForward:
    def test_zeroed_head_gives_uniform(self):
        model = TargetClassifier(class_count=6, input_side=16, seed=0)
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
        img = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
        probs = target_forward(model, img)
        np.testing.assert_allclose(probs, 1 / 6, atol=1e-7)

    def test_probs_sum_to_one(self):
        model = TargetClassifier(class_count=10, input_side=16, seed=1)
        imgs = np.random.default_rng(1).random((8, 16, 16, 3)).astype(np.float32)
        probs = target_forward_batch(model, imgs)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_shape_mismatch_rejected(self):
        model = TargetClassifier(class_count=4, input_side=16, seed=0)
        with pytest.raises(DimensionError):
            target_forward(model, np.zeros((8, 8, 3), dtype=np.float32))
        with pytest.raises(DimensionError):
            target_forward(model, np.zeros((16, 16, 1), dtype=np.float32))

    def test_predictor_output_length_and_determinism(self):
        space = default_space()
        model = LossPredictor(len(space), input_side=16, seed=2)
        img = np.random.default_rng(2).random((16, 16, 3)).astype(np.float32)
        a = predictor_forward(model, img)
        b = predictor_forward(model, img)
        assert a.shape == (12,)
        assert np.all(np.isfinite(a))
        np.testing.assert_array_equal(a, b)

    def test_predictor_resizes_input(self):
        model = LossPredictor(12, input_side=16, seed=3)
        img = np.random.default_rng(3).random((24, 24, 3)).astype(np.float32)
        assert predictor_forward(model, img).shape == (12,)


class TestTrainTarget:
    def test_zero_epochs_gives_chance_accuracy(self):
        data = tiny_data(n=64)
        test = gen_synthetic(400, 4, 16, seed=9)
        model = train_target(data, TrainConfig(epochs=0, seed=5))
        acc = (target_forward_batch(model, test.images).argmax(1) == test.labels).mean()
        assert abs(acc - 0.25) <= 0.05

    def test_loss_decreases(self):
        data = tiny_data(n=96)
        model = train_target(data, TrainConfig(epochs=4, batch_size=32, seed=0))
        losses = model.train_metrics["epoch_losses"]
        assert losses[-1] < losses[0]

    def test_determinism_same_seed(self, tmp_path):
        data = tiny_data()
        a = train_target(data, TINY)
        b = train_target(data, TINY)
        save_checkpoint(a, tmp_path / "a.ckpt", seed=TINY.seed)
        save_checkpoint(b, tmp_path / "b.ckpt", seed=TINY.seed)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_different_seed_differs(self):
        data = tiny_data()
        a = train_target(data, TrainConfig(epochs=1, batch_size=16, seed=1))
        b = train_target(data, TrainConfig(epochs=1, batch_size=16, seed=2))
        assert param_fingerprint(a) != param_fingerprint(b)

    def test_empty_dataset_rejected(self):
        data = tiny_data(n=4, classes=2)
        with pytest.raises(ParameterError):
            train_target(data.subset(np.array([], dtype=np.int64)), TINY)

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            TrainConfig(learning_rate=0.0).validate()
        with pytest.raises(ParameterError):
            TrainConfig(dropout=1.0).validate()
        with pytest.raises(ParameterError):
            TrainConfig(batch_repetition=0).validate()


class TestTrainPredictor:
    def setup_method(self):
        self.space = default_space()
        self.data = tiny_data(n=24, side=16)

    def rig_raws(self, image_id, pert):
        # Learnable structure: clean states prefer identity (last index),
        # noisy states prefer the first sharpness op.
        rng = np.random.default_rng(image_id * 7 + pert.severity)
        raw = rng.uniform(1.0, 2.0, size=12)
        if pert.is_clean():
            raw[11] = 0.2
        else:
            raw[7] = 0.2
        return raw

    def test_trains_and_improves_spearman(self):
        store = make_store(self.data, self.space, self.rig_raws)
        cfg = TrainConfig(epochs=30, batch_size=16, batch_repetition=2, seed=0,
                          learning_rate=0.03, ema_momentum=0.9)
        model = train_predictor(
            store, self.data, cfg, ranking.RankingObjectiveConfig(), self.space, input_side=16
        )
        rhos = model.train_metrics["epoch_spearman"]
        assert rhos[-1] > 0.3
        assert rhos[-1] > rhos[0]

    def test_missing_ids_rejected(self):
        store = make_store(self.data.subset(np.arange(10)), self.space, self.rig_raws)
        with pytest.raises(ConsistencyError):
            train_predictor(
                store, self.data, TINY, ranking.RankingObjectiveConfig(), self.space, input_side=16
            )

    def test_single_record_trains_without_error(self):
        store = LabelStore(self.space.fingerprint(), "t" * 16, 12)
        raw = np.linspace(0.1, 1.2, 12)
        store.add(LossLabelRecord(0, Perturbation(), raw, normalize_relative(raw)))
        one = self.data.subset(np.array([0]))
        cfg = TrainConfig(epochs=1, batch_size=4, seed=0, ema_momentum=0.0)
        model = train_predictor(
            store, one, cfg, ranking.RankingObjectiveConfig(), self.space, input_side=16
        )
        assert model.output_dim == 12

    def test_degenerate_batches_skipped_with_warning(self):
        store = make_store(
            self.data, self.space, lambda i, p: np.full(12, 0.7)
        )
        cfg = TrainConfig(epochs=1, batch_size=8, seed=0, ema_momentum=0.0)
        with pytest.warns(UserWarning, match="degenerate"):
            model = train_predictor(
                store, self.data, cfg, ranking.RankingObjectiveConfig(), self.space, input_side=16
            )
        assert math.isnan(model.train_metrics["epoch_losses"][0])

    def test_sample_copies_distinct_states(self):
        store = make_store(self.data, self.space, self.rig_raws)
        records = store.records_by_id()[0]
        rng = np.random.default_rng(0)
        for _ in range(50):
            picks = models._sample_copies(records, 2, 0.25, rng)
            assert len(picks) == 2
            assert picks[0] != picks[1]

    def test_sample_copies_clean_probability(self):
        store = make_store(self.data, self.space, self.rig_raws)
        records = store.records_by_id()[0]
        clean_idx = next(
            i for i, r in enumerate(records) if r.perturbation.is_clean()
        )
        rng = np.random.default_rng(1)
        hits = sum(
            models._sample_copies(records, 1, 0.25, rng)[0] == clean_idx
            for _ in range(2000)
        )
        assert abs(hits / 2000 - 0.25) < 0.04

    def test_batch_composition_math(self):
        # batch 64 with m=2 -> 32 unique images per step
        cfg = TrainConfig(batch_size=64, batch_repetition=2)
        assert cfg.batch_size // cfg.batch_repetition == 32

    def test_target_untouched_by_predictor_training(self):
        target = train_target(self.data, TINY)
        fp_before = param_fingerprint(target)
        store = make_store(self.data, self.space, self.rig_raws)
        train_predictor(
            store, self.data, TrainConfig(epochs=1, batch_size=8, seed=0),
            ranking.RankingObjectiveConfig(), self.space, input_side=16,
        )
        assert param_fingerprint(target) == fp_before


class TestCheckpoints:
    def test_round_trip_bit_identical_outputs(self, tmp_path):
        data = tiny_data()
        model = train_target(data, TINY)
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p, seed=TINY.seed, metrics={"acc": 0.9})
        back, desc = load_checkpoint(p)
        assert desc["seed"] == TINY.seed
        assert desc["metrics"] == {"acc": 0.9}
        imgs = data.images[:5]
        np.testing.assert_array_equal(
            target_forward_batch(model, imgs), target_forward_batch(back, imgs)
        )

    def test_predictor_round_trip(self, tmp_path):
        model = LossPredictor(12, input_side=16, seed=7)
        p = tmp_path / "p.ckpt"
        save_checkpoint(model, p)
        back, desc = load_checkpoint(p)
        img = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
        np.testing.assert_array_equal(predictor_forward(model, img), predictor_forward(back, img))

    def test_corrupted_file_rejected(self, tmp_path):
        model = LossPredictor(12, input_side=16)
        p = tmp_path / "c.ckpt"
        save_checkpoint(model, p)
        raw = bytearray(p.read_bytes())
        raw[30] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_checkpoint(p)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(FormatError):
            load_checkpoint(p)


class TestCostBound:
    def test_predictor_macs_within_ten_percent_of_target(self):
        target = TargetClassifier(class_count=10, input_side=32)
        predictor = LossPredictor(12, input_side=32)
        ratio = predictor.mac_count() / target.mac_count()
        assert ratio <= 0.10

    def test_mac_count_formula(self):
        # single block: 9 * cin * cout * side^2 + head
        m = TargetClassifier(class_count=2, input_side=8, in_channels=1, channels=(4,))
        assert m.mac_count() == 9 * 1 * 4 * 64 + 4 * 2


class TestGradientCheck:
    def rel_err_quantile(self, model, objective_fn, params_cap=1000):
        n_params = sum(p.numel() for p in model.parameters())
        assert n_params <= params_cap
        model.double()
        loss = objective_fn(model)
        loss.backward()
        analytic = torch.cat([p.grad.flatten() for p in model.parameters()]).numpy()
        flats = [p for p in model.parameters()]
        fd = np.zeros_like(analytic)
        h = 1e-6
        i = 0
        for p in flats:
            flat = p.data.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + h
                up = objective_fn(model).item()
                flat[j] = orig - h
                down = objective_fn(model).item()
                flat[j] = orig
                fd[i] = (up - down) / (2 * h)
                i += 1
        rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-8)
        return rel

    def test_target_cross_entropy_gradients(self):
        torch.manual_seed(0)
        model = TargetClassifier(class_count=3, input_side=8, in_channels=1, channels=(2, 3), seed=0)
        imgs = torch.rand(4, 1, 8, 8, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 0])

        def objective(m):
            return torch.nn.functional.cross_entropy(m(imgs), labels)

        rel = self.rel_err_quantile(model, objective)
        assert (rel < 1e-3).mean() >= 0.95

    def test_predictor_ranking_gradients(self):
        torch.manual_seed(1)
        model = LossPredictor(5, input_side=8, in_channels=1, channels=(2, 3), tap_width=4, seed=1)
        model.eval()  # disable feature dropout for a deterministic objective
        imgs = torch.rand(3, 1, 8, 8, dtype=torch.float64)
        truth = np.array([0.3, 0.1, 0.25, 0.2, 0.15])

        def objective(m):
            scores = m(imgs)
            rel = torch.softmax(scores, dim=1)
            losses = [ranking.soft_spearman_loss(rel[i], truth, 0.1) for i in range(3)]
            return torch.stack(losses).mean()

        rel = self.rel_err_quantile(model, objective)
        assert (rel < 1e-3).mean() >= 0.95


class TestEma:
    def test_single_step_debias_recovers_params(self):
        model = LossPredictor(4, input_side=8, channels=(2,), tap_width=3, seed=0)
        ema = models._Ema(model, momentum=0.9)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(1.0)
        ema.update(model)
        expected = [p.detach().clone() for p in model.parameters()]
        ema.copy_to(model)
        for p, e in zip(model.parameters(), expected):
            torch.testing.assert_close(p, e)
