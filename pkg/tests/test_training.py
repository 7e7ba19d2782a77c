"""Schedules, loss composition, early stopping, and the training loop."""

import csv

import numpy as np
import pytest

from conftest import make_tiny_arch
from stutterkit import nn
from stutterkit.data import SyntheticConfig, generate_synthetic
from stutterkit.errors import EmptyBatch, InvalidConfig, NumericError
from stutterkit.model import build_model
from stutterkit.training import (
    LOG_COLUMNS,
    EarlyStopper,
    TrainConfig,
    compute_losses,
    dataset_accuracy,
    dataset_stutter_loss,
    early_stop_active,
    lambda_at,
    loss_total,
    make_batch,
    speaker_index_map,
    stage_at,
    train,
    trainable_partitions,
)


def tiny_corpus(n_podcasts=3, clips_per_class=6, seed=0, sigma=0.1):
    cfg = SyntheticConfig(
        n_podcasts=n_podcasts,
        clips_per_class=clips_per_class,
        frames=12,
        n_mfcc=5,
        sigma=sigma,
        seed=seed,
    )
    return generate_synthetic(cfg)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            {"objective": "gan"},
            {"lambda_schedule": "linear"},
            {"lam": -0.1},
            {"lam": 1.5},
            {"max_epochs": 0},
            {"batch_size": 0},
            {"patience": 0},
            {"lr": 0.0},
            {"min_delta": -1e-9},
            {"stage_bounds": (0, 1, 2)},
            {"stage_bounds": (5, 5, 10)},
        ],
    )
    def test_bad_config_rejected(self, kw):
        with pytest.raises(InvalidConfig):
            TrainConfig(**kw).validate()

    def test_defaults_validate(self):
        TrainConfig().validate()


class TestStageSchedule:
    def test_non_adversarial_is_single_stage(self):
        assert stage_at(TrainConfig(objective="baseline"), 0) == "baseline"
        assert stage_at(TrainConfig(objective="mtl"), 99) == "mtl"

    @pytest.mark.parametrize(
        "epoch,stage",
        [
            (0, "speaker_only"),
            (24, "speaker_only"),
            (25, "stutter_only"),
            (49, "stutter_only"),
            (50, "joint_grl"),
            (74, "joint_grl"),
            (75, "recovery"),
            (200, "recovery"),
        ],
    )
    def test_adversarial_stage_boundaries(self, epoch, stage):
        cfg = TrainConfig(objective="adv", stage_bounds=(25, 50, 75))
        assert stage_at(cfg, epoch) == stage

    def test_partitions_per_stage(self):
        cfg = TrainConfig(objective="adv")
        assert trainable_partitions(cfg, "speaker_only") == {"encoder", "speaker"}
        assert trainable_partitions(cfg, "stutter_only") == {"encoder", "fluent", "disfluent"}
        assert trainable_partitions(cfg, "joint_grl") == {
            "encoder", "fluent", "disfluent", "speaker"
        }
        assert trainable_partitions(cfg, "recovery") == {"fluent", "disfluent"}
        frozen_enc = TrainConfig(objective="adv", stage1_trains_encoder=False)
        assert trainable_partitions(frozen_enc, "speaker_only") == {"speaker"}
        with pytest.raises(InvalidConfig):
            trainable_partitions(cfg, "warmup")

    def test_early_stop_arming(self):
        adv = TrainConfig(objective="adv")
        assert not early_stop_active(adv, "speaker_only")
        assert not early_stop_active(adv, "joint_grl")
        assert early_stop_active(adv, "recovery")
        assert early_stop_active(TrainConfig(objective="baseline"), "baseline")
        assert early_stop_active(TrainConfig(objective="mtl"), "mtl")


class TestLambdaSchedule:
    def test_baseline_pins_zero(self):
        cfg = TrainConfig(objective="baseline", lam=0.7)
        assert lambda_at(cfg, 5) == 0.0

    def test_fixed(self):
        cfg = TrainConfig(objective="mtl", lam=0.35)
        assert lambda_at(cfg, 0) == lambda_at(cfg, 50) == 0.35

    def test_decay10_hand_values(self):
        cfg = TrainConfig(objective="mtl", lambda_schedule="decay10")
        assert lambda_at(cfg, 0) == 1.0
        assert lambda_at(cfg, 1) == pytest.approx(0.1, abs=1e-15)
        assert lambda_at(cfg, 3) == pytest.approx(1e-3, abs=1e-15)

    def test_sigmoid_ramp_hand_values(self):
        cfg = TrainConfig(
            objective="adv", lambda_schedule="sigmoid_ramp", gamma=10.0, max_epochs=100
        )
        assert lambda_at(cfg, 0) == 0.0
        # p = 0.5: 2 / (1 + exp(-5)) - 1 = tanh(2.5)
        assert lambda_at(cfg, 50) == pytest.approx(np.tanh(2.5), abs=1e-12)
        assert lambda_at(cfg, 100) == pytest.approx(np.tanh(5.0), abs=1e-12)

    def test_sigmoid_sign_variant_decays_negative(self):
        cfg = TrainConfig(
            objective="adv",
            lambda_schedule="sigmoid_ramp",
            gamma=10.0,
            max_epochs=100,
            sigmoid_paper_sign=True,
        )
        assert lambda_at(cfg, 50) == pytest.approx(-np.tanh(2.5), abs=1e-12)


class TestComputeLosses:
    def test_fluent_binary_hand_value(self):
        lf = np.zeros((1, 2))
        ld = np.zeros((1, 4))
        out = compute_losses(lf, ld, None, y_class=[0])
        assert out.l_fluent == pytest.approx(np.log(2.0), abs=1e-12)
        assert np.allclose(out.dlf, [[-0.5, 0.5]])

    def test_disfluent_mask_and_average(self):
        # three clips: fluent, repetition, block; uniform logits give ln(4)
        lf = np.zeros((3, 2))
        ld = np.zeros((3, 4))
        out = compute_losses(lf, ld, None, y_class=[0, 1, 3])
        assert out.n == 3 and out.n_disfluent == 2
        assert out.l_disfluent == pytest.approx(np.log(4.0), abs=1e-12)
        assert np.array_equal(out.dld[0], np.zeros(4))
        # each disfluent row is (softmax - onehot) / n_disfluent
        expect = (np.full(4, 0.25) - np.eye(4)[0]) / 2
        assert np.allclose(out.dld[1], expect, atol=1e-12)

    def test_all_fluent_batch_zeroes_disfluent_loss(self):
        out = compute_losses(np.zeros((2, 2)), np.zeros((2, 4)), None, y_class=[0, 0])
        assert out.l_disfluent == 0.0
        assert out.n_disfluent == 0
        assert np.array_equal(out.dld, np.zeros((2, 4)))

    def test_speaker_loss_optional(self):
        lf, ld = np.zeros((2, 2)), np.zeros((2, 4))
        no_spk = compute_losses(lf, ld, None, y_class=[0, 1])
        assert no_spk.l_speaker == 0.0 and no_spk.dls is None
        ls = np.zeros((2, 3))
        with_spk = compute_losses(lf, ld, ls, y_class=[0, 1], y_speaker=[0, 2])
        assert with_spk.l_speaker == pytest.approx(np.log(3.0), abs=1e-12)
        assert with_spk.dls.shape == (2, 3)

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            compute_losses(np.zeros((0, 2)), np.zeros((0, 4)), None, y_class=[])


class TestLossTotal:
    def test_known_combination(self):
        assert loss_total("mtl", 0.3, 1.2, 0.8, 1.0) == pytest.approx(0.7 * 2.0 + 0.3 * 1.0)

    def test_stage_shapes(self):
        assert loss_total("baseline", 0.5, 1.0, 0.5, 9.0) == 1.5
        assert loss_total("stutter_only", 0.5, 1.0, 0.5, 9.0) == 1.5
        assert loss_total("recovery", 0.5, 1.0, 0.5, 9.0) == 1.5
        assert loss_total("speaker_only", 0.5, 1.0, 0.5, 9.0) == 9.0
        assert loss_total("joint_grl", 0.25, 1.0, 0.5, 2.0) == pytest.approx(1.5 - 0.5)


class TestEarlyStopper:
    def test_improvement_resets_patience(self):
        s = EarlyStopper(patience=2, min_delta=1e-6)
        assert s.update(1.0)
        assert not s.update(1.0)  # no improvement
        assert s.update(0.9)  # reset
        assert not s.should_stop
        assert not s.update(0.9)
        assert not s.update(0.9)
        assert s.should_stop

    def test_min_delta_boundary(self):
        s = EarlyStopper(patience=1, min_delta=0.1)
        s.update(1.0)
        assert not s.update(0.9)  # exactly min_delta is not an improvement
        assert s.update(0.85)


class TestBatching:
    def test_speaker_map_is_sorted(self):
        records = tiny_corpus(n_podcasts=3)
        assert speaker_index_map(records) == {"pod0": 0, "pod1": 1, "pod2": 2}

    def test_make_batch_crops_to_shortest(self):
        records = tiny_corpus()
        records[0].features = records[0].features[:, :9]
        x, y, ys = make_batch(records, [0, 1, 2], speaker_map=speaker_index_map(records))
        assert x.shape == (3, 5, 9)
        assert x.dtype == np.float32
        assert y.shape == (3,) and ys.shape == (3,)
        assert ys[0] == 0


class TestDatasetMetrics:
    def test_stutter_loss_matches_direct_computation(self, rng):
        records = tiny_corpus()
        arch = make_tiny_arch()
        model = build_model(arch, seed=0)
        got = dataset_stutter_loss(model, records, batch_size=7)

        x, y, _ = make_batch(records, range(len(records)))
        _, lf, ld, _ = model.forward(x)
        losses_f, _ = nn.softmax_cross_entropy(lf, (y != 0).astype(np.intp))
        dis = np.flatnonzero(y != 0)
        losses_d, _ = nn.softmax_cross_entropy(ld[dis], y[dis] - 1)
        want = float(losses_f.mean()) + float(losses_d.mean())
        assert got == pytest.approx(want, rel=1e-6)

    def test_accuracy_matches_predictions(self):
        records = tiny_corpus()
        model = build_model(make_tiny_arch(), seed=0)
        got = dataset_accuracy(model, records, batch_size=8)
        x, y, _ = make_batch(records, range(len(records)))
        want = float((model.predict_batch(x) == y).mean())
        assert got == pytest.approx(want, abs=1e-12)


class TestTrainLoop:
    def split(self, records):
        valid = records[::5]
        train_recs = [r for i, r in enumerate(records) if i % 5]
        return train_recs, valid

    def test_two_runs_are_bit_identical(self, tmp_path):
        records = tiny_corpus()
        train_recs, valid = self.split(records)
        outputs = []
        for run in range(2):
            model = build_model(make_tiny_arch(), seed=4)
            log_path = tmp_path / f"run{run}.csv"
            cfg = TrainConfig(
                objective="mtl", lam=0.4, max_epochs=3, batch_size=8, lr=1e-2,
                seed=7, log_path=str(log_path),
            )
            result = train(model, train_recs, valid, cfg)
            outputs.append((log_path.read_bytes(), result.model.snapshot()))
        assert outputs[0][0] == outputs[1][0]
        for name, arr in outputs[0][1].items():
            assert np.array_equal(arr, outputs[1][1][name]), name

    def test_log_format(self, tmp_path):
        records = tiny_corpus()
        train_recs, valid = self.split(records)
        log_path = tmp_path / "log.csv"
        cfg = TrainConfig(
            objective="mtl", lam=0.25, max_epochs=2, batch_size=8, lr=1e-2,
            seed=0, log_path=str(log_path),
        )
        result = train(build_model(make_tiny_arch(), seed=0), train_recs, valid, cfg)
        with open(log_path) as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == LOG_COLUMNS
        assert len(rows) == 1 + len(result.history)
        first = dict(zip(LOG_COLUMNS, rows[1]))
        assert first["epoch"] == "0" and first["stage"] == "mtl"
        assert first["lambda"] == "0.25"
        float(first["l_total"])  # formatted as plain decimals
        assert "." in first["valid_acc"]

    def test_lambda_zero_mtl_matches_baseline_bitwise(self):
        # dropout 0 so the unused speaker head does not consume mask draws
        records = tiny_corpus()
        train_recs, valid = self.split(records)
        snaps = {}
        for objective in ("baseline", "mtl"):
            arch = make_tiny_arch(dropout=0.0)
            model = build_model(arch, seed=2)
            cfg = TrainConfig(
                objective=objective, lam=0.0, max_epochs=3, batch_size=8,
                lr=1e-2, seed=3,
            )
            result = train(model, train_recs, valid, cfg)
            snaps[objective] = (result.model.snapshot(), result.history)
        base_snap, base_hist = snaps["baseline"]
        mtl_snap, mtl_hist = snaps["mtl"]
        # parameters agree bitwise everywhere: zero-weighted speaker gradients
        # give exactly-zero optimizer updates. The speaker head's bn running
        # stats legitimately differ (mtl runs that head in train mode), but
        # they sit outside the stutter path.
        for name, arr in base_snap.items():
            if name.startswith("speaker.") and "running" in name:
                continue
            assert np.array_equal(arr, mtl_snap[name]), name
        for a, b in zip(base_hist, mtl_hist):
            assert a.l_fluent == b.l_fluent
            assert a.l_disfluent == b.l_disfluent
            assert a.valid_stutter_loss == b.valid_stutter_loss
            assert a.valid_acc == b.valid_acc

    def test_stage_freezing_is_bitwise(self):
        records = tiny_corpus()
        train_recs, valid = self.split(records)
        arch = make_tiny_arch()
        model = build_model(arch, seed=1)
        cfg = TrainConfig(
            objective="adv", lam=0.3, max_epochs=4, batch_size=8, lr=1e-2,
            seed=5, stage_bounds=(1, 2, 3), stage1_trains_encoder=False,
        )
        epoch_snaps = []
        train(model, train_recs, valid, cfg,
              callback=lambda rec, m: epoch_snaps.append((rec.stage, m.snapshot())))
        stages = [s for s, _ in epoch_snaps]
        assert stages == ["speaker_only", "stutter_only", "joint_grl", "recovery"]
        init = None  # compare epoch 0 against the untouched partitions of epoch 1
        spk0 = epoch_snaps[0][1]
        stu1 = epoch_snaps[1][1]
        grl2 = epoch_snaps[2][1]
        rec3 = epoch_snaps[3][1]
        # speaker_only with a frozen encoder: only speaker.* may move next
        for name, arr in stu1.items():
            if name.startswith("speaker."):
                assert np.array_equal(arr, spk0[name]), name
        # recovery freezes the encoder and speaker head completely
        for name, arr in rec3.items():
            if name.startswith(("encoder.", "speaker.")):
                assert np.array_equal(arr, grl2[name]), name

    def test_speaker_only_stage_leaves_stutter_path_untouched(self):
        records = tiny_corpus()
        train_recs, valid = self.split(records)
        model = build_model(make_tiny_arch(), seed=1)
        before = model.snapshot()
        cfg = TrainConfig(
            objective="adv", lam=0.3, max_epochs=2, batch_size=8, lr=1e-2,
            seed=5, stage_bounds=(2, 3, 4), stage1_trains_encoder=False,
        )
        result = train(model, train_recs, valid, cfg)
        # the validation stutter loss cannot move while encoder and stutter
        # heads are frozen
        assert result.history[0].valid_stutter_loss == result.history[1].valid_stutter_loss
        for name, arr in model.state_arrays().items():
            if not name.startswith("speaker."):
                assert np.array_equal(arr, before[name]), name

    def test_best_epoch_restored(self):
        records = tiny_corpus()
        train_recs, valid = self.split(records)
        model = build_model(make_tiny_arch(), seed=3)
        cfg = TrainConfig(
            objective="baseline", max_epochs=6, batch_size=8, lr=5e-2, seed=2,
            patience=2,
        )
        snaps = []
        result = train(model, train_recs, valid, cfg,
                       callback=lambda rec, m: snaps.append(m.snapshot()))
        losses = [r.valid_stutter_loss for r in result.history]
        assert result.best_epoch == int(np.argmin(losses))
        assert result.best_valid_stutter_loss == pytest.approx(min(losses))
        best = snaps[result.best_epoch]
        for name, arr in model.state_arrays().items():
            assert np.array_equal(arr, best[name]), name

    def test_early_stop_honors_patience(self):
        records = tiny_corpus()
        train_recs, valid = self.split(records)
        model = build_model(make_tiny_arch(), seed=3)
        # min_delta of 1 is never beaten after the first epoch
        cfg = TrainConfig(
            objective="baseline", max_epochs=50, batch_size=8, lr=1e-3, seed=2,
            patience=3, min_delta=1.0,
        )
        result = train(model, train_recs, valid, cfg)
        assert result.stopped_epoch == 3
        assert len(result.history) == 4

    def test_speaker_count_mismatch_rejected_for_mtl(self):
        records = tiny_corpus(n_podcasts=2)
        model = build_model(make_tiny_arch(n_podcasts=3), seed=0)
        cfg = TrainConfig(objective="mtl", max_epochs=1)
        with pytest.raises(InvalidConfig, match="podcasts"):
            train(model, records, [], cfg)

    def test_baseline_tolerates_speaker_count_mismatch(self):
        records = tiny_corpus(n_podcasts=2)
        model = build_model(make_tiny_arch(n_podcasts=3), seed=0)
        cfg = TrainConfig(objective="baseline", max_epochs=1, batch_size=8)
        result = train(model, records, [], cfg)
        assert result.history[0].l_speaker == 0.0

    def test_empty_training_set_rejected(self):
        model = build_model(make_tiny_arch(), seed=0)
        with pytest.raises(EmptyBatch):
            train(model, [], [], TrainConfig())

    def test_trailing_singleton_batch_dropped(self, caplog):
        records = tiny_corpus(n_podcasts=3, clips_per_class=5)[:17]
        model = build_model(make_tiny_arch(), seed=0)
        cfg = TrainConfig(objective="baseline", max_epochs=1, batch_size=8, seed=0)
        with caplog.at_level("WARNING"):
            train(model, records, [], cfg)
        assert "size-1" in caplog.text

    def test_nan_loss_raises_numeric_error(self):
        records = tiny_corpus()
        records[3].features = records[3].features.copy()
        records[3].features[0, 0] = np.nan
        model = build_model(make_tiny_arch(), seed=0)
        cfg = TrainConfig(objective="baseline", max_epochs=2, batch_size=8, seed=0)
        with pytest.raises(NumericError, match="non-finite"):
            train(model, records, [], cfg)

    def test_no_validation_set_runs_to_max_epochs(self):
        records = tiny_corpus()
        model = build_model(make_tiny_arch(), seed=0)
        cfg = TrainConfig(objective="baseline", max_epochs=3, batch_size=8, seed=0)
        result = train(model, records, [], cfg)
        assert len(result.history) == 3
        assert result.best_epoch is None
        assert np.isnan(result.history[0].valid_stutter_loss)
