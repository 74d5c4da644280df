"""Optimizer, schedule, and training-loop tests."""

import numpy as np
import pytest

from flowcast.data import generate_synthetic_family, inject_gaps, make_samples
from flowcast.lstm import ModelConfig, ParameterSet, init_parameters
from flowcast.training import (DivergenceError, NonFiniteGradientError,
                               OptimizerState, TrainConfig, adam_step,
                               clip_gradients, evaluate, evaluate_samples,
                               lr_schedule, train, write_training_log)


def tiny_fixture(seed=0, n_basins=1, n_days=120, train_days=90):
    ds = generate_synthetic_family(seed=seed, n_basins=n_basins, n_days=n_days,
                                   train_days=train_days)
    mc = ModelConfig(input_dim=4, hidden_dim=6, num_layers=1, sequence_length=10)
    return ds, mc, make_samples(ds, "train", mc)


def zero_like(params):
    return ParameterSet.from_flat(params.config, np.zeros(params.n_parameters))


class TestAdam:
    def test_zero_gradients_leave_params_unchanged(self):
        cfg = ModelConfig(input_dim=2, hidden_dim=3, sequence_length=4)
        p = init_parameters(cfg, 0)
        p2, s2 = adam_step(p, zero_like(p), OptimizerState.zeros(p), lr=1e-3)
        np.testing.assert_array_equal(p2.flatten(), p.flatten())
        assert s2.step == 1

    def test_zero_gradients_decay_existing_moments(self):
        # Standard Adam: accumulated momentum keeps decaying (and with
        # momentum present, parameters legitimately keep moving).
        cfg = ModelConfig(input_dim=2, hidden_dim=3, sequence_length=4)
        p = init_parameters(cfg, 0)
        state = OptimizerState.zeros(p)
        state.m[:] = 0.5
        state.v[:] = 0.25
        _, s2 = adam_step(p, zero_like(p), state, lr=1e-3)
        np.testing.assert_allclose(s2.m, 0.45, atol=1e-15)
        np.testing.assert_allclose(s2.v, 0.25 * 0.999, atol=1e-15)

    def test_single_step_unit_gradient(self):
        # One scalar-style check: bias-corrected m/sqrt(v) is exactly 1,
        # so the very first update equals -lr (up to eps).
        cfg = ModelConfig(input_dim=1, hidden_dim=1, sequence_length=1)
        p = zero_like(init_parameters(cfg, 0))
        g = ParameterSet.from_flat(cfg, np.ones(p.n_parameters))
        p2, _ = adam_step(p, g, OptimizerState.zeros(p), lr=0.001)
        np.testing.assert_allclose(p2.flatten(), -0.001, rtol=1e-6)

    def test_deterministic(self):
        cfg = ModelConfig(input_dim=2, hidden_dim=3, sequence_length=4)
        p = init_parameters(cfg, 0)
        g = ParameterSet.from_flat(cfg, np.linspace(-1, 1, p.n_parameters))
        a, _ = adam_step(p, g, OptimizerState.zeros(p), lr=1e-3)
        b, _ = adam_step(p, g, OptimizerState.zeros(p), lr=1e-3)
        np.testing.assert_array_equal(a.flatten(), b.flatten())

    def test_non_finite_gradient_names_block(self):
        cfg = ModelConfig(input_dim=2, hidden_dim=3, sequence_length=4)
        p = init_parameters(cfg, 0)
        g = zero_like(p)
        g.layers[0].w_h[1, 2] = np.inf
        with pytest.raises(NonFiniteGradientError, match="layer0.w_h"):
            adam_step(p, g, OptimizerState.zeros(p), lr=1e-3)

    def test_step_counter_increments(self):
        cfg = ModelConfig(input_dim=2, hidden_dim=2, sequence_length=2)
        p = init_parameters(cfg, 0)
        state = OptimizerState.zeros(p)
        for expected in (1, 2, 3):
            p, state = adam_step(p, zero_like(p), state, lr=1e-3)
            assert state.step == expected


class TestClip:
    def test_norm_unchanged_below_threshold(self):
        cfg = ModelConfig(input_dim=2, hidden_dim=2, sequence_length=2)
        g = zero_like(init_parameters(cfg, 0))
        g.layers[0].w_x[0, 0] = 0.5
        clipped, norm = clip_gradients(g, max_norm=1.0)
        assert norm == 0.5
        assert clipped.layers[0].w_x[0, 0] == 0.5

    def test_scaled_to_threshold(self):
        cfg = ModelConfig(input_dim=2, hidden_dim=2, sequence_length=2)
        g = zero_like(init_parameters(cfg, 0))
        g.layers[0].w_x[:] = 1.0
        _, norm = clip_gradients(g, max_norm=1.0)
        assert norm > 1.0
        new_norm = float(np.linalg.norm(g.flatten()))
        assert new_norm == pytest.approx(1.0, abs=1e-12)


class TestSchedule:
    def test_paper_values(self):
        cfg = TrainConfig()
        assert lr_schedule(0, cfg) == 0.001
        assert lr_schedule(1, cfg) == 0.0005
        assert lr_schedule(29, cfg) == 0.0005

    def test_configurable(self):
        cfg = TrainConfig(lr_first_epoch=0.01, lr_rest=0.002)
        assert lr_schedule(0, cfg) == 0.01
        assert lr_schedule(5, cfg) == 0.002

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            lr_schedule(-1, TrainConfig())


class TestTrainLoop:
    def test_zero_epochs_returns_initial_params(self):
        ds, mc, samples = tiny_fixture()
        tc = TrainConfig(epochs=0, seed=3)
        run = train(mc, samples, None, tc)
        expected = init_parameters(mc, 3)
        np.testing.assert_array_equal(run.params.flatten(), expected.flatten())
        assert run.epoch_losses == [] and run.epoch_lrs == []

    def test_bitwise_reproducible(self):
        ds, mc, samples = tiny_fixture()
        tc = TrainConfig(epochs=3, batch_size=16, seed=5)
        a = train(mc, samples, None, tc)
        b = train(mc, samples, None, tc)
        np.testing.assert_array_equal(a.params.flatten(), b.params.flatten())
        assert a.epoch_losses == b.epoch_losses

    def test_loss_improves_on_overfit_fixture(self):
        ds, mc, samples = tiny_fixture()
        tc = TrainConfig(epochs=30, batch_size=32, seed=1)
        run = train(mc, samples, None, tc)
        assert run.epoch_losses[-1] < run.epoch_losses[0]

    def test_recorded_lrs_follow_schedule(self):
        ds, mc, samples = tiny_fixture()
        tc = TrainConfig(epochs=4, batch_size=32, seed=1)
        run = train(mc, samples, None, tc)
        assert run.epoch_lrs == [0.001, 0.0005, 0.0005, 0.0005]

    def test_clip_hook_sees_bounded_norms(self):
        ds, mc, samples = tiny_fixture()
        tc = TrainConfig(epochs=2, batch_size=32, seed=1, clip_norm=0.5)
        seen = []
        train(mc, samples, None, tc, on_step=seen.append)
        assert len(seen) > 0
        for info in seen:
            assert info.clipped_norm <= tc.clip_norm + 1e-12

    def test_freeze_representation_only_updates_head(self):
        ds, mc, samples = tiny_fixture()
        initial = init_parameters(mc, 9)
        tc = TrainConfig(epochs=2, batch_size=32, seed=9)
        run = train(mc, samples, None, tc, initial_params=initial,
                    freeze_representation=True)
        assert run.params.representation_hash() == initial.representation_hash()
        assert not np.array_equal(run.params.head.w, initial.head.w)

    def test_validation_summaries_recorded(self):
        ds, mc, samples = tiny_fixture(n_basins=3)
        val = samples.subset_by_basins([ds.basin_ids[2]])
        tr = samples.subset_by_basins(ds.basin_ids[:2])
        tc = TrainConfig(epochs=2, batch_size=32, seed=1)
        run = train(mc, tr, val, tc)
        assert len(run.val_summaries) == 2
        assert all(s is not None for s in run.val_summaries)

    def test_keep_best_tracks_best_validation_median(self):
        ds, mc, samples = tiny_fixture(n_basins=3)
        val = samples.subset_by_basins([ds.basin_ids[2]])
        tr = samples.subset_by_basins(ds.basin_ids[:2])
        tc = TrainConfig(epochs=4, batch_size=32, seed=1)
        run = train(mc, tr, val, tc, keep_best=True)
        assert run.best_params is not None
        best_median = max(s.median for s in run.val_summaries)
        per_basin, summary = evaluate_samples(run.best_params, val)
        assert summary.median == best_median

    def test_keep_best_without_validation_is_none(self):
        ds, mc, samples = tiny_fixture()
        run = train(mc, samples, None, TrainConfig(epochs=1, batch_size=32, seed=1),
                    keep_best=True)
        assert run.best_params is None

    @pytest.mark.filterwarnings("ignore:overflow")
    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_divergence_carries_last_params(self):
        ds, mc, samples = tiny_fixture()
        tc = TrainConfig(epochs=5, batch_size=32, seed=1, lr_first_epoch=1e200,
                         lr_rest=1e200, clip_norm=1e300)
        with pytest.raises(DivergenceError) as err:
            train(mc, samples, None, tc)
        assert np.all(np.isfinite(err.value.last_params.flatten()))

    def test_empty_samples_rejected(self):
        ds, mc, samples = tiny_fixture()
        empty = samples.subset_by_basins([])
        with pytest.raises(ValueError):
            train(mc, empty, None, TrainConfig(epochs=1))

    def test_max_batches_cap(self):
        ds, mc, samples = tiny_fixture()
        tc = TrainConfig(epochs=1, batch_size=8, seed=1, max_batches_per_epoch=2)
        seen = []
        train(mc, samples, None, tc, on_step=seen.append)
        assert len(seen) == 2

    def test_mse_loss_option(self):
        ds, mc, samples = tiny_fixture()
        tc = TrainConfig(epochs=2, batch_size=32, seed=1, loss="mse")
        run = train(mc, samples, None, tc)
        assert all(np.isfinite(l) for l in run.epoch_losses)


class TestEvaluate:
    def test_memorizing_params_score_near_one(self):
        ds = generate_synthetic_family(seed=0, n_basins=1, n_days=200, train_days=160)
        mc = ModelConfig(input_dim=4, hidden_dim=16, sequence_length=30)
        samples = make_samples(ds, "train", mc)
        tc = TrainConfig(epochs=150, batch_size=16, seed=1,
                         lr_first_epoch=3e-3, lr_rest=1.5e-3)
        run = train(mc, samples, None, tc)
        per_basin, summary = evaluate_samples(run.params, samples)
        assert summary.median > 0.85
        assert summary.median == per_basin[ds.basin_ids[0]]

    def test_read_only(self):
        ds, mc, samples = tiny_fixture()
        p = init_parameters(mc, 2)
        before = p.flatten().copy()
        evaluate_samples(p, samples)
        evaluate(p, ds, "test", mc)
        np.testing.assert_array_equal(p.flatten(), before)

    def test_all_masked_basin_excluded_with_warning(self):
        ds = generate_synthetic_family(seed=4, n_basins=2, n_days=120, train_days=90)
        mc = ModelConfig(input_dim=4, hidden_dim=6, sequence_length=10)
        sel = ds.test_range.contains(ds.basins[0].dates)
        ds.basins[0].discharge.mask[sel] = False
        p = init_parameters(mc, 0)
        with pytest.warns(UserWarning, match="excluded"):
            result = evaluate(p, ds, "test", mc)
        assert ds.basin_ids[0] not in result.per_basin_nse
        assert len(result.per_basin_nse) == 1

    def test_summary_counts_all_scored_basins(self):
        ds = generate_synthetic_family(seed=4, n_basins=3, n_days=120, train_days=90)
        mc = ModelConfig(input_dim=4, hidden_dim=6, sequence_length=10)
        p = init_parameters(mc, 0)
        result = evaluate(p, ds, "test", mc)
        assert len(result.per_basin_nse) == 3
        assert set(result.series) == set(ds.basin_ids)

    def test_masked_evaluation_matches_row_dropping(self):
        # NSE over a gappy range equals brute-force NSE after dropping
        # the missing rows.
        ds = generate_synthetic_family(seed=6, n_basins=2, n_days=200, train_days=120)
        ds = inject_gaps(ds, seed=1, gap_fraction=0.5)
        mc = ModelConfig(input_dim=4, hidden_dim=6, sequence_length=10)
        p = init_parameters(mc, 0)
        result = evaluate(p, ds, "test", mc)
        for basin_id, (dates, obs, obs_mask, preds) in result.series.items():
            if basin_id not in result.per_basin_nse:
                continue
            o = obs[obs_mask]
            s = preds[obs_mask]
            expected = 1.0 - np.sum((s - o) ** 2) / np.sum((o - o.mean()) ** 2)
            assert result.per_basin_nse[basin_id] == pytest.approx(expected, abs=1e-13)


class TestLog:
    def test_jsonl_round_trip(self, tmp_path):
        import json
        ds, mc, samples = tiny_fixture(n_basins=2)
        val = samples.subset_by_basins([ds.basin_ids[1]])
        tr = samples.subset_by_basins([ds.basin_ids[0]])
        tc = TrainConfig(epochs=3, batch_size=32, seed=1)
        run = train(mc, tr, val, tc)
        path = tmp_path / "log.jsonl"
        write_training_log(run, path)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 3
        rec = json.loads(lines[0])
        assert rec["epoch"] == 0
        assert rec["lr"] == 0.001
        assert "median" in rec["validation"]
