"""Mask plans, tokenization, forward invariants, and reconstruction passes."""

import math

import numpy as np
import pytest

from mtsad import autodiff as ad
from mtsad.data import make_windows, SeriesFrame
from mtsad.errors import ContractError, ShapeError
from mtsad.model import (MaskPlan, ModelConfig, ReconstructionModel,
                         build_mask_plan, forward, forward_batch, mask_count,
                         mask_groups, masked_loss, reconstruct_all, tokenize)

SMALL = ModelConfig(n_metrics=6, t_e=8, d_model=16, n_heads=4, n_layers=2,
                    d_ff=32, dropout=0.0, seed=42)


def small_model(config=SMALL):
    return ReconstructionModel.initialize(config)


def random_window(config=SMALL, seed=0):
    rng = np.random.default_rng(seed)
    frame = SeriesFrame(
        metric_names=[f"m{i}" for i in range(config.n_metrics)],
        timestamps=np.arange(5 * config.t_e, dtype=np.int64),
        values=rng.random((config.n_metrics, 5 * config.t_e)),
    )
    return make_windows(frame, config.t_e, 1)[0]


class TestModelConfig:
    def test_head_divisibility(self):
        with pytest.raises(ContractError):
            ModelConfig(n_metrics=4, d_model=30, n_heads=8)

    def test_mask_ratio_bounds(self):
        with pytest.raises(ContractError):
            ModelConfig(n_metrics=4, mask_ratio=0.0)

    def test_min_layers(self):
        with pytest.raises(ContractError):
            ModelConfig(n_metrics=4, n_layers=1)

    def test_param_count_is_config_function(self):
        a = small_model().param_count()
        b = small_model().param_count()
        assert a == b
        wider = ReconstructionModel.initialize(
            ModelConfig(n_metrics=6, t_e=8, d_model=32, n_heads=4, n_layers=2,
                        d_ff=64, dropout=0.0, seed=1)).param_count()
        assert wider > a


class TestMaskPlan:
    def test_paper_ratio_one_of_five(self):
        plans = {build_mask_plan(5, 0.2, np.random.default_rng(s)).indices
                 for s in range(20)}
        assert all(len(p) == 1 for p in plans)

    def test_rounding_rule_18(self):
        assert mask_count(18, 0.2) == 4  # round(3.6)

    def test_clamp_floor_two_metrics(self):
        for ratio in (0.01, 0.2, 0.9):
            assert mask_count(2, ratio) == 1

    def test_clamp_ceiling(self):
        assert mask_count(4, 0.99) == 3  # never mask everything

    def test_fresh_draw_deterministic_given_rng(self):
        a = build_mask_plan(10, 0.3, np.random.default_rng(5))
        b = build_mask_plan(10, 0.3, np.random.default_rng(5))
        assert a == b

    def test_needs_two_metrics(self):
        with pytest.raises(ContractError):
            build_mask_plan(1, 0.2, np.random.default_rng(0))


class TestTokenize:
    def test_empty_plan_matches_unmasked(self):
        m = small_model()
        w = random_window()
        assert np.array_equal(tokenize(w, (), m).tokens,
                              tokenize(w, MaskPlan(()), m).tokens)

    def test_single_mask_changes_one_token(self):
        m = small_model()
        w = random_window()
        base = tokenize(w, (), m).tokens
        masked = tokenize(w, (3,), m).tokens
        diff = np.any(base != masked, axis=2)
        assert diff.sum() == 1 and diff[3, 4]

    def test_mask_hides_content(self):
        m = small_model()
        w1 = random_window(seed=1)
        w2 = random_window(seed=1)
        w2.segments[4][3] = 123.456  # only metric 3's target segment differs
        g1 = tokenize(w1, (3,), m)
        g2 = tokenize(w2, (3,), m)
        assert np.array_equal(g1.tokens, g2.tokens)

    def test_dimension_mismatch(self):
        m = small_model()
        w = random_window(ModelConfig(n_metrics=5, t_e=8, d_model=16, n_heads=4,
                                      n_layers=2, dropout=0.0))
        with pytest.raises(ShapeError):
            tokenize(w, (0,), m)


class TestForward:
    def test_output_shape(self):
        cfg = ModelConfig(n_metrics=18, t_e=32, d_model=32, n_heads=4,
                          n_layers=2, d_ff=32, dropout=0.0, seed=0)
        m = ReconstructionModel.initialize(cfg)
        w = random_window(cfg, seed=2)
        out = forward(tokenize(w, (0, 1), m), m)
        assert out.shape == (18, 32)
        assert np.isfinite(out).all()

    def test_batched_matches_single(self):
        m = small_model()
        w = random_window(seed=3)
        single = forward(tokenize(w, (2,), m), m)
        batched = forward_batch(m, w.segments.transpose(1, 0, 2)[None], (2,)).data[0]
        assert np.array_equal(single, batched)

    def test_masking_opacity_bitlevel(self):
        m = small_model()
        w1 = random_window(seed=4)
        w2 = random_window(seed=4)
        w2.segments[4][1] = -4.2
        w2.segments[4][5] = 9.9
        out1 = forward(tokenize(w1, (1, 5), m), m)
        out2 = forward(tokenize(w2, (1, 5), m), m)
        assert np.array_equal(out1, out2)

    def test_permutation_equivariance_bitlevel(self):
        rng = np.random.default_rng(11)
        m = small_model()
        w = random_window(seed=5)
        plan = (1, 4)
        out = forward(tokenize(w, plan, m), m)
        perm = rng.permutation(SMALL.n_metrics)
        permuted_model = small_model()
        permuted_model.params["metric_embed"].data = \
            m.params["metric_embed"].data[perm].copy()
        permuted_window = random_window(seed=5)
        permuted_window.segments[:] = w.segments[:, perm, :]
        permuted_plan = tuple(sorted(int(np.flatnonzero(perm == i)[0]) for i in plan))
        out_p = forward(tokenize(permuted_window, permuted_plan, permuted_model),
                        permuted_model)
        assert np.array_equal(out_p, out[perm])

    def test_determinism(self):
        m = small_model()
        w = random_window(seed=6)
        a = forward(tokenize(w, (0,), m), m)
        b = forward(tokenize(w, (0,), m), m)
        assert np.array_equal(a, b)

    def test_untrained_loss_near_baseline(self):
        m = small_model()
        w = random_window(seed=7)
        recon = forward(tokenize(w, (2, 3), m), m)
        assert np.isfinite(recon).all()
        loss = float(masked_loss(recon, w, (2, 3)).data)
        zero_baseline = float(ad.log_cosh_loss(
            np.zeros((2, SMALL.t_e)), w.segments[4][[2, 3]]).data)
        assert loss <= 10.0 * zero_baseline


class TestMaskedLoss:
    def test_zero_when_recon_matches(self):
        w = random_window(seed=8)
        recon = w.segments[4].copy()
        assert float(masked_loss(recon, w, (1, 2)).data) == 0.0

    def test_ignores_unmasked_metrics(self):
        w = random_window(seed=9)
        recon = w.segments[4].copy()
        base = float(masked_loss(recon, w, (1,)).data)
        recon[0] += 100.0
        recon[5] -= 3.0
        assert float(masked_loss(recon, w, (1,)).data) == base

    def test_constant_offset_analytic(self):
        w = random_window(seed=10)
        recon = w.segments[4].copy()
        recon[2] += math.log(2.0)
        loss = float(masked_loss(recon, w, (2,)).data)
        assert abs(loss - math.log(1.25)) < 1e-12

    def test_empty_plan_rejected(self):
        w = random_window()
        with pytest.raises(ContractError):
            masked_loss(w.segments[4], w, ())


class TestReconstructAll:
    def test_group_shapes(self):
        assert mask_groups(5, 1) == [[0], [1], [2], [3], [4]]
        assert [len(g) for g in mask_groups(18, 4)] == [4, 4, 4, 4, 2]

    def test_each_metric_reconstructed_once(self):
        m = small_model()  # N=6, ratio 0.2 -> k=1 -> 6 passes
        w = random_window(seed=12)
        recon, errors = reconstruct_all(w, m)
        assert recon.shape == (6, 8) and errors.shape == (6, 8)
        np.testing.assert_allclose(errors, np.abs(w.segments[4] - recon))

    def test_masked_pass_defines_each_row(self):
        # row i of the assembled recon equals a forward pass with i masked
        m = small_model()
        w = random_window(seed=13)
        recon, _ = reconstruct_all(w, m)
        for i in range(6):
            alone = forward(tokenize(w, (i,), m), m)
            assert np.array_equal(recon[i], alone[i])


class TestTrainedReconstruction:
    def test_trained_beats_untrained_on_derived_metric(self):
        # entity with an exact linear recipe; training must at least halve
        # the reconstruction error on the derived metric
        from mtsad.synthetic import Recipe, SyntheticSpec, generate_entity
        from mtsad.training import TrainConfig, finetune
        from mtsad.data import apply_normalization, make_windows

        spec = SyntheticSpec(
            family="waves", n_metrics=5, n_points=1000, n_entities=1, seed=17,
            noise=0.005, anomalies=[], waveforms=("sin", "cos"),
            recipes=[Recipe("m04", "linear", ["m00", "m02"], [0.5, 0.5])],
        )
        frame = generate_entity(spec, 0)
        mc = ModelConfig(n_metrics=5, t_e=16, d_model=32, n_heads=4, n_layers=2,
                         d_ff=64, dropout=0.0, seed=2)
        config = TrainConfig(steps=2000, batch_size=4, lr=1e-3, warmup_steps=200,
                             seed=2, log_every=500)
        trained = finetune(None, frame, config, scratch=True, model_config=mc)
        untrained = finetune(None, frame, TrainConfig(steps=0, seed=2),
                             scratch=True, model_config=mc)

        def derived_error(result):
            model = result.checkpoint.to_model()
            normalized = apply_normalization(frame, result.checkpoint.stats)
            windows = make_windows(normalized.sliced(500, 900), 16, 16)
            errs = [reconstruct_all(w, model)[1][4].mean() for w in windows]
            return float(np.mean(errs))

        trained_err = derived_error(trained)
        untrained_err = derived_error(untrained)
        assert trained_err <= 0.5 * untrained_err


class TestDropout:
    def test_training_dropout_is_seeded(self):
        cfg = ModelConfig(n_metrics=4, t_e=8, d_model=16, n_heads=4, n_layers=2,
                          d_ff=32, dropout=0.5, seed=3)
        m = ReconstructionModel.initialize(cfg)
        w = random_window(cfg, seed=14).segments.transpose(1, 0, 2)[None]
        a = forward_batch(m, w, (0,), train_rng=np.random.default_rng(7)).data
        b = forward_batch(m, w, (0,), train_rng=np.random.default_rng(7)).data
        c = forward_batch(m, w, (0,), train_rng=np.random.default_rng(8)).data
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_inference_has_no_dropout(self):
        cfg = ModelConfig(n_metrics=4, t_e=8, d_model=16, n_heads=4, n_layers=2,
                          d_ff=32, dropout=0.5, seed=3)
        m = ReconstructionModel.initialize(cfg)
        w = random_window(cfg, seed=15).segments.transpose(1, 0, 2)[None]
        assert np.array_equal(forward_batch(m, w, (0,)).data,
                              forward_batch(m, w, (0,)).data)
