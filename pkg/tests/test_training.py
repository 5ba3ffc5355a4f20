import numpy as np
import pytest

from conftest import to_dataset
from piano.gridcore import VectorField
from piano.operators import TNO, VNO, TNOConfig, VNOConfig, init_param_maps
from piano.pdesim import PDEParams, make_scenario, residual_sq_norm
from piano.training import (
    Adam, Dataset, TrainConfig, TrainingDivergence, TrainReport, TranslateConfig, clone, finetune,
    loss_data, loss_pde, persistence_windows, predict_windows, pretrain_tno, pretrain_vno,
    train_translator,
)

W = [4, 8, 8]


@pytest.fixture(scope="module")
def small_data():
    kinds = ["uniform-flow", "shear", "source-sink", "rigid-rotation"]
    return to_dataset([make_scenario(k, (16, 16), 12, seed=i) for i, k in enumerate(kinds)])


class TestConfigAndReport:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(alpha=-1)
        with pytest.raises(ValueError):
            TrainConfig(precision=16)
        assert TrainConfig(precision=64).dtype == np.float64

    def test_report_csv(self, tmp_path):
        rep = TrainReport()
        rep.log(0, 0.5, 0.25, 0.75)
        rep.log(1, 0.1, 0.0, 0.1)
        rep.to_csv(tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text() == (
            "step,L_data,L_PDE,L_total\n0,0.5,0.25,0.75\n1,0.1,0.0,0.1\n")
        assert list(rep.column("L_total")) == [0.75, 0.1]
        with pytest.raises(ValueError):
            rep.log(2, -1.0, 0.0, -1.0)


class TestDataset:
    def test_windows_and_gather_layout(self):
        frames = np.arange(2 * 6 * 2 * 4 * 4, dtype=float).reshape(2, 6, 2, 4, 4)
        data = Dataset(list(frames), [np.zeros((4, 4))] * 2)
        assert data.windows(4, 2) == [(0, 0), (0, 2), (1, 0), (1, 2)]
        g = data.gather([(1, 2)], 1, 2, np.float64)
        assert g.shape == (1, 4, 4, 4)
        assert np.array_equal(g[0, 2], frames[1, 4, 0]) and np.array_equal(g[0, 1], frames[1, 3, 1])

    def test_mismatched_shapes(self):
        with pytest.raises(ValueError):
            Dataset([np.zeros((5, 1, 4, 4)), np.zeros((5, 2, 4, 4))], [None, None])


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = {"a": np.array([1.0, -2.0])}
        Adam(p, lr=0.1).step({"a": np.array([3.0, -0.5])})
        assert np.allclose(p["a"], [0.9, -1.9])

    def test_prefix_override_and_freeze(self):
        p = {"net/w": np.ones(2), "maps/R": np.ones(2)}
        Adam(p, lr=0.1, lr_overrides={"maps/": 0.0}).step({k: np.ones(2) for k in p})
        assert np.allclose(p["net/w"], 0.9) and np.array_equal(p["maps/R"], np.ones(2))


class TestLosses:
    def test_loss_data_sums_steps(self, rng):
        pred, truth = rng.normal(size=(2, 4, 1, 5, 5))
        expected = sum(np.mean((pred[k] - truth[k]) ** 2) for k in range(4))
        assert loss_data(pred, truth) == pytest.approx(expected, rel=1e-12)

    def test_loss_pde_zero_on_generator_output(self):
        sc = make_scenario("source-sink", (16, 16), 10, seed=1)
        assert loss_pde(sc.frames.frames, sc.true_v, sc.true_params) < 1e-24

    def test_loss_pde_matches_reference_multichannel(self, rng):
        frames = rng.normal(size=(4, 3, 6, 7))
        vs = [VectorField(*rng.uniform(-0.5, 0.5, (2, 6, 7))) for _ in range(3)]
        p = PDEParams(rng.uniform(0, 0.2, (6, 7)), rng.normal(0, 0.1, (6, 7)))
        assert loss_pde(frames, vs, p) == pytest.approx(residual_sq_norm(frames, vs, p),
                                                        abs=1e-12)


class TestTraining:
    def test_tno_learns_and_is_deterministic(self, small_data):
        cfg = TrainConfig(steps=40, lr=3e-3, batch=2, seed=1)
        m1, r1 = pretrain_tno(small_data, TNOConfig(s=4, widths=W), cfg)
        m2, r2 = pretrain_tno(small_data, TNOConfig(s=4, widths=W), cfg)
        assert r1.rows == r2.rows
        assert np.mean(r1.column("L_data")[-10:]) < np.mean(r1.column("L_data")[:10])
        assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)

    def test_vno_pretraining_lowers_pde_loss(self, small_data):
        cfg = TrainConfig(steps=40, lr=3e-3, batch=2, seed=0, param_lr=3e-2)
        _, maps, rep = pretrain_vno(small_data, VNOConfig(s=4, widths=W), cfg)
        loss = rep.column("L_PDE")
        assert np.mean(loss[-10:]) < np.mean(loss[:10])
        assert np.all(maps.D > 0)

    def test_divergence_restores_last_good(self, small_data):
        cfg = TrainConfig(steps=10, lr=1e30, batch=2, seed=0)
        model = TNO(TNOConfig(s=4, widths=W), dtype=np.float32)
        with np.errstate(all="ignore"), pytest.raises(TrainingDivergence) as info:
            pretrain_tno(small_data, TNOConfig(s=4, widths=W), cfg, model=model)
        assert info.value.step >= 1
        assert all(np.all(np.isfinite(v)) for v in model.params.values())

    def test_alpha_zero_freezes_velocity_branch(self, small_data):
        tno = TNO(TNOConfig(s=4, widths=W), seed=0)
        tno.params["head.w"] += np.float32(0.01)
        vno = VNO(VNOConfig(s=4, widths=W), seed=0)
        maps = init_param_maps(16, 16)
        v0, m0 = clone(vno), clone(maps)
        rep = finetune(tno, vno, maps, small_data, TrainConfig(alpha=0.0, steps=5, batch=2))
        assert all(np.array_equal(vno.params[k], v0.params[k]) for k in vno.params)
        # Fine-tuning casts the maps to the training precision first.
        m0.cast(np.float32)
        assert all(np.array_equal(maps.params[k], m0.params[k]) for k in maps.params)
        assert np.allclose(rep.column("L_total"), rep.column("L_data"))
        assert np.all(rep.column("L_PDE") > 0)

    def test_seam_pair_adds_a_transition(self, small_data):
        tno = TNO(TNOConfig(s=4, widths=W), seed=0, dtype=np.float64)
        vno = VNO(VNOConfig(s=4, widths=W), seed=0, dtype=np.float64)
        maps = init_param_maps(16, 16)
        cfg = TrainConfig(alpha=1.0, lr=0.0, steps=1, batch=2, precision=64)
        without = finetune(clone(tno), clone(vno), clone(maps), small_data, cfg)
        with_seam = finetune(clone(tno), clone(vno), clone(maps), small_data,
                             TrainConfig(alpha=1.0, lr=0.0, steps=1, batch=2, precision=64,
                                         seam_pair=True))
        assert with_seam.rows[0][2] > without.rows[0][2]

    def test_prediction_windows(self, small_data):
        model = TNO(TNOConfig(s=4, widths=W))
        pred, truth, picks = predict_windows(model, small_data)
        pers, truth2, picks2 = persistence_windows(small_data, 4)
        assert picks == picks2 and np.array_equal(truth, truth2)
        assert np.allclose(pred, pers, atol=1e-6)

    def test_translator_training(self, small_data):
        model, rep = train_translator(small_data, TranslateConfig(steps=30, batch=4))
        assert model.trained
        loss = rep.column("L_data")
        assert loss[-5:].mean() < loss[:5].mean()

    def test_translator_fits_held_out_rain(self, small_data):
        model, _ = train_translator(small_data, TranslateConfig(steps=300, seed=0))
        held = make_scenario("uniform-flow", (16, 16), 12, seed=99)
        sat = held.frames.frames
        truth = to_dataset([held]).radar[0]
        # Relative to the signal: a zero forecast scores 1.0 on this ratio.
        assert np.mean((model.translate(sat) - truth) ** 2) < 0.02 * np.mean(truth**2)

    def test_translator_needs_radar(self, small_data):
        bare = Dataset(small_data.frames, small_data.dems)
        with pytest.raises(ValueError):
            train_translator(bare, TranslateConfig(steps=1))
