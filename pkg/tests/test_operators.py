import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from piano.gridcore import DimensionError, FrameSequence
from piano.operators import (
    TNO, VNO, Normalizer, ParamMaps, TNOConfig, Translator, TranslatorConfig, UntrainedModelError,
    VNOConfig, head_translate, init_param_maps, load_model, save_model, tno_predict, vno_extract,
)

W = [4, 8, 8]


def history(rng, n=2, s=3, c=1, h=8, w=8):
    return rng.normal(size=(n, s, c, h, w))


class TestTNO:
    def test_fresh_model_is_persistence(self, rng):
        model = TNO(TNOConfig(s=3, widths=W), dtype=np.float64)
        hist = history(rng)
        out = model.predict(hist, rng.normal(size=(2, 1, 8, 8)))
        assert np.array_equal(out, np.repeat(hist[:, -1:], 3, axis=1))

    def test_multichannel_shapes(self, rng):
        model = TNO(TNOConfig(s=2, channels=3, widths=W, use_dem=False))
        out = model.predict(history(rng, s=2, c=3))
        assert out.shape == (2, 2, 3, 8, 8) and out.dtype == np.float32

    def test_input_checks(self, rng):
        model = TNO(TNOConfig(s=3, widths=W))
        with pytest.raises(DimensionError):
            model.predict(history(rng))
        with pytest.raises(DimensionError):
            model.predict(history(rng, s=2), np.zeros((2, 1, 8, 8)))
        with pytest.raises(DimensionError):
            model.predict(history(rng, h=6, w=6), np.zeros((2, 1, 6, 6)))

    def test_seeded_init(self):
        a = TNO(TNOConfig(s=2, widths=W), seed=1).params["enc0.0.w"]
        b = TNO(TNOConfig(s=2, widths=W), seed=1).params["enc0.0.w"]
        c = TNO(TNOConfig(s=2, widths=W), seed=2).params["enc0.0.w"]
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_batch_members_independent(self, seed):
        rng = np.random.default_rng(seed)
        model = TNO(TNOConfig(s=2, widths=W), seed=seed % 7, dtype=np.float64)
        model.params["head.w"] = rng.normal(0, 0.1, model.params["head.w"].shape)
        hist, dem = history(rng, n=3, s=2), rng.normal(size=(3, 1, 8, 8))
        both = model.predict(hist, dem)
        one = model.predict(hist[1:2], dem[1:2])
        assert np.allclose(both[1:2], one, atol=1e-12)

    def test_frame_sequence_entry(self, rng):
        model = TNO(TNOConfig(s=3, widths=W))
        seq = FrameSequence(rng.normal(size=(3, 1, 8, 8)), timestamps=[10, 12, 14])
        out = tno_predict(seq, np.zeros((8, 8)), model)
        assert list(out.timestamps) == [16, 18, 20]
        with pytest.raises(DimensionError):
            tno_predict(seq, np.zeros((4, 4)), model)


class TestVNO:
    def test_speed_bounded(self, rng):
        model = VNO(VNOConfig(s=3, widths=W, v_max=0.4), dtype=np.float64)
        model.params["head.w"] = rng.normal(0, 5.0, model.params["head.w"].shape)
        v = model.extract(history(rng) * 10)
        assert v.shape == (2, 3, 2, 8, 8)
        assert np.abs(v).max() <= 0.4

    def test_unstable_cap_rejected(self):
        with pytest.raises(ValueError):
            VNOConfig(v_max=0.8)

    def test_extract_to_fields(self, rng):
        model = VNO(VNOConfig(s=3, widths=W))
        fields = vno_extract(FrameSequence(rng.normal(size=(3, 1, 8, 8))), model)
        assert len(fields) == 3 and fields[0].shape == (8, 8)


def test_param_maps_start_at_unit_diffusivity():
    maps = init_param_maps(6, 5)
    assert np.all(maps.D == 1.0) and np.all(maps.R == 0.0)
    assert maps.D.shape == (6, 5)


class TestTranslator:
    def test_untrained_refuses(self):
        with pytest.raises(UntrainedModelError):
            Translator(TranslatorConfig()).translate(np.zeros((1, 1, 8, 8)))

    def test_output_non_negative(self, rng):
        model = Translator(TranslatorConfig(channels=2, width=4), trained=True)
        rain = head_translate(rng.normal(size=(2, 8, 8)) * 5, model)
        assert rain.shape == (8, 8) and rain.min() >= 0.0


def test_normalizer_round_trip():
    data = np.random.default_rng(0).normal(3.0, 2.0, size=(50, 2, 4, 4))
    norm = Normalizer.fit(data)
    assert np.allclose(norm.mean, 3.0, atol=0.2)
    back = Normalizer.from_dict(norm.to_dict())
    assert np.array_equal(back.mean, norm.mean) and np.array_equal(back.std, norm.std)
    flat = Normalizer.fit(np.ones((3, 1, 2, 2)))
    assert flat.std[0] == 1.0


@pytest.mark.parametrize("make", [
    lambda: TNO(TNOConfig(s=2, widths=W), seed=3, frame_norm=Normalizer(np.array([0.5]),
                                                                       np.array([2.0]))),
    lambda: VNO(VNOConfig(s=2, widths=W), seed=3),
    lambda: ParamMaps(8, 8),
    lambda: Translator(TranslatorConfig(width=4), seed=3, trained=True),
])
def test_checkpoint_round_trip(tmp_path, make):
    model = make()
    for k, v in model.params.items():
        model.params[k] = (v + 0.01 * np.arange(v.size).reshape(v.shape)).astype(v.dtype)
    save_model(tmp_path / "m.ckpt", model)
    back = load_model(tmp_path / "m.ckpt")
    assert type(back) is type(model)
    assert back.params.keys() == model.params.keys()
    for k in model.params:
        assert np.array_equal(back.params[k], model.params[k])
    if isinstance(model, TNO):
        assert np.array_equal(back.frame_norm.std, [2.0])
