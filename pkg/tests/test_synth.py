import numpy as np
import pytest

from cpl import synth
from cpl.synth import DegradationError, DegradationSpec, Task


def _psnr(a, b):
    mse = np.mean((a - b) ** 2)
    return 99.0 if mse == 0 else 10 * np.log10(1.0 / mse)


class TestGenClean:
    def test_deterministic(self):
        assert synth.gen_clean(7, 32).data.tobytes() == synth.gen_clean(7, 32).data.tobytes()

    def test_range(self):
        img = synth.gen_clean(3, 48).data
        assert img.shape == (3, 48, 48)
        assert img.min() >= 0 and img.max() <= 1

    def test_seeds_differ(self):
        # measured: mean |a - b| is ~0.19 for seeds 1, 2 at 64 px
        a, b = synth.gen_clean(1, 64).data, synth.gen_clean(2, 64).data
        assert np.abs(a - b).mean() > 0.01

    def test_too_small(self):
        with pytest.raises(ValueError):
            synth.gen_clean(0, 15)


class TestDegradations:
    def setup_method(self):
        self.clean = synth.gen_clean(11, 64)

    def test_haze_limits(self):
        no_haze = synth.apply_degradation(self.clean, DegradationSpec("haze", {"t": 1.0, "airlight": 0.8}))
        np.testing.assert_array_equal(no_haze.data, self.clean.data)
        full = synth.apply_degradation(self.clean, DegradationSpec("haze", {"t": 0.0, "airlight": 0.8}))
        np.testing.assert_array_equal(full.data, 0.8)

    def test_noise_std(self):
        spec = DegradationSpec("noise", {"sigma": 25}, seed=5)
        raw = synth.apply_degradation(self.clean, spec, clip=False).data
        std = (raw - self.clean.data).std()
        assert abs(std - 25 / 255) < 0.1 * 25 / 255

    def test_lowlight_formula(self):
        spec = DegradationSpec("lowlight", {"gamma": 2.5, "scale": 0.3})
        out = synth.apply_degradation(self.clean, spec).data
        np.testing.assert_allclose(out, np.clip(self.clean.data**2.5 * 0.3, 0, 1), rtol=1e-15)

    def test_blur_box_matches_direct_average(self):
        spec = DegradationSpec("blur", {"size": 3, "kind": "box", "direction": 0})
        out = synth.apply_degradation(self.clean, spec).data
        c = self.clean.data
        ref = sum(c[:, 9 + i, 20 + j] for i in (-1, 0, 1) for j in (-1, 0, 1)) / 9
        np.testing.assert_allclose(out[:, 9, 20], ref, rtol=1e-12)

    def test_motion_kernel_normalized(self):
        for d in (0, 45, 90, 135):
            k = synth.blur_kernel(5, "motion", d)
            assert k.sum() == pytest.approx(1.0)
            assert (k > 0).sum() == 5

    def test_rain_brightens(self):
        spec = DegradationSpec("rain", {"count": 10, "angle": 90.0, "length": 8.0, "intensity": 0.8}, seed=3)
        out = synth.apply_degradation(self.clean, spec).data
        assert (out >= self.clean.data).all()
        assert (out > self.clean.data).any()

    @pytest.mark.parametrize(
        "task,params",
        [
            ("noise", {"sigma": 20}),
            ("haze", {"t": 0.5, "airlight": 0.5}),
            ("haze", {"t": 1.5, "airlight": 0.8}),
            ("blur", {"size": 4, "kind": "box", "direction": 0}),
            ("lowlight", {"gamma": 1.0, "scale": 0.3}),
            ("rain", {"count": 3, "angle": 10.0, "length": 5, "intensity": 0.5}),
            ("noise", {"sigma": 25, "extra": 1}),
        ],
    )
    def test_out_of_range(self, task, params):
        with pytest.raises(DegradationError):
            DegradationSpec(task, params)

    def test_unknown_task(self):
        with pytest.raises(DegradationError):
            DegradationSpec("snow", {})

    def test_json_roundtrip(self):
        spec = synth.sample_spec("rain", 4)
        assert DegradationSpec.from_json(spec.to_json()) == spec

    @pytest.mark.parametrize("task", synth.TASKS)
    def test_deterministic_bytes(self, task):
        spec = synth.sample_spec(task, 99)
        a = synth.apply_degradation(self.clean, spec).data.tobytes()
        assert a == synth.apply_degradation(self.clean, spec).data.tobytes()

    @pytest.mark.parametrize("task", synth.TASKS)
    def test_range_over_many_samples(self, task):
        for i in range(1000):
            s = synth.make_sample(task, i, crop=16, gen_size=16, augment_data=False)
            assert 0 <= s.degraded.data.min() and s.degraded.data.max() <= 1
            assert 0 <= s.clean.data.min() and s.clean.data.max() <= 1

    @pytest.mark.parametrize("task", synth.TASKS)
    def test_nontrivial(self, task):
        for i in range(100):
            s = synth.make_sample(task, 10_000 + i, crop=32)
            assert _psnr(s.degraded.data, s.clean.data) < 40


class TestMakeBatch:
    def test_round_robin(self):
        batch = synth.make_batch(["noise", "rain", "haze"], 3, crop=16, seed=1)
        assert [s.task for s in batch] == [Task.NOISE, Task.RAIN, Task.HAZE]

    def test_deterministic(self):
        a = synth.make_batch(["noise", "lowlight"], 4, crop=16, seed=8)
        b = synth.make_batch(["noise", "lowlight"], 4, crop=16, seed=8)
        for x, y in zip(a, b):
            assert x.degraded.data.tobytes() == y.degraded.data.tobytes()
            assert x.clean.data.tobytes() == y.clean.data.tobytes()
            assert x.spec == y.spec

    def test_independent_seeds(self):
        batch = synth.make_batch(["noise"], 3, crop=16, seed=8)
        assert len({s.spec.seed for s in batch}) == 3

    def test_augmentation_equivariant(self):
        rng = np.random.default_rng(0)
        d, c = rng.random((3, 8, 8)), rng.random((3, 8, 8))
        for code in range(8):
            np.testing.assert_array_equal(synth.augment(d, code) - synth.augment(c, code), synth.augment(d - c, code))

    def test_sample_residual_consistent_with_spec(self):
        # haze is pixelwise, so the augmented pair must still satisfy I_d = I t + A (1 - t)
        s = synth.make_sample("haze", 21, crop=16)
        t, A = s.spec.params["t"], s.spec.params["airlight"]
        np.testing.assert_allclose(s.degraded.data, s.clean.data * t + A * (1 - t), atol=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            synth.make_batch([], 2)
        with pytest.raises(ValueError):
            synth.make_batch(["noise"], 0)
        with pytest.raises(ValueError):
            synth.make_sample("noise", 0, crop=64, gen_size=32)
