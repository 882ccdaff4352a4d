import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semdeblur import blursynth as bs
from semdeblur.errors import ManifestError
from semdeblur.imgio import load_image, save_image
from semdeblur.metrics import psnr

from conftest import make_toy_image, write_toy_sources


class TestSeverityRange:
    def test_named_ranges(self):
        assert bs.LESS_SEV == bs.SeverityRange(0.2, 0.5)
        assert bs.SEV == bs.SeverityRange(0.5, 1.0)

    def test_invalid_ranges(self):
        with pytest.raises(ValueError):
            bs.SeverityRange(0.5, 0.2)
        with pytest.raises(ValueError):
            bs.SeverityRange(-0.1, 0.5)


class TestSampleMotionFlow:
    def test_zero_range_gives_zero_flow(self):
        flow = bs.sample_motion_flow(16, 16, bs.SeverityRange(0.0, 0.0), seed=1)
        assert flow.severity == 0.0
        assert not flow.field.any()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_magnitude_bounded(self, seed):
        flow = bs.sample_motion_flow(24, 16, bs.SEV, seed, max_disp=15.0)
        norms = np.sqrt((flow.field ** 2).sum(axis=-1))
        assert norms.max() <= 1.0 * 15.0 + 1e-9
        assert bs.SEV.lo <= flow.severity <= bs.SEV.hi

    def test_peak_magnitude_matches_severity(self):
        flow = bs.sample_motion_flow(24, 24, bs.SEV, seed=3, max_disp=10.0)
        norms = np.sqrt((flow.field ** 2).sum(axis=-1))
        assert norms.max() == pytest.approx(flow.severity * 10.0)

    def test_seed_determinism(self):
        a = bs.sample_motion_flow(16, 16, bs.SEV, seed=9)
        b = bs.sample_motion_flow(16, 16, bs.SEV, seed=9)
        assert a.severity == b.severity
        assert np.array_equal(a.field, b.field)

    def test_shape(self):
        flow = bs.sample_motion_flow(20, 12, bs.LESS_SEV, seed=4)
        assert flow.field.shape == (12, 20, 2)


class TestApplyMotionBlur:
    def test_zero_flow_is_identity(self):
        rng = np.random.default_rng(0)
        img = make_toy_image(rng)
        flow = bs.MotionFlow(field=np.zeros((32, 32, 2)), severity=0.0)
        assert np.array_equal(bs.apply_motion_blur(img, flow), img)

    def test_constant_image_unchanged(self):
        img = np.full((24, 24, 3), 0.37)
        flow = bs.sample_motion_flow(24, 24, bs.SEV, seed=5, max_disp=6.0)
        out = bs.apply_motion_blur(img, flow)
        assert np.allclose(out, img, atol=1e-12)

    def test_constant_flow_matches_line_kernel_oracle(self):
        """Uniform horizontal flow must equal explicit 1-D kernel convolution."""
        rng = np.random.default_rng(1)
        img = np.repeat(rng.random((1, 48, 1)), 16, axis=0)   # 1-D content
        img = np.repeat(img, 3, axis=2)
        k, n = 5.0, 17
        flow = bs.MotionFlow(field=np.stack([np.full((16, 48), k),
                                             np.zeros((16, 48))], axis=-1),
                             severity=1.0)
        blurred = bs.apply_motion_blur(img, flow, n_samples=n)

        # oracle: accumulate the bilinear taps of each sample offset, then
        # convolve one row with explicit edge clamping
        taps = {}
        for t in np.linspace(-0.5, 0.5, n):
            o = k * t
            lo = int(np.floor(o))
            frac = o - lo
            taps[lo] = taps.get(lo, 0.0) + (1.0 - frac) / n
            taps[lo + 1] = taps.get(lo + 1, 0.0) + frac / n
        row = img[0, :, 0]
        expected_row = np.zeros_like(row)
        for off, w in taps.items():
            idx = np.clip(np.arange(48) + off, 0, 47)
            expected_row += w * row[idx]
        assert np.max(np.abs(blurred[8, :, 0] - expected_row)) < 1e-6

    def test_output_in_unit_range(self):
        rng = np.random.default_rng(2)
        img = make_toy_image(rng)
        flow = bs.sample_motion_flow(32, 32, bs.SEV, seed=6)
        out = bs.apply_motion_blur(img, flow)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_energy_preserved_in_interior(self):
        size = 96
        ys, xs = np.mgrid[0:size, 0:size] / size
        img = np.clip(np.stack([
            0.5 + 0.3 * np.sin(4 * np.pi * xs) * np.cos(2 * np.pi * ys),
            0.4 + 0.3 * xs + 0.2 * ys,
            0.5 + 0.25 * np.cos(6 * np.pi * (xs + ys)),
        ], axis=-1), 0, 1)
        for seed in range(5):
            flow = bs.sample_motion_flow(size, size, bs.SEV, seed, max_disp=8.0)
            blurred = bs.apply_motion_blur(img, flow)
            m = 5  # ceil(max_disp / 2) + 1
            assert abs(blurred[m:-m, m:-m].mean() - img[m:-m, m:-m].mean()) < 1e-3

    def test_blur_determinism(self):
        rng = np.random.default_rng(3)
        img = make_toy_image(rng)
        flow = bs.sample_motion_flow(32, 32, bs.SEV, seed=7)
        assert np.array_equal(bs.apply_motion_blur(img, flow),
                              bs.apply_motion_blur(img, flow))


class TestMakeDataset:
    def test_empty_input_dir(self, tmp_path):
        (tmp_path / "sharp").mkdir()
        captions = tmp_path / "captions.tsv"
        captions.write_text("", encoding="utf-8")
        manifest = bs.make_dataset(tmp_path / "sharp", captions, bs.SEV, 0,
                                   tmp_path / "out")
        assert len(manifest) == 0

    def test_record_per_image(self, tmp_path):
        sharp_dir, captions = write_toy_sources(tmp_path, n_images=5)
        manifest = bs.make_dataset(sharp_dir, captions, bs.SEV, 0, tmp_path / "out")
        assert len(manifest) == 5
        for record in manifest.records:
            assert record.captions
            assert (tmp_path / "out" / record.blurry_path).exists()

    def test_missing_caption_raises(self, tmp_path):
        sharp_dir = tmp_path / "sharp"
        sharp_dir.mkdir()
        rng = np.random.default_rng(0)
        save_image(sharp_dir / "lonely.png", make_toy_image(rng))
        captions = tmp_path / "captions.tsv"
        captions.write_text("other\ta cat\n", encoding="utf-8")
        with pytest.raises(ManifestError):
            bs.make_dataset(sharp_dir, captions, bs.SEV, 0, tmp_path / "out")

    def test_severity_monotonic_psnr(self, tmp_path):
        sharp_dir, captions = write_toy_sources(tmp_path, n_images=20, seed=11)
        less = bs.make_dataset(sharp_dir, captions, bs.LESS_SEV, 1,
                               tmp_path / "less", split_fracs=(1, 0, 0))
        sev = bs.make_dataset(sharp_dir, captions, bs.SEV, 1,
                              tmp_path / "sev", split_fracs=(1, 0, 0))

        def mean_psnr(manifest):
            return np.mean([psnr(load_image(manifest.resolve(r.blurry_path)),
                                 load_image(manifest.resolve(r.sharp_path)))
                            for r in manifest.records])

        assert mean_psnr(sev) < mean_psnr(less)

    def test_parallel_equals_serial(self, tmp_path):
        sharp_dir, captions = write_toy_sources(tmp_path, n_images=6, seed=13)
        serial = bs.make_dataset(sharp_dir, captions, bs.SEV, 2, tmp_path / "serial")
        parallel = bs.make_dataset(sharp_dir, captions, bs.SEV, 2,
                                   tmp_path / "parallel", jobs=4)
        assert [r.id for r in serial.records] == [r.id for r in parallel.records]
        for rs, rp in zip(serial.records, parallel.records):
            assert rs.severity == rp.severity
            a = (tmp_path / "serial" / rs.blurry_path).read_bytes()
            b = (tmp_path / "parallel" / rp.blurry_path).read_bytes()
            assert a == b

    def test_same_seed_same_output(self, tmp_path):
        sharp_dir, captions = write_toy_sources(tmp_path, n_images=3, seed=17)
        m1 = bs.make_dataset(sharp_dir, captions, bs.SEV, 3, tmp_path / "a")
        m2 = bs.make_dataset(sharp_dir, captions, bs.SEV, 3, tmp_path / "b")
        for r1, r2 in zip(m1.records, m2.records):
            assert r1.severity == r2.severity
            assert ((tmp_path / "a" / r1.blurry_path).read_bytes()
                    == (tmp_path / "b" / r2.blurry_path).read_bytes())
