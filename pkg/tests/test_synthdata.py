import math

import numpy as np
import pytest

from imjense.formats import FormatError, kspc_bytes, parse_kspc
from imjense.mrop import KSpaceVolume, SamplingMask, adjoint_model, forward_op
from imjense.synthdata import (SHEPP_LOGAN, MaskSpec, PhantomSpec, acquire, make_mask, make_phantom, mask_lines,
                               read_kspc, simulate_coils, undersampling_rate, write_kspc)


class TestPhantom:
    def test_range_and_shape(self):
        img = make_phantom(PhantomSpec(64, 48))
        assert img.shape == (64, 48)
        assert np.abs(img).max() <= 1.0 + 1e-12
        assert np.abs(img).min() == 0.0
        assert np.all(np.abs(np.angle(img)) <= np.pi)

    def test_deterministic(self):
        a = make_phantom(PhantomSpec(32, 32))
        b = make_phantom(PhantomSpec(32, 32))
        assert a.tobytes() == b.tobytes()

    def test_single_disk(self):
        spec = PhantomSpec(65, 65, ellipses=((0.5, 0.5, 0.5, 0.0, 0.0, 0.0),), phase=())
        img = make_phantom(spec)
        assert img[32, 32] == 0.5
        assert img[0, 0] == 0.0
        area = np.count_nonzero(img) * (2 / 64) ** 2
        assert area == pytest.approx(np.pi * 0.25, rel=0.03)

    def test_empty_ellipse_list(self):
        assert np.all(make_phantom(PhantomSpec(8, 8, ellipses=())) == 0)

    def test_matches_brute_force_membership(self):
        # independent per-pixel evaluation: pixel (i, j) sits at horizontal u = y_j
        # and vertical v = -x_i of the ellipse plane
        d = 64
        img = make_phantom(PhantomSpec(d, d, phase=()))
        expect = np.zeros((d, d))
        for i in range(d):
            for j in range(d):
                u = -1 + 2 * j / (d - 1)
                v = 1 - 2 * i / (d - 1)
                total = 0.0
                for inten, a, b, x0, y0, ang in SHEPP_LOGAN:
                    t = math.radians(ang)
                    du, dv = u - x0, v - y0
                    r1 = (du * math.cos(t) + dv * math.sin(t)) / a
                    r2 = (dv * math.cos(t) - du * math.sin(t)) / b
                    if r1 * r1 + r2 * r2 <= 1.0:
                        total += inten
                expect[i, j] = min(max(total, 0.0), 1.0)
        np.testing.assert_allclose(img.real, expect, atol=1e-12)
        assert np.all(img.imag == 0)

    def test_phase_is_smooth(self):
        img = make_phantom(PhantomSpec(64, 64))
        inside = np.abs(img) > 0
        ph = np.angle(img)
        step = np.abs(np.diff(ph, axis=0))[inside[1:] & inside[:-1]]
        assert step.max() < 0.1


class TestCoils:
    def test_shape_and_floor(self):
        c = simulate_coils(8, 32, 32, seed=1)
        assert c.shape == (8, 32, 32)
        rss = np.sqrt(np.sum(np.abs(c) ** 2, axis=0))
        assert rss.min() >= 0.1

    def test_smooth(self):
        c = simulate_coils(4, 64, 64, seed=2)
        assert np.abs(np.diff(c, axis=1)).max() < 0.1

    @pytest.mark.parametrize("d", [32, 64, 128])
    def test_single_coil_difference_bound(self, d):
        c = simulate_coils(1, d, d, seed=0)[0]
        assert np.abs(np.diff(c, axis=0)).max() < 5 / d
        assert np.abs(np.diff(c, axis=1)).max() < 5 / d

    def test_rss_floor_eight_coils(self):
        c = simulate_coils(8, 128, 128, seed=0)
        assert np.sqrt(np.sum(np.abs(c) ** 2, axis=0)).min() >= 0.1

    def test_seeded(self):
        assert simulate_coils(3, 8, 8, 5).tobytes() == simulate_coils(3, 8, 8, 5).tobytes()
        assert simulate_coils(3, 8, 8, 5).tobytes() != simulate_coils(3, 8, 8, 6).tobytes()


class TestMask:
    def test_small_mask_lines(self):
        # every 4th line of 16 plus 4 centred lines [6, 10)
        assert mask_lines(MaskSpec(16, 4, 4)) == (0, 4, 6, 7, 8, 9, 12)

    def test_enumerated_small_mask(self):
        m = make_mask(MaskSpec(10, 2, 2))
        assert m.kept_lines == (0, 2, 4, 5, 6, 8)
        assert m.rate() == 0.6

    @pytest.mark.parametrize("d,R,acs,n", [(368, 4, 24, 110), (236, 5, 4, 52), (368, 5, 24, 93)])
    def test_line_counts(self, d, R, acs, n):
        assert len(make_mask(MaskSpec(d, R, acs)).kept_lines) == n

    def test_dc_line_always_kept_with_acs(self):
        for d in (64, 65, 236, 368):
            m = make_mask(MaskSpec(d, 5, 4))
            assert d // 2 in m.kept_lines

    @pytest.mark.parametrize("R,acs,pct", [(4, 24, 29.9), (5, 24, 25.3), (4, 32, 31.5), (5, 32, 27.2)])
    def test_knee_rates(self, R, acs, pct):
        assert abs(100 * undersampling_rate(make_mask(MaskSpec(368, R, acs))) - pct) <= 0.05

    @pytest.mark.parametrize("acs,pct", [(4, 22.0), (8, 22.9), (12, 24.6), (16, 25.4), (20, 27.1),
                                         (24, 28.8), (28, 29.7), (32, 31.4)])
    def test_brain_r5_rates(self, acs, pct):
        assert abs(100 * undersampling_rate(make_mask(MaskSpec(236, 5, acs))) - pct) <= 0.05

    def test_full_sampling(self):
        m = make_mask(MaskSpec(10, 1, 0))
        assert m.rate() == 1.0

    def test_readout_length(self):
        m = make_mask(MaskSpec(16, 2, 4, d_ro=20))
        assert m.shape == (20, 16)

    def test_invalid(self):
        with pytest.raises(ValueError):
            MaskSpec(16, 0, 4)
        with pytest.raises(ValueError):
            MaskSpec(16, 2, 17)


class TestAcquire:
    def test_fft_of_image_for_unit_coil(self):
        img = make_phantom(PhantomSpec(16, 16))
        m = SamplingMask.full(16, 16)
        k = acquire(img, np.ones((1, 16, 16), complex), m, 0.0)
        np.testing.assert_allclose(k.data[0], np.fft.fft2(img, norm="ortho"), atol=1e-13)

    def test_noiseless_matches_forward(self):
        img = make_phantom(PhantomSpec(16, 16))
        coils = simulate_coils(3, 16, 16)
        m = make_mask(MaskSpec(16, 4, 4))
        assert acquire(img, coils, m).data.tobytes() == forward_op(img, coils, m).tobytes()

    def test_noise_std(self):
        d = 128
        img = np.zeros((d, d), complex)
        m = SamplingMask.full(d, d)
        k = acquire(img, np.ones((2, d, d), complex), m, sigma_n=0.05, seed=3)
        assert abs(k.data.real.std() / 0.05 - 1) < 0.05
        assert abs(k.data.imag.std() / 0.05 - 1) < 0.05

    def test_noise_only_on_kept_lines(self):
        m = make_mask(MaskSpec(16, 4, 2))
        k = acquire(np.zeros((16, 16), complex), np.ones((1, 16, 16), complex), m, 0.1, seed=0)
        assert np.all(k.data[:, ~m.matrix()] == 0)
        assert np.all(k.data[:, m.matrix()] != 0)

    def test_adjoint_of_acquisition_is_zero_filled(self):
        img = make_phantom(PhantomSpec(16, 16))
        coils = simulate_coils(2, 16, 16)
        m = make_mask(MaskSpec(16, 2, 4))
        k = acquire(img, coils, m)
        expect = np.sum(np.conj(coils) * np.fft.ifft2(k.data, norm="ortho"), axis=0)
        np.testing.assert_allclose(adjoint_model(k, coils), expect, atol=1e-13)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            acquire(np.zeros((4, 4)), np.ones((1, 4, 4)), SamplingMask.full(4, 4), -1.0)


class TestKspc:
    def test_roundtrip_bit_exact(self, tmp_path):
        img = make_phantom(PhantomSpec(16, 12))
        k = acquire(img, simulate_coils(3, 16, 12), make_mask(MaskSpec(12, 3, 2, d_ro=16)), 0.01, 1)
        k.data = k.data.astype(np.complex64).astype(np.complex128)
        p = tmp_path / "a.kspc"
        write_kspc(p, k)
        back = read_kspc(p)
        assert back.mask == k.mask
        assert back.data.tobytes() == k.data.tobytes()
        assert np.all(back.data[:, ~k.mask.matrix()] == 0)
        write_kspc(tmp_path / "b.kspc", back)
        assert (tmp_path / "b.kspc").read_bytes() == p.read_bytes()

    def test_negative_zero_survives(self):
        data = np.array([[[complex(-0.0, 1.0), complex(1.0, -0.0)]]])
        k = KSpaceVolume(data, SamplingMask(1, 2, (0, 1)))
        raw = kspc_bytes(k)
        assert parse_kspc(raw).data.tobytes() == data.tobytes()
        assert kspc_bytes(parse_kspc(raw)) == raw

    def test_bad_magic_and_truncation(self, tmp_path):
        k = acquire(np.ones((4, 4)), np.ones((1, 4, 4)), SamplingMask(4, 4, (0, 2)))
        p = tmp_path / "x.kspc"
        write_kspc(p, k)
        raw = p.read_bytes()
        with pytest.raises(FormatError, match="magic"):
            parse_kspc(b"XXXX" + raw[4:])
        with pytest.raises(FormatError):
            parse_kspc(raw[:-3])
