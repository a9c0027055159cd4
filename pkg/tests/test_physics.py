import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emitterscan import physics
from emitterscan.physics import (
    NVLabels, SiVLabels, SiVSusceptibilities, StrainState,
)


SUSC = SiVSusceptibilities(
    t_par_g=-1.0e6, t_par_e=0.8e6, t_perp_g=0.3e6, t_perp_e=-0.4e6,
    d_g=1.3e6, d_e=1.8e6, f_g=-1.7e6, f_e=-3.4e6,
    lambda_so_g_ghz=46.0, lambda_so_e_ghz=255.0, zpl0_thz=406.7,
)


class TestLifetimeLimit:
    def test_value(self):
        assert physics.lifetime_limit_mhz(1.7) == pytest.approx(93.6203, abs=1e-3)

    def test_scaling(self):
        assert physics.lifetime_limit_mhz(3.4) == pytest.approx(
            physics.lifetime_limit_mhz(1.7) / 2)


class TestNVLabels:
    def test_example(self):
        labels = physics.nv_labels(470.4510, 470.4520)
        assert labels.mean_thz == pytest.approx(470.4515, abs=1e-12)
        assert labels.splitting_ghz == pytest.approx(1.0, abs=1e-9)

    def test_equal_inputs_zero_splitting(self):
        assert physics.nv_labels(470.4, 470.4).splitting_ghz == 0.0

    def test_symmetric_in_arguments(self):
        assert physics.nv_labels(470.1, 470.3) == physics.nv_labels(470.3, 470.1)

    def test_levels_example(self):
        hi, lo = physics.nv_levels_from_labels(NVLabels(470.4515, 1.0))
        assert hi == pytest.approx(470.4520, abs=1e-12)
        assert lo == pytest.approx(470.4510, abs=1e-12)

    def test_degenerate(self):
        hi, lo = physics.nv_levels_from_labels(NVLabels(470.0, 0.0))
        assert hi == lo == 470.0

    @settings(max_examples=200, deadline=None)
    @given(mean=st.floats(100.0, 1000.0), split=st.floats(0.0, 100.0))
    def test_round_trip(self, mean, split):
        labels = NVLabels(mean, split)
        back = physics.nv_labels(*physics.nv_levels_from_labels(labels))
        assert back.mean_thz == pytest.approx(mean, abs=1e-9)
        assert back.splitting_ghz == pytest.approx(split, abs=1e-6)


class TestSiVLabels:
    def test_four_level_construction(self):
        mean, gs, es = 406.700, 48.0, 259.0
        a = mean + (es + gs) / 2000.0
        b = mean + (es - gs) / 2000.0
        c = mean - (es - gs) / 2000.0
        d = mean - (es + gs) / 2000.0
        labels = physics.siv_labels(a, b, c, d)
        assert labels.mean_thz == pytest.approx(mean, abs=1e-12)
        assert labels.gs_split_ghz == pytest.approx(gs, abs=1e-8)
        assert labels.es_split_ghz == pytest.approx(es, abs=1e-8)

    def test_two_manifold_level_diagram_oracle(self):
        # independent construction: ground doublet (g1, g2), excited (e1, e2)
        g1, gs = 0.0, 0.048            # THz
        e1, es = 406.75, 0.259
        g2, e2 = g1 + gs, e1 + es
        lines = sorted([e2 - g1, e2 - g2, e1 - g1, e1 - g2], reverse=True)
        labels = physics.siv_labels(*lines)
        assert labels.gs_split_ghz == pytest.approx(gs * 1000, abs=1e-6)
        assert labels.es_split_ghz == pytest.approx(es * 1000, abs=1e-6)
        assert labels.mean_thz == pytest.approx(0.5 * (e1 + e2) - 0.5 * (g1 + g2),
                                                abs=1e-9)

    def test_all_equal(self):
        labels = physics.siv_labels(406.7, 406.7, 406.7, 406.7)
        assert labels == SiVLabels(406.7, 0.0, 0.0)

    def test_unordered_rejected(self):
        with pytest.raises(ValueError):
            physics.siv_labels(406.7, 406.8, 406.6, 406.5)

    def test_inverse_examples(self):
        four = physics.siv_transitions_from_labels(SiVLabels(406.7, 0.0, 0.0))
        assert all(f == 406.7 for f in four)
        a, b, c, d = physics.siv_transitions_from_labels(SiVLabels(406.7, 48.0, 259.0))
        assert (b - c) * 1000 == pytest.approx(211.0, abs=1e-6)

    def test_infeasible_ordering(self):
        with pytest.raises(ValueError):
            physics.siv_transitions_from_labels(SiVLabels(406.7, 259.0, 48.0))

    @settings(max_examples=200, deadline=None)
    @given(mean=st.floats(300.0, 500.0), gs=st.floats(0.0, 100.0),
           extra=st.floats(0.0, 300.0))
    def test_round_trip(self, mean, gs, extra):
        labels = SiVLabels(mean, gs, gs + extra)
        back = physics.siv_labels(*physics.siv_transitions_from_labels(labels))
        assert back.mean_thz == pytest.approx(mean, abs=1e-9)
        assert back.gs_split_ghz == pytest.approx(gs, abs=1e-6)
        assert back.es_split_ghz == pytest.approx(gs + extra, abs=1e-6)


class TestStrainForward:
    def test_zero_strain_limit(self):
        labels = physics.siv_strain_forward(StrainState(), SUSC)
        assert labels.mean_thz == SUSC.zpl0_thz
        assert labels.gs_split_ghz == SUSC.lambda_so_g_ghz
        assert labels.es_split_ghz == SUSC.lambda_so_e_ghz

    def test_pure_axial_strain_shifts_mean_only(self):
        labels = physics.siv_strain_forward(StrainState(e_zz=1e-4), SUSC)
        expected = SUSC.zpl0_thz + (SUSC.t_par_e - SUSC.t_par_g) * 1e-4 / 1000.0
        assert labels.mean_thz == pytest.approx(expected, abs=1e-12)
        assert labels.gs_split_ghz == SUSC.lambda_so_g_ghz
        assert labels.es_split_ghz == SUSC.lambda_so_e_ghz

    def test_pure_anisotropic_strain_hand_check(self):
        eps = 3e-5
        strain = StrainState(e_xx=eps / 2, e_yy=-eps / 2)
        labels = physics.siv_strain_forward(strain, SUSC)
        expected = np.sqrt(SUSC.lambda_so_g_ghz**2 + 4 * SUSC.d_g**2 * eps**2)
        assert labels.gs_split_ghz == pytest.approx(expected, abs=1e-12)

    def test_splittings_monotone_in_anisotropy(self):
        values = [physics.siv_strain_forward(
            StrainState(e_xx=eps, e_yy=-eps), SUSC).gs_split_ghz
            for eps in (0.0, 1e-6, 1e-5, 1e-4)]
        assert values == sorted(values)

    def test_sign_flip_invariance(self):
        strain = StrainState(e_xx=2e-5, e_yy=-1e-5, e_xy=3e-5, e_yz=1e-5, e_zx=-2e-5)
        flipped = StrainState(e_xx=-2e-5, e_yy=1e-5, e_xy=-3e-5, e_yz=-1e-5, e_zx=2e-5)
        a = physics.siv_strain_forward(strain, SUSC)
        b = physics.siv_strain_forward(flipped, SUSC)
        assert a.gs_split_ghz == pytest.approx(b.gs_split_ghz, abs=1e-12)
        assert a.es_split_ghz == pytest.approx(b.es_split_ghz, abs=1e-12)

    def test_two_axial_populations_two_mean_populations(self):
        low = physics.siv_strain_forward(StrainState(e_zz=0.0), SUSC)
        high = physics.siv_strain_forward(StrainState(e_zz=5e-4), SUSC)
        assert low.mean_thz != high.mean_thz
        assert low.gs_split_ghz == high.gs_split_ghz

    def test_strain_sanity_bound(self):
        with pytest.raises(ValueError):
            StrainState(e_xx=0.5)


class TestSusceptibilityIO:
    def test_json_round_trip(self, tmp_path):
        path = tmp_path / "susc.json"
        SUSC.to_json(path)
        assert physics.SiVSusceptibilities.from_json(path) == SUSC
        assert "_units" in path.read_text()
