"""Harmonics, rotation operators, tensor-field convolution, and attention."""

import numpy as np
import pytest

from dockinv import autodiff as ad
from dockinv import equivariant as eq
from dockinv.config import RunConfig


@pytest.fixture(scope="module")
def small_cfg():
    return RunConfig(multiplicity=4, conv_k=6).validate()


def random_units(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestHarmonics:
    def test_order_zero_constant(self):
        out = eq.real_spherical_harmonics(0, np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(out, [1.0 / (2 * np.sqrt(np.pi))], atol=1e-15)
        assert abs(out[0] - 0.28209479) < 1e-7

    def test_order_one_z_direction(self):
        out = eq.real_spherical_harmonics(1, np.array([0.0, 0.0, 1.0]))
        c = np.sqrt(3.0 / (4 * np.pi))
        np.testing.assert_allclose(out, [0.0, c, 0.0], atol=1e-15)
        assert abs(c - 0.48860251) < 1e-7

    def test_order_two_addition_theorem(self):
        rng = np.random.default_rng(0)
        d = random_units(rng, 10_000)
        y2 = eq.real_spherical_harmonics(2, d)
        np.testing.assert_allclose((y2**2).sum(axis=1), 5.0 / (4 * np.pi), atol=1e-12)

    def test_near_unit_normalized(self):
        out = eq.real_spherical_harmonics(1, np.array([0.0, 0.0, 1.0 + 5e-7]))
        np.testing.assert_allclose(out, [0.0, np.sqrt(3 / (4 * np.pi)), 0.0], atol=1e-9)

    def test_far_from_unit_rejected(self):
        with pytest.raises(eq.EquivariantError):
            eq.real_spherical_harmonics(1, np.array([0.0, 0.0, 2.0]))

    def test_unsupported_order(self):
        with pytest.raises(eq.EquivariantError):
            eq.real_spherical_harmonics(3, np.array([0.0, 0.0, 1.0]))


class TestRotationOperators:
    def test_identity_rotation(self):
        for l in (0, 1, 2):
            np.testing.assert_allclose(eq.rotation_operator(l, np.eye(3)),
                                       np.eye(2 * l + 1), atol=1e-12)

    def test_transformation_rule(self):
        rng = np.random.default_rng(1)
        d = random_units(rng, 64)
        for _ in range(5):
            rot = eq.random_rotation(rng)
            for l in (0, 1, 2):
                op = eq.rotation_operator(l, rot)
                lhs = eq.real_spherical_harmonics(l, d @ rot.T)
                rhs = eq.real_spherical_harmonics(l, d) @ op.T
                np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_norm_preservation_thousand_draws(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            rot = eq.random_rotation(rng)
            l = int(rng.integers(0, 3))
            v = rng.standard_normal(2 * l + 1)
            rotated = eq.rotate_field(l, rot, v)
            assert abs(np.linalg.norm(rotated) - np.linalg.norm(v)) < 1e-12

    def test_l2_operator_orthogonal(self):
        rng = np.random.default_rng(3)
        rot = eq.random_rotation(rng)
        op = eq.rotation_operator(2, rot)
        np.testing.assert_allclose(op @ op.T, np.eye(5), atol=1e-12)

    def test_order_above_two_rejected(self):
        with pytest.raises(eq.EquivariantError):
            eq.rotate_field(3, np.eye(3), np.zeros(7))

    def test_order_zero_bitwise_invariant(self):
        rng = np.random.default_rng(4)
        v = rng.standard_normal(1)
        out = eq.rotate_field(0, eq.random_rotation(rng), v)
        assert out.tobytes() == v.tobytes()


class TestCoupling:
    def test_all_triangle_paths_exist(self):
        for lo in range(3):
            for lf in range(3):
                for li in range(3):
                    if abs(lf - li) <= lo <= lf + li:
                        t = eq.coupling_tensor(lo, lf, li)
                        assert t.shape == (2 * lo + 1, 2 * lf + 1, 2 * li + 1)
                        assert abs(np.linalg.norm(t) - 1.0) < 1e-12

    def test_violating_path_rejected(self):
        with pytest.raises(eq.EquivariantError):
            eq.coupling_tensor(2, 0, 1)

    def test_intertwiner_property(self):
        rng = np.random.default_rng(5)
        for (lo, lf, li) in [(0, 1, 1), (1, 1, 1), (2, 1, 1), (2, 2, 2), (1, 2, 1)]:
            t = eq.coupling_tensor(lo, lf, li)
            for _ in range(3):
                rot = eq.random_rotation(rng)
                d_o = eq.rotation_operator(lo, rot)
                d_f = eq.rotation_operator(lf, rot)
                d_i = eq.rotation_operator(li, rot)
                lhs = np.einsum("ab,bfi->afi", d_o, t)
                rhs = np.einsum("afi,fg,ij->agj", t, d_f, d_i)
                np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestRadialBasis:
    def test_zero_beyond_cutoff(self):
        basis = eq.RadialBasis(5.0, 8)
        r = np.array([4.999, 5.0, 6.0, 100.0])
        vals = basis.evaluate(r)
        assert np.all(vals[1:] == 0.0)
        assert np.any(vals[0] > 0.0)

    def test_tensor_path_matches_numpy(self):
        basis = eq.RadialBasis(5.0, 6)
        r = np.linspace(0.1, 6.0, 40)
        np_vals = basis.evaluate(r)
        t_vals = basis.evaluate_t(ad.constant(r)).values
        np.testing.assert_allclose(np_vals, t_vals, atol=1e-12)


def build_encoder(cfg, seed=0, n_scalars=14):
    enc = eq.Encoder(n_scalar_in=n_scalars, cfg=cfg)
    params = enc.init_params(np.random.default_rng(seed))
    return enc, params


def random_cloud(rng, n, n_scalars=14, scale=3.0, offset=0.0):
    pts = rng.standard_normal((n, 3)) * scale + offset
    feats = np.concatenate([rng.standard_normal((n, n_scalars)), pts], axis=1)
    return pts, feats


class TestConvolution:
    def test_out_of_range_neighborhood_gives_zero(self, small_cfg):
        # two points farther apart than the radial cutoff, self excluded:
        # every message dies in the cutoff envelope
        enc, params = build_encoder(small_cfg)
        pts = np.array([[0.0, 0, 0], [100.0, 0, 0]])
        feats = np.concatenate([np.ones((2, 14)), pts], axis=1)
        nbr = np.array([[1], [0]])
        layer = enc.layers[0]
        geom = eq.conv_geometry(pts, nbr, enc.basis, enc.max_order)
        field = eq.encoder_input(feats, pts)
        scoped = {k: params[k] for k in params if k.startswith("enc0")}
        out = layer.apply(scoped, field, geom)
        for l, ch in out.channels.items():
            if l == 0:
                bias = params["enc0.bias0"].reshape(1, -1, 1)
                np.testing.assert_allclose(ch.values, np.broadcast_to(bias, ch.shape),
                                           atol=1e-15)
            else:
                np.testing.assert_allclose(ch.values, 0.0, atol=1e-15)

    def test_rotation_equivariance(self, small_cfg):
        rng = np.random.default_rng(6)
        enc, params = build_encoder(small_cfg)
        pts, feats = random_cloud(rng, 16)
        rot = eq.random_rotation(rng)
        f1 = enc.apply(params, feats, pts)
        feats_rot = np.concatenate([feats[:, :14], pts @ rot.T], axis=1)
        f2 = enc.apply(params, feats_rot, pts @ rot.T)
        for l in f1.channels:
            expected = f1.values()[l] @ eq.rotation_operator(l, rot).T
            np.testing.assert_allclose(f2.values()[l], expected, atol=1e-9)

    def test_translation_invariance_exact_on_grid(self, small_cfg):
        # half-integer coordinates and an integer shift keep every
        # subtraction exact, so outputs must match bitwise
        rng = np.random.default_rng(7)
        enc, params = build_encoder(small_cfg)
        pts = np.round(rng.standard_normal((12, 3)) * 4) / 2
        feats = np.concatenate([rng.standard_normal((12, 14)), pts], axis=1)
        shift = np.array([4.0, -8.0, 16.0])
        f1 = enc.apply(params, feats, pts)
        feats2 = np.concatenate([feats[:, :14], pts + shift], axis=1)
        f2 = enc.apply(params, feats2, pts + shift)
        for l in f1.channels:
            assert f1.values()[l].tobytes() == f2.values()[l].tobytes()

    def test_translation_invariance_generic(self, small_cfg):
        rng = np.random.default_rng(8)
        enc, params = build_encoder(small_cfg)
        pts, feats = random_cloud(rng, 14)
        shift = rng.standard_normal(3) * 10
        f1 = enc.apply(params, feats, pts)
        feats2 = np.concatenate([feats[:, :14], pts + shift], axis=1)
        f2 = enc.apply(params, feats2, pts + shift)
        for l in f1.channels:
            np.testing.assert_allclose(f1.values()[l], f2.values()[l], atol=1e-12)


class TestEncoderEquivariance:
    def test_multi_seed_multi_motion(self, small_cfg):
        # broader sweep lives in the acceptance suite
        for seed in range(3):
            rng = np.random.default_rng(100 + seed)
            enc, params = build_encoder(small_cfg, seed=seed)
            pts, feats = random_cloud(rng, 15)
            base = enc.apply(params, feats, pts).values()
            for _ in range(2):
                rot = eq.random_rotation(rng)
                shift = rng.standard_normal(3) * 5
                moved = pts @ rot.T + shift
                feats2 = np.concatenate([feats[:, :14], moved], axis=1)
                out = enc.apply(params, feats2, moved).values()
                scale = max(np.abs(base[0]).max(), 1e-12)
                assert np.abs(out[0] - base[0]).max() / scale < 1e-8
                for l in (1, 2):
                    expected = base[l] @ eq.rotation_operator(l, rot).T
                    scale = max(np.abs(expected).max(), 1e-12)
                    assert np.abs(out[l] - expected).max() / scale < 1e-8


class TestAttention:
    def _setup(self, small_cfg, n_r=10, n_l=6, seed=9):
        rng = np.random.default_rng(seed)
        enc_r, params_r = build_encoder(small_cfg, seed=seed)
        enc_l, params_l = build_encoder(small_cfg, seed=seed + 1, n_scalars=16)
        pts_r, feats_r = random_cloud(rng, n_r)
        pts_l, feats_l = random_cloud(rng, n_l, n_scalars=16, offset=4.0)
        zr = enc_r.apply(params_r, feats_r, pts_r)
        zl = enc_l.apply(params_l, feats_l, pts_l)
        attn = eq.init_attention_params(small_cfg.multiplicity, enc_r.out_layout,
                                        np.random.default_rng(2))
        return zr, zl, attn, (enc_r, params_r, feats_r, pts_r), (enc_l, params_l, feats_l, pts_l), rng

    def test_rows_sum_to_one(self, small_cfg):
        zr, zl, attn, *_ = self._setup(small_cfg)
        _, _, scores = eq.equivariant_attention(zr, zl, attn)
        np.testing.assert_allclose(scores.values.sum(axis=1), 1.0, atol=1e-12)

    def test_identical_keys_uniform_rows(self, small_cfg):
        zr, zl, attn, *_ = self._setup(small_cfg)
        ch = {l: np.repeat(v[:1], 6, axis=0) for l, v in zl.values().items()}
        zl_const = eq.IrrepsField(ch)
        _, _, scores = eq.equivariant_attention(zr, zl_const, attn)
        np.testing.assert_allclose(scores.values, 1.0 / 6.0, atol=1e-12)

    def test_single_ligand_point_passthrough(self, small_cfg):
        zr, zl, attn, *_ = self._setup(small_cfg, n_l=1)
        attended, _, _ = eq.equivariant_attention(zr, zl, attn)
        for l, ch in zl.values().items():
            n_l, c, m = ch.shape
            w = attn[f"attn.wv{l}"]
            proj = np.einsum("ncm,cd->ndm", ch, w)
            expected = np.repeat(proj, attended.channels[l].shape[0], axis=0)
            np.testing.assert_allclose(attended.values()[l], expected, atol=1e-12)

    def test_empty_ligand_rejected(self, small_cfg):
        zr, zl, attn, *_ = self._setup(small_cfg)
        empty = eq.IrrepsField({l: v[:0] for l, v in zl.values().items()})
        with pytest.raises(ad.DomainError):
            eq.equivariant_attention(zr, empty, attn)

    def test_scores_invariant_under_rigid_motion(self, small_cfg):
        zr, zl, attn, rinfo, linfo, rng = self._setup(small_cfg)
        enc_r, params_r, feats_r, pts_r = rinfo
        enc_l, params_l, feats_l, pts_l = linfo
        rot = eq.random_rotation(rng)
        shift = rng.standard_normal(3) * 3
        zr2 = enc_r.apply(params_r, np.concatenate([feats_r[:, :14], pts_r @ rot.T + shift], 1),
                          pts_r @ rot.T + shift)
        zl2 = enc_l.apply(params_l, np.concatenate([feats_l[:, :16], pts_l @ rot.T + shift], 1),
                          pts_l @ rot.T + shift)
        _, fused1, s1 = eq.equivariant_attention(zr, zl, attn)
        _, fused2, s2 = eq.equivariant_attention(zr2, zl2, attn)
        np.testing.assert_allclose(s1.values, s2.values, atol=1e-9)
        np.testing.assert_allclose(fused1.values, fused2.values, atol=1e-9)

    def test_ligand_permutation(self, small_cfg):
        zr, zl, attn, *_ = self._setup(small_cfg)
        perm = np.array([3, 0, 5, 1, 4, 2])
        zl_perm = eq.IrrepsField({l: v[perm] for l, v in zl.values().items()})
        att1, fused1, s1 = eq.equivariant_attention(zr, zl, attn)
        att2, fused2, s2 = eq.equivariant_attention(zr, zl_perm, attn)
        np.testing.assert_allclose(s2.values, s1.values[:, perm], atol=1e-14)
        np.testing.assert_allclose(fused2.values, fused1.values, atol=1e-13)
        for l in att1.channels:
            np.testing.assert_allclose(att2.values()[l], att1.values()[l], atol=1e-13)
