import math

import numpy as np
import pytest
import torch

from manifold_metrics import numerics
from manifold_metrics.decoders import (AffineDecoder, ExternalDecoder, FlowDecoder, LatentPermutedDecoder,
                                       MlpDecoder, RotatedDecoder, TorusDecoder, builtin_decoder,
                                       format_index_set, identity_decoder, index_set, jacobian_batch,
                                       load_mlp_decoder, parse_index_set, partition, pca_fit, save_mlp_decoder,
                                       torus_ground_truth_metrics)
from manifold_metrics.dgp import TorusDatasetConfig, make_random_rotation, torus_decoder
from manifold_metrics.errors import CapabilityError, DimensionError, EvaluationError, FormatError, UsageError
from manifold_metrics.flows import FlowModel, flow_decode
from manifold_metrics.metrics import GAUSS_ENTROPY, manifold_entropy, mpmi_matrix

from .helpers import perturbed_flow

MODES = ("analytic", "forward", "reverse", "finite_difference")


def raw_torus():
    cfg = TorusDatasetConfig()
    return TorusDecoder(cfg.sigma_phi(), cfg.sigma_r())


class TestIndexSets:
    def test_parse_one_based(self):
        assert parse_index_set("1,3-4", 5) == (0, 2, 3)
        assert format_index_set((0, 2, 3)) == "1,3,4"

    @pytest.mark.parametrize("bad", [[], [0, 0], [5], [-1]])
    def test_invalid(self, bad):
        with pytest.raises(UsageError):
            index_set(bad, 5)

    def test_partition(self):
        assert partition([[2], [0, 1]], 3) == [(2,), (0, 1)]
        with pytest.raises(UsageError):
            partition([[0], [0, 1]], 2)
        with pytest.raises(UsageError):
            partition([[0]], 2)


class TestDecode:
    def test_identity(self):
        z = np.array([0.3, -1.2])
        np.testing.assert_array_equal(AffineDecoder(np.eye(2)).decode(z), z)

    def test_torus_origin(self):
        x = raw_torus().decode(np.zeros(20))
        np.testing.assert_array_equal(x[0::2], 1.0)
        np.testing.assert_array_equal(x[1::2], 0.0)

    def test_flow_delegates(self):
        model = perturbed_flow()
        z = np.random.default_rng(0).standard_normal((5, 4))
        np.testing.assert_array_equal(FlowDecoder(model).decode(z),
                                      flow_decode(model, torch.from_numpy(z)).detach().numpy())

    def test_deterministic(self):
        dec = MlpDecoder.random([3, 8, 4], seed=0)
        z = np.random.default_rng(0).standard_normal((6, 3))
        assert np.array_equal(dec.decode(z), dec.decode(z))

    def test_non_finite_output(self):
        dec = ExternalDecoder(lambda z: z * np.inf, 2, 2)
        with pytest.raises(EvaluationError):
            dec.decode(np.ones(2))

    def test_wrong_dimension(self):
        with pytest.raises(DimensionError):
            identity_decoder(3).decode(np.zeros(2))


class TestJacobians:
    def test_affine_exact(self):
        a = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
        jac = jacobian_batch(AffineDecoder(a), np.random.default_rng(0).standard_normal((10, 2)))
        assert all(np.array_equal(j, a) for j in jac.jac)

    def test_torus_column_structure(self):
        dec = raw_torus()
        z = np.random.default_rng(1).standard_normal((20, 20))
        jac = dec.jacobian(z, "analytic")
        phi, r = dec.polar(z)
        for j in range(10):
            col = jac[:, :, j]
            mask = np.zeros(20, dtype=bool)
            mask[[2 * j, 2 * j + 1]] = True
            assert np.all(col[:, ~mask] == 0)
            np.testing.assert_allclose(col[:, 2 * j], -dec.sigma_phi[j] * r[:, j] * np.sin(phi[:, j]), atol=1e-15)
            np.testing.assert_allclose(col[:, 2 * j + 1], dec.sigma_phi[j] * r[:, j] * np.cos(phi[:, j]), atol=1e-15)

    @pytest.mark.parametrize("make", [
        lambda: torus_decoder(TorusDatasetConfig()),
        lambda: MlpDecoder.random([4, 16, 16, 6], seed=2),
        lambda: FlowDecoder(perturbed_flow()),
    ])
    def test_cross_mode_agreement(self, make):
        dec = make()
        z = np.random.default_rng(3).standard_normal((8, dec.latent_dim))
        modes = [m for m in MODES if m != "analytic" or dec.has_analytic_jacobian]
        jacs = {m: dec.jacobian(z, m) for m in modes}
        ref = jacs["forward"]
        for m in modes:
            tol = 1e-5 if m == "finite_difference" else 1e-10
            np.testing.assert_allclose(jacs[m], ref, atol=tol, rtol=0, err_msg=m)

    def test_torus_analytic_vs_finite_difference(self):
        dec = torus_decoder(TorusDatasetConfig())
        z = np.random.default_rng(4).standard_normal((50, 20))
        diff = np.abs(dec.jacobian(z, "analytic") - dec.jacobian(z, "finite_difference")).max()
        assert diff <= 1e-6

    def test_column_slice_coherence(self):
        dec = FlowDecoder(perturbed_flow())
        z = np.random.default_rng(5).standard_normal((6, 4))
        full = dec.jacobian(z, "forward")
        for s in [(0,), (1, 3), (0, 2, 3)]:
            np.testing.assert_array_equal(dec.jacobian_columns(z, s, "forward"), full[:, :, list(s)])
        np.testing.assert_array_equal(dec.jacobian_columns(z, (2,), "reverse"), dec.jacobian(z, "reverse")[:, :, [2]])

    def test_external_decoder_fd_only(self):
        a = np.array([[2.0, 1.0], [0.0, 1.0]])
        dec = ExternalDecoder(lambda z: z @ a.T, 2, 2)
        np.testing.assert_allclose(dec.jacobian(np.zeros((1, 2)))[0], a, atol=1e-9)
        with pytest.raises(CapabilityError):
            dec.jacobian(np.zeros((1, 2)), "forward")
        with pytest.raises(CapabilityError):
            dec.jacobian(np.zeros((1, 2)), "analytic")

    def test_degenerate_flagged(self):
        dec = AffineDecoder(np.array([[1.0, 2.0], [2.0, 4.0]]))
        jac = jacobian_batch(dec, np.zeros((3, 2)))
        values, degenerate = jac.log_volume()
        assert degenerate.all() and np.isnan(values).all()

    def test_workers_do_not_change_results(self):
        dec = FlowDecoder(perturbed_flow())
        z = np.random.default_rng(6).standard_normal((700, 4))
        a = jacobian_batch(dec, z, chunk=128, workers=1).jac
        b = jacobian_batch(dec, z, chunk=128, workers=4).jac
        assert a.tobytes() == b.tobytes()

    def test_unknown_mode(self):
        with pytest.raises(UsageError):
            identity_decoder(2).jacobian(np.zeros(2), "symbolic")


class TestWrappers:
    def test_rotation_invariance_of_volumes(self):
        base = MlpDecoder.random([3, 12, 5], seed=7)
        rot = RotatedDecoder(base, make_random_rotation(5, 3))
        z = np.random.default_rng(7).standard_normal((30, 3))
        ja, jb = jacobian_batch(base, z), jacobian_batch(rot, z)
        for s in [(0,), (1,), (2,), (0, 1), (1, 2), (0, 1, 2)]:
            np.testing.assert_allclose(ja.log_volume(s)[0], jb.log_volume(s)[0], atol=1e-10)

    def test_latent_permutation_columns(self):
        base = MlpDecoder.random([3, 12, 5], seed=8)
        perm = [2, 0, 1]
        dec = LatentPermutedDecoder(base, perm)
        z = np.random.default_rng(8).standard_normal((10, 3))
        z_base = np.empty_like(z)
        z_base[:, perm] = z
        np.testing.assert_allclose(dec.decode(z), base.decode(z_base), atol=1e-14)
        np.testing.assert_allclose(dec.jacobian(z, "forward"), base.jacobian(z_base, "forward")[:, :, perm],
                                   atol=1e-14)


class TestMlpFile:
    def test_round_trip_bytes(self, tmp_path):
        dec = MlpDecoder.random([3, 7, 5], activation="softplus", seed=1)
        save_mlp_decoder(dec, tmp_path / "a.mlp")
        loaded = load_mlp_decoder(tmp_path / "a.mlp")
        save_mlp_decoder(loaded, tmp_path / "b.mlp")
        assert (tmp_path / "a.mlp").read_bytes() == (tmp_path / "b.mlp").read_bytes()
        z = np.random.default_rng(0).standard_normal((4, 3))
        np.testing.assert_array_equal(dec.decode(z), loaded.decode(z))

    def test_linear_layer_is_affine(self):
        a = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
        b = np.array([0.1, 0.2, 0.3])
        mlp = MlpDecoder([a], [b])
        aff = AffineDecoder(a, b)
        z = np.random.default_rng(1).standard_normal((5, 2))
        np.testing.assert_allclose(mlp.decode(z), aff.decode(z), atol=1e-15)
        np.testing.assert_allclose(mlp.jacobian(z, "forward"), aff.jacobian(z), atol=1e-15)

    def test_random_mlp_fd(self):
        dec = MlpDecoder.random([4, 10, 6], seed=3)
        z = np.random.default_rng(2).standard_normal((5, 4))
        np.testing.assert_allclose(dec.jacobian(z, "forward"), dec.jacobian(z, "finite_difference"), atol=1e-5)

    def test_unknown_activation(self, tmp_path):
        dec = MlpDecoder.random([2, 3, 2], seed=0)
        save_mlp_decoder(dec, tmp_path / "a.mlp")
        data = (tmp_path / "a.mlp").read_bytes().replace(b"tanh", b"tanx")
        (tmp_path / "a.mlp").write_bytes(data)
        with pytest.raises(FormatError, match="activation"):
            load_mlp_decoder(tmp_path / "a.mlp")

    def test_shape_mismatch(self, tmp_path):
        dec = MlpDecoder.random([2, 3, 2], seed=0)
        save_mlp_decoder(dec, tmp_path / "a.mlp")
        (tmp_path / "a.mlp").write_bytes((tmp_path / "a.mlp").read_bytes() + b"\0" * 8)
        with pytest.raises(FormatError):
            load_mlp_decoder(tmp_path / "a.mlp")
        with pytest.raises(FormatError):
            MlpDecoder([np.ones((3, 2)), np.ones((2, 4))], [np.ones(3), np.ones(2)])


class TestPca:
    def test_recovers_eigenvalues(self):
        data = np.random.default_rng(0).standard_normal((50_000, 2)) * [2.0, 1.0]
        dec = pca_fit(data)
        np.testing.assert_allclose(dec.eigenvalues, [4.0, 1.0], rtol=0.03)
        np.testing.assert_allclose(dec.offset, data.mean(axis=0))
        mp = mpmi_matrix(dec, 200, 0)
        assert abs(mp.value[0, 1]) <= 1e-10

    def test_isotropic(self):
        data = np.random.default_rng(1).standard_normal((50_000, 3)) * 0.5
        dec = pca_fit(data)
        np.testing.assert_allclose(dec.eigenvalues, 0.25, rtol=0.03)
        q = dec.matrix / np.sqrt(dec.eigenvalues)
        np.testing.assert_allclose(q.T @ q, np.eye(3), atol=1e-12)

    def test_closed_form_entropy(self):
        data = np.random.default_rng(2).standard_normal((2000, 3)) @ np.array([[2, 0, 0], [1, 1, 0], [0, 0.3, 0.5]])
        dec = pca_fit(data)
        for i in range(3):
            expected = 0.5 * (math.log(2 * math.pi) + 1) + 0.5 * math.log(dec.eigenvalues[i])
            assert manifold_entropy(dec, (i,), 50, 0).value == pytest.approx(expected, abs=1e-10)

    def test_rank_deficient(self):
        x = np.random.default_rng(3).standard_normal((100, 1))
        with pytest.raises(UsageError):
            pca_fit(np.hstack([x, 2 * x]))


class TestRegistry:
    def test_builtins(self):
        assert builtin_decoder("identity:3").latent_dim == 3
        np.testing.assert_array_equal(builtin_decoder("affine:diag:2,0.5").matrix, np.diag([2.0, 0.5]))
        np.testing.assert_array_equal(builtin_decoder("affine:matrix:1,0;1,1").matrix, [[1.0, 0.0], [1.0, 1.0]])
        assert builtin_decoder("torus").latent_dim == 20
        assert builtin_decoder("torus:raw").scale == 1.0

    def test_unknown(self):
        with pytest.raises(UsageError):
            builtin_decoder("nonsense")

    def test_flow_path(self, tmp_path):
        from manifold_metrics.flows import save_model

        save_model(FlowModel.build(2, blocks=1), tmp_path / "m.flow")
        assert isinstance(builtin_decoder(str(tmp_path / "m.flow")), FlowDecoder)
        assert isinstance(builtin_decoder(f"flow:{tmp_path / 'm.flow'}"), FlowDecoder)


class TestTorusGroundTruth:
    def test_total_correlation_vanishes(self):
        gt = torus_ground_truth_metrics(torus_decoder(TorusDatasetConfig()), 1000, 0)
        assert abs(gt["total_correlation"].value) <= 1e-8

    def test_entropy_differences(self):
        dec = torus_decoder(TorusDatasetConfig())
        jac = jacobian_batch(dec, np.random.default_rng(0).standard_normal((1000, 20)))
        logs = jac.column_log_norms()
        for i in range(10):
            for j in range(i + 1, 10):
                d = logs[:, i] - logs[:, j]
                se = d.std(ddof=1) / math.sqrt(d.size)
                assert abs(d.mean() - math.log(dec.sigma_phi[i] / dec.sigma_phi[j])) <= 3 * se

    def test_azimuthal_above_radial(self):
        gt = torus_ground_truth_metrics(torus_decoder(TorusDatasetConfig()), 500, 1)
        h = [e.value for e in gt["entropies"]]
        assert min(h[:10]) > max(h[10:])

    def test_unit_radius_constant(self):
        dec = raw_torus()
        z = np.random.default_rng(0).standard_normal((300, 20))
        jac = jacobian_batch(dec, z)
        _, r = dec.polar(z)
        np.testing.assert_allclose(np.exp(jac.column_log_norms()[:, :10]), dec.sigma_phi * r, rtol=1e-12)
        assert manifold_entropy(dec, (10,), jac=jac).value == pytest.approx(
            GAUSS_ENTROPY + math.log(dec.sigma_r[0]), abs=1e-12)

    def test_encode_inverts(self):
        dec = torus_decoder(TorusDatasetConfig())
        z = np.random.default_rng(1).standard_normal((100, 20))
        np.testing.assert_allclose(dec.encode(dec.decode(z)), z, atol=1e-9)


def test_flow_decoder_numeric_sanity():
    dec = FlowDecoder(perturbed_flow())
    z = np.random.default_rng(9).standard_normal((5, 4))
    j = dec.jacobian(z, "forward")
    _, ld = FlowModel.decode_with_logdet(dec.model, torch.from_numpy(z))
    for k in range(5):
        assert numerics.log_abs_det(j[k]) == pytest.approx(float(ld[k].detach()), abs=1e-9)
