import numpy as np
import pytest
import torch

from manifold_metrics import numerics
from manifold_metrics.errors import DimensionError, EvaluationError, FormatError
from manifold_metrics.flows import (FLOW_MAGIC, FlowModel, OrthogonalLayer, RqsSpline, flow_decode, flow_encode,
                                    load_model, rqs_forward, rqs_inverse, save_model)


def perturbed_model(dim=4, blocks=3, amplitude=0.2, seed=0):
    model = FlowModel.build(dim, blocks=blocks, hidden=(32, 32), seed=seed)
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(amplitude * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


class TestSpline:
    def test_identity_inside(self):
        y, logd = rqs_forward(torch.tensor(0.3, dtype=torch.float64), RqsSpline.identity())
        assert float(y) == pytest.approx(0.3, abs=1e-15)
        assert float(logd) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("spline", [RqsSpline.identity(), RqsSpline.random(seed=1, scale=2.0)])
    def test_linear_tails(self, spline):
        b = spline.tail_bound
        for x in (b + 1.0, -b - 2.5):
            y, logd = rqs_forward(torch.tensor(x, dtype=torch.float64), spline)
            assert float(y) == x and float(logd) == 0.0
            xi, logi = rqs_inverse(torch.tensor(x, dtype=torch.float64), spline)
            assert float(xi) == x and float(logi) == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_round_trip(self, seed):
        spline = RqsSpline.random(batch=(2000,), scale=2.0, seed=seed)
        x = torch.linspace(-5.0, 5.0, 2000, dtype=torch.float64)
        y, logd = rqs_forward(x, spline)
        x2, logi = rqs_inverse(y, spline)
        assert float((x2 - x).abs().max()) <= 1e-8
        assert float((logd + logi).abs().max()) <= 1e-8

    def test_monotone_and_log_derivative(self):
        spline = RqsSpline.random(scale=1.5, seed=3)
        x = torch.linspace(-4.5, 4.5, 3001, dtype=torch.float64).requires_grad_(True)
        y, logd = rqs_forward(x, spline)
        assert bool(torch.all(y[1:] > y[:-1]))
        (dy,) = torch.autograd.grad(y.sum(), x)
        np.testing.assert_allclose(torch.log(dy).detach().numpy(), logd.detach().numpy(), atol=1e-10)

    def test_knots_inside_interval(self):
        spline = RqsSpline.random(scale=3.0, seed=4)
        for x in (-4.0, 4.0):
            y, _ = rqs_forward(torch.tensor(x, dtype=torch.float64), spline)
            assert float(y) == pytest.approx(x, abs=1e-12)

    def test_non_finite_parameters(self):
        spline = RqsSpline.identity()
        spline.widths[0] = float("nan")
        with pytest.raises(EvaluationError):
            rqs_forward(torch.tensor(0.0, dtype=torch.float64), spline)

    def test_shape_check(self):
        with pytest.raises(DimensionError):
            RqsSpline(torch.zeros(4), torch.zeros(4), torch.zeros(4))


class TestFlowModel:
    def test_fresh_model_is_identity(self):
        model = FlowModel.build(3, blocks=4, seed=0)
        x = torch.from_numpy(np.random.default_rng(0).standard_normal((20, 3)))
        z, logdet = flow_encode(model, x)
        np.testing.assert_allclose(z.detach().numpy(), x.numpy(), atol=1e-12)
        np.testing.assert_allclose(logdet.detach().numpy(), 0.0, atol=1e-12)

    def test_orthogonal_layer(self):
        layer = OrthogonalLayer(5, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            layer.vectors.add_(torch.randn(layer.vectors.shape, dtype=torch.float64))
        q = layer.matrix().detach()
        np.testing.assert_allclose((q.T @ q).numpy(), np.eye(5), atol=1e-10)
        model = FlowModel(5, [layer])
        x = torch.randn(10, 5, dtype=torch.float64)
        z, logdet = model.encode(x)
        assert float(logdet.abs().max()) == 0.0
        np.testing.assert_allclose(model.decode(z).detach().numpy(), x.numpy(), atol=1e-12)
        np.testing.assert_allclose(model.decode(z).detach().numpy(), (z @ q).detach().numpy(), atol=1e-12)

    def test_round_trip_prior_samples(self):
        model = perturbed_model()
        z = torch.from_numpy(np.clip(np.random.default_rng(1).standard_normal((1000, 4)), -4, 4))
        x = flow_decode(model, z)
        z2, _ = model.encode(x)
        assert float((z2 - z).detach().abs().max()) <= 1e-6

    def test_logdet_matches_autodiff(self):
        model = perturbed_model(seed=2)
        x = torch.from_numpy(np.random.default_rng(2).standard_normal((10, 4)))
        _, logdet = model.encode(x)
        for k in range(10):
            jac = torch.func.jacrev(lambda v: model.encode(v.unsqueeze(0))[0][0])(x[k]).detach().numpy()
            assert float(logdet[k].detach()) == pytest.approx(numerics.log_abs_det(jac), abs=1e-6)

    def test_encoder_decoder_logdets_cancel(self):
        model = perturbed_model(seed=3)
        x = torch.from_numpy(np.random.default_rng(3).standard_normal((50, 4)))
        z, ld_f = model.encode(x)
        _, ld_g = model.decode_with_logdet(z)
        np.testing.assert_allclose((ld_f + ld_g).detach().numpy(), 0.0, atol=1e-6)

    def test_dimension_error(self):
        with pytest.raises(DimensionError):
            FlowModel.build(3, blocks=1).encode(torch.zeros(2, 4, dtype=torch.float64))

    def test_non_finite_names_layer(self):
        model = FlowModel.build(2, blocks=1, seed=0)
        with pytest.raises(EvaluationError, match="layer"):
            model.encode(torch.tensor([[float("inf"), 0.0]], dtype=torch.float64))

    def test_parameter_vector_round_trip(self):
        model = perturbed_model(seed=4)
        vec = model.parameter_vector()
        other = FlowModel.build(4, blocks=3, hidden=(32, 32), seed=9)
        other.set_parameter_vector(vec)
        assert torch.equal(other.parameter_vector(), vec)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = perturbed_model(seed=5)
        path = tmp_path / "m.flow"
        save_model(model, path)
        loaded = load_model(path)
        for (n1, a), (n2, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
            assert n1 == n2 and a.numpy().tobytes() == b.numpy().tobytes()
        z = torch.from_numpy(np.random.default_rng(0).standard_normal((100, 4)))
        assert torch.equal(model.decode(z), loaded.decode(z))
        save_model(loaded, tmp_path / "again.flow")
        assert (tmp_path / "again.flow").read_bytes() == path.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.flow"
        save_model(FlowModel.build(2, blocks=1), path)
        data = bytearray(path.read_bytes())
        data[0] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="magic"):
            load_model(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.flow"
        save_model(FlowModel.build(2, blocks=1), path)
        data = bytearray(path.read_bytes())
        data[8] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="version"):
            load_model(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.flow"
        save_model(FlowModel.build(2, blocks=1), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError, match="truncated"):
            load_model(path)

    def test_dimension_inconsistency(self, tmp_path):
        import json
        import struct

        path = tmp_path / "m.flow"
        save_model(FlowModel.build(2, blocks=1), path)
        data = path.read_bytes()
        hlen = struct.unpack("<I", data[12:16])[0]
        header = json.loads(data[16:16 + hlen])
        header["blocks"][0][1] = [7]
        raw = json.dumps(header).encode()
        path.write_bytes(FLOW_MAGIC + struct.pack("<II", 1, len(raw)) + raw + data[16 + hlen:])
        with pytest.raises(FormatError, match="inconsistent"):
            load_model(path)
