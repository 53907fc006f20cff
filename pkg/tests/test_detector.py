import numpy as np
import pytest
import torch

from detector import (SFIM, DetectorConfig, FrequencyPair, FrequencyRefine, SFIDetector, architecture_fingerprint,
                      build_detector, detector_forward, frequency_refine, from_frequency, sfim_forward, to_frequency)
from errors import DetectorError


def test_dft_round_trip():
    torch.manual_seed(0)
    feature = torch.randn(1, 8, 64, 64)
    restored = from_frequency(to_frequency(feature))
    assert (restored - feature).abs().max().item() <= 1e-5


def test_odd_width_round_trip():
    feature = torch.randn(2, 3, 12, 9)
    assert torch.allclose(from_frequency(to_frequency(feature)), feature, atol=1e-5)


def test_frequency_pair_shape_check():
    with pytest.raises(DetectorError):
        FrequencyPair(torch.zeros(1, 2, 8, 5), torch.zeros(1, 2, 8, 4), (8, 8))


def test_identity_sfim_reproduces_input():
    torch.manual_seed(1)
    module = SFIM(8).identity_()
    feature = torch.randn(2, 8, 16, 16)
    with torch.no_grad():
        out = sfim_forward(feature, module)
    assert (out - feature).abs().max().item() <= 1e-5


def test_frequency_refine_is_positively_homogeneous():
    torch.manual_seed(2)
    stage = FrequencyRefine(4)
    with torch.no_grad():
        stage.depthwise.bias.zero_()
        stage.pointwise.bias.zero_()
        pair = to_frequency(torch.randn(1, 4, 8, 8))
        scaled = FrequencyPair(2.5 * pair.real, 2.5 * pair.imag, pair.size)
        a = frequency_refine(pair, stage)
        b = frequency_refine(scaled, stage)
    assert torch.allclose(b.real, 2.5 * a.real, atol=1e-5)
    assert torch.allclose(b.imag, 2.5 * a.imag, atol=1e-5)


def test_sfim_gradient_matches_finite_differences():
    torch.manual_seed(3)
    module = SFIM(2).double()
    with torch.no_grad():
        # unit slope keeps the stage smooth for central differences
        module.refine.act.weight.fill_(1.0)
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    weights = torch.randn(1, 2, 4, 4, dtype=torch.float64)

    (grad,) = torch.autograd.grad((module(x) * weights).sum(), x)

    h = 1e-6
    numeric = torch.zeros_like(x)
    flat = x.detach().clone().view(-1)
    for i in range(flat.numel()):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += h
        minus[i] -= h
        with torch.no_grad():
            f_plus = (module(plus.view_as(x)) * weights).sum()
            f_minus = (module(minus.view_as(x)) * weights).sum()
        numeric.view(-1)[i] = (f_plus - f_minus) / (2 * h)
    rel = (grad - numeric).norm() / numeric.norm()
    assert rel.item() <= 1e-3


def test_non_finite_stage_is_named():
    feature = torch.randn(1, 4, 8, 8)
    feature[0, 0, 0, 0] = float("nan")
    with pytest.raises(DetectorError, match="refine"):
        SFIM(4, name="sfim2")(feature)


def test_sfim_rejects_tiny_features():
    with pytest.raises(DetectorError):
        SFIM(4)(torch.randn(1, 4, 2, 2))


class TestDetector:
    @pytest.mark.parametrize("arch", ["sfim", "sfim_no_freq", "plain"])
    def test_output_is_probability_map(self, arch):
        torch.manual_seed(0)
        model = build_detector(arch)
        out = model(torch.rand(2, 1, 32, 32))
        assert out.shape == (2, 1, 32, 32)
        assert out.min() > 0.0 and out.max() < 1.0

    def test_zero_head_gives_half(self):
        model = build_detector().zero_head_()
        prob = detector_forward(model, np.random.default_rng(0).uniform(size=(16, 16)))
        assert np.all(prob == 0.5)

    @pytest.mark.parametrize("size", [20, 8])
    def test_rejects_bad_sizes(self, size):
        with pytest.raises(DetectorError):
            build_detector()(torch.rand(1, 1, size, size))

    def test_unknown_architecture(self):
        with pytest.raises(DetectorError):
            SFIDetector(DetectorConfig(arch="dnanet"))

    def test_fingerprint_distinguishes_architectures(self):
        prints = {arch: architecture_fingerprint(build_detector(arch)) for arch in ("sfim", "sfim_no_freq", "plain")}
        assert len(set(prints.values())) == 3
        assert architecture_fingerprint(build_detector("sfim")) == prints["sfim"]

    def test_plain_has_no_frequency_parameters(self):
        names = [n for n, _ in build_detector("plain").named_parameters()]
        assert not any("sfims" in n for n in names)
        names = [n for n, _ in build_detector("sfim_no_freq").named_parameters()]
        assert not any("refine" in n for n in names)

    def test_forward_restores_training_mode(self):
        model = build_detector()
        model.train()
        detector_forward(model, np.zeros((16, 16), dtype=np.float32))
        assert model.training


def test_zero_pair_maps_to_zero_pair():
    torch.manual_seed(4)
    stage = FrequencyRefine(3)
    with torch.no_grad():
        stage.depthwise.bias.zero_()
        stage.pointwise.bias.zero_()
        zero = FrequencyPair(torch.zeros(1, 3, 8, 5), torch.zeros(1, 3, 8, 5), (8, 8))
        out = frequency_refine(zero, stage)
    assert torch.count_nonzero(out.real) == 0
    assert torch.count_nonzero(out.imag) == 0


def _refine_by_loops(stacked, depthwise_w, depthwise_b, slopes, pointwise_w, pointwise_b):
    channels, h, w = stacked.shape
    padded = np.pad(stacked, ((0, 0), (1, 1), (1, 1)))
    spatial = np.zeros_like(stacked)
    for c in range(channels):
        for i in range(h):
            for j in range(w):
                acc = depthwise_b[c]
                for di in range(3):
                    for dj in range(3):
                        acc += depthwise_w[c, di, dj] * padded[c, i + di, j + dj]
                spatial[c, i, j] = acc if acc >= 0 else slopes[c] * acc
    mixed = np.zeros_like(stacked)
    for o in range(channels):
        for i in range(h):
            for j in range(w):
                acc = pointwise_b[o]
                for c in range(channels):
                    acc += pointwise_w[o, c] * spatial[c, i, j]
                mixed[o, i, j] = acc
    return mixed


def test_frequency_refine_matches_direct_convolution():
    torch.manual_seed(5)
    stage = FrequencyRefine(2).double()
    with torch.no_grad():
        for param in stage.parameters():
            param.copy_(torch.randn_like(param))
    pair = to_frequency(torch.randn(1, 2, 8, 8, dtype=torch.float64))
    with torch.no_grad():
        out = frequency_refine(pair, stage)

    stacked = torch.cat([pair.real, pair.imag], dim=1)[0].numpy()
    expected = _refine_by_loops(
        stacked,
        stage.depthwise.weight[:, 0].detach().numpy(),
        stage.depthwise.bias.detach().numpy(),
        stage.act.weight.detach().numpy(),
        stage.pointwise.weight[:, :, 0, 0].detach().numpy(),
        stage.pointwise.bias.detach().numpy(),
    )
    got = torch.cat([out.real, out.imag], dim=1)[0].numpy()
    assert np.abs(got - expected).max() <= 1e-5


def test_constant_feature_energy_sits_in_dc_bin():
    feature = torch.full((1, 2, 8, 8), 0.7, dtype=torch.float64)
    pair = to_frequency(feature)
    magnitude = torch.sqrt(pair.real ** 2 + pair.imag ** 2)
    assert magnitude[..., 0, 0] == pytest.approx(0.7 * 8.0)
    others = magnitude.clone()
    others[..., 0, 0] = 0.0
    assert others.max().item() < 1e-6


def test_sfim_weight_gradients_match_finite_differences():
    torch.manual_seed(6)
    module = SFIM(2).double()
    with torch.no_grad():
        for param in module.parameters():
            param.copy_(0.5 * torch.randn_like(param))
        module.refine.act.weight.fill_(1.0)
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    weights = torch.randn(1, 2, 4, 4, dtype=torch.float64)

    def objective():
        return (module(x) * weights).sum()

    params = dict(module.named_parameters())
    analytic = dict(zip(params, torch.autograd.grad(objective(), list(params.values()))))

    h = 1e-3
    for name, param in params.items():
        numeric = torch.zeros_like(param)
        flat = param.data.view(-1)
        for i in range(flat.numel()):
            original = flat[i].item()
            with torch.no_grad():
                flat[i] = original + h
                f_plus = objective().item()
                flat[i] = original - h
                f_minus = objective().item()
                flat[i] = original
            numeric.view(-1)[i] = (f_plus - f_minus) / (2 * h)
        rel = (analytic[name] - numeric).norm() / max(numeric.norm().item(), 1e-6)
        assert rel.item() <= 1e-3, name
