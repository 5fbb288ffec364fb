import numpy as np
import pytest
import torch

from fpcodec.drnet import (
    BOTTOM_UP,
    TOP_DOWN,
    DRNet,
    DRNetConfig,
    FeatureMixing,
    FeatureMixingTopDown,
    crop_layers,
)
from fpcodec.errors import GeometryError
from fpcodec.fenet import FENet, FENetConfig, fuse
from fpcodec.pyramid import layer_dims, pad_pyramid, synth_pyramid


def _pyramid_tensors(seed: int, dims: tuple[int, int], channels: int):
    padded = pad_pyramid(synth_pyramid(seed, dims, channels))
    return {
        lv: torch.from_numpy(padded.layers[lv]).unsqueeze(0)
        for lv in (2, 3, 4, 5)
    }


class TestFuse:
    def test_channel_concat(self):
        latent = torch.randn(1, 8, 16, 16)
        p = torch.randn(1, 256, 16, 16)
        fused = fuse(latent, p)
        assert fused.shape == (1, 264, 16, 16)

    def test_latent_first(self):
        latent = torch.randn(1, 3, 4, 4)
        p = torch.randn(1, 5, 4, 4)
        fused = fuse(latent, p)
        assert torch.equal(fused[:, :3], latent)

    def test_mismatch_raises(self):
        with pytest.raises(GeometryError):
            fuse(torch.randn(1, 3, 16, 16), torch.randn(1, 3, 8, 8))


class TestFENet:
    def test_block1_halves_to_p3_dims(self):
        torch.manual_seed(0)
        net = FENet(FENetConfig(n_latent=8, in_channels=4))
        p2 = torch.randn(1, 4, 128, 128)
        y1 = net.block1(p2)
        assert y1.shape == (1, 8, 64, 64)

    def test_four_halvings(self):
        # 64x64 p2 (a 256x256 image) halves four times to 4x4
        torch.manual_seed(0)
        net = FENet(FENetConfig(n_latent=32, in_channels=4))
        layers = _pyramid_tensors(0, (256, 256), 4)
        assert layers[2].shape[-2:] == (64, 64)
        y = net(layers[2], layers[3], layers[4], layers[5])
        assert y.shape == (1, 32, 4, 4)

    def test_stride_64_geometry(self):
        torch.manual_seed(0)
        net = FENet(FENetConfig(n_latent=8, in_channels=2))
        layers = _pyramid_tensors(1, (512, 512), 2)
        y = net(layers[2], layers[3], layers[4], layers[5])
        assert y.shape[-2:] == (8, 8)

    def test_deterministic(self):
        torch.manual_seed(0)
        net = FENet(FENetConfig(n_latent=8, in_channels=2))
        layers = _pyramid_tensors(2, (64, 64), 2)
        a = net(layers[2], layers[3], layers[4], layers[5])
        b = net(layers[2], layers[3], layers[4], layers[5])
        assert torch.equal(a, b)

    def test_sensitive_to_every_layer(self):
        torch.manual_seed(0)
        net = FENet(FENetConfig(n_latent=8, in_channels=2))
        layers = {k: v.requires_grad_(True) for k, v in _pyramid_tensors(3, (64, 64), 2).items()}
        y = net(layers[2], layers[3], layers[4], layers[5])
        y.sum().backward()
        for lv in (2, 3, 4, 5):
            assert layers[lv].grad is not None
            assert float(layers[lv].grad.abs().sum()) > 0

    def test_p5_perturbation_changes_y(self):
        torch.manual_seed(0)
        net = FENet(FENetConfig(n_latent=8, in_channels=2))
        layers = _pyramid_tensors(4, (64, 64), 2)
        y0 = net(layers[2], layers[3], layers[4], layers[5])
        y1 = net(layers[2], layers[3], layers[4], layers[5] + 1.0)
        assert not torch.equal(y0, y1)

    def test_gradient_wrt_inputs(self):
        torch.manual_seed(0)
        net = FENet(FENetConfig(n_latent=4, in_channels=2)).double()
        layers = {
            2: torch.randn(1, 2, 16, 16, dtype=torch.float64),
            3: torch.randn(1, 2, 8, 8, dtype=torch.float64),
            4: torch.randn(1, 2, 4, 4, dtype=torch.float64),
            5: torch.randn(1, 2, 2, 2, dtype=torch.float64),
        }
        for lv in (2, 3, 4, 5):
            x = layers[lv].clone().requires_grad_(True)
            args = {**layers, lv: x}
            out = net(args[2], args[3], args[4], args[5]).sum()
            out.backward()
            analytic = x.grad.clone()
            # spot-check 5 coordinates with central differences
            rng = np.random.default_rng(lv)
            flat = x.data.reshape(-1)
            gflat = analytic.reshape(-1)
            eps = 1e-6
            with torch.no_grad():
                for i in rng.integers(0, flat.numel(), 5):
                    orig = flat[i].item()
                    flat[i] = orig + eps
                    hi = float(net(args[2], args[3], args[4], args[5]).sum())
                    flat[i] = orig - eps
                    lo = float(net(args[2], args[3], args[4], args[5]).sum())
                    flat[i] = orig
                    num = (hi - lo) / (2 * eps)
                    denom = max(abs(num), abs(float(gflat[i])), 1e-8)
                    assert abs(num - float(gflat[i])) / denom < 1e-3


class TestFeatureMixing:
    def test_zero_weights_pass_through(self):
        mix = FeatureMixing(3)
        with torch.no_grad():
            for p in mix.parameters():
                p.zero_()
        p_high = torch.randn(1, 3, 32, 32)
        p_low = torch.randn(1, 3, 16, 16)
        assert torch.equal(mix(p_high, p_low), p_low)

    def test_output_dims(self):
        mix = FeatureMixing(2)
        out = mix(torch.randn(1, 2, 32, 32), torch.randn(1, 2, 16, 16))
        assert out.shape == (1, 2, 16, 16)

    def test_dim_mismatch(self):
        mix = FeatureMixing(2)
        with pytest.raises(GeometryError):
            mix(torch.randn(1, 2, 30, 30), torch.randn(1, 2, 16, 16))

    def test_gradient_reaches_both_inputs(self):
        torch.manual_seed(0)
        mix = FeatureMixing(2)
        p_high = torch.randn(1, 2, 8, 8, requires_grad=True)
        p_low = torch.randn(1, 2, 4, 4, requires_grad=True)
        mix(p_high, p_low).sum().backward()
        assert float(p_high.grad.abs().sum()) > 0
        assert float(p_low.grad.abs().sum()) > 0

    def test_top_down_variant_shapes(self):
        torch.manual_seed(0)
        mix = FeatureMixingTopDown(2)
        out = mix(torch.randn(1, 2, 4, 4), torch.randn(1, 2, 8, 8))
        assert out.shape == (1, 2, 8, 8)


class TestDRNet:
    def test_branch_doublings(self):
        torch.manual_seed(0)
        net = DRNet(DRNetConfig(n_latent=8, out_channels=4))
        y_hat = torch.randn(1, 8, 8, 8)
        attended = net.attention(y_hat)
        assert net.branches["5"](attended).shape[-2:] == (16, 16)
        assert net.branches["2"](attended).shape[-2:] == (128, 128)

    def test_all_branches_project_channels(self):
        torch.manual_seed(0)
        net = DRNet(DRNetConfig(n_latent=8, out_channels=4))
        out = net(torch.randn(1, 8, 4, 4))
        for lv in (2, 3, 4, 5):
            assert out[lv].shape[1] == 4

    def test_p6_subsampled_from_p5(self):
        torch.manual_seed(0)
        net = DRNet(DRNetConfig(n_latent=8, out_channels=4))
        out = net(torch.randn(1, 8, 4, 4))
        assert torch.equal(out[6], out[5][..., ::2, ::2])

    def test_pathways_same_shapes(self):
        torch.manual_seed(0)
        bu = DRNet(DRNetConfig(n_latent=8, out_channels=4, pathway=BOTTOM_UP))
        td = DRNet(DRNetConfig(n_latent=8, out_channels=4, pathway=TOP_DOWN))
        y_hat = torch.randn(1, 8, 4, 4)
        out_bu, out_td = bu(y_hat), td(y_hat)
        for lv in (2, 3, 4, 5, 6):
            assert out_bu[lv].shape == out_td[lv].shape

    def test_crop_layers(self):
        layers = {lv: torch.randn(1, 2, 16 >> (lv - 2), 16 >> (lv - 2)) for lv in (2, 3, 4, 5)}
        layers = {lv: torch.nn.functional.pad(t, (0, 3, 0, 3)) for lv, t in layers.items()}
        original = {2: (16, 16), 3: (8, 8), 4: (4, 4), 5: (2, 2)}
        out = crop_layers(layers, original)
        for lv in (2, 3, 4, 5):
            assert out[lv].shape[-2:] == original[lv]
        assert out[6].shape[-2:] == (1, 1)

    def test_gradient_per_branch(self):
        torch.manual_seed(0)
        net = DRNet(DRNetConfig(n_latent=2, out_channels=2)).double()
        x = torch.randn(1, 2, 2, 2, dtype=torch.float64, requires_grad=True)
        net.branches["5"](x).sum().backward()
        analytic = x.grad.clone()
        eps = 1e-6
        flat = x.data.reshape(-1)
        gflat = analytic.reshape(-1)
        with torch.no_grad():
            for i in (0, 3, 7):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(net.branches["5"](x).sum())
                flat[i] = orig - eps
                lo = float(net.branches["5"](x).sum())
                flat[i] = orig
                num = (hi - lo) / (2 * eps)
                denom = max(abs(num), abs(float(gflat[i])), 1e-8)
                assert abs(num - float(gflat[i])) / denom < 1e-3


class TestShapeRoundTrip:
    @pytest.mark.parametrize("dims", [(64, 64), (200, 136), (512, 384), (768, 64)])
    def test_fenet_drnet_reproduce_pyramid_dims(self, dims):
        torch.manual_seed(0)
        fenet = FENet(FENetConfig(n_latent=8, in_channels=2))
        drnet = DRNet(DRNetConfig(n_latent=8, out_channels=2))
        pyr = synth_pyramid(0, dims, 2)
        padded = pad_pyramid(pyr)
        layers = {lv: torch.from_numpy(padded.layers[lv]).unsqueeze(0) for lv in (2, 3, 4, 5)}
        y = fenet(layers[2], layers[3], layers[4], layers[5])
        out = crop_layers(drnet(y), padded.original_dims)
        for lv in (2, 3, 4, 5):
            w, h = dims
            assert out[lv].shape[-2:] == layer_dims(w, h, lv)
            assert out[lv].shape[1] == 2
