import numpy as np
import pytest
import torch

from fpcodec.codec import CodecConfig, FeatureCodec
from fpcodec.coder import PythonBackend
from fpcodec.entropy import build_cdf_tables
from fpcodec.pyramid import synth_pyramid


@pytest.fixture(scope="session")
def tiny_codec():
    torch.manual_seed(0)
    codec = FeatureCodec(CodecConfig(n_latent=8, channels=4, with_cm=True)).eval()
    return codec


@pytest.fixture(scope="session")
def tiny_codec_nocm():
    torch.manual_seed(0)
    codec = FeatureCodec(CodecConfig(n_latent=8, channels=4, with_cm=False)).eval()
    return codec


@pytest.fixture(scope="session")
def tiny_tables(tiny_codec):
    return build_cdf_tables(tiny_codec.entropy)


@pytest.fixture(scope="session")
def tiny_tables_nocm(tiny_codec_nocm):
    return build_cdf_tables(tiny_codec_nocm.entropy)


@pytest.fixture(scope="session")
def backend():
    return PythonBackend()


@pytest.fixture()
def small_pyramid():
    return synth_pyramid(7, (128, 96), channels=4)


def central_difference(f, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite-difference gradient of scalar f wrt tensor x."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(f())
        flat[i] = orig - eps
        lo = float(f())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def assert_grad_matches(module_fn, x: torch.Tensor, rtol: float = 1e-4):
    """Compare autograd gradients against central differences (float64)."""
    x = x.detach().clone().double().requires_grad_(True)
    out = module_fn(x).sum()
    out.backward()
    analytic = x.grad.clone()
    with torch.no_grad():
        numeric = central_difference(lambda: module_fn(x).sum(), x.data)
    denom = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(1e-6)
    rel = ((analytic - numeric).abs() / denom).max().item()
    assert rel < rtol, f"gradient mismatch: max rel err {rel}"


np.random.seed(0)
