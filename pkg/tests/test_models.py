import pytest
import torch

from tforge.errors import UsageError
from tforge.models import ARCHS, build_model, freeze


@pytest.mark.parametrize("arch, inter", [("tiny_cnn", (64, 4, 4)), ("nin", (192, 8, 8)), ("resnet18", (512, 1, 1))])
def test_intermediate_shape(arch, inter):
    m = build_model(arch, 10, seed=0)
    assert m.intermediate_shape == inter


@pytest.mark.property
@pytest.mark.parametrize("arch", ARCHS)
def test_split_fidelity(arch):
    m = build_model(arch, 10, seed=0).eval()
    x = torch.rand(8, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        full = m(x)
        split = m.g(m.h(x))
    assert full.shape == (8, 10) and torch.isfinite(full).all()
    assert torch.allclose(full, split, atol=1e-6, rtol=0)


def test_zero_input_finite():
    with torch.no_grad():
        out = build_model("tiny_cnn", 10, seed=0).eval()(torch.zeros(1, 3, 32, 32))
    assert out.shape == (1, 10) and torch.isfinite(out).all()


def test_unknown_arch():
    with pytest.raises(UsageError):
        build_model("vgg16")


def test_seeded_init_repeatable():
    a, b = build_model("tiny_cnn", seed=3), build_model("tiny_cnn", seed=3)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_freeze():
    m = freeze(build_model("tiny_cnn", seed=0))
    assert not m.training and not any(p.requires_grad for p in m.parameters())
