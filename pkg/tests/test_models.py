import numpy as np
import pytest
import torch

from priorstain.core import ImagePatch, MifStack, NORM_RANGE
from priorstain.errors import ConfigurationError, NumericalError, ParameterError, ShapeMismatchError
from priorstain.models import (
    DiffusionSchedule, DiscriminatorSpec, GeneratorSpec, build_denoiser, build_discriminator,
    build_generator, ddpm_sample, ddpm_train_step, discriminator_forward, generator_forward,
    load_checkpoint, predict_x0, q_sample, save_checkpoint,
)


@pytest.mark.parametrize("arch", ["unet", "resnet"])
@pytest.mark.parametrize("in_ch", [3, 4])
def test_generator_shapes_and_range(arch, in_ch):
    torch.manual_seed(0)
    g = build_generator(GeneratorSpec(arch, in_ch, 3, base_width=8, depth=3, n_blocks=2))
    y = g(torch.randn(2, in_ch, 32, 32) * 5)
    assert y.shape == (2, 3, 32, 32)
    assert y.abs().max() <= 1.0


def test_generator_forward_patch():
    g = build_generator(GeneratorSpec("unet", 4, 3, base_width=8, depth=2)).eval()
    x = ImagePatch(np.zeros((16, 16, 4)), NORM_RANGE)
    out = generator_forward(g, x, ("DAPI", "Lap2", "Ki67"))
    assert isinstance(out, MifStack)
    assert out.shape == (16, 16, 3) and out.value_range == NORM_RANGE
    with pytest.raises(ConfigurationError):
        generator_forward(g, ImagePatch(np.zeros((16, 16, 3)), NORM_RANGE))
    with pytest.raises(ShapeMismatchError):
        generator_forward(g, ImagePatch(np.zeros((18, 18, 4)), NORM_RANGE))


def test_generator_spec_validation():
    with pytest.raises(ConfigurationError):
        GeneratorSpec("unet", 5, 3)
    with pytest.raises(ConfigurationError):
        GeneratorSpec("transformer", 4, 3)


@pytest.mark.parametrize("size,grid", [(256, 30), (64, 6)])
def test_patch_discriminator_grid(size, grid):
    d = build_discriminator(DiscriminatorSpec(7, base_width=8)).eval()
    s = discriminator_forward(d, torch.randn(1, 4, size, size), torch.randn(1, 3, size, size))
    assert s.shape == (1, 1, grid, grid)


def test_patch_discriminator_receptive_field():
    torch.manual_seed(0)
    d = build_discriminator(DiscriminatorSpec(2, base_width=8)).double().eval()
    assert d.spec.patch_field == 70
    x = torch.randn(1, 1, 128, 128, dtype=torch.float64, requires_grad=True)
    y = torch.randn(1, 1, 128, 128, dtype=torch.float64)
    s = d(x, y)
    c = s.shape[-1] // 2
    s[0, 0, c, c].backward()
    rows, cols = np.nonzero(x.grad[0, 0].numpy())
    assert rows.max() - rows.min() + 1 == 70
    assert cols.max() - cols.min() + 1 == 70


def test_discriminator_input_checks():
    d = build_discriminator(DiscriminatorSpec(7, base_width=8))
    with pytest.raises(ShapeMismatchError):
        discriminator_forward(d, torch.randn(1, 4, 64, 64), torch.randn(1, 3, 32, 32))
    with pytest.raises(ConfigurationError):
        discriminator_forward(d, torch.randn(1, 3, 64, 64), torch.randn(1, 3, 64, 64))


def test_schedule_invariants():
    s = DiffusionSchedule()
    assert s.betas[0] == pytest.approx(1e-4) and s.betas[-1] == pytest.approx(0.02)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bar(0) == 1.0
    assert s.alpha_bar(1000) < 0.01
    with pytest.raises(ParameterError):
        s.check_t(0)
    with pytest.raises(ParameterError):
        DiffusionSchedule(10, 0.02, 0.01)


def test_q_sample_closed_form():
    s = DiffusionSchedule()
    y0 = torch.full((1, 1, 2, 2), 0.5, dtype=torch.float64)
    noise = torch.ones_like(y0)
    ab = s.alpha_bar(500)
    np.testing.assert_allclose(q_sample(s, y0, 500, noise).numpy(), np.sqrt(ab) * 0.5 + np.sqrt(1 - ab))
    with pytest.raises(ParameterError):
        q_sample(s, y0, 1001, noise)


def test_predict_x0_inverts_q_sample():
    s = DiffusionSchedule()
    g = torch.Generator().manual_seed(0)
    y0 = torch.rand(3, 2, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    noise = torch.randn(y0.shape, generator=g, dtype=torch.float64)
    t = torch.tensor([1, 400, 900])
    y_t = q_sample(s, y0, t, noise)
    np.testing.assert_allclose(predict_x0(s, y_t, t, noise, clip=False).numpy(), y0.numpy(), atol=1e-8)


class _ZeroDenoiser(torch.nn.Module):
    out_channels = 1

    def forward(self, y, t, x):
        return torch.zeros_like(y)


def test_zero_denoiser_variance_recursion():
    s = DiffusionSchedule()
    v = 1.0
    for t in range(s.T, 1, -1):
        v = v / s.alphas[t - 1] + s.betas[t - 1]
    v = v / s.alphas[0]
    y = ddpm_sample(s, _ZeroDenoiser(), torch.zeros(1, 3, 64, 64, dtype=torch.float64), seed=1, clip=False)
    n = y.numel()
    assert abs(float(y.var()) - v) < 5 * v * np.sqrt(2.0 / n)
    assert abs(float(y.mean())) < 5 * np.sqrt(v / n)


def test_ddpm_sample_deterministic_and_clipped():
    s = DiffusionSchedule(T=20)
    den = build_denoiser(3, 2, base_width=8, depth=2).eval()
    x = torch.zeros(1, 3, 16, 16)
    a = ddpm_sample(s, den, x, seed=3)
    b = ddpm_sample(s, den, x, seed=3)
    assert torch.equal(a, b)
    assert a.shape == (1, 2, 16, 16) and a.abs().max() <= 1


def test_ddpm_sample_reports_nonfinite_step():
    class Exploding(torch.nn.Module):
        out_channels = 1

        def forward(self, y, t, x):
            return torch.full_like(y, float("inf")) if int(t[0]) == 7 else torch.zeros_like(y)

    with pytest.raises(NumericalError, match="step 7"):
        ddpm_sample(DiffusionSchedule(T=10), Exploding(), torch.zeros(1, 3, 4, 4))


def test_ddpm_train_step_shapes():
    s = DiffusionSchedule(T=50)
    den = build_denoiser(4, 3, base_width=8, depth=2)
    y0 = torch.zeros(2, 3, 16, 16)
    eps, y_t = ddpm_train_step(s, den, torch.zeros(2, 4, 16, 16), y0, torch.tensor([1, 50]),
                               torch.randn(2, 3, 16, 16), return_noisy=True)
    assert eps.shape == y0.shape == y_t.shape


def test_checkpoint_roundtrip(tmp_path):
    spec = GeneratorSpec("unet", 4, 3, base_width=8, depth=2)
    g = build_generator(spec).eval()
    save_checkpoint(tmp_path / "c.pt", config={"arch": "regression_unet"}, generator_spec=spec,
                    generator_state=g.state_dict())
    g2, payload = load_checkpoint(tmp_path / "c.pt")
    x = torch.randn(1, 4, 16, 16)
    assert torch.equal(g(x), g2(x))
    assert payload["config"]["arch"] == "regression_unet"

    sched = DiffusionSchedule(T=30)
    den = build_denoiser(4, 3, base_width=8, depth=2)
    save_checkpoint(tmp_path / "d.pt", config={}, generator_spec=spec, generator_state=den.state_dict(),
                    schedule=sched)
    den2, payload = load_checkpoint(tmp_path / "d.pt")
    assert payload["schedule_obj"].T == 30
    t = torch.tensor([5])
    y = torch.randn(1, 3, 16, 16)
    den.eval()
    assert torch.equal(den(y, t, x), den2(y, t, x))
