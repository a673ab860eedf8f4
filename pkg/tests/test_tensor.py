import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from spikeuie import tensor as tn

from oracles import bilinear_sample, central_fd, direct_conv2d, direct_dft2, rel_err


def rand5(*shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)


class TestConv2d:
    def test_unit_kernel_scales(self):
        x = torch.ones(1, 1, 1, 2, 2)
        w = torch.full((1, 1, 1, 1), 2.0)
        assert torch.equal(tn.conv2d(x, w), torch.full((1, 1, 1, 2, 2), 2.0))

    def test_delta_reproduces_kernel_unflipped(self):
        x = torch.zeros(1, 1, 1, 3, 3, dtype=torch.float64)
        x[..., 1, 1] = 1.0
        w = torch.arange(9, dtype=torch.float64).reshape(1, 1, 3, 3)
        y = tn.conv2d(x, w, pad=1)
        # cross-correlation: output(i, j) = w(1 - i + 1, ...) -> the kernel reversed in place
        expected = direct_conv2d(x[0].numpy(), w.numpy(), pad=1)[0, 0]
        np.testing.assert_allclose(y[0, 0, 0].numpy(), expected)
        np.testing.assert_allclose(y[0, 0, 0].numpy(), w[0, 0].flip(0, 1).numpy())

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)])
    def test_matches_direct_loop(self, stride, pad, k):
        x = rand5(2, 1, 3, 6, 5, seed=1)
        w = rand5(4, 3, k, k, seed=2)
        y = tn.conv2d(x, w, stride=stride, pad=pad)
        ref = direct_conv2d(x.reshape(2, 3, 6, 5).numpy(), w.numpy(), stride, pad)
        np.testing.assert_allclose(y.reshape(ref.shape).numpy(), ref, atol=1e-10)
        assert y.shape[3] == (6 + 2 * pad - k) // stride + 1

    def test_weight_gradient_matches_fd(self):
        x = rand5(1, 1, 2, 4, 4, seed=3)
        w = rand5(3, 2, 3, 3, seed=4).requires_grad_()
        tn.conv2d(x, w, pad=1).sum().backward()
        [(idx, est)] = central_fd(lambda: tn.conv2d(x, w, pad=1).sum(), [w])
        assert rel_err(w.grad.view(-1)[idx].numpy(), est) < 1e-3

    def test_channel_mismatch(self):
        with pytest.raises(tn.ShapeError):
            tn.conv2d(torch.zeros(1, 1, 2, 4, 4), torch.zeros(1, 3, 3, 3))

    def test_nonpositive_output(self):
        with pytest.raises(tn.ShapeError):
            tn.conv2d(torch.zeros(1, 1, 1, 2, 2), torch.zeros(1, 1, 3, 3))


class TestPooling:
    def test_constant(self):
        x = torch.full((2, 1, 3, 8, 8), 0.7)
        for window in (1, 2, 4):
            assert torch.allclose(tn.avgpool2d(x, window), torch.full_like(tn.avgpool2d(x, window), 0.7))

    def test_hand_mean(self):
        x = torch.tensor([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 2, 2)
        assert tn.avgpool2d(x, 2).item() == 2.5

    def test_identity_window(self):
        x = rand5(1, 1, 2, 5, 5)
        assert torch.equal(tn.avgpool2d(x, 1), x)

    def test_bad_window(self):
        with pytest.raises(tn.ParameterError):
            tn.avgpool2d(torch.zeros(1, 1, 1, 4, 4), 0)

    def test_non_divisible_reflect_pads(self):
        x = torch.arange(6, dtype=torch.float64).reshape(1, 1, 1, 1, 6).expand(1, 1, 1, 6, 6)
        y = tn.avgpool2d(x, 4)
        assert y.shape[-2:] == (2, 2)
        # columns 4, 5 reflected: 4, 5, 4, 3 -> mean 4.0
        assert y[0, 0, 0, 0, 1].item() == pytest.approx(4.0)

    def test_gap(self):
        x = torch.tensor([0.0, 0.0, 0.0, 4.0]).reshape(1, 1, 1, 2, 2)
        assert tn.adaptive_gap(x).item() == 1.0
        c = torch.full((1, 2, 3, 5, 7), 0.25)
        assert torch.equal(tn.upsample_nearest(tn.adaptive_gap(c), 5, 7), c)


class TestUpsample:
    def test_broadcast(self):
        x = torch.full((1, 1, 1, 1, 1), 3.0)
        assert torch.equal(tn.upsample_nearest(x, 4, 6), torch.full((1, 1, 1, 4, 6), 3.0))

    def test_block_replication(self):
        x = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 1, 2, 2)
        expected = torch.tensor([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=torch.float32)
        assert torch.equal(tn.upsample_nearest(x, 4, 4)[0, 0, 0], expected)

    def test_same_size(self):
        x = rand5(1, 1, 1, 3, 3)
        assert torch.equal(tn.upsample_nearest(x, 3, 3), x)

    def test_fractional_ratio_uses_index_formula(self):
        x = torch.arange(3, dtype=torch.float64).reshape(1, 1, 1, 1, 3)
        y = tn.upsample_nearest(x, 1, 5)
        assert y.view(-1).tolist() == [float(j * 3 // 5) for j in range(5)]

    def test_zero_target(self):
        with pytest.raises(tn.ParameterError):
            tn.upsample_nearest(torch.zeros(1, 1, 1, 2, 2), 0, 2)


class TestBilinear:
    def test_identity(self):
        x = rand5(1, 2, 3, 4, 4)
        assert torch.equal(tn.resize_bilinear(x, 4, 4), x)

    def test_constant(self):
        x = torch.full((1, 1, 2, 6, 6), 0.3, dtype=torch.float64)
        assert torch.allclose(tn.resize_bilinear(x, 3, 9), torch.full((1, 1, 2, 3, 9), 0.3, dtype=torch.float64))

    def test_row_hand_values(self):
        x = torch.tensor([0.0, 1.0, 2.0, 3.0]).reshape(1, 1, 1, 1, 4)
        y = tn.resize_bilinear(x, 1, 2)
        assert y.view(-1).tolist() == [0.5, 2.5]

    @pytest.mark.parametrize("size", [(3, 5), (8, 8), (2, 2), (7, 3)])
    def test_matches_bruteforce_sampler(self, size):
        x = rand5(1, 1, 1, 6, 6, seed=5)
        y = tn.resize_bilinear(x, *size)
        np.testing.assert_allclose(y[0, 0, 0].numpy(), bilinear_sample(x[0, 0, 0].numpy(), *size), atol=1e-12)


class TestFFT:
    def test_zero(self):
        re, im = tn.fft2(torch.zeros(1, 1, 1, 4, 4))
        assert not re.any() and not im.any()

    def test_constant_dc(self):
        re, im = tn.fft2(torch.full((1, 1, 1, 3, 5), 2.0, dtype=torch.float64))
        assert re[..., 0, 0].item() == pytest.approx(30.0)
        re[..., 0, 0] = 0
        assert torch.allclose(re, torch.zeros_like(re), atol=1e-12)
        assert torch.allclose(im, torch.zeros_like(im), atol=1e-12)

    @pytest.mark.parametrize("h,w", [(h, w) for h in range(1, 9) for w in (1, 3, 4, 8)])
    def test_matches_direct_dft(self, h, w):
        x = rand5(1, 1, 1, h, w, seed=h * 10 + w)
        re, im = tn.fft2(x)
        ref = direct_dft2(x[0, 0, 0].numpy())
        np.testing.assert_allclose(re[0, 0, 0].numpy(), ref.real, atol=1e-5)
        np.testing.assert_allclose(im[0, 0, 0].numpy(), ref.imag, atol=1e-5)

    def test_inverse_roundtrip(self):
        x = rand5(2, 1, 3, 6, 8, dtype=torch.float32)
        assert torch.allclose(tn.ifft2(*tn.fft2(x)), x, atol=1e-4)


class TestSplitConcat:
    def test_order(self):
        x = torch.arange(4.0).reshape(1, 1, 4, 1, 1)
        parts = tn.channel_split4(x)
        assert [p.item() for p in parts] == [0.0, 1.0, 2.0, 3.0]

    def test_roundtrip_bitwise(self):
        x = rand5(2, 3, 8, 4, 4, dtype=torch.float32)
        assert torch.equal(tn.channel_concat(tn.channel_split4(x)), x)

    def test_gradient_routing(self):
        x = rand5(1, 1, 8, 2, 2).requires_grad_()
        tn.channel_split4(x)[1].sum().backward()
        expected = torch.zeros_like(x)
        expected[:, :, 2:4] = 1.0
        assert torch.equal(x.grad, expected)

    def test_indivisible(self):
        with pytest.raises(tn.ShapeError):
            tn.channel_split4(torch.zeros(1, 1, 6, 2, 2))

    def test_concat_mismatch(self):
        with pytest.raises(tn.ShapeError):
            tn.channel_concat([torch.zeros(1, 1, 1, 2, 2), torch.zeros(2, 1, 1, 2, 2)])


class TestBackward:
    def test_linear_map(self):
        x = rand5(1, 1, 1, 3, 3)
        w = torch.tensor(0.5, dtype=torch.float64, requires_grad=True)
        tn.backward((w * x).sum())
        assert w.grad.item() == pytest.approx(x.sum().item())

    def test_composite_pipeline_fd(self):
        x = rand5(1, 1, 2, 4, 4, seed=7)
        w = rand5(2, 2, 3, 3, seed=8).requires_grad_()
        target = rand5(1, 1, 2, 2, 2, seed=9)

        def loss():
            return (tn.avgpool2d(tn.conv2d(x, w, pad=1), 2) - target).abs().mean()

        tn.backward(loss())
        [(idx, est)] = central_fd(loss, [w], eps=1e-3)
        assert rel_err(w.grad.view(-1)[idx].numpy(), est) < 1e-3

    def test_accumulates(self):
        x = rand5(1, 1, 2, 4, 4)
        w = rand5(2, 2, 3, 3).requires_grad_()
        tn.zero_grads([w])
        tn.backward(tn.conv2d(x, w).pow(2).sum())
        once = w.grad.clone()
        tn.zero_grads([w])
        assert not w.grad.any()
        tn.backward(tn.conv2d(x, w).pow(2).sum())
        tn.backward(tn.conv2d(x, w).pow(2).sum())
        assert torch.equal(w.grad, 2 * once)

    def test_detached_loss(self):
        with pytest.raises(tn.UsageError):
            tn.backward(torch.tensor(1.0))


PRIMITIVES = {
    "conv": lambda x: tn.conv2d(x, torch.linspace(-1, 1, 2 * 2 * 9, dtype=x.dtype).reshape(2, 2, 3, 3), pad=1),
    "avgpool": lambda x: tn.avgpool2d(x, 2),
    "avgpool_pad": lambda x: tn.avgpool2d(x, 4),
    "gap": tn.adaptive_gap,
    "bilinear": lambda x: tn.resize_bilinear(x, 3, 5),
    "fft_re": lambda x: tn.fft2(x)[0],
    "fft_im": lambda x: tn.fft2(x)[1],
    "upsample": lambda x: tn.upsample_nearest(x, 12, 12),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_fd(name):
    fn = PRIMITIVES[name]
    x = rand5(2, 1, 2, 6, 6, seed=11).requires_grad_()
    proj = rand5(*fn(x).shape, seed=12)
    (fn(x) * proj).sum().backward()
    [(idx, est)] = central_fd(lambda: (fn(x) * proj).sum(), [x], eps=1e-3)
    assert rel_err(x.grad.view(-1)[idx].numpy(), est) < 1e-3


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000), name=st.sampled_from(sorted(PRIMITIVES)))
def test_primitives_are_linear(a, b, seed, name):
    fn = PRIMITIVES[name]
    x = rand5(1, 2, 2, 6, 6, seed=seed)
    y = rand5(1, 2, 2, 6, 6, seed=seed + 1)
    lhs = fn(a * x + b * y)
    rhs = a * fn(x) + b * fn(y)
    assert torch.allclose(lhs, rhs, atol=1e-5)
