"""Differentiable core: finite-difference gradient checks for every layer
kind, an independent scalar Adam oracle, He-initialization statistics, and
the checkpoint round trip.
"""

import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from lungpipe.detector import loss_balanced_binary, loss_inverse_freq
from lungpipe.nncore import (
    AdamState,
    FullyConnected,
    GradientError,
    LayerSpec,
    PreActBasic,
    PreActBottleneck,
    ShapeError,
    adam_step,
    backward,
    build_layer,
    forward,
    gradient_check,
    he_init_,
    load_checkpoint,
    load_module_arrays,
    module_arrays,
    save_checkpoint,
)

TOL = 1e-3


def _check_layer(module, x, mode="train", seed=0):
    """Gradient-check a layer against central finite differences."""
    module = module.double()
    torch.manual_seed(seed)
    w = torch.randn(module(x.detach()).shape, dtype=torch.float64)

    def f():
        return (forward(module, x, mode) * w).sum()

    return gradient_check(f, x)


def _rand_input(shape, seed):
    torch.manual_seed(seed)
    return torch.randn(shape, dtype=torch.float64, requires_grad=True)


LAYER_CASES = [
    ("conv3d", LayerSpec("conv3d", in_channels=2, out_channels=3, kernel=3, stride=1), (2, 2, 4, 4, 4)),
    ("conv3d_strided", LayerSpec("conv3d", in_channels=1, out_channels=2, kernel=3, stride=2), (1, 1, 6, 6, 6)),
    ("maxpool3d", LayerSpec("maxpool3d", kernel=3, stride=2), (1, 2, 6, 6, 6)),
    ("global_avgpool3d", LayerSpec("global_avgpool3d"), (2, 3, 4, 4, 4)),
    ("fully_connected", LayerSpec("fully_connected", in_features=24, out_features=5), (2, 24)),
    ("batch_norm", LayerSpec("batch_norm", in_channels=3), (4, 3, 3, 3, 3)),
    ("leaky_relu", LayerSpec("leaky_relu", alpha=0.1), (2, 3, 4, 4, 4)),
    ("dropout_eval", LayerSpec("dropout", rate=0.5), (2, 8)),
    ("softmax", LayerSpec("softmax"), (2, 3, 2, 2, 2)),
]


class TestLayerGradients:
    @pytest.mark.parametrize("name,spec,shape", LAYER_CASES, ids=[c[0] for c in LAYER_CASES])
    @pytest.mark.parametrize("seed", [0, 1])
    def test_layer_matches_finite_differences(self, name, spec, shape, seed):
        module = build_layer(spec)
        x = _rand_input(shape, seed + 100)
        mode = "eval" if name == "dropout_eval" else "train"
        err = _check_layer(module, x, mode=mode, seed=seed)
        assert err < TOL, f"{name}: relative error {err}"

    @pytest.mark.parametrize("variant", ["bottleneck", "basic"])
    @pytest.mark.parametrize("stride", [1, 2])
    def test_residual_block_gradients(self, variant, stride):
        torch.manual_seed(3)
        if variant == "bottleneck":
            module = PreActBottleneck(2, 2, 4, stride=stride)
        else:
            module = PreActBasic(2, 3, stride=stride)
        x = _rand_input((2, 2, 4, 4, 4), seed=stride)
        err = _check_layer(module, x, seed=stride)
        assert err < TOL

    def test_parameter_gradients_too(self):
        # check grads w.r.t. a conv weight, not just the input
        torch.manual_seed(9)
        conv = nn.Conv3d(1, 2, 3, padding=1).double()
        x = torch.randn(1, 1, 4, 4, 4, dtype=torch.float64)
        w = conv.weight

        def f():
            return (conv(x) ** 2).sum()

        out = f()
        out.backward()
        analytic = w.grad.detach().clone()
        from lungpipe.nncore import numeric_gradient

        with torch.no_grad():
            numeric = numeric_gradient(lambda: f().detach(), w.detach(), eps=1e-5)
        denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        assert (analytic - numeric).norm().item() / denom < TOL


class TestLossGradients:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_balanced_binary_loss(self, seed):
        torch.manual_seed(seed)
        logits = torch.randn(2, 2, 2, 2, 2, dtype=torch.float64, requires_grad=True)
        t = torch.randint(0, 2, (2, 2, 2, 2))
        freqs = np.bincount(t.ravel(), minlength=2)

        def f():
            return loss_balanced_binary(torch.softmax(logits, dim=1), t, freqs)

        assert gradient_check(f, logits) < TOL

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_inverse_freq_loss(self, seed):
        torch.manual_seed(seed + 10)
        logits = torch.randn(2, 3, 2, 2, 2, dtype=torch.float64, requires_grad=True)
        t = torch.randint(0, 3, (2, 2, 2, 2))
        freqs = np.bincount(t.ravel(), minlength=3)
        if (freqs == 0).any():  # ensure every present class has frequency
            t = torch.zeros_like(t)
            t.view(-1)[:3] = torch.tensor([0, 1, 2])
            freqs = np.bincount(t.ravel(), minlength=3)

        def f():
            return loss_inverse_freq(torch.softmax(logits, dim=1), t, freqs)

        assert gradient_check(f, logits) < TOL


class TestLayerSpec:
    def test_rejects_even_kernel(self):
        with pytest.raises(ValueError):
            LayerSpec("conv3d", in_channels=1, out_channels=1, kernel=4)

    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            LayerSpec("attention")

    def test_rejects_bad_dropout(self):
        with pytest.raises(ValueError):
            LayerSpec("dropout", rate=1.0)

    def test_rejects_bad_stride(self):
        with pytest.raises(ValueError):
            LayerSpec("conv3d", in_channels=1, out_channels=1, kernel=3, stride=0)


class TestForward:
    def test_channel_mismatch_raises(self):
        conv = build_layer(LayerSpec("conv3d", in_channels=2, out_channels=3, kernel=3))
        with pytest.raises(ShapeError):
            forward(conv, torch.randn(1, 5, 4, 4, 4))

    def test_mode_validation(self):
        relu = build_layer(LayerSpec("leaky_relu"))
        with pytest.raises(ValueError):
            forward(relu, torch.randn(1, 1), mode="inference")

    def test_dropout_modes(self):
        torch.manual_seed(0)
        drop = build_layer(LayerSpec("dropout", rate=0.5))
        x = torch.ones(1000)
        assert torch.equal(forward(drop, x, "eval"), x)
        y = forward(drop, x, "train")
        assert (y == 0).any() and y.max() == pytest.approx(2.0)

    def test_backward_without_forward(self):
        conv = build_layer(LayerSpec("conv3d", in_channels=1, out_channels=1, kernel=1))
        with pytest.raises(RuntimeError):
            backward(torch.tensor(1.0), conv)


def scalar_adam_oracle(grads, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8, p0=1.0):
    """Independent scalar simulation of Adam with decoupled weight decay."""
    p, m, v = p0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        p *= 1.0 - lr * wd
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p -= lr * m_hat / (math.sqrt(v_hat) + eps)
    return p


class TestAdam:
    def test_matches_scalar_oracle(self):
        grads = [0.3, -0.7, 1.1, 0.05, -0.2, 0.9]
        lr, wd = 0.01, 0.1
        p = torch.tensor([1.0], dtype=torch.float64)
        state = AdamState(learning_rate=lr, weight_decay=wd)
        for g in grads:
            adam_step({"p": p}, {"p": torch.tensor([g], dtype=torch.float64)}, state)
        expect = scalar_adam_oracle(grads, lr, wd)
        assert p.item() == pytest.approx(expect, rel=1e-12)

    def test_first_step_bias_correction(self):
        # with one gradient g, the first update is exactly -lr * g/(|g| + ~0)
        p = torch.tensor([0.0], dtype=torch.float64)
        state = AdamState(learning_rate=0.5, weight_decay=0.0)
        adam_step({"p": p}, {"p": torch.tensor([2.0], dtype=torch.float64)}, state)
        assert p.item() == pytest.approx(-0.5, rel=1e-6)

    def test_decoupled_decay_without_gradient_signal(self):
        # zero gradient: only the multiplicative decay acts
        p = torch.tensor([4.0], dtype=torch.float64)
        state = AdamState(learning_rate=0.1, weight_decay=0.5)
        adam_step({"p": p}, {"p": torch.tensor([0.0], dtype=torch.float64)}, state)
        assert p.item() == pytest.approx(4.0 * (1 - 0.1 * 0.5))

    def test_non_finite_gradient_raises(self):
        p = torch.tensor([1.0])
        state = AdamState(learning_rate=0.1)
        with pytest.raises(GradientError):
            adam_step({"p": p}, {"p": torch.tensor([float("nan")])}, state)

    def test_beta_validation(self):
        with pytest.raises(ValueError):
            AdamState(learning_rate=0.1, beta1=1.0)


class TestHeInit:
    def test_weight_statistics(self):
        torch.manual_seed(0)
        conv = nn.Conv3d(8, 256, 3)
        he_init_(conv, torch.Generator().manual_seed(1))
        fan_in = 8 * 27
        std = conv.weight.std().item()
        assert std == pytest.approx(math.sqrt(2.0 / fan_in), rel=0.05)
        assert conv.weight.mean().item() == pytest.approx(0.0, abs=0.01)

    def test_biases_zero_and_bn_identity(self):
        net = nn.Sequential(nn.Conv3d(1, 4, 3), nn.BatchNorm3d(4), nn.Linear(4, 2))
        he_init_(net, torch.Generator().manual_seed(0))
        assert torch.all(net[0].bias == 0)
        assert torch.all(net[1].weight == 1) and torch.all(net[1].bias == 0)
        assert torch.all(net[2].bias == 0)

    def test_deterministic_under_seed(self):
        a = he_init_(nn.Linear(10, 10), torch.Generator().manual_seed(5))
        b = he_init_(nn.Linear(10, 10), torch.Generator().manual_seed(5))
        assert torch.equal(a.weight, b.weight)


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        net = nn.Sequential(nn.Conv3d(1, 2, 3), nn.BatchNorm3d(2), FullyConnected(2, 3))
        he_init_(net, torch.Generator().manual_seed(0))
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, net, "test-arch", step=42, rng_seed=7)
        arrays, meta = load_checkpoint(path)
        assert meta == {"architecture_id": "test-arch", "step": 42, "rng_seed": 7}
        other = nn.Sequential(nn.Conv3d(1, 2, 3), nn.BatchNorm3d(2), FullyConnected(2, 3))
        load_module_arrays(other, arrays)
        for (n1, p1), (n2, p2) in zip(net.state_dict().items(), other.state_dict().items()):
            if p1.is_floating_point():
                assert torch.equal(p1, p2), n1

    def test_architecture_mismatch_detected(self, tmp_path):
        net = nn.Linear(4, 2)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, net, "a", 0, 0)
        arrays, _ = load_checkpoint(path)
        with pytest.raises(ValueError):
            load_module_arrays(nn.Linear(5, 2), arrays)  # shape mismatch
        with pytest.raises(ValueError):
            load_module_arrays(nn.Sequential(nn.Linear(4, 2), nn.Linear(2, 2)), arrays)

    def test_byte_identical_rewrites(self, tmp_path):
        net = nn.Linear(3, 3)
        he_init_(net, torch.Generator().manual_seed(2))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, net, "x", 1, 2)
        save_checkpoint(p2, net, "x", 1, 2)
        assert p1.read_bytes() == p2.read_bytes()
