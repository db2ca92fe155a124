"""Differentiable compute core for 5D tensors (batch, channel, depth,
height, width), built on torch.

Layers are declared through :class:`LayerSpec` and materialized as torch
modules; reverse-mode differentiation is delegated to torch autograd.
The Adam optimizer with decoupled weight decay, He initialization,
finite-difference gradient checking, and the deterministic checkpoint
format are implemented here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import io as lpio


class ShapeError(ValueError):
    """Input shape incompatible with a layer."""


class GradientError(FloatingPointError):
    """Non-finite gradient encountered during optimization."""


LAYER_KINDS = (
    "conv3d",
    "maxpool3d",
    "global_avgpool3d",
    "fully_connected",
    "batch_norm",
    "leaky_relu",
    "dropout",
    "softmax",
    "residual_block",
)


@dataclass
class LayerSpec:
    """Declarative layer description; hyperparameters depend on ``kind``."""

    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: int | None = None
    stride: int = 1
    alpha: float = 0.1  # leaky_relu slope
    rate: float = 0.5  # dropout rate
    in_features: int | None = None
    out_features: int | None = None
    variant: str = "bottleneck"  # residual_block: "bottleneck" | "basic"
    mid_channels: int | None = None  # bottleneck width

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.kind in ("conv3d", "maxpool3d"):
            if self.kernel is None or self.kernel % 2 == 0:
                raise ValueError(f"{self.kind} kernel must be odd, got {self.kernel}")
        if self.kind == "dropout" and not (0 <= self.rate < 1):
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.kind == "residual_block" and self.variant not in ("bottleneck", "basic"):
            raise ValueError(f"unknown residual variant {self.variant!r}")


class FullyConnected(nn.Module):
    """Linear layer that flattens any trailing dimensions first."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.linear = nn.Linear(in_features, out_features)

    def forward(self, x):
        return self.linear(x.flatten(1))


class PreActBottleneck(nn.Module):
    """Pre-activation bottleneck: (BN, act, 1x1x1) (BN, act, 3x3x3 stride)
    (BN, act, 1x1x1), with a strided 1x1x1 projection shortcut when the
    shape changes."""

    def __init__(self, in_channels, mid_channels, out_channels, stride=1, alpha=0.1):
        super().__init__()
        self.alpha = alpha
        self.bn1 = nn.BatchNorm3d(in_channels, momentum=0.1)
        self.conv1 = nn.Conv3d(in_channels, mid_channels, 1, bias=False)
        self.bn2 = nn.BatchNorm3d(mid_channels, momentum=0.1)
        self.conv2 = nn.Conv3d(mid_channels, mid_channels, 3, stride=stride, padding=1, bias=False)
        self.bn3 = nn.BatchNorm3d(mid_channels, momentum=0.1)
        self.conv3 = nn.Conv3d(mid_channels, out_channels, 1, bias=False)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Conv3d(in_channels, out_channels, 1, stride=stride, bias=False)

    def forward(self, x):
        pre = nn.functional.leaky_relu(self.bn1(x), self.alpha)
        identity = self.shortcut(pre) if self.shortcut is not None else x
        out = self.conv1(pre)
        out = self.conv2(nn.functional.leaky_relu(self.bn2(out), self.alpha))
        out = self.conv3(nn.functional.leaky_relu(self.bn3(out), self.alpha))
        return out + identity


class PreActBasic(nn.Module):
    """Pre-activation basic block: two 3x3x3 convolutions."""

    def __init__(self, in_channels, out_channels, stride=1, alpha=0.1):
        super().__init__()
        self.alpha = alpha
        self.bn1 = nn.BatchNorm3d(in_channels, momentum=0.1)
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(out_channels, momentum=0.1)
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Conv3d(in_channels, out_channels, 1, stride=stride, bias=False)

    def forward(self, x):
        pre = nn.functional.leaky_relu(self.bn1(x), self.alpha)
        identity = self.shortcut(pre) if self.shortcut is not None else x
        out = self.conv1(pre)
        out = self.conv2(nn.functional.leaky_relu(self.bn2(out), self.alpha))
        return out + identity


def build_layer(spec: LayerSpec) -> nn.Module:
    """Materialize a layer spec as a torch module.

    Convolutions and pooling use symmetric "same"-style padding so stride-1
    layers preserve spatial size and stride-s layers divide it by s.
    """
    k = spec.kind
    if k == "conv3d":
        return nn.Conv3d(
            spec.in_channels, spec.out_channels, spec.kernel,
            stride=spec.stride, padding=spec.kernel // 2,
        )
    if k == "maxpool3d":
        return nn.MaxPool3d(spec.kernel, stride=spec.stride, padding=spec.kernel // 2)
    if k == "global_avgpool3d":
        return nn.AdaptiveAvgPool3d(1)
    if k == "fully_connected":
        return FullyConnected(spec.in_features, spec.out_features)
    if k == "batch_norm":
        return nn.BatchNorm3d(spec.in_channels, momentum=0.1)
    if k == "leaky_relu":
        return nn.LeakyReLU(spec.alpha)
    if k == "dropout":
        return nn.Dropout(spec.rate)
    if k == "softmax":
        return nn.Softmax(dim=1)
    if k == "residual_block":
        if spec.variant == "bottleneck":
            return PreActBottleneck(
                spec.in_channels, spec.mid_channels or spec.out_channels // 4,
                spec.out_channels, stride=spec.stride, alpha=spec.alpha,
            )
        return PreActBasic(spec.in_channels, spec.out_channels, spec.stride, spec.alpha)
    raise ValueError(f"unknown layer kind {k!r}")


def forward(layer: nn.Module, x: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    """Run one layer in train or eval mode, with shape validation."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    expected = getattr(layer, "in_channels", None)
    if expected is None and hasattr(layer, "num_features"):
        expected = layer.num_features
    if expected is not None and x.ndim >= 2 and x.shape[1] != expected:
        raise ShapeError(
            f"channel dimension mismatch: layer expects {expected}, input has {x.shape[1]}"
        )
    layer.train(mode == "train")
    try:
        return layer(x)
    except RuntimeError as exc:
        raise ShapeError(f"input shape {tuple(x.shape)} incompatible: {exc}") from exc


def backward(loss: torch.Tensor, module: nn.Module) -> dict[str, torch.Tensor]:
    """Populate and return parameter gradients for a recorded forward pass."""
    if loss.grad_fn is None:
        raise RuntimeError("backward without a recorded forward pass")
    module.zero_grad(set_to_none=True)
    loss.backward()
    return {n: p.grad for n, p in module.named_parameters() if p.grad is not None}


def he_init_(module: nn.Module, generator: torch.Generator | None = None):
    """He-normal initialization: weights ~ N(0, sqrt(2/fan_in)), zero biases."""
    for m in module.modules():
        if isinstance(m, nn.Conv3d):
            fan_in = m.in_channels * int(np.prod(m.kernel_size))
            with torch.no_grad():
                m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.Linear):
            with torch.no_grad():
                m.weight.normal_(0.0, (2.0 / m.in_features) ** 0.5, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm3d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


@dataclass
class AdamState:
    """Adam moments and hyperparameters; moments start at zero."""

    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")


def adam_step(
    params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState
) -> AdamState:
    """One Adam update with bias correction and decoupled weight decay.

    Weight decay is applied as ``p <- p - lr*wd*p`` before the Adam update.
    Parameters are updated in place; the mutated state is returned.
    """
    state.step += 1
    t = state.step
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise GradientError(f"non-finite gradient for parameter {name!r}")
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            if state.weight_decay:
                p.mul_(1.0 - lr * state.weight_decay)
            m = state.m[name]
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.addcdiv_(m_hat, v_hat.sqrt().add_(state.eps), value=-lr)
    return state


def module_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    """Float parameters and buffers as 32-bit numpy arrays (named)."""
    out = {}
    for name, tensor in module.state_dict().items():
        if tensor.is_floating_point():
            out[name] = tensor.detach().cpu().numpy().astype(np.float32)
    return out


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray]):
    """Load named arrays back into a module's parameters and buffers."""
    state = module.state_dict()
    float_names = {n for n, t in state.items() if t.is_floating_point()}
    missing = float_names - set(arrays)
    extra = set(arrays) - float_names
    if missing or extra:
        raise ValueError(
            f"checkpoint/architecture mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
        )
    with torch.no_grad():
        for name in float_names:
            tensor = state[name]
            src = torch.from_numpy(np.ascontiguousarray(arrays[name]))
            if tuple(src.shape) != tuple(tensor.shape):
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {tuple(src.shape)}, model {tuple(tensor.shape)}"
                )
            tensor.copy_(src.to(tensor.dtype))
    return module


def save_checkpoint(path, module: nn.Module, architecture_id: str, step: int, rng_seed: int):
    """Write a deterministic checkpoint: named 32-bit arrays + JSON metadata."""
    meta = {"architecture_id": architecture_id, "step": int(step), "rng_seed": int(rng_seed)}
    lpio.save_arrays(path, module_arrays(module), meta=meta)


def load_checkpoint(path):
    """Read a checkpoint; returns ``(arrays, meta)``."""
    return lpio.load_arrays(path)


def numeric_gradient(f, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite differences of scalar ``f`` with respect to ``x``."""
    grad = torch.zeros_like(x, dtype=torch.float64)
    flat = x.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(f())
        flat[i] = orig - eps
        fm = float(f())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def gradient_check(f, x: torch.Tensor, eps: float = 1e-5) -> float:
    """Relative error between autograd and finite-difference gradients.

    ``f`` must be a closure evaluating a scalar from ``x`` (64-bit). Returns
    ``|a - n| / max(|a|, |n|, tiny)`` using vector norms.
    """
    x.grad = None
    out = f()
    out.backward()
    analytic = x.grad.detach().clone()
    with torch.no_grad():
        numeric = numeric_gradient(lambda: f().detach(), x.detach(), eps=eps)
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / denom
