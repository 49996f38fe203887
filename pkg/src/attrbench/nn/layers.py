"""Layer objects holding parameters, composed into a :class:`Sequential` network."""
from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    training = True

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return []

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv3d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, dtype=np.float32):
        k = kernel_size
        fan_in = in_channels * k**3
        self.weight = Tensor(
            _kaiming_uniform(rng, (out_channels, in_channels, k, k, k), fan_in, dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
        self.kernel_size = k

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x):
        return F.conv3d(x, self.weight, self.bias)


class BatchNorm3d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def named_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def named_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x):
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )

    def folded(self) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode scale and shift: ``bn(z) = scale * z + shift``."""
        scale = self.gamma.data / np.sqrt(self.running_var + self.eps)
        return scale, self.beta.data - scale * self.running_mean


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class MaxPool3d(Module):
    def forward(self, x):
        return F.max_pool3d(x)


class Flatten(Module):
    def forward(self, x):
        return F.flatten(x)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        self.weight = Tensor(
            _kaiming_uniform(rng, (out_features, in_features), in_features, dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Dropout(Module):
    def __init__(self, p, rng):
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout probability must be in [0, 1)")
        self.p = p
        self.rng = rng

    def forward(self, x):
        return F.dropout(x, self.p, self.rng, self.training)


class Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def named_parameters(self):
        return [(f"{i}.{n}", t) for i, layer in enumerate(self.layers) for n, t in layer.named_parameters()]

    def named_buffers(self):
        return [(f"{i}.{n}", b) for i, layer in enumerate(self.layers) for n, b in layer.named_buffers()]

    def train(self, mode: bool = True):
        self.training = mode
        for layer in self.layers:
            layer.training = mode
        return self

    def eval(self):
        return self.train(False)

    def forward(self, x, capture: bool = False):
        """Run all layers; with ``capture`` also return every layer's output."""
        outputs = []
        for layer in self.layers:
            x = layer(x)
            if capture:
                outputs.append(x)
        return (x, outputs) if capture else x
