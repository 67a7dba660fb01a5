"""Small parameter containers: linear layers and MLPs on the autodiff tape."""

from __future__ import annotations

import numpy as np

from .autodiff import F, Tensor, parameter


class Linear:
    def __init__(self, n_in, n_out, rng, weight_scale=None):
        scale = weight_scale if weight_scale is not None else np.sqrt(2.0 / n_in)
        self.weight = parameter(rng.normal(0.0, scale, size=(n_in, n_out)))
        self.bias = parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return F.matmul(x, self.weight) + self.bias

    def params(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class MLP:
    """relu MLP; the final layer is linear."""

    def __init__(self, sizes, rng, final_scale=None):
        self.layers = []
        for i in range(len(sizes) - 1):
            last = i == len(sizes) - 2
            self.layers.append(Linear(sizes[i], sizes[i + 1], rng,
                                      weight_scale=final_scale if last else None))

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x

    def params(self, prefix):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}.{i}"))
        return out
