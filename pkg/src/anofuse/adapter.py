"""Multi-branch convolutional low-rank adapters.

The ConvLoraAdapter compresses tokens through a shared low-rank bottleneck,
runs parallel k x k convolution pairs (one pair per kernel size, each conv
scaled by 1/k) on the spatial layout, projects each branch back up, and
fuses the concatenated branch outputs with a 1x1 convolution. The result is
a residual update the caller adds to its tokens. With the up-projection at
its zero init the update is exactly zero, so a freshly built adapter leaves
the network function untouched.

LowRankAdapter is the plain variant (down/up projection only) used for the
text groups and for the ablation baseline on vision groups.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .tensor import (Tensor, concat, conv2d_same, linear, parameter,
                     reshape_2d_to_seq, reshape_seq_to_2d)


class ConvLoraAdapter:
    def __init__(self, channels, rank, branch_kernels=(3, 5), rng=None, name="conv_lora"):
        if rank >= channels:
            raise ConfigurationError(f"rank {rank} must be < channels {channels}")
        if not branch_kernels:
            raise ConfigurationError("need at least one branch kernel")
        for k in branch_kernels:
            if k % 2 == 0 or k < 1:
                raise ConfigurationError(f"branch kernels must be odd, got {k}")
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.rank = rank
        self.branch_kernels = tuple(branch_kernels)
        self.name = name
        c, r = channels, rank
        self.w_down = parameter(rng.normal(0.0, c ** -0.5, (c, r)), name=f"{name}.w_down")
        self.w_up = parameter(np.zeros((r, c)), name=f"{name}.w_up")
        self.conv_down = {}
        self.conv_up = {}
        for k in self.branch_kernels:
            std = (r * k * k) ** -0.5
            self.conv_down[k] = parameter(rng.normal(0.0, std, (r, r, k, k)),
                                          name=f"{name}.conv_down_{k}")
            self.conv_up[k] = parameter(rng.normal(0.0, std, (r, r, k, k)),
                                        name=f"{name}.conv_up_{k}")
        n_in = len(self.branch_kernels) * c
        self.fuse_1x1 = parameter(rng.normal(0.0, n_in ** -0.5, (c, n_in, 1, 1)),
                                  name=f"{name}.fuse_1x1")

    def branch_forward(self, x, k, grid):
        """One branch: bottleneck, two 1/k-scaled k x k convs, up-projection."""
        if k not in self.branch_kernels:
            raise ConfigurationError(f"kernel {k} not in branches {self.branch_kernels}")
        z = linear(x, self.w_down)
        z = reshape_seq_to_2d(z, grid)
        z = conv2d_same(z, self.conv_down[k]) * (1.0 / k)
        z = conv2d_same(z, self.conv_up[k]) * (1.0 / k)
        return linear(reshape_2d_to_seq(z), self.w_up)

    def forward(self, x, grid):
        """Residual update for (B, L, C) tokens; caller adds it to x."""
        branches = [reshape_seq_to_2d(self.branch_forward(x, k, grid), grid)
                    for k in self.branch_kernels]
        fused = conv2d_same(concat(branches, axis=1), self.fuse_1x1)
        return reshape_2d_to_seq(fused)

    __call__ = forward

    def named_params(self, prefix=""):
        p = prefix + self.name
        out = {f"{p}.w_down": self.w_down, f"{p}.w_up": self.w_up}
        for k in self.branch_kernels:
            out[f"{p}.conv_down_{k}"] = self.conv_down[k]
            out[f"{p}.conv_up_{k}"] = self.conv_up[k]
        out[f"{p}.fuse_1x1"] = self.fuse_1x1
        return out

    def param_count(self):
        """Exact number of trainable scalars, by enumeration."""
        return sum(t.data.size for t in self.named_params().values())


class LowRankAdapter:
    """Plain rank-r residual adapter: x @ w_down @ w_up, up starts at zero."""

    def __init__(self, channels, rank, rng=None, name="lora"):
        if rank >= channels:
            raise ConfigurationError(f"rank {rank} must be < channels {channels}")
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.rank = rank
        self.name = name
        self.w_down = parameter(rng.normal(0.0, channels ** -0.5, (channels, rank)),
                                name=f"{name}.w_down")
        self.w_up = parameter(np.zeros((rank, channels)), name=f"{name}.w_up")

    def forward(self, x, grid=None):
        return linear(linear(x, self.w_down), self.w_up)

    __call__ = forward

    def named_params(self, prefix=""):
        p = prefix + self.name
        return {f"{p}.w_down": self.w_down, f"{p}.w_up": self.w_up}

    def param_count(self):
        return sum(t.data.size for t in self.named_params().values())
