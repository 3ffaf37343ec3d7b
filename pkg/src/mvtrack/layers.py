"""Parameter-holding wrappers around the functional kernels in :mod:`mvtrack.ops`."""

from __future__ import annotations

import math

import torch
from torch import nn

from . import ops
from .ops import MsdaConfig


def _params(module: nn.Module) -> dict:
    return dict(module.named_parameters())


class FFN(nn.Module):
    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        self.linear1 = nn.Linear(dim, hidden or 2 * dim)
        self.linear2 = nn.Linear(hidden or 2 * dim, dim)

    def forward(self, x, residual: bool = True):
        return ops.ffn_forward(x, _params(self), residual=residual)


class MLPHead(nn.Module):
    def __init__(self, dim: int, out: int = 2):
        super().__init__()
        self.linear1 = nn.Linear(dim, dim)
        self.linear2 = nn.Linear(dim, out)
        nn.init.zeros_(self.linear2.weight)
        nn.init.zeros_(self.linear2.bias)

    def forward(self, x):
        return ops.mlp_head_forward(x, _params(self))


class CrossAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, queries, keys, mask=None, residual: bool = True):
        return ops.cross_attention(queries, keys, mask, _params(self), self.num_heads, residual=residual)


class MSDeformAttn(nn.Module):
    def __init__(self, cfg: MsdaConfig):
        super().__init__()
        self.cfg = cfg
        M, L, P, D = cfg.num_heads, cfg.num_levels, cfg.num_points, cfg.embed_dim
        self.sampling_offsets = nn.Linear(D, M * L * P * 2)
        self.attention_weights = nn.Linear(D, M * L * P)
        self.value_proj = nn.Linear(D, D)
        self.output_proj = nn.Linear(D, D)
        self.reset_parameters()

    @torch.no_grad()
    def reset_parameters(self):
        # offsets start on a ring of directions, one per head, growing with the point index
        M, L, P = self.cfg.num_heads, self.cfg.num_levels, self.cfg.num_points
        nn.init.zeros_(self.sampling_offsets.weight)
        theta = torch.arange(M, dtype=torch.float32) * (2.0 * math.pi / M)
        grid = torch.stack([theta.cos(), theta.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True)[0]
        grid = grid.view(M, 1, 1, 2).repeat(1, L, P, 1)
        for i in range(P):
            grid[:, :, i, :] *= i + 1
        self.sampling_offsets.bias.copy_(grid.reshape(-1))
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def forward(self, queries, reference_points, value_maps, residual: bool = True):
        return ops.msda_forward(queries, reference_points, value_maps, self.cfg, _params(self), residual=residual)


class Conv2d(nn.Module):
    """Channel-last convolution; weight stored as [k, k, C_in, C_out]."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int = 3, stride: int = 1, padding: int | None = None):
        super().__init__()
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.weight = nn.Parameter(torch.empty(kernel_size, kernel_size, c_in, c_out))
        self.bias = nn.Parameter(torch.zeros(c_out))
        fan_in = kernel_size * kernel_size * c_in
        nn.init.uniform_(self.weight, -math.sqrt(6.0 / fan_in), math.sqrt(6.0 / fan_in))

    def forward(self, x):
        return ops.conv2d_forward(x, self.weight, self.bias, self.stride, self.padding)
