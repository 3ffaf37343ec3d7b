"""Differentiable building blocks, channel-last.

Tensors and reverse-mode gradients come from torch; the attention kernels,
sampling and residual conventions are written out here. Every function takes
its parameters as a mapping of name -> tensor so the same code serves
``nn.Module`` wrappers and finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .errors import GraphConsumed, NaNDetected, ShapeMismatch, ValidationError

Params = Mapping[str, torch.Tensor]


@dataclass(frozen=True)
class MsdaConfig:
    num_heads: int = 4
    num_points: int = 4
    num_levels: int = 3
    embed_dim: int = 64

    def __post_init__(self):
        if min(self.num_heads, self.num_points, self.num_levels) < 1:
            raise ValidationError("num_heads, num_points and num_levels must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ValidationError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


def _check_last_dim(x: torch.Tensor, d: int, what: str):
    if x.shape[-1] != d:
        raise ShapeMismatch(f"{what}: expected last dimension {d}, got {tuple(x.shape)}")


def _check_finite(x: torch.Tensor, what: str):
    if not torch.isfinite(x).all():
        raise NaNDetected(f"non-finite values in {what}")


def linear(x, params: Params, name: str):
    return F.linear(x, params[name + ".weight"], params[name + ".bias"])


def ffn_forward(x: torch.Tensor, params: Params, residual: bool = True) -> torch.Tensor:
    """linear -> ReLU -> linear, plus x when ``residual``.

    Keys: linear1.weight [D_h, D], linear1.bias, linear2.weight [D, D_h], linear2.bias.
    """
    _check_last_dim(x, params["linear1.weight"].shape[1], "ffn input")
    y = linear(F.relu(linear(x, params, "linear1")), params, "linear2")
    return x + y if residual else y


def mlp_head_forward(x: torch.Tensor, params: Params) -> torch.Tensor:
    """linear(D->D) -> ReLU -> linear(D->2). No residual."""
    _check_last_dim(x, params["linear1.weight"].shape[1], "mlp head input")
    return linear(F.relu(linear(x, params, "linear1")), params, "linear2")


def cross_attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    mask: torch.Tensor | None,
    params: Params,
    num_heads: int,
    residual: bool = True,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention of ``queries`` over ``keys``.

    Shapes: queries [..., N_q, D], keys [..., N_k, D], mask [..., N_q, N_k] with True
    meaning "may attend". Keys double as values. A fully masked query row gets a
    zero attention term. Keys: q_proj, k_proj, v_proj, out_proj (.weight/.bias).
    """
    D = queries.shape[-1]
    _check_last_dim(keys, D, "cross_attention keys")
    _check_last_dim(queries, params["q_proj.weight"].shape[1], "cross_attention queries")
    if D % num_heads:
        raise ShapeMismatch(f"embed dim {D} not divisible by {num_heads} heads")
    Dh = D // num_heads
    Nq, Nk = queries.shape[-2], keys.shape[-2]
    lead = queries.shape[:-2]

    def heads(x, n):
        return x.reshape(*lead, n, num_heads, Dh).transpose(-3, -2)

    q = heads(linear(queries, params, "q_proj"), Nq)
    k = heads(linear(keys, params, "k_proj"), Nk)
    v = heads(linear(keys, params, "v_proj"), Nk)
    scores = q @ k.transpose(-1, -2) / math.sqrt(Dh)  # [..., M, Nq, Nk]
    _check_finite(scores, "attention logits")
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if tuple(mask.shape[-2:]) != (Nq, Nk):
            raise ShapeMismatch(f"mask shape {tuple(mask.shape)} does not match ({Nq}, {Nk})")
        any_key = mask.any(-1, keepdim=True)
        allowed = (mask | ~any_key).unsqueeze(-3)
        scores = scores.masked_fill(~allowed, float("-inf"))
        weights = torch.softmax(scores, dim=-1) * any_key.unsqueeze(-3).to(scores.dtype)
    else:
        weights = torch.softmax(scores, dim=-1)
    attended = (weights @ v).transpose(-3, -2).reshape(*lead, Nq, D)
    out = linear(attended, params, "out_proj")
    if residual:
        out = queries + out
    if return_weights:
        return out, weights
    return out


def _level_sizes(value_maps):
    return [(int(m.shape[0]), int(m.shape[1])) for m in value_maps]


def msda_sample(values: torch.Tensor, sizes, locations: torch.Tensor, weights: torch.Tensor, num_heads: int):
    """Core deformable gather.

    values    [sum(H_l*W_l), D] projected values, levels concatenated row-major.
    locations [N, M, L, P, 2] normalized (x, y) sampling points; pixel centers
              sit at (i + 0.5) / size.
    weights   [N, M, L, P] attention weights.
    Corners outside a level contribute zero.
    Returns [N, D].
    """
    N, M, L, P, _ = locations.shape
    D = values.shape[-1]
    Dh = D // num_heads
    # torch's sampler with align_corners=False uses the same pixel-center convention
    grid = (locations * 2.0 - 1.0).permute(1, 0, 2, 3, 4)  # [M, N, L, P, 2]
    out = None
    start = 0
    for lvl, (h, w) in enumerate(sizes):
        level = values[start : start + h * w].view(h, w, M, Dh).permute(2, 3, 0, 1)  # [M, Dh, h, w]
        start += h * w
        sampled = F.grid_sample(level, grid[:, :, lvl], mode="bilinear", padding_mode="zeros", align_corners=False)
        part = (sampled * weights[:, :, lvl].permute(1, 0, 2).unsqueeze(1)).sum(-1)  # [M, Dh, N]
        out = part if out is None else out + part
    return out.permute(2, 0, 1).reshape(N, D)


def msda_forward(
    queries: torch.Tensor,
    reference_points: torch.Tensor,
    value_maps: Sequence[torch.Tensor],
    cfg: MsdaConfig,
    params: Params,
    residual: bool = True,
    return_weights: bool = False,
):
    """Multi-scale deformable attention.

    queries [N_q, D]; reference_points [N_q, 2] normalized (x, y) in [0, 1]^2;
    value_maps: L maps [H_l, W_l, D]. Offsets are predicted in units of each
    level's cells (normalized by its width/height). Keys: sampling_offsets,
    attention_weights, value_proj, output_proj (.weight/.bias).
    """
    M, L, P, D = cfg.num_heads, cfg.num_levels, cfg.num_points, cfg.embed_dim
    if len(value_maps) != L:
        raise ShapeMismatch(f"expected {L} value maps, got {len(value_maps)}")
    _check_last_dim(queries, D, "msda queries")
    if reference_points.shape != (queries.shape[0], 2):
        raise ShapeMismatch(f"reference points {tuple(reference_points.shape)} vs {queries.shape[0]} queries")
    for m in value_maps:
        if m.dim() != 3:
            raise ShapeMismatch(f"value map must be [H, W, D], got {tuple(m.shape)}")
        _check_last_dim(m, D, "msda value map")
    _check_finite(queries, "msda queries")
    _check_finite(reference_points, "msda reference points")
    N = queries.shape[0]
    sizes = _level_sizes(value_maps)
    values = linear(torch.cat([m.reshape(-1, D) for m in value_maps], 0), params, "value_proj")
    offsets = linear(queries, params, "sampling_offsets").view(N, M, L, P, 2)
    logits = linear(queries, params, "attention_weights").view(N, M, L * P)
    _check_finite(logits, "msda attention logits")
    weights = torch.softmax(logits, -1).view(N, M, L, P)
    wh = torch.tensor([[w, h] for h, w in sizes], dtype=queries.dtype)
    locations = reference_points.to(queries.dtype).view(N, 1, 1, 1, 2) + offsets / wh.view(1, 1, L, 1, 2)
    out = linear(msda_sample(values, sizes, locations, weights, M), params, "output_proj")
    if residual:
        out = queries + out
    if return_weights:
        return out, weights
    return out


def conv2d_forward(
    x: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor | None,
    stride: int = 1,
    padding: int | None = None,
) -> torch.Tensor:
    """Cross-correlation of a channel-last map.

    x [H, W, C_in] or [B, H, W, C_in]; kernel [k, k, C_in, C_out]. ``padding``
    defaults to k // 2 (same size at stride 1).
    """
    k = kernel.shape[0]
    if kernel.dim() != 4 or kernel.shape[1] != k or k % 2 == 0:
        raise ShapeMismatch(f"kernel must be [k, k, C_in, C_out] with odd k, got {tuple(kernel.shape)}")
    if padding is None:
        padding = k // 2
    if padding not in (0, k // 2):
        raise ShapeMismatch(f"padding must be 0 or {k // 2}")
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[-1] != kernel.shape[2]:
        raise ShapeMismatch(f"input {tuple(x.shape)} incompatible with kernel {tuple(kernel.shape)}")
    y = F.conv2d(x.permute(0, 3, 1, 2), kernel.permute(3, 2, 0, 1).contiguous(), bias, stride=stride, padding=padding)
    y = y.permute(0, 2, 3, 1)
    return y[0] if squeeze else y


def upsample_nearest(x: torch.Tensor, size) -> torch.Tensor:
    """Nearest-neighbor resize of [..., H, W, C] to ``size`` = (H_out, W_out)."""
    H, W = x.shape[-3], x.shape[-2]
    Ho, Wo = size
    iy = (torch.arange(Ho) * H) // Ho
    ix = (torch.arange(Wo) * W) // Wo
    return x.index_select(-3, iy).index_select(-2, ix)


def backward(loss: torch.Tensor, retain_graph: bool = False) -> None:
    """Reverse-mode accumulation into ``.grad`` of every leaf that requires grad.

    Gradients accumulate across calls. Without ``retain_graph`` the recorded
    graph is released and a second call raises GraphConsumed.
    """
    if loss.numel() != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    try:
        torch.autograd.backward(loss, retain_graph=retain_graph)
    except RuntimeError as exc:
        if "second time" in str(exc) or "already been freed" in str(exc):
            raise GraphConsumed("computation graph was already released") from exc
        raise
