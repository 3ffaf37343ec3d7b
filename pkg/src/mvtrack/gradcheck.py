"""Central finite-difference checks for every differentiable kernel and loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch

from . import ops
from .losses import build_gt_heatmap, focal_loss, offset_l1_loss, total_loss

STEP = 1e-4
TOLERANCE = 1e-3
# gradients that vanish analytically (a key bias under softmax) leave only
# central-difference roundoff, about 1e-12 here; the floor keeps that from dominating
NORM_FLOOR = 1e-6
# instances are redrawn until every kink (ReLU zero, bilinear cell edge) is this far away,
# so central differences never straddle a non-differentiable point
KINK_MARGIN = 50 * STEP
MAX_DRAWS = 200


@dataclass
class GradEntry:
    op: str
    max_rel_error: float
    worst_input: str
    passed: bool


@dataclass
class GradReport:
    seed: int
    entries: list

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def failures(self) -> list:
        return [e.op for e in self.entries if not e.passed]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "passed": self.passed, "entries": [asdict(e) for e in self.entries]}

    def lines(self) -> list:
        return [f"{'PASS' if e.passed else 'FAIL'} {e.op:<16} {e.max_rel_error:.3e} ({e.worst_input})" for e in self.entries]


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    diff = np.linalg.norm(a - n)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), NORM_FLOOR)
    return float(diff / scale)


def numeric_gradient(fn: Callable, inputs: dict, name: str, h: float = STEP) -> np.ndarray:
    x = inputs[name]
    grad = np.zeros(x.numel())
    flat = x.data.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            plus = float(fn(**inputs))
            flat[i] = old - h
            minus = float(fn(**inputs))
            flat[i] = old
            grad[i] = (plus - minus) / (2.0 * h)
    return grad.reshape(tuple(x.shape))


def check_function(op: str, fn: Callable, inputs: dict, h: float = STEP, tol: float = TOLERANCE) -> GradEntry:
    """Compare autograd against central differences for every tensor in ``inputs``."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in inputs.items()}
    out = fn(**leaves)
    grads = torch.autograd.grad(out, list(leaves.values()), allow_unused=True)
    worst, worst_name = 0.0, ""
    for (name, leaf), g in zip(leaves.items(), grads):
        analytic = np.zeros(tuple(leaf.shape)) if g is None else g.detach().numpy()
        numeric = numeric_gradient(fn, {k: v.detach() for k, v in leaves.items()}, name, h)
        err = relative_error(analytic, numeric)
        if err >= worst:
            worst, worst_name = err, name
    return GradEntry(op, worst, worst_name, bool(worst <= tol))


def _projected(out: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    # a fixed random projection exercises every output element with distinct weights
    w = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    return (out * w).sum()


def _dims(gen, lo, hi):
    return int(torch.randint(lo, hi + 1, (1,), generator=gen))


def _randn(gen, *shape, scale=1.0):
    return torch.randn(shape, generator=gen, dtype=torch.float64) * scale


def _linear(gen, prefix, d_in, d_out, scale=None):
    s = scale if scale is not None else d_in**-0.5
    return {f"{prefix}.weight": _randn(gen, d_out, d_in, scale=s), f"{prefix}.bias": _randn(gen, d_out, scale=0.1)}


def _relu_clear(x, params, prefix="linear1") -> bool:
    pre = x @ params[prefix + ".weight"].T + params[prefix + ".bias"]
    return bool(pre.abs().min() > KINK_MARGIN)


def _redraw(draw, ok):
    for _ in range(MAX_DRAWS):
        value = draw()
        if ok(value):
            return value
    raise RuntimeError("could not draw a kink-free instance")


def case_ffn(gen):
    D, Dh, N = _dims(gen, 2, 8), _dims(gen, 2, 16), _dims(gen, 1, 6)
    inputs = _redraw(
        lambda: {"x": _randn(gen, N, D), **_linear(gen, "linear1", D, Dh), **_linear(gen, "linear2", Dh, D)},
        lambda d: _relu_clear(d["x"], d),
    )
    seed = int(torch.randint(0, 2**31, (1,), generator=gen))

    def fn(x, **p):
        return _projected(ops.ffn_forward(x, p), torch.Generator().manual_seed(seed))

    return fn, inputs


def case_mlp_head(gen):
    D, N = _dims(gen, 2, 8), _dims(gen, 1, 6)
    inputs = _redraw(
        lambda: {"x": _randn(gen, N, D), **_linear(gen, "linear1", D, D), **_linear(gen, "linear2", D, 2)},
        lambda d: _relu_clear(d["x"], d),
    )
    seed = int(torch.randint(0, 2**31, (1,), generator=gen))

    def fn(x, **p):
        return _projected(ops.mlp_head_forward(x, p), torch.Generator().manual_seed(seed))

    return fn, inputs


def case_cross_attention(gen):
    M = _dims(gen, 1, 3)
    D = M * _dims(gen, 1, 3)
    Nq, Nk = _dims(gen, 1, 5), _dims(gen, 1, 6)
    mask = torch.rand(Nq, Nk, generator=gen) < 0.7
    mask[0] = False  # one fully masked row exercises the fallback
    inputs = {"queries": _randn(gen, Nq, D), "keys": _randn(gen, Nk, D)}
    for name in ("q_proj", "k_proj", "v_proj", "out_proj"):
        inputs.update(_linear(gen, name, D, D))
    seed = int(torch.randint(0, 2**31, (1,), generator=gen))

    def fn(queries, keys, **p):
        return _projected(ops.cross_attention(queries, keys, mask, p, M), torch.Generator().manual_seed(seed))

    return fn, inputs


def _msda_pixels(cfg, inputs, sizes) -> torch.Tensor:
    """Pixel coordinates of every sampling point, as the kernel computes them."""
    M, L, P = cfg.num_heads, cfg.num_levels, cfg.num_points
    q = inputs["queries"]
    offsets = ops.linear(q, inputs, "sampling_offsets").view(-1, M, L, P, 2)
    wh = torch.tensor([[w, h] for h, w in sizes], dtype=q.dtype).view(1, 1, L, 1, 2)
    loc = inputs["reference_points"].view(-1, 1, 1, 1, 2) + offsets / wh
    return loc * wh - 0.5


def _bilinear_clear(pix) -> bool:
    frac = pix - torch.floor(pix)
    return bool(torch.minimum(frac, 1 - frac).min() > KINK_MARGIN)


def _msda_inputs(gen):
    M, L, P = _dims(gen, 1, 2), _dims(gen, 1, 3), _dims(gen, 1, 2)
    D = M * _dims(gen, 1, 3)
    N = _dims(gen, 1, 4)
    cfg = ops.MsdaConfig(M, P, L, D)
    sizes = [(_dims(gen, 2, 6), _dims(gen, 2, 6)) for _ in range(L)]
    inputs = _redraw(lambda: _msda_draw(gen, cfg, N, sizes), lambda d: _bilinear_clear(_msda_pixels(cfg, d, sizes)))
    return cfg, inputs


def _msda_draw(gen, cfg, N, sizes):
    M, L, P, D = cfg.num_heads, cfg.num_levels, cfg.num_points, cfg.embed_dim
    inputs = {
        "queries": _randn(gen, N, D),
        "reference_points": torch.rand(N, 2, generator=gen, dtype=torch.float64),
        **_linear(gen, "sampling_offsets", D, M * L * P * 2, scale=0.5),
        **_linear(gen, "attention_weights", D, M * L * P),
        **_linear(gen, "value_proj", D, D),
        **_linear(gen, "output_proj", D, D),
    }
    for lvl, (h, w) in enumerate(sizes):
        inputs[f"value_map{lvl}"] = _randn(gen, h, w, D)
    return inputs


def _split_msda(p, L):
    maps = [p.pop(f"value_map{lvl}") for lvl in range(L)]
    return maps, p


def case_msda(gen, msda: Callable = ops.msda_forward):
    cfg, inputs = _msda_inputs(gen)
    seed = int(torch.randint(0, 2**31, (1,), generator=gen))

    def fn(queries, reference_points, **p):
        maps, params = _split_msda(dict(p), cfg.num_levels)
        out = msda(queries, reference_points, maps, cfg, params)
        return _projected(out, torch.Generator().manual_seed(seed))

    return fn, inputs


def case_ffn_msda(gen, msda: Callable = ops.msda_forward):
    cfg, inputs = _msda_inputs(gen)
    D = cfg.embed_dim
    maps, params = _split_msda(dict(inputs), cfg.num_levels)
    hidden = ops.msda_forward(params.pop("queries"), params.pop("reference_points"), maps, cfg, params)
    ffn = _redraw(
        lambda: {**_linear(gen, "linear1", D, 2 * D), **_linear(gen, "linear2", 2 * D, D)},
        lambda d: _relu_clear(hidden, d),
    )
    inputs.update({"ffn." + k: v for k, v in ffn.items()})
    seed = int(torch.randint(0, 2**31, (1,), generator=gen))

    def fn(queries, reference_points, **p):
        p = dict(p)
        ffn_params = {k[4:]: p.pop(k) for k in list(p) if k.startswith("ffn.")}
        maps, params = _split_msda(p, cfg.num_levels)
        out = ops.ffn_forward(msda(queries, reference_points, maps, cfg, params), ffn_params)
        return _projected(out, torch.Generator().manual_seed(seed))

    return fn, inputs


def case_conv2d(gen):
    k = int(torch.tensor([1, 3, 5])[torch.randint(0, 3, (1,), generator=gen)])
    stride = _dims(gen, 1, 2)
    padding = k // 2 if bool(torch.randint(0, 2, (1,), generator=gen)) else 0
    H, W = _dims(gen, k, 7), _dims(gen, k, 7)
    cin, cout = _dims(gen, 1, 3), _dims(gen, 1, 3)
    inputs = {"x": _randn(gen, H, W, cin), "kernel": _randn(gen, k, k, cin, cout, scale=0.5), "bias": _randn(gen, cout)}
    seed = int(torch.randint(0, 2**31, (1,), generator=gen))

    def fn(x, kernel, bias):
        out = ops.conv2d_forward(x, kernel, bias, stride=stride, padding=padding)
        return _projected(out, torch.Generator().manual_seed(seed))

    return fn, inputs


def case_focal(gen):
    H, W = _dims(gen, 3, 12), _dims(gen, 3, 12)
    n = _dims(gen, 0, 3)
    centers = [(int(torch.randint(0, W, (1,), generator=gen)), int(torch.randint(0, H, (1,), generator=gen))) for _ in range(n)]
    target, _ = build_gt_heatmap(centers, (H, W), sigma=1.0)
    target = torch.from_numpy(target)
    # keep predictions inside the clamp so the derivative is the smooth one
    inputs = {"logits": _randn(gen, H, W)}

    def fn(logits):
        return focal_loss(torch.sigmoid(logits.clamp(-6, 6)), target)

    return fn, inputs


def case_offset_l1(gen):
    N = _dims(gen, 1, 8)
    target = _randn(gen, N, 2)
    valid = (torch.rand(N, generator=gen) < 0.7).numpy()
    # stay away from the kink at pred == target
    away = _randn(gen, N, 2)
    inputs = {"pred": target + torch.sign(away) * (0.05 + away.abs())}

    def fn(pred):
        return offset_l1_loss(pred, target, valid)

    return fn, inputs


def case_total_loss(gen):
    weight = float(torch.rand(1, generator=gen)) * 20
    inputs = {
        "l_ground": torch.rand((), generator=gen, dtype=torch.float64) * 5,
        "l_track": torch.rand((), generator=gen, dtype=torch.float64) * 5,
        "l_img": torch.rand((), generator=gen, dtype=torch.float64) * 5,
        "sigma_c": _randn(gen),
        "sigma_t": _randn(gen),
    }

    def fn(**kw):
        return total_loss(ground_weight=weight, **kw).reshape(())

    return fn, inputs


CASES = {
    "ffn": case_ffn,
    "mlp_head": case_mlp_head,
    "cross_attention": case_cross_attention,
    "msda": case_msda,
    "ffn_msda": case_ffn_msda,
    "conv2d": case_conv2d,
    "focal_loss": case_focal,
    "offset_l1": case_offset_l1,
    "total_loss": case_total_loss,
}


def gradcheck_all(seed: int = 0, msda: Callable | None = None, instances: int = 2) -> GradReport:
    """Finite-difference check of every kernel and loss at randomized small shapes.

    ``msda`` swaps in an alternative deformable-attention implementation (same
    signature as :func:`mvtrack.ops.msda_forward`), which is how a broken
    backward is shown to be caught. Each op is checked on ``instances`` random
    instances; the report keeps the worst error.
    """
    entries = []
    for k, (name, case) in enumerate(CASES.items()):
        worst = None
        for i in range(instances):
            gen = torch.Generator().manual_seed(seed * 1000003 + k * 101 + i)
            if msda is not None and name in ("msda", "ffn_msda"):
                fn, inputs = case(gen, msda=msda)
            else:
                fn, inputs = case(gen)
            entry = check_function(name, fn, inputs)
            if worst is None or entry.max_rel_error > worst.max_rel_error:
                worst = entry
        entries.append(worst)
    return GradReport(seed, entries)
