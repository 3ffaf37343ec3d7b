"""Naive reference implementations used to check the vectorized code.

Everything here is written as plain Python/numpy loops and deliberately shares
no code with the package beyond data containers.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def as_np(t):
    return t.detach().cpu().numpy().astype(np.float64) if hasattr(t, "detach") else np.asarray(t, dtype=np.float64)


# --- geometry -------------------------------------------------------------------


def homogeneous_project(K, R, T, point):
    """4x4 extrinsic matrix times the homogeneous point, then K, then divide."""
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = T
    cam = E @ np.array([point[0], point[1], point[2], 1.0])
    depth = cam[2]
    x = K @ (cam[:3] / cam[3])
    return x[0] / x[2], x[1] / x[2], depth


def loop_bilinear(fmap, u, v):
    """Hard-validity bilinear sample (out of [0, W-1] x [0, H-1] -> zero, invalid)."""
    fmap = np.asarray(fmap, dtype=np.float64)
    H, W = fmap.shape[:2]
    if not (0 <= u <= W - 1 and 0 <= v <= H - 1):
        return np.zeros(fmap.shape[2:]), False
    x0, y0 = int(math.floor(u)), int(math.floor(v))
    out = np.zeros(fmap.shape[2:])
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = min(x0 + dx, W - 1), min(y0 + dy, H - 1)
            wx = (u - x0) if dx else (1 - (u - x0))
            wy = (v - y0) if dy else (1 - (v - y0))
            out = out + wx * wy * fmap[yi, xi]
    return out, True


def loop_bilinear_zero_pad(fmap, px, py):
    """Bilinear sample where each out-of-range corner contributes zero."""
    H, W = fmap.shape[:2]
    x0, y0 = math.floor(px), math.floor(py)
    out = np.zeros(fmap.shape[2:])
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            if 0 <= xi < W and 0 <= yi < H:
                wx = (px - x0) if dx else (1 - (px - x0))
                wy = (py - y0) if dy else (1 - (py - y0))
                out = out + wx * wy * fmap[yi, xi]
    return out


def loop_lift(view_features, calibs, heights, ground_centers, stride):
    """Per voxel, per camera: project, sample with hard validity, average valid views.

    ground_centers: [cells_y, cells_x, 2] world (x, y). Returns [Z, cells_y, cells_x, C].
    """
    maps = [as_np(f) for f in view_features]
    Hy, Wx = ground_centers.shape[:2]
    C = maps[0].shape[-1]
    out = np.zeros((len(heights), Hy, Wx, C))
    for zi, z in enumerate(heights):
        for yi in range(Hy):
            for xi in range(Wx):
                acc, n = np.zeros(C), 0
                x, y = ground_centers[yi, xi]
                for fmap, c in zip(maps, calibs):
                    u, v, depth = homogeneous_project(c.intrinsics, c.rotation, c.translation, (x, y, z))
                    if depth <= 1e-9:
                        continue
                    val, ok = loop_bilinear(fmap, u / stride, v / stride)
                    if ok:
                        acc += val
                        n += 1
                out[zi, yi, xi] = acc / n if n else 0.0
    return out


# --- neural ops -----------------------------------------------------------------


def _lin(params, name, x):
    W = as_np(params[name + ".weight"])
    b = as_np(params[name + ".bias"])
    out = np.zeros(W.shape[0])
    for o in range(W.shape[0]):
        s = b[o]
        for i in range(W.shape[1]):
            s += W[o, i] * x[i]
        out[o] = s
    return out


def loop_ffn(x, params):
    x = as_np(x)
    out = np.zeros_like(x)
    for n in range(x.shape[0]):
        h = np.maximum(_lin(params, "linear1", x[n]), 0.0)
        out[n] = x[n] + _lin(params, "linear2", h)
    return out


def loop_cross_attention(queries, keys, mask, params, num_heads, residual=True):
    q_in, k_in = as_np(queries), as_np(keys)
    Nq, D = q_in.shape
    Nk = k_in.shape[0]
    Dh = D // num_heads
    mask = np.ones((Nq, Nk), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    Q = np.array([_lin(params, "q_proj", q) for q in q_in])
    Kp = np.array([_lin(params, "k_proj", k) for k in k_in])
    V = np.array([_lin(params, "v_proj", k) for k in k_in])
    out = np.zeros((Nq, D))
    for i in range(Nq):
        attended = np.zeros(D)
        if mask[i].any():
            for m in range(num_heads):
                sl = slice(m * Dh, (m + 1) * Dh)
                logits = [sum(Q[i, sl] * Kp[j, sl]) / math.sqrt(Dh) if mask[i, j] else -math.inf for j in range(Nk)]
                top = max(logits)
                ex = [math.exp(s - top) if s != -math.inf else 0.0 for s in logits]
                z = sum(ex)
                for j in range(Nk):
                    attended[sl] += ex[j] / z * V[j, sl]
        out[i] = _lin(params, "out_proj", attended)
        if residual:
            out[i] += q_in[i]
    return out


def loop_msda(queries, reference_points, value_maps, M, L, P, params, residual=True):
    q_in = as_np(queries)
    ref = as_np(reference_points)
    maps = [as_np(m) for m in value_maps]
    N, D = q_in.shape
    Dh = D // M
    projected = []
    for fmap in maps:
        H, W, _ = fmap.shape
        pm = np.zeros_like(fmap)
        for y in range(H):
            for x in range(W):
                pm[y, x] = _lin(params, "value_proj", fmap[y, x])
        projected.append(pm)
    out = np.zeros((N, D))
    for n in range(N):
        offs = _lin(params, "sampling_offsets", q_in[n]).reshape(M, L, P, 2)
        logits = _lin(params, "attention_weights", q_in[n]).reshape(M, L * P)
        acc = np.zeros(D)
        for m in range(M):
            top = logits[m].max()
            ex = np.exp(logits[m] - top)
            w = (ex / ex.sum()).reshape(L, P)
            for lvl in range(L):
                H, W, _ = maps[lvl].shape
                head_map = projected[lvl][:, :, m * Dh : (m + 1) * Dh]
                for p in range(P):
                    lx = ref[n, 0] + offs[m, lvl, p, 0] / W
                    ly = ref[n, 1] + offs[m, lvl, p, 1] / H
                    acc[m * Dh : (m + 1) * Dh] += w[lvl, p] * loop_bilinear_zero_pad(head_map, lx * W - 0.5, ly * H - 0.5)
        out[n] = _lin(params, "output_proj", acc)
        if residual:
            out[n] += q_in[n]
    return out


def loop_conv2d(x, kernel, bias, stride=1, padding=None):
    x, kernel = as_np(x), as_np(kernel)
    k, _, cin, cout = kernel.shape
    pad = k // 2 if padding is None else padding
    H, W, _ = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    b = np.zeros(cout) if bias is None else as_np(bias)
    out = np.zeros((Ho, Wo, cout))
    for oy in range(Ho):
        for ox in range(Wo):
            for co in range(cout):
                s = b[co]
                for ky in range(k):
                    for kx in range(k):
                        iy, ix = oy * stride + ky - pad, ox * stride + kx - pad
                        if 0 <= iy < H and 0 <= ix < W:
                            for ci in range(cin):
                                s += x[iy, ix, ci] * kernel[ky, kx, ci, co]
                out[oy, ox, co] = s
    return out


def loop_upsample_nearest(x, size):
    x = as_np(x)
    H, W = x.shape[:2]
    Ho, Wo = size
    out = np.zeros((Ho, Wo) + x.shape[2:])
    for i in range(Ho):
        for j in range(Wo):
            out[i, j] = x[(i * H) // Ho, (j * W) // Wo]
    return out


def loop_mlp_head(x, params):
    x = as_np(x)
    return np.array([_lin(params, "linear2", np.maximum(_lin(params, "linear1", row), 0.0)) for row in x])


# --- losses ---------------------------------------------------------------------


def loop_focal(pred, target, alpha=2.0, beta=4.0, eps=1e-6):
    pred, target = as_np(pred).ravel(), as_np(target).ravel()
    total, npos = 0.0, 0
    for p, t in zip(pred, target):
        p = min(max(p, eps), 1 - eps)
        if t == 1:
            total -= (1 - p) ** alpha * math.log(p)
            npos += 1
        else:
            total -= (1 - t) ** beta * p**alpha * math.log(1 - p)
    return total / max(1, npos)


def loop_offset_l1(pred, target, valid):
    pred, target = as_np(pred), as_np(target)
    s, k = 0.0, 0
    for row in range(len(pred)):
        if valid[row]:
            s += abs(pred[row, 0] - target[row, 0]) + abs(pred[row, 1] - target[row, 1])
            k += 1
    return s / k if k else 0.0


# --- tracking -------------------------------------------------------------------


def scan_peaks(h, threshold):
    """Every cell >= threshold strictly above all in-bounds neighbours, as (x, y, score)."""
    h = np.asarray(h, dtype=np.float64)
    H, W = h.shape
    found = []
    for y in range(H):
        for x in range(W):
            if h[y, x] < threshold:
                continue
            ok = True
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if (dx or dy) and 0 <= y + dy < H and 0 <= x + dx < W and not h[y, x] > h[y + dy, x + dx]:
                        ok = False
            if ok:
                found.append((x, y, float(h[y, x])))
    return found


def best_partial_matching(rows, cols, dist, limit):
    """Enumerate every injective partial matching with pairs <= limit.

    Returns the matching (list of (row, col)) with the most pairs, then the
    smallest total distance. dist is a callable (row, col) -> float.
    """
    best, best_key = [], (0, 0.0)
    rows, cols = list(rows), list(cols)
    n = min(len(rows), len(cols))
    for k in range(n, 0, -1):
        found = False
        for rsub in itertools.combinations(rows, k):
            for perm in itertools.permutations(cols, k):
                ds = [dist(r, c) for r, c in zip(rsub, perm)]
                if all(d <= limit for d in ds):
                    key = (k, -sum(ds))
                    if not found or key > best_key:
                        best, best_key, found = list(zip(rsub, perm)), key, True
        if found:
            return best
    return []


def brute_force_mot(gt_rows, pred_rows, r):
    """CLEAR-MOT counts, MT/ML and IDTP by exhaustive enumeration."""
    gt, pred = {}, {}
    for f, i, x, y in gt_rows:
        gt.setdefault(f, {})[i] = (x, y)
    for f, i, x, y in pred_rows:
        pred.setdefault(f, {})[i] = (x, y)
    misses = fps = switches = matches = 0
    dsum = 0.0
    last, prev = {}, {}
    tracked, life = {}, {}
    for f in sorted(set(gt) | set(pred)):
        g, p = gt.get(f, {}), pred.get(f, {})
        m = {}
        for gid, pid in prev.items():
            if gid in g and pid in p and math.dist(g[gid], p[pid]) <= r:
                m[gid] = pid
        rest_g = [x for x in g if x not in m]
        rest_p = [x for x in p if x not in m.values()]
        for gid, pid in best_partial_matching(rest_g, rest_p, lambda a, b: math.dist(g[a], p[b]), r):
            m[gid] = pid
        for gid in g:
            life[gid] = life.get(gid, 0) + 1
        for gid, pid in m.items():
            if gid in last and last[gid] != pid:
                switches += 1
            last[gid] = pid
            tracked[gid] = tracked.get(gid, 0) + 1
            dsum += math.dist(g[gid], p[pid])
        matches += len(m)
        misses += len(g) - len(m)
        fps += len(p) - len(m)
        prev = dict(m)
    gt_ids = sorted(life)
    pred_ids = sorted({i for fr in pred.values() for i in fr})

    def overlap(gid, pid):
        return sum(
            1
            for f in gt
            if gid in gt[f] and pid in pred.get(f, {}) and math.dist(gt[f][gid], pred[f][pid]) <= r
        )

    idtp = 0
    padded = pred_ids + [None] * len(gt_ids)
    for perm in itertools.permutations(padded, len(gt_ids)):
        s = sum(overlap(g, p) for g, p in zip(gt_ids, perm) if p is not None)
        idtp = max(idtp, s)
    mt = sum(1 for g in gt_ids if tracked.get(g, 0) / life[g] >= 0.8)
    ml = sum(1 for g in gt_ids if tracked.get(g, 0) / life[g] < 0.2)
    return {
        "misses": misses,
        "false_positives": fps,
        "id_switches": switches,
        "matches": matches,
        "gt_total": sum(len(v) for v in gt.values()),
        "pred_total": sum(len(v) for v in pred.values()),
        "idtp": idtp,
        "mostly_tracked": mt,
        "mostly_lost": ml,
        "dist_sum": dsum,
    }
