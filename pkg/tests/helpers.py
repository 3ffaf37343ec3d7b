"""Small builders shared across test modules."""

import math

import numpy as np
import torch

from mvtrack.geometry import CameraCalibration


def yaw(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_calib(rng, width=64, height=32):
    f = rng.uniform(20, 200)
    K = np.array([[f, 0, rng.uniform(0, width)], [0, f * rng.uniform(0.8, 1.2), rng.uniform(0, height)], [0, 0, 1.0]])
    return CameraCalibration(K, random_rotation(rng), rng.normal(size=3) * 3, width, height)


def scene_camera(position, target=(6.0, 4.0, 0.0), focal=32.0, w=64, h=32):
    return CameraCalibration.look_at(position, target, focal, w, h)


def linear_params(gen, prefix, d_in, d_out, dtype=torch.float64, scale=None):
    s = d_in**-0.5 if scale is None else scale
    return {
        f"{prefix}.weight": torch.randn(d_out, d_in, generator=gen, dtype=dtype) * s,
        f"{prefix}.bias": torch.randn(d_out, generator=gen, dtype=dtype) * 0.1,
    }


def random_instance(rng, n_gt, n_pred, frames):
    """Small scene with jittered predictions, dropouts, spurious tracks and id swaps."""
    gt, pred = [], []
    base = {i: rng.uniform(0, 4, size=2) for i in range(n_gt)}
    for f in range(frames):
        for i in range(n_gt):
            if rng.random() < 0.85:
                p = base[i] + rng.normal(scale=0.3, size=2) * f * 0.3
                gt.append((f, i, float(p[0]), float(p[1])))
        for j in range(n_pred):
            if rng.random() < 0.75:
                anchor = base[j % n_gt] if n_gt else np.zeros(2)
                p = anchor + rng.normal(scale=0.6, size=2)
                pred.append((f, 100 + j, float(p[0]), float(p[1])))
    return gt, pred
