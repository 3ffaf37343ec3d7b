"""Ground-plane MOT metrics: CLEAR-MOT (MOTA, MOTP), IDF1, MT and ML."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import FormatError

MOSTLY_TRACKED = 0.8
MOSTLY_LOST = 0.2


@dataclass
class EvalResult:
    mota: float
    motp: float
    idf1: float
    mt: float
    ml: float
    counts: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        c = self.counts
        return (
            f"MOTA {self.mota:.2f}  MOTP {self.motp:.2f}  IDF1 {self.idf1:.2f}  MT {self.mt:.2f}  ML {self.ml:.2f}"
            f"  (gt={c['gt_total']} fp={c['false_positives']} miss={c['misses']} idsw={c['id_switches']})"
        )


def _frames(rows, what):
    """rows of (frame, id, x, y) -> {frame: {id: (x, y)}}"""
    out = defaultdict(dict)
    for n, row in enumerate(rows):
        try:
            frame, tid, x, y = row
            frame, tid, x, y = int(frame), int(tid), float(x), float(y)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{what} row {n}: expected (frame, id, x, y), got {row!r}") from exc
        if not (math.isfinite(x) and math.isfinite(y)):
            raise FormatError(f"{what} row {n}: non-finite position")
        if tid in out[frame]:
            raise FormatError(f"{what} row {n}: duplicate id {tid} in frame {frame}")
        out[frame][tid] = (x, y)
    return out


def match_frame(gt: dict, pred: dict, r: float, keep: dict):
    """One CLEAR-MOT matching step.

    ``keep`` maps gt id -> pred id matched in the previous frame; those pairs are
    retained when both are present and within r. The remaining ids are matched
    to maximize the number of pairs within r, then minimize total distance.
    Returns {gt id: (pred id, distance)}.
    """
    matched = {}
    used = set()
    for g, p in keep.items():
        if g in gt and p in pred:
            d = math.dist(gt[g], pred[p])
            if d <= r:
                matched[g] = (p, d)
                used.add(p)
    gids = [g for g in sorted(gt) if g not in matched]
    pids = [p for p in sorted(pred) if p not in used]
    if gids and pids:
        G = np.array([gt[g] for g in gids])
        P = np.array([pred[p] for p in pids])
        dist = np.linalg.norm(G[:, None, :] - P[None, :, :], axis=-1)
        allowed = dist <= r
        big = r * (min(len(gids), len(pids)) + 1)
        rows, cols = linear_sum_assignment(np.where(allowed, dist - big, 0.0))
        for i, j in zip(rows, cols):
            if allowed[i, j]:
                matched[gids[i]] = (pids[j], float(dist[i, j]))
    return matched


def identity_true_positives(gt_frames, pred_frames, r: float):
    """IDTP of the globally optimal gt-id <-> pred-id bijection."""
    gt_ids = sorted({g for f in gt_frames.values() for g in f})
    pred_ids = sorted({p for f in pred_frames.values() for p in f})
    if not gt_ids or not pred_ids:
        return 0
    gi = {g: i for i, g in enumerate(gt_ids)}
    pi = {p: j for j, p in enumerate(pred_ids)}
    overlap = np.zeros((len(gt_ids), len(pred_ids)), dtype=np.int64)
    for frame, gts in gt_frames.items():
        preds = pred_frames.get(frame, {})
        for g, gp in gts.items():
            for p, pp in preds.items():
                if math.dist(gp, pp) <= r:
                    overlap[gi[g], pi[p]] += 1
    rows, cols = linear_sum_assignment(-overlap)
    return int(overlap[rows, cols].sum())


def evaluate(gt, pred, r: float = 2.0) -> EvalResult:
    """Evaluate predicted trajectories against ground truth on the ground plane.

    gt, pred: iterables of (frame, id, x_m, y_m). Pairs farther than ``r`` meters
    never match. MOTP is reported as 100 * (1 - mean matched distance / r).
    """
    if r <= 0:
        raise ValueError("r must be positive")
    gt_frames = _frames(gt, "gt")
    pred_frames = _frames(pred, "pred")
    frames = sorted(set(gt_frames) | set(pred_frames))
    misses = fps = switches = matches = 0
    dist_sum = 0.0
    gt_total = sum(len(v) for v in gt_frames.values())
    pred_total = sum(len(v) for v in pred_frames.values())
    last_match: dict = {}
    prev_pairs: dict = {}
    tracked = defaultdict(int)
    lifespan = defaultdict(int)
    for frame in frames:
        g, p = gt_frames.get(frame, {}), pred_frames.get(frame, {})
        m = match_frame(g, p, r, prev_pairs)
        for gid in g:
            lifespan[gid] += 1
        for gid, (pid, d) in m.items():
            if gid in last_match and last_match[gid] != pid:
                switches += 1
            last_match[gid] = pid
            tracked[gid] += 1
            dist_sum += d
        matches += len(m)
        misses += len(g) - len(m)
        fps += len(p) - len(m)
        prev_pairs = {gid: pid for gid, (pid, _) in m.items()}
    n_ids = len(lifespan)
    mt = sum(1 for gid in lifespan if tracked[gid] / lifespan[gid] >= MOSTLY_TRACKED)
    ml = sum(1 for gid in lifespan if tracked[gid] / lifespan[gid] < MOSTLY_LOST)
    idtp = identity_true_positives(gt_frames, pred_frames, r)
    mean_d = dist_sum / matches if matches else float("nan")
    mota = 100.0 * (1.0 - (misses + fps + switches) / gt_total) if gt_total else float("nan")
    motp = 100.0 * (1.0 - mean_d / r) if matches else 0.0
    denom = gt_total + pred_total
    idf1 = 100.0 * 2.0 * idtp / denom if denom else 0.0
    counts = {
        "misses": misses,
        "false_positives": fps,
        "id_switches": switches,
        "matches": matches,
        "gt_total": gt_total,
        "pred_total": pred_total,
        "idtp": idtp,
        "gt_ids": n_ids,
        "mostly_tracked": mt,
        "mostly_lost": ml,
        "mean_distance_m": mean_d if matches else None,
    }
    return EvalResult(
        mota=mota,
        motp=motp,
        idf1=idf1,
        mt=100.0 * mt / n_ids if n_ids else 0.0,
        ml=100.0 * ml / n_ids if n_ids else 0.0,
        counts=counts,
    )
