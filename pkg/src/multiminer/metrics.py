"""Mined-region quality against synthetic ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .autodiff import resize_np
from .errors import DimensionError, InsufficientDataError
from .mining import merge_maps

BACKGROUND = -1


@dataclass
class PseudoMask:
    assignment: np.ndarray   # [H, W] ints: category id or BACKGROUND
    evidence: dict           # category -> A_j = 1 - M^f_j at image resolution

    def region(self, category: int) -> np.ndarray:
        return self.assignment == category


def pseudo_mask(merged: dict, size: int, theta_fg: float = 0.5) -> PseudoMask:
    """Per-pixel argmax of foreground evidence ``1 - M^f_j``; below ``theta_fg`` is background.

    ``merged`` maps category -> merged region map at any resolution.  Ties
    go to the lowest category index.
    """
    if not merged:
        raise ValueError("pseudo_mask needs at least one category")
    cats = sorted(merged)
    evidence = {j: 1.0 - resize_np(merged[j], size, size) for j in cats}
    stack = np.stack([evidence[j] for j in cats])
    arg = np.argmax(stack, axis=0)
    best = np.take_along_axis(stack, arg[None], axis=0)[0]
    assign = np.where(best >= theta_fg, np.asarray(cats)[arg], BACKGROUND)
    return PseudoMask(assignment=assign, evidence=evidence)


def region_metrics(pred, gt) -> tuple[float, float, float]:
    """Precision, recall and IoU of a binary prediction; empty vs empty scores 1."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    inter = np.logical_and(pred, gt).sum()
    union = np.logical_or(pred, gt).sum()
    p_sum, g_sum = pred.sum(), gt.sum()
    precision = inter / p_sum if p_sum else (1.0 if not g_sum else 0.0)
    recall = inter / g_sum if g_sum else (1.0 if not p_sum else 0.0)
    iou = inter / union if union else 1.0
    return float(precision), float(recall), float(iou)


def spearman(x, y) -> float:
    """Rank correlation with midranks; 0 when either side is constant."""
    rx = rankdata(x)
    ry = rankdata(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    return float((rx * ry).sum() / denom) if denom > 0 else 0.0


# ---------------------------------------------------------------------------
# per-run evaluation
# ---------------------------------------------------------------------------

def merged_up_to(pools_i: dict, horizon: int | None, res: int) -> dict:
    """Merged map per category using the first ``min(horizon, T_j)`` maps.

    Categories with no stored map merge to all-ones (nothing mined).
    """
    out = {}
    for j, pool in pools_i.items():
        maps = pool.maps if horizon is None else pool.maps[:horizon]
        out[j] = merge_maps(maps, res, res) if maps else np.ones((res, res))
    return out


def evaluate_horizon(pools: list, scenes, horizon: int | None, res: int,
                     theta_fg: float = 0.5) -> dict:
    """Mean metrics of the merged regions for one merge horizon (None = all steps)."""
    rec = {"precision": [], "recall": [], "iou": [], "pseudo_iou": []}
    for pools_i, sc in zip(pools, scenes):
        if not pools_i:
            continue
        size = sc.image.shape[-1]
        merged = merged_up_to(pools_i, horizon, res)
        pm = pseudo_mask(merged, size, theta_fg)
        for j in pools_i:
            gt = sc.gt_masks[j]
            region = pm.evidence[j] >= theta_fg
            p, r, i = region_metrics(region, gt)
            rec["precision"].append(p)
            rec["recall"].append(r)
            rec["iou"].append(i)
            rec["pseudo_iou"].append(region_metrics(pm.region(j), gt)[2])
    return {k: float(np.mean(v)) if v else 0.0 for k, v in rec.items()}


def step_curve(pools: list, scenes, t_max: int, res: int, theta_fg: float = 0.5) -> list[dict]:
    """Metrics of merging the first ``T`` steps (clamped per pool at ``T_j``), ``T = 1..t_max``."""
    return [{"T": T, **evaluate_horizon(pools, scenes, T, res, theta_fg)}
            for T in range(1, t_max + 1)]


def adaptivity_stats(steps, areas) -> dict:
    """Spearman(area, T_j) and median ``T_j`` per area tercile."""
    steps = np.asarray(steps, dtype=np.float64)
    areas = np.asarray(areas, dtype=np.float64)
    if len(steps) != len(areas):
        raise ValueError("steps and areas must pair up")
    if len(steps) < 20:
        raise InsufficientDataError(f"need >= 20 (area, T_j) pairs, got {len(steps)}")
    lo, hi = np.quantile(areas, [1 / 3, 2 / 3])
    bins = {"small": steps[areas <= lo], "medium": steps[(areas > lo) & (areas <= hi)],
            "large": steps[areas > hi]}
    return {"spearman": spearman(areas, steps),
            "median_steps": {k: float(np.median(v)) if len(v) else 0.0 for k, v in bins.items()},
            "tercile_bounds": [float(lo), float(hi)], "n": int(len(steps))}


def new_area_per_step(pools: list, scenes, res: int, theta_mask: float = 0.5) -> dict:
    """Mean fraction of the image newly mined at each step, over pools that stored that step."""
    per_step: dict[int, list] = {}
    for pools_i, sc in zip(pools, scenes):
        for pool in pools_i.values():
            prior = np.zeros((res, res), dtype=bool)
            for m in pool.maps:
                cur = resize_np(m.values, res, res) < theta_mask
                per_step.setdefault(m.step, []).append(float((cur & ~prior).mean()))
                prior |= cur
    return {t: float(np.mean(v)) for t, v in sorted(per_step.items())}


def mining_report(pools: list, scenes, res: int, theta_fg: float = 0.5,
                  theta_mask: float = 0.5) -> dict:
    """Everything the acceptance statistics need, as plain JSON-able data."""
    rows = []
    for pools_i, sc in zip(pools, scenes):
        if not pools_i:
            continue
        size = sc.image.shape[-1]
        merged = merged_up_to(pools_i, None, res)
        pm = pseudo_mask(merged, size, theta_fg)
        for j, pool in sorted(pools_i.items()):
            p, r, i = region_metrics(pm.evidence[j] >= theta_fg, sc.gt_masks[j])
            rows.append({"image": sc.id, "category": j, "precision": p, "recall": r, "iou": i,
                         "pseudo_iou": region_metrics(pm.region(j), sc.gt_masks[j])[2],
                         "steps": pool.num_steps, "forced": pool.forced, "failed": pool.failed,
                         "area": int(sc.object_areas[j]),
                         "area_frac": sc.object_areas[j] / float(size * size)})
    t_max = max((r["steps"] for r in rows), default=1) or 1
    curve = step_curve(pools, scenes, t_max, res, theta_fg)
    report = {"per_object": rows, "step_curve": curve,
              "new_area_per_step": {str(k): v for k, v in
                                    new_area_per_step(pools, scenes, res, theta_mask).items()},
              "final": evaluate_horizon(pools, scenes, None, res, theta_fg), "t_max": t_max,
              "failed": sum(r["failed"] for r in rows), "forced": sum(r["forced"] for r in rows)}
    try:
        report["adaptivity"] = adaptivity_stats([r["steps"] for r in rows],
                                                [r["area"] for r in rows])
    except InsufficientDataError as exc:
        report["adaptivity"] = {"error": str(exc)}
    return report
