"""Object-adaptive region mining.

Each step ``t`` runs three stages over the training images:

1. the modulator is trained on features masked by every region map stored
   so far (winner-take-all min over all categories and steps);
2. the generator is trained against the frozen modulator: it proposes one
   map per category, the features are masked once more by the min over the
   image's positive categories, and the generator maximises the modulator's
   loss while a negative Frobenius-norm term penalises the mined area;
3. the updated generator emits ``M^t_j`` for every still-active
   (image, category) pool, which is either stored or closes the pool.

Region maps are low where a region has been mined.  Input resolution grows
over the first ``K`` steps following the scale schedule and then holds.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import ConfigError, DimensionError, InsufficientDataError, MergeError, \
    MissingArtifactError
from .nets import INPUT_MEAN, MinerNetworks, images_tensor, macro_f1

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration and containers
# ---------------------------------------------------------------------------

@dataclass
class MiningConfig:
    scales: list = field(default_factory=lambda: [32, 48, 64])
    lam: float = 0.05
    eps: float = 1e-5
    n_m: int = 15
    n_g: int = 1
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_sizes: list = field(default_factory=lambda: [32, 16, 8])
    max_steps: int = 10
    theta_mask: float = 0.5
    rho_stop: float = 0.03
    theta_cls: float = 0.1
    # "all": the generator's classification term uses the full multi-hot target;
    # "positive": only the image's present categories contribute
    generator_targets: str = "all"
    seed: int = 3
    # ablation runs hold one scale for every step
    single_scale: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        s = list(self.scales)
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ConfigError(f"scales must be strictly increasing, got {s}")
        if self.single_scale:
            if len(s) != 1:
                raise ConfigError("a single-scale schedule has exactly one scale")
        elif len(s) < 2:
            raise ConfigError("the multi-scale schedule needs K >= 2 scales")
        if len(self.batch_sizes) != len(s):
            raise ConfigError("batch_sizes needs one entry per scale")
        if self.lam < 0 or self.eps <= 0:
            raise ConfigError("need lam >= 0 and eps > 0")
        if self.generator_targets not in ("all", "positive"):
            raise ConfigError("generator_targets must be 'all' or 'positive'")
        if self.n_m < 0 or self.n_g < 0 or self.max_steps < 1:
            raise ConfigError("n_m, n_g must be >= 0 and max_steps >= 1")

    @classmethod
    def fixed_scale(cls, base: "MiningConfig", scale: int) -> "MiningConfig":
        """Copy of ``base`` holding ``scale`` for every step (ablation baseline)."""
        d = asdict(base)
        k = base.scales.index(scale) if scale in base.scales else len(base.scales) - 1
        d.update(scales=[scale], batch_sizes=[base.batch_sizes[k]], single_scale=True)
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RegionMap:
    values: np.ndarray     # [h, w] in [0, 1]; low = mined
    category: int
    step: int
    resolution: int        # input scale r_t the map was produced at


@dataclass
class RegionMapPool:
    image_id: str
    category: int
    maps: list = field(default_factory=list)
    stopped: bool = False
    stop_step: Optional[int] = None
    forced: bool = False
    failed: bool = False

    def append(self, m: RegionMap) -> None:
        if self.stopped:
            raise ValueError(f"pool ({self.image_id}, {self.category}) is stopped")
        if self.maps and m.step <= self.maps[-1].step:
            raise ValueError("pool steps must be strictly increasing")
        self.maps.append(m)

    def stop(self, step: int, forced: bool = False) -> None:
        self.stopped = True
        self.stop_step = step
        self.forced = forced
        self.failed = step == 0 and not self.maps

    @property
    def num_steps(self) -> int:
        return len(self.maps)


# pools[image_index][category] -> RegionMapPool
Pools = list


def empty_pools(scenes) -> Pools:
    return [{j: RegionMapPool(sc.id, j) for j in sc.positives} for sc in scenes]


# ---------------------------------------------------------------------------
# elementary operations
# ---------------------------------------------------------------------------

def scale_for_step(t: int, scales) -> int:
    if t < 1:
        raise ValueError("steps are numbered from 1")
    return int(scales[t - 1]) if t <= len(scales) else int(scales[-1])


def accumulated_mask(pools: dict, h: int, w: int) -> np.ndarray:
    """Min over every stored map of one image (all categories, all steps), at ``h x w``."""
    out = np.ones((h, w))
    for pool in pools.values():
        for m in pool.maps:
            np.minimum(out, ad.resize_np(m.values, h, w), out=out)
    return out


def mask_features(feats: Tensor, mask) -> Tensor:
    """Broadcast a ``[B,1,h,w]`` map over feature channels; the map gets no gradient."""
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if m.ndim != 4 or m.shape[1] != 1 or m.shape[0] != feats.shape[0] \
            or m.shape[2:] != feats.shape[2:]:
        raise DimensionError(f"mask {m.shape} does not match features {feats.shape}")
    return ad.multiply(feats, Tensor(m))


def normalize_map(h: Tensor, eps: float) -> Tensor:
    """``1 - (H - min H) / (max H - min H + eps)`` with min/max over the spatial axes."""
    if eps <= 0:
        raise ConfigError("eps must be positive")
    squeeze = h.ndim == 2
    x = ad.reshape(h, (1, 1) + h.shape) if squeeze else h
    lo, hi = ad.spatial_min(x), ad.spatial_max(x)
    out = 1.0 - (x - lo) / (hi - lo + eps)
    return ad.reshape(out, h.shape) if squeeze else out


def frobenius_regularizer(maps: Tensor, positives: np.ndarray) -> Tensor:
    """``-(1/|C_pos|) * sum_{j in C_pos} ||M_j||_F`` averaged over the batch."""
    norms = ad.sqrt(ad.sum(ad.square(maps), axis=(2, 3)) + 1e-12)       # [B, C]
    pos = np.asarray(positives, dtype=np.float64)
    weights = pos / pos.sum(axis=1, keepdims=True)
    per_image = ad.sum(ad.multiply(norms, Tensor(weights)), axis=1)
    return -ad.mean(per_image)


def mined_fraction(values: np.ndarray, theta_mask: float, prior=None) -> float:
    """Fraction of entries below ``theta_mask`` that were not already mined in ``prior``."""
    mined = values < theta_mask
    if prior is not None:
        mined &= np.asarray(prior) >= theta_mask
    return float(np.mean(mined))


def is_empty_map(values: np.ndarray, score_prob: float, cfg: MiningConfig, prior=None) -> bool:
    """A map holds no object region if it mines (almost) nothing new or the object is gone.

    ``prior`` is the accumulated mask the map was proposed on; regions it has
    already zeroed carry no features, so re-mining them finds nothing.
    """
    return (mined_fraction(values, cfg.theta_mask, prior) < cfg.rho_stop
            or score_prob < cfg.theta_cls)


def merge_maps(maps, h: int, w: int) -> np.ndarray:
    if not maps:
        raise MergeError("cannot merge an empty pool")
    out = ad.resize_np(maps[0].values, h, w)
    for m in maps[1:]:
        np.minimum(out, ad.resize_np(m.values, h, w), out=out)
    return out


def merge_final(pool: RegionMapPool, out_res: int) -> np.ndarray:
    """Entrywise min of a pool's maps after resizing to ``out_res`` squared."""
    if not pool.maps:
        raise MergeError(f"pool ({pool.image_id}, {pool.category}) is empty")
    return merge_maps(pool.maps, out_res, out_res)


# ---------------------------------------------------------------------------
# the mining loop
# ---------------------------------------------------------------------------

class FeatureCache:
    """Frozen-extractor features of the training images, one entry per scale."""

    def __init__(self, nets: MinerNetworks, scenes, batch: int = 32):
        self.nets = nets
        self.scenes = scenes
        self.batch = batch
        self._cache: dict[int, np.ndarray] = {}

    def __call__(self, scale: int) -> np.ndarray:
        if scale not in self._cache:
            imgs = images_tensor(self.scenes, scale)
            chunks = []
            with no_grad():
                for i in range(0, len(imgs), self.batch):
                    chunks.append(self.nets.forward_extractor(Tensor(imgs[i:i + self.batch])).data)
            self._cache[scale] = np.concatenate(chunks)
        return self._cache[scale]


class Miner:
    """State of one mining run: networks, pools, feature cache and logs."""

    def __init__(self, nets: MinerNetworks, scenes, config: MiningConfig,
                 run_dir: Optional[Path] = None, log_fn: Optional[Callable] = None):
        if not nets.frozen_flags()["extractor"]:
            raise ConfigError("the extractor must be frozen before mining")
        self.nets = nets
        self.scenes = list(scenes)
        self.cfg = config
        self.pools = empty_pools(self.scenes)
        self.features = FeatureCache(nets, self.scenes)
        self.labels = np.stack([sc.labels for sc in self.scenes]).astype(np.float64)
        self.positives = self.labels > 0
        self.rng = np.random.default_rng(config.seed)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.log_fn = log_fn
        self.events: list[dict] = []
        self.step = 0

    # -- helpers ---------------------------------------------------------------
    def _log(self, record: dict) -> None:
        self.events.append(record)
        if self.log_fn is not None:
            self.log_fn(record)

    def _batch_size(self, t: int) -> int:
        return int(self.cfg.batch_sizes[min(t, len(self.cfg.scales)) - 1])

    def masked_features(self, t: int) -> np.ndarray:
        """``F^t`` for every image at the step-``t`` scale."""
        feats = self.features(scale_for_step(t, self.cfg.scales))
        h, w = feats.shape[2:]
        masks = np.stack([accumulated_mask(p, h, w) for p in self.pools])[:, None]
        return feats * masks

    def generator_maps(self, feats: np.ndarray) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(feats), 32):
                hmap = self.nets.forward_generator(Tensor(feats[i:i + 32]))
                out.append(normalize_map(hmap, self.cfg.eps).data)
        return np.concatenate(out)

    def modulator_probs(self, feats: np.ndarray) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(feats), 32):
                out.append(self.nets.forward_modulator(Tensor(feats[i:i + 32])).data)
        return ad.ops.sigmoid_np(np.concatenate(out))

    # -- stage 1 -------------------------------------------------------------
    def modulator_phase(self, t: int, ft: Optional[np.ndarray] = None) -> list[float]:
        nets, cfg = self.nets, self.cfg
        nets.freeze("generator")
        nets.freeze("modulator", False)
        ft = self.masked_features(t) if ft is None else ft
        params = list(nets.modulator.values())
        bs = self._batch_size(t)
        curve = []
        for epoch in range(cfg.n_m):
            order = self.rng.permutation(len(ft))
            losses = []
            for i in range(0, len(order), bs):
                idx = order[i:i + bs]
                loss = ad.multilabel_bce(nets.forward_modulator(Tensor(ft[idx])), self.labels[idx])
                loss.backward()
                ad.sgd_step(params, cfg.lr, cfg.weight_decay)
                losses.append(loss.item())
            curve.append(float(np.mean(losses)))
            self._log({"event": "modulator_epoch", "step": t, "epoch": epoch + 1,
                       "loss": curve[-1]})
        nets.freeze("modulator")
        return curve

    # -- stage 2 -------------------------------------------------------------
    def generator_loss(self, ft: np.ndarray, idx: np.ndarray):
        """``-L_cls(F~) + lam * L_reg`` for the images ``idx``; also returns the maps."""
        feats = Tensor(ft[idx])
        maps = normalize_map(self.nets.forward_generator(feats), self.cfg.eps)
        pos = self.positives[idx]
        merged = ad.masked_channel_min(maps, pos)
        scores = self.nets.forward_modulator(ad.multiply(feats, merged))
        weights = self.labels[idx] if self.cfg.generator_targets == "positive" else None
        l_cls = ad.multilabel_bce(scores, self.labels[idx], weights)
        l_reg = frobenius_regularizer(maps, pos)
        return -l_cls + self.cfg.lam * l_reg, l_cls, l_reg, maps

    def generator_phase(self, t: int, ft: Optional[np.ndarray] = None) -> list[dict]:
        nets, cfg = self.nets, self.cfg
        nets.freeze("modulator")
        nets.freeze("generator", False)
        ft = self.masked_features(t) if ft is None else ft
        params = list(nets.generator.values())
        bs = self._batch_size(t)
        curve = []
        for epoch in range(cfg.n_g):
            order = self.rng.permutation(len(ft))
            rec = {"loss": [], "l_cls": [], "l_reg": [], "map_mean": []}
            for i in range(0, len(order), bs):
                idx = order[i:i + bs]
                loss, l_cls, l_reg, maps = self.generator_loss(ft, idx)
                loss.backward()
                ad.sgd_step(params, cfg.lr, cfg.weight_decay)
                rec["loss"].append(loss.item())
                rec["l_cls"].append(l_cls.item())
                rec["l_reg"].append(l_reg.item())
                rec["map_mean"].append(float(maps.data[self.positives[idx]].mean()))
            summary = {k: float(np.mean(v)) for k, v in rec.items()}
            curve.append(summary)
            self._log({"event": "generator_epoch", "step": t, "epoch": epoch + 1, **summary})
        nets.freeze("generator")
        return curve

    # -- stage 3 -------------------------------------------------------------
    def emit_and_store(self, t: int, ft: Optional[np.ndarray] = None) -> dict:
        cfg = self.cfg
        ft = self.masked_features(t) if ft is None else ft
        maps = self.generator_maps(ft)
        probs = self.modulator_probs(ft)
        r_t = scale_for_step(t, cfg.scales)
        h, w = maps.shape[2:]
        priors = [accumulated_mask(p, h, w) for p in self.pools]
        stored = stopped = 0
        for i, pools in enumerate(self.pools):
            for j, pool in pools.items():
                if pool.stopped:
                    continue
                values = np.clip(maps[i, j], 0.0, 1.0)
                if is_empty_map(values, float(probs[i, j]), cfg, priors[i]):
                    pool.stop(t - 1)
                    stopped += 1
                    ev = {"event": "stop", "step": t, "image": pool.image_id, "category": j,
                          "stop_step": t - 1, "score": float(probs[i, j]),
                          "mined_frac": mined_fraction(values, cfg.theta_mask, priors[i])}
                    if pool.failed:
                        ev["event"] = "mining_failure"
                        log.warning("no region mined for %s category %d", pool.image_id, j)
                    self._log(ev)
                else:
                    pool.append(RegionMap(values=values.copy(), category=j, step=t,
                                          resolution=r_t))
                    stored += 1
        summary = {"event": "emit", "step": t, "scale": r_t, "stored": stored,
                   "stopped": stopped, "active": self.active_pools()}
        self._log(summary)
        return summary

    def active_pools(self) -> int:
        return sum(not p.stopped for pools in self.pools for p in pools.values())

    def run_step(self) -> dict:
        t = self.step + 1
        ft = self.masked_features(t)
        self.modulator_phase(t, ft)
        self.generator_phase(t, ft)
        summary = self.emit_and_store(t, ft)
        self.step = t
        if self.run_dir is not None:
            save_step(self, self.run_dir / "steps" / f"step_{t:02d}")
        return summary

    def run(self) -> Pools:
        while self.active_pools() and self.step < self.cfg.max_steps:
            self.run_step()
        if self.active_pools():
            log.warning("max_steps=%d reached with %d active pools; forcing stop",
                        self.cfg.max_steps, self.active_pools())
            for pools in self.pools:
                for pool in pools.values():
                    if not pool.stopped:
                        pool.stop(pool.num_steps, forced=True)
                        self._log({"event": "forced_stop", "step": self.step,
                                   "image": pool.image_id, "category": pool.category,
                                   "stop_step": pool.num_steps})
        return self.pools


def run_mining(nets: MinerNetworks, scenes, config: MiningConfig, run_dir=None,
               log_fn=None) -> Miner:
    """Run the full mining loop; returns the finished :class:`Miner`."""
    miner = Miner(nets, scenes, config, run_dir=run_dir, log_fn=log_fn)
    miner.run()
    return miner


def erasure_probe(nets: MinerNetworks, scenes, category: int, config: MiningConfig,
                  n_images: int = 5, steps: int = 2, fill: float = INPUT_MEAN,
                  min_map_mean: float = 0.95) -> dict:
    """Mine images whose ``category`` object has been blanked out of the input.

    The first ``n_images`` scenes containing ``category`` get every object
    pixel set to ``fill`` (zero once the extractor subtracts its input mean)
    and ``steps`` mining steps are run on copies of ``nets``.  An image passes
    when its pool for ``category`` is stopped within ``steps`` steps and the
    map emitted at the stopping step has mean >= ``min_map_mean``.
    """
    picks = [sc for sc in scenes if sc.labels[category]][:n_images]
    if len(picks) < n_images:
        raise InsufficientDataError(f"only {len(picks)} scenes contain category {category}, "
                                    f"probe needs {n_images}")
    probe = [dataclasses.replace(sc, image=np.where(sc.gt_masks[category][None], fill, sc.image))
             for sc in picks]
    miner = Miner(copy.deepcopy(nets), probe, config)
    records = []
    for t in range(1, steps + 1):
        ft = miner.masked_features(t)
        miner.modulator_phase(t, ft)
        miner.generator_phase(t, ft)
        maps = miner.generator_maps(ft)[:, category]
        probs = miner.modulator_probs(ft)[:, category]
        was_stopped = [p[category].stopped for p in miner.pools]
        miner.emit_and_store(t, ft)
        miner.step = t
        records.append({"step": t, "map_mean": [float(m.mean()) for m in np.clip(maps, 0, 1)],
                        "score": [float(p) for p in probs],
                        "newly_stopped": [p[category].stopped and not w
                                          for p, w in zip(miner.pools, was_stopped)]})
    per_image = []
    for i, sc in enumerate(probe):
        stop_at = next((r["step"] for r in records if r["newly_stopped"][i]), None)
        mean_at_stop = records[stop_at - 1]["map_mean"][i] if stop_at else None
        per_image.append({"image": sc.id, "stopped_at": stop_at, "map_mean_at_stop": mean_at_stop,
                          "passed": stop_at is not None and mean_at_stop >= min_map_mean})
    return {"category": category, "steps": records, "images": per_image,
            "passed": all(r["passed"] for r in per_image)}


def modulator_eval_f1(nets: MinerNetworks, scenes, scale: int) -> float:
    """Macro-F1 of the modulator on unmasked features of ``scenes`` at ``scale``."""
    cache = FeatureCache(nets, scenes)
    feats = cache(scale)
    with no_grad():
        scores = nets.forward_modulator(Tensor(feats)).data
    return macro_f1(scores, np.stack([sc.labels for sc in scenes]))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_pools(pools: Pools, directory) -> Path:
    """Per-image JSON index plus one raw little-endian float64 blob per map."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for pools_i in pools:
        if not pools_i:
            continue
        image_id = next(iter(pools_i.values())).image_id
        entries = []
        for j, pool in sorted(pools_i.items()):
            maps = []
            for m in pool.maps:
                fname = f"{image_id}_c{j}_t{m.step:02d}.f64"
                (directory / fname).write_bytes(np.ascontiguousarray(m.values, "<f8").tobytes())
                maps.append({"file": fname, "step": m.step, "resolution": m.resolution,
                             "shape": list(m.values.shape)})
            entries.append({"category": j, "stopped": pool.stopped, "stop_step": pool.stop_step,
                            "forced": pool.forced, "failed": pool.failed, "maps": maps})
        (directory / f"{image_id}.json").write_text(json.dumps({"image": image_id,
                                                                 "pools": entries}))
        index.append(image_id)
    (directory / "index.json").write_text(json.dumps({"images": index}))
    return directory


def load_pools(directory) -> Pools:
    directory = Path(directory)
    if not (directory / "index.json").exists():
        raise MissingArtifactError(f"no pools in {directory}")
    out = []
    for image_id in json.loads((directory / "index.json").read_text())["images"]:
        rec = json.loads((directory / f"{image_id}.json").read_text())
        pools_i = {}
        for e in rec["pools"]:
            pool = RegionMapPool(image_id, e["category"], stopped=e["stopped"],
                                 stop_step=e["stop_step"], forced=e["forced"], failed=e["failed"])
            for m in e["maps"]:
                vals = np.frombuffer((directory / m["file"]).read_bytes(), dtype="<f8")
                pool.maps.append(RegionMap(vals.reshape(m["shape"]).astype(np.float64),
                                           e["category"], m["step"], m["resolution"]))
            pools_i[e["category"]] = pool
        out.append(pools_i)
    return out


def save_step(miner: Miner, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    miner.nets.save(directory / "nets")
    save_pools(miner.pools, directory / "pools")
    (directory / "step.json").write_text(json.dumps({
        "step": miner.step, "scale": scale_for_step(miner.step, miner.cfg.scales),
        "active": miner.active_pools()}))
