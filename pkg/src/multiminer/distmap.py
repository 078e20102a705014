"""Toy check that mining behaves like distribution mapping.

A residual generator ``G`` maps samples of ``p1`` (foreground plus
background) toward ``p0`` (background only) while a discriminator ``D``
plays the minimax game

    min_G max_D  E_{x~p0} log(1 - D(x)) + E_{x~p1} log D(G(x))

so ``D`` is pushed high on generated samples and low on ``p0`` samples.
The conventional orientation (``D`` high on real ``p0``) is available with
``conventional=True``.  Convergence is measured with the energy distance.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import autodiff as ad
from .autodiff import Parameter, Tensor, no_grad
from .errors import ConfigError, InsufficientDataError, NumericError

KINDS = ("gaussian-mixture-1d", "two-moons-2d", "masked-patch-4x4")
MIN_SAMPLES = 1000


# ---------------------------------------------------------------------------
# toy distributions
# ---------------------------------------------------------------------------

@dataclass
class ToyDistribution:
    """Seeded sampler; ``params`` depend on ``kind``.

    gaussian-mixture-1d: ``means``, ``stds``, ``weights``.
    two-moons-2d: ``noise``, ``shift`` (added to every sample).
    masked-patch-4x4: ``foreground`` (bool), ``contrast``, ``noise``.
    """
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown toy distribution {self.kind!r}; choose from {KINDS}")
        if self.kind == "gaussian-mixture-1d":
            p = {"means": [0.0], "stds": [1.0], "weights": [1.0], **self.params}
            w = np.asarray(p["weights"], dtype=np.float64)
            if not (len(p["means"]) == len(p["stds"]) == len(w)) or np.any(w < 0) or w.sum() <= 0:
                raise ConfigError("mixture needs matching means/stds/weights with positive mass")
            if np.any(np.asarray(p["stds"]) <= 0):
                raise ConfigError("mixture stds must be positive")
            p["weights"] = list(w / w.sum())
            self.params = p
        elif self.kind == "two-moons-2d":
            self.params = {"noise": 0.1, "shift": [0.0, 0.0], **self.params}
        else:
            self.params = {"foreground": False, "contrast": 1.0, "noise": 0.1, **self.params}

    @property
    def dim(self) -> int:
        return {"gaussian-mixture-1d": 1, "two-moons-2d": 2, "masked-patch-4x4": 16}[self.kind]

    @classmethod
    def gaussian(cls, mean: float, std: float = 1.0) -> "ToyDistribution":
        return cls("gaussian-mixture-1d", {"means": [mean], "stds": [std], "weights": [1.0]})

    def sample(self, n: int, seed) -> np.ndarray:
        """``n`` samples as ``[n, dim]``; identical for identical ``seed``."""
        rng = np.random.default_rng(seed)
        p = self.params
        if self.kind == "gaussian-mixture-1d":
            comp = rng.choice(len(p["weights"]), size=n, p=p["weights"])
            x = np.asarray(p["means"])[comp] + np.asarray(p["stds"])[comp] * rng.standard_normal(n)
            return x[:, None]
        if self.kind == "two-moons-2d":
            upper = rng.random(n) < 0.5
            ang = rng.uniform(0, np.pi, n)
            x = np.where(upper, np.cos(ang), 1 - np.cos(ang))
            y = np.where(upper, np.sin(ang), 0.5 - np.sin(ang))
            pts = np.stack([x, y], axis=1) + p["noise"] * rng.standard_normal((n, 2))
            return pts + np.asarray(p["shift"], dtype=np.float64)
        # smooth background patches; foreground adds a bright 2x2 block at a random corner
        base = rng.standard_normal((n, 4, 4)) * p["noise"] + rng.normal(0, 0.3, (n, 1, 1))
        if p["foreground"]:
            oy, ox = rng.integers(0, 3, n), rng.integers(0, 3, n)
            for dy in range(2):
                for dx in range(2):
                    base[np.arange(n), oy + dy, ox + dx] += p["contrast"]
        return base.reshape(n, 16)

    def density(self, x) -> np.ndarray:
        if self.kind != "gaussian-mixture-1d":
            raise ConfigError(f"density is only available for the 1-D mixture, not {self.kind}")
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        p = self.params
        return sum(w * norm.pdf(x, m, s) for m, s, w in zip(p["means"], p["stds"], p["weights"]))


# ---------------------------------------------------------------------------
# energy distance
# ---------------------------------------------------------------------------

def _pair_abs_sum_1d(z: np.ndarray) -> float:
    """Sum of |z_a - z_b| over unordered pairs, via sorting."""
    z = np.sort(z)
    n = len(z)
    return float(np.dot(z, 2 * np.arange(n) - n + 1))


def _mean_pair_dist(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> float:
    total = 0.0
    for i in range(0, len(a), chunk):
        d = a[i:i + chunk, None, :] - b[None, :, :]
        total += np.sqrt((d * d).sum(-1)).sum()
    return total / (len(a) * len(b))


def divergence(q: np.ndarray, p: np.ndarray) -> float:
    """Energy distance ``2E|X-Y| - E|X-X'| - E|Y-Y'|`` (V-statistic, >= 0).

    Exact ``O(n log n)`` sorting formula in 1-D, chunked pairwise sums otherwise.
    """
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    q = q[:, None] if q.ndim == 1 else q
    p = p[:, None] if p.ndim == 1 else p
    if len(q) < MIN_SAMPLES or len(p) < MIN_SAMPLES:
        raise InsufficientDataError(f"divergence needs >= {MIN_SAMPLES} samples per side, "
                                    f"got {len(q)} and {len(p)}")
    if q.shape[1] != p.shape[1]:
        raise ConfigError(f"sample dimensions differ: {q.shape[1]} vs {p.shape[1]}")
    n, m = len(q), len(p)
    if q.shape[1] == 1:
        sq, sp = _pair_abs_sum_1d(q[:, 0]), _pair_abs_sum_1d(p[:, 0])
        cross = _pair_abs_sum_1d(np.concatenate([q[:, 0], p[:, 0]])) - sq - sp
        e_xy, e_xx, e_yy = cross / (n * m), 2 * sq / (n * n), 2 * sp / (m * m)
    else:
        e_xy, e_xx, e_yy = _mean_pair_dist(q, p), _mean_pair_dist(q, q), _mean_pair_dist(p, p)
    return max(0.0, 2 * e_xy - e_xx - e_yy)


def gaussian_energy_distance(mu0: float, s0: float, mu1: float, s1: float) -> float:
    """Closed form for two 1-D normals, using ``E|Z|`` of a normal ``Z``."""
    def e_abs(mu, s):
        return s * np.sqrt(2 / np.pi) * np.exp(-mu * mu / (2 * s * s)) + mu * (1 - 2 * norm.cdf(-mu / s))
    return float(2 * e_abs(mu1 - mu0, np.hypot(s0, s1)) - e_abs(0.0, np.sqrt(2) * s0)
                 - e_abs(0.0, np.sqrt(2) * s1))


# ---------------------------------------------------------------------------
# networks and training
# ---------------------------------------------------------------------------

@dataclass
class GanConfig:
    hidden: int = 32
    steps: int = 1500
    batch: int = 256
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    beta1: float = 0.5
    beta2: float = 0.999
    logit_clip: float = 30.0
    conventional: bool = False
    eval_samples: int = 10000
    seed: int = 5

    def __post_init__(self):
        if self.hidden < 1 or self.steps < 0 or self.batch < 1:
            raise ConfigError("hidden and batch must be positive, steps non-negative")
        if self.lr_g < 0 or self.lr_d < 0:
            raise ConfigError("learning rates must be non-negative")


def _mlp_params(rng, prefix: str, sizes: list, zero_last: bool = False) -> dict:
    out = {}
    for k, (a, b) in enumerate(zip(sizes, sizes[1:])):
        last = k == len(sizes) - 2
        w = np.zeros((a, b)) if zero_last and last else rng.uniform(-1, 1, (a, b)) * np.sqrt(6 / a)
        out[f"{prefix}.l{k}.w"] = Parameter(w, name=f"{prefix}.l{k}.w")
        out[f"{prefix}.l{k}.b"] = Parameter(np.zeros(b), name=f"{prefix}.l{k}.b")
    return out


def _mlp(params: dict, prefix: str, x: Tensor, depth: int) -> Tensor:
    for k in range(depth):
        x = ad.linear(x, params[f"{prefix}.l{k}.w"], params[f"{prefix}.l{k}.b"])
        if k < depth - 1:
            x = ad.tanh(x)
    return x


class Adam:
    """Adam on a list of parameters; gradients are cleared after each step."""

    def __init__(self, params, lr: float, beta1: float, beta2: float, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            p.data -= self.lr * mh / (np.sqrt(vh) + self.eps)
            p.grad = None


class MapperPair:
    """Residual generator ``G(x) = x + MLP(x)`` (starts as the identity) and MLP discriminator."""

    def __init__(self, dim: int, hidden: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dim, self.hidden = dim, hidden
        sizes = [dim, hidden, hidden]
        self.g = _mlp_params(rng, "G", sizes + [dim], zero_last=True)
        self.d = _mlp_params(rng, "D", sizes + [1])
        self.log: list[dict] = []

    def num_params(self) -> dict:
        return {"G": int(sum(p.data.size for p in self.g.values())),
                "D": int(sum(p.data.size for p in self.d.values()))}

    def generate(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        return x + _mlp(self.g, "G", x, 3)

    def logits(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        return ad.reshape(_mlp(self.d, "D", x, 3), (x.shape[0],))

    def map_np(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.generate(x).data

    def logits_np(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.logits(x).data


def _clip(x: Tensor, c: float) -> Tensor:
    # keeps log-sigmoid terms finite without touching gradients inside the band
    return ad.tanh(x * (1.0 / c)) * c


def minimax_value(pair: MapperPair, x0, x1, conventional: bool = False, clip: float = 30.0) -> Tensor:
    """Objective value ``V(D, G)``; D ascends it, G descends it."""
    l0 = _clip(pair.logits(x0), clip)
    l1 = _clip(pair.logits(pair.generate(x1)), clip)
    if conventional:
        return ad.mean(ad.log_sigmoid(l0)) + ad.mean(ad.log_sigmoid(-l1))
    return ad.mean(ad.log_sigmoid(-l0)) + ad.mean(ad.log_sigmoid(l1))


def discriminator_accuracy(pair: MapperPair, x0: np.ndarray, x1: np.ndarray,
                           conventional: bool = False) -> float:
    """Balanced accuracy of D separating ``p0`` samples from ``G(p1)`` samples."""
    l0 = pair.logits_np(x0)
    l1 = pair.logits_np(pair.map_np(x1))
    if conventional:
        return float(0.5 * (np.mean(l0 > 0) + np.mean(l1 <= 0)))
    return float(0.5 * (np.mean(l0 <= 0) + np.mean(l1 > 0)))


def train_minimax(p0: ToyDistribution, p1: ToyDistribution, cfg: GanConfig | None = None,
                  pair: MapperPair | None = None, log_every: int = 50) -> MapperPair:
    """Alternating single steps: one D ascent step, then one G descent step."""
    cfg = cfg or GanConfig()
    if p0.dim != p1.dim:
        raise ConfigError(f"p0 and p1 dimensions differ: {p0.dim} vs {p1.dim}")
    pair = pair or MapperPair(p0.dim, cfg.hidden, seed=cfg.seed)
    opt_d = Adam(pair.d.values(), cfg.lr_d, cfg.beta1, cfg.beta2)
    opt_g = Adam(pair.g.values(), cfg.lr_g, cfg.beta1, cfg.beta2)
    x0_eval = p0.sample(2000, [cfg.seed, 1])
    x1_eval = p1.sample(2000, [cfg.seed, 2])
    for step in range(cfg.steps):
        x0 = p0.sample(cfg.batch, [cfg.seed, 3, step])
        x1 = p1.sample(cfg.batch, [cfg.seed, 4, step])
        try:
            v = minimax_value(pair, x0, x1, cfg.conventional, cfg.logit_clip)
            (-v).backward()
            for p in pair.g.values():
                p.grad = None
            opt_d.step()
            v_g = minimax_value(pair, x0, x1, cfg.conventional, cfg.logit_clip)
            v_g.backward()
            for p in pair.d.values():
                p.grad = None
            opt_g.step()
        except NumericError as exc:
            raise NumericError(f"minimax training diverged at step {step}: {exc}", step=step) from exc
        if not np.isfinite(v.item()) or not np.isfinite(v_g.item()):
            raise NumericError(f"minimax loss is not finite at step {step}", step=step)
        if step % log_every == 0 or step == cfg.steps - 1:
            pair.log.append({"step": step, "value": v.item(),
                             "d_accuracy": discriminator_accuracy(pair, x0_eval, x1_eval,
                                                                  cfg.conventional)})
    return pair


# ---------------------------------------------------------------------------
# verification report
# ---------------------------------------------------------------------------

def verify(p0: ToyDistribution | None = None, p1: ToyDistribution | None = None,
           cfg: GanConfig | None = None) -> tuple[dict, MapperPair]:
    """Train on ``p1 -> p0`` and measure divergence before/after plus D accuracy."""
    p0 = p0 or ToyDistribution.gaussian(0.0)
    p1 = p1 or ToyDistribution.gaussian(4.0)
    cfg = cfg or GanConfig()
    t0 = time.perf_counter()
    n = cfg.eval_samples
    x0 = p0.sample(n, [cfg.seed, 10])
    x1 = p1.sample(n, [cfg.seed, 11])
    pre = divergence(x1, x0)
    pair = train_minimax(p0, p1, cfg)
    q1 = pair.map_np(p1.sample(n, [cfg.seed, 12]))
    post = divergence(q1, x0)
    acc = discriminator_accuracy(pair, p0.sample(n, [cfg.seed, 13]),
                                 p1.sample(n, [cfg.seed, 14]), cfg.conventional)
    report = {"p0": asdict(p0), "p1": asdict(p1), "config": asdict(cfg),
              "divergence_pre": pre, "divergence_post": post, "ratio": post / pre if pre else 0.0,
              "d_accuracy": acc, "q1_mean": q1.mean(axis=0).tolist(),
              "q1_var": q1.var(axis=0).tolist(), "params": pair.num_params(),
              "d_accuracy_curve": [{"step": r["step"], "d_accuracy": r["d_accuracy"]}
                                   for r in pair.log],
              "seconds": time.perf_counter() - t0}
    return report, pair


def histogram_rows(samples: dict, bins: int = 60) -> list[dict]:
    """Shared-bin histogram densities of the first coordinate of each sample set."""
    allv = np.concatenate([np.asarray(v)[:, 0] for v in samples.values()])
    edges = np.linspace(allv.min(), allv.max(), bins + 1)
    rows = []
    hists = {k: np.histogram(np.asarray(v)[:, 0], edges, density=True)[0] for k, v in samples.items()}
    for b in range(bins):
        rows.append({"lo": edges[b], "hi": edges[b + 1], **{k: float(h[b]) for k, h in hists.items()}})
    return rows


def write_report(report: dict, pair: MapperPair, p0: ToyDistribution, p1: ToyDistribution,
                 out_dir, n: int = 10000, seed: int = 0) -> Path:
    """``gan_report.json`` plus ``gan_hist.csv`` (p0, p1, G(p1) densities)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gan_report.json").write_text(json.dumps(report, indent=1))
    x1 = p1.sample(n, [seed, 21])
    rows = histogram_rows({"p0": p0.sample(n, [seed, 20]), "p1": x1, "q1": pair.map_np(x1)})
    with open(out / "gan_hist.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return out
