"""Feature extractor, parallel modulator and category-aware generator.

The modulator and generator share one conv-stack layout (two 3x3 conv+relu
layers, then a 1x1 conv to one map per category).  The modulator averages
those maps into per-category scores; the generator applies a relu and
hands the maps on as region-map logits.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, no_grad
from .errors import DimensionError, PretrainingFailure, MissingArtifactError

# subtracted from every input pixel, so this value is zero to the extractor
INPUT_MEAN = 0.5

log = logging.getLogger(__name__)


@dataclass
class ExtractorConfig:
    # (channels, number of 3x3 convs, pool stride)
    stages: list = field(default_factory=lambda: [[16, 1, 2], [32, 1, 2], [64, 1, 1]])
    in_channels: int = 3

    @property
    def out_channels(self) -> int:
        return self.stages[-1][0]

    @property
    def stride(self) -> int:
        return int(np.prod([s[2] for s in self.stages]))


@dataclass
class HeadConfig:
    """Shared layout of the modulator and generator stacks."""
    hidden: int = 64
    num_categories: int = 4


@dataclass
class NetworkConfig:
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    init_seed: int = 7

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(extractor=ExtractorConfig(**d.get("extractor", {})),
                   head=HeadConfig(**d.get("head", {})), init_seed=d.get("init_seed", 7))

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_param(rng, cout, cin, k, name):
    bound = np.sqrt(6.0 / (cin * k * k))
    w = Parameter(rng.uniform(-bound, bound, size=(cout, cin, k, k)), name=f"{name}.w")
    b = Parameter(np.zeros(cout), name=f"{name}.b")
    return w, b


def _head_params(rng, prefix, in_ch, cfg: HeadConfig) -> dict:
    p = {}
    chans = [in_ch, cfg.hidden, cfg.hidden]
    for i in range(2):
        w, b = _conv_param(rng, chans[i + 1], chans[i], 3, f"{prefix}.conv{i}")
        p[w.name], p[b.name] = w, b
    w, b = _conv_param(rng, cfg.num_categories, cfg.hidden, 1, f"{prefix}.cls")
    p[w.name], p[b.name] = w, b
    return p


class MinerNetworks:
    """Parameters of the three networks plus their freeze state."""

    def __init__(self, config: NetworkConfig | None = None):
        self.config = config or NetworkConfig()
        rng = np.random.default_rng(self.config.init_seed)
        ecfg = self.config.extractor
        self.extractor: dict[str, Parameter] = {}
        cin = ecfg.in_channels
        for si, (ch, nconv, _) in enumerate(ecfg.stages):
            for ci in range(nconv):
                w, b = _conv_param(rng, ch, cin, 3, f"extractor.s{si}.c{ci}")
                self.extractor[w.name], self.extractor[b.name] = w, b
                cin = ch
        self.modulator = _head_params(rng, "modulator", cin, self.config.head)
        self.generator = _head_params(rng, "generator", cin, self.config.head)

    # -- parameter groups ---------------------------------------------------
    def all_params(self) -> dict[str, Parameter]:
        return {**self.extractor, **self.modulator, **self.generator}

    @staticmethod
    def _set_frozen(group: dict, frozen: bool) -> None:
        for p in group.values():
            p.frozen = frozen

    def freeze(self, which: str, frozen: bool = True) -> None:
        self._set_frozen(getattr(self, which), frozen)

    def frozen_flags(self) -> dict[str, bool]:
        return {g: all(p.frozen for p in getattr(self, g).values())
                for g in ("extractor", "modulator", "generator")}

    # -- forward passes -----------------------------------------------------
    def forward_extractor(self, images: Tensor) -> Tensor:
        stride = self.config.extractor.stride
        if images.ndim != 4 or images.shape[1] != self.config.extractor.in_channels:
            raise DimensionError(f"extractor expects [B,3,H,W], got {images.shape}")
        if images.shape[2] % stride or images.shape[3] % stride:
            raise DimensionError(f"image size {images.shape[2:]} not divisible by {stride}")
        x = images - INPUT_MEAN
        for si, (_, nconv, pool_stride) in enumerate(self.config.extractor.stages):
            for ci in range(nconv):
                pre = f"extractor.s{si}.c{ci}"
                x = ad.relu(ad.conv2d(x, self.extractor[pre + ".w"], self.extractor[pre + ".b"],
                                      padding=1))
            x = ad.max_pool(x, 3, pool_stride, 1)
        return x

    def _head(self, params: dict, prefix: str, feats: Tensor) -> Tensor:
        if feats.ndim != 4 or feats.shape[1] != self.config.extractor.out_channels:
            raise DimensionError(f"{prefix} expects {self.config.extractor.out_channels} "
                                 f"feature channels, got {feats.shape}")
        x = feats
        for i in range(2):
            x = ad.relu(ad.conv2d(x, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"],
                                  padding=1))
        return ad.conv2d(x, params[f"{prefix}.cls.w"], params[f"{prefix}.cls.b"])

    def modulator_maps(self, feats: Tensor) -> Tensor:
        """Per-category maps before global pooling, ``[B,|C|,h,w]``."""
        return self._head(self.modulator, "modulator", feats)

    def forward_modulator(self, feats: Tensor) -> Tensor:
        """Raw per-category scores ``[B,|C|]``."""
        return ad.global_avg_pool(self.modulator_maps(feats))

    def generator_premaps(self, feats: Tensor) -> Tensor:
        return self._head(self.generator, "generator", feats)

    def forward_generator(self, feats: Tensor) -> Tensor:
        """Non-negative region-map logits ``H``, ``[B,|C|,h,w]``."""
        return ad.relu(self.generator_premaps(feats))

    def init_generator_from_modulator(self) -> None:
        for name, p in self.modulator.items():
            g = self.generator[name.replace("modulator", "generator", 1)]
            if g.shape != p.shape:
                raise DimensionError(f"cannot copy {name}: {p.shape} vs {g.shape}")
            g.data = p.data.copy()
            g.grad = None

    # -- persistence --------------------------------------------------------
    def save(self, directory) -> Path:
        directory = Path(directory)
        ad.save_params({k: p.data for k, p in self.all_params().items()}, directory)
        sidecar = {"config": self.config.to_dict(), "frozen": self.frozen_flags()}
        (directory / "nets.json").write_text(json.dumps(sidecar, indent=1))
        return directory

    @classmethod
    def load(cls, directory) -> "MinerNetworks":
        directory = Path(directory)
        if not (directory / "nets.json").exists():
            raise MissingArtifactError(f"no network checkpoint in {directory}")
        sidecar = json.loads((directory / "nets.json").read_text())
        nets = cls(NetworkConfig.from_dict(sidecar["config"]))
        arrays, _ = ad.load_params(directory)
        for name, p in nets.all_params().items():
            p.data = arrays[name].copy()
        for group, frozen in sidecar["frozen"].items():
            nets.freeze(group, frozen)
        return nets


# ---------------------------------------------------------------------------
# classifier pretraining
# ---------------------------------------------------------------------------

def images_tensor(scenes, size: int | None = None) -> np.ndarray:
    imgs = np.stack([sc.image for sc in scenes])
    if size is not None and size != imgs.shape[-1]:
        imgs = ad.resize_np(imgs, size, size)
    return imgs


def macro_f1(scores: np.ndarray, labels: np.ndarray) -> float:
    """Macro-averaged F1 of ``scores > 0`` against binary labels."""
    pred = scores > 0
    truth = labels > 0
    f1s = []
    for j in range(labels.shape[1]):
        tp = np.sum(pred[:, j] & truth[:, j])
        fp = np.sum(pred[:, j] & ~truth[:, j])
        fn = np.sum(~pred[:, j] & truth[:, j])
        denom = 2 * tp + fp + fn
        f1s.append(1.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(f1s))


def classifier_scores(nets: MinerNetworks, images: np.ndarray, batch: int = 32) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            f = nets.forward_extractor(Tensor(images[i:i + batch]))
            out.append(nets.forward_modulator(f).data)
    return np.concatenate(out)


@dataclass
class PretrainConfig:
    epochs: int = 30
    lr_extractor: float = 0.02
    lr_modulator: float = 0.2
    weight_decay: float = 1e-4
    batch: int = 16
    # both rates divided by 10 once this fraction of epochs has run
    decay_at: float = 0.6
    min_macro_f1: float = 0.95
    seed: int = 11


def pretrain_classifier(nets: MinerNetworks, dataset, cfg: PretrainConfig | None = None,
                        on_epoch=None) -> dict:
    """Jointly train extractor and modulator on multi-label BCE, then freeze the extractor.

    Returns a metrics dict with the per-epoch loss curve and the eval macro-F1.
    Raises :class:`PretrainingFailure` when the eval macro-F1 misses the gate.
    """
    cfg = cfg or PretrainConfig()
    train = dataset.subset("train")
    if not train:
        raise ValueError("pretraining needs a non-empty training split")
    x_train = images_tensor(train)
    y_train = np.stack([sc.labels for sc in train]).astype(np.float64)
    rng = np.random.default_rng(cfg.seed)
    nets.freeze("extractor", False)
    nets.freeze("modulator", False)
    ext, mod = list(nets.extractor.values()), list(nets.modulator.values())
    curve = []
    for epoch in range(cfg.epochs):
        scale = 0.1 if epoch >= cfg.decay_at * cfg.epochs else 1.0
        order = rng.permutation(len(train))
        losses = []
        for i in range(0, len(order), cfg.batch):
            idx = order[i:i + cfg.batch]
            scores = nets.forward_modulator(nets.forward_extractor(Tensor(x_train[idx])))
            loss = ad.multilabel_bce(scores, y_train[idx])
            loss.backward()
            ad.sgd_step(ext, scale * cfg.lr_extractor, cfg.weight_decay)
            ad.sgd_step(mod, scale * cfg.lr_modulator, cfg.weight_decay)
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.4f", epoch + 1, curve[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, curve[-1])
    nets.freeze("extractor", True)

    ev = dataset.subset("eval")
    metrics = {"loss_curve": curve, "epochs": cfg.epochs}
    metrics["train_macro_f1"] = macro_f1(classifier_scores(nets, x_train), y_train)
    if ev:
        y_ev = np.stack([sc.labels for sc in ev])
        metrics["eval_macro_f1"] = macro_f1(classifier_scores(nets, images_tensor(ev)), y_ev)
    else:
        metrics["eval_macro_f1"] = metrics["train_macro_f1"]
    if metrics["eval_macro_f1"] < cfg.min_macro_f1:
        raise PretrainingFailure(f"eval macro-F1 {metrics['eval_macro_f1']:.3f} below gate "
                                 f"{cfg.min_macro_f1}", metrics)
    return metrics
