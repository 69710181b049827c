"""The shipped model family: one base model and three style fine-tunes.

Everything is a deterministic function of :class:`ZooConfig`; checkpoints are
cached under a directory keyed by the config hash.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field

from . import denoiser as dn
from .synth import SHIPPED_STYLES, STYLES, mixed_datagen
from .trainer import finetune, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ZooConfig:
    seed: int = 0
    samples_per_style: int = 512
    base_steps: int = 12000
    base_lr: float = 0.5
    finetune_steps: int = 600
    finetune_lr: float = 0.2
    batch: int = 16
    styles: tuple[str, ...] = SHIPPED_STYLES
    model: dn.ModelConfig = field(default_factory=dn.ModelConfig)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


def default_cache_dir() -> str:
    return os.environ.get("DITAIL_ZOO", os.path.join(os.path.expanduser("~"), ".cache", "ditail-zoo"))


def build_zoo(cfg: ZooConfig = ZooConfig(), cache_dir: str | None = None) -> dict[str, dn.DenoiserModel]:
    """Return ``{"base": ..., style: ...}``, training whatever is not cached yet."""
    root = os.path.join(cache_dir or default_cache_dir(), cfg.digest())
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "zoo.json"), "w") as fh:
        json.dump(asdict(cfg), fh, indent=1, sort_keys=True)

    base_path = os.path.join(root, "base.ckpt")
    if os.path.exists(base_path):
        base = dn.load(base_path)
    else:
        log.info("training base model (%d steps)", cfg.base_steps)
        data = mixed_datagen(STYLES, cfg.samples_per_style, cfg.model.image_size, cfg.seed)
        init = dn.DenoiserModel.init(cfg.model, seed=cfg.seed)
        base = train(init, data, cfg.base_steps, cfg.base_lr, cfg.seed, cfg.batch).model
        base.provenance["role"] = "base"
        dn.save(base, base_path)
    models = {"base": base}
    for i, style in enumerate(cfg.styles):
        path = os.path.join(root, f"{style}.ckpt")
        if os.path.exists(path):
            models[style] = dn.load(path)
            continue
        log.info("fine-tuning %s (%d steps)", style, cfg.finetune_steps)
        m = finetune(base, style, cfg.finetune_steps, cfg.finetune_lr, cfg.seed + 101 + i,
                     cfg.samples_per_style, cfg.batch, data_seed=cfg.seed + 1).model
        dn.save(m, path)
        models[style] = m
    return models
