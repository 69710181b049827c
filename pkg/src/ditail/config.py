"""Run configuration: one flat JSON document covering every command's parameters."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .denoiser import atomic_write
from .schedule import ConfigurationError


@dataclass
class RunConfig:
    command: str = ""
    seed: int = 0
    out: str = ""
    # models and inputs
    model: str = ""
    models: list = field(default_factory=list)
    target: str = ""
    probe: str = ""
    image: str = ""
    images: list = field(default_factory=list)
    sources: list = field(default_factory=list)
    reference: str = ""
    data: str = ""
    src_latents: str = ""
    save_latents: str = ""
    mask: str = ""
    # prompts
    prompt: str = ""
    neg: str = ""
    caption: str = ""
    # sampling / inversion
    omega: float = 7.5
    alpha: float = 2.0
    beta: float = 0.5
    mode: str = "latent"
    inversion_steps: int = 50
    residual_layers: list = field(default_factory=lambda: [3])
    attention_layers: list = field(default_factory=lambda: [3, 4, 5, 6, 7])
    thresh_res: float = 0.8
    thresh_attn: float = 0.5
    # data and training
    style: str = ""
    n: int = 512
    steps: int = 3000
    lr: float = 0.5
    batch: int = 16

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigurationError("config must be a JSON object")
        unknown = sorted(set(doc) - cls.keys())
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path):
        atomic_write(path, (self.dumps() + "\n").encode())


def echo_path(out: str) -> str:
    """Where the resolved-config echo of a run writing ``out`` goes."""
    return out.rstrip("/\\") + ".config.json"
