"""Command-line entry point.

Every command takes ``--seed``, ``--config`` and ``--out``.  Values resolve as
built-in defaults, then the ``--config`` file, then explicit flags; the result
is written next to the output as ``<out>.config.json`` so the run can be
replayed with ``--config``.  Failures print one line
``error: <ErrorClass>: <message>`` to stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import denoiser as dn
from . import imageio, metrics, pipelines, synth, trainer
from .conditioner import Vocabulary
from .config import RunConfig, echo_path
from .injection import (FEATURE, LATENT, InjectionConfig, InjectionMask, ditail, load_trajectory,
                        save_trajectory)
from .schedule import ConfigurationError

log = logging.getLogger("ditail")

COMMANDS = ("datagen", "train", "finetune", "generate", "invert", "ditail", "matrix", "edit", "metrics")

REQUIRED = {
    "datagen": ("style",),
    "train": (),
    "finetune": ("model", "style"),
    "generate": ("model",),
    "invert": ("model", "image"),
    "ditail": ("src_latents", "target"),
    "matrix": ("models",),
    "edit": ("model", "image"),
    "metrics": ("images",),
}

INPUT_FILES = ("model", "target", "probe", "image", "src_latents", "mask")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _layers(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    try:
        return [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated layer indices, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = _Parser(prog="ditail", description="Content injection between toy diffusion models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    cmds = {name: sub.add_parser(name, argument_default=S) for name in COMMANDS}
    for sp in cmds.values():
        sp.add_argument("--seed", type=int)
        sp.add_argument("--config", help="JSON run config; explicit flags override it")
        sp.add_argument("--out", help="output path")

    def prompts(sp, edit=False):
        sp.add_argument("--prompt", help="edit prompt" if edit else "positive prompt")
        sp.add_argument("--neg", help="negative prompt")

    def injection(sp):
        sp.add_argument("--omega", type=float)
        sp.add_argument("--mask", help="grayscale PPM/PNG, 255 = inject")
        sp.add_argument("--mode", choices=(LATENT, FEATURE))
        sp.add_argument("--residual-layers", dest="residual_layers", type=_layers)
        sp.add_argument("--attention-layers", dest="attention_layers", type=_layers)
        sp.add_argument("--thresh-res", dest="thresh_res", type=float)
        sp.add_argument("--thresh-attn", dest="thresh_attn", type=float)

    def inversion(sp):
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--beta", type=float)
        sp.add_argument("--inversion-steps", dest="inversion_steps", type=int)

    c = cmds["datagen"]
    c.add_argument("--style", choices=sorted(synth.STYLES))
    c.add_argument("--n", type=int)

    for name in ("train", "finetune"):
        c = cmds[name]
        c.add_argument("--steps", type=int)
        c.add_argument("--lr", type=float)
        c.add_argument("--batch", type=int)
        c.add_argument("--n", type=int, help="samples per style when generating data")
    cmds["train"].add_argument("--data", help="dataset directory from datagen (default: all styles)")
    cmds["finetune"].add_argument("--model")
    cmds["finetune"].add_argument("--style", choices=sorted(synth.STYLES))

    c = cmds["generate"]
    c.add_argument("--model")
    prompts(c)
    injection(c)
    c.add_argument("--save-latents", dest="save_latents", help="write the source trajectory here")

    c = cmds["invert"]
    c.add_argument("--model")
    c.add_argument("--image")
    prompts(c)
    inversion(c)
    c.add_argument("--mode", choices=(LATENT, FEATURE))
    c.add_argument("--residual-layers", dest="residual_layers", type=_layers)
    c.add_argument("--attention-layers", dest="attention_layers", type=_layers)

    c = cmds["ditail"]
    c.add_argument("--src-latents", dest="src_latents")
    c.add_argument("--target")
    prompts(c)
    injection(c)

    c = cmds["matrix"]
    c.add_argument("--models", nargs="+")
    prompts(c)
    injection(c)

    c = cmds["edit"]
    c.add_argument("--model", help="inversion model")
    c.add_argument("--target", help="target style model (default: --model)")
    c.add_argument("--image")
    c.add_argument("--caption", help="prompt used during inversion")
    prompts(c, edit=True)
    inversion(c)
    injection(c)

    c = cmds["metrics"]
    c.add_argument("--images", nargs="+", help="image files or directories")
    c.add_argument("--sources", nargs="+", help="paired source images for structure distance")
    c.add_argument("--prompt", help="prompt for compliance scores")
    c.add_argument("--reference", help="style reference images (directory) for the Frechet distance")
    c.add_argument("--probe", help="probe checkpoint for structure distance")
    return p


def resolve(argv=None) -> tuple[RunConfig, bool]:
    """Parse ``argv`` into a resolved :class:`RunConfig` (no files are read except --config)."""
    ns = vars(build_parser().parse_args(argv))
    verbose = ns.pop("verbose", False)
    command = ns.pop("command")
    cfg_path = ns.pop("config", None)
    doc = RunConfig().to_dict()
    if cfg_path:
        loaded = RunConfig.load(cfg_path).to_dict()
        if loaded.get("command") and loaded["command"] != command:
            raise ConfigurationError(f"config {cfg_path} is for {loaded['command']!r}, not {command!r}")
        doc.update(loaded)
    doc.update(ns)
    doc["command"] = command
    return RunConfig.from_dict(doc), verbose


def validate(cfg: RunConfig):
    """Flag checks that need no model computation."""
    if not cfg.out:
        raise UsageError("--out is required")
    missing = [k for k in REQUIRED[cfg.command] if not getattr(cfg, k)]
    if missing:
        raise UsageError("missing required flags: " + ", ".join("--" + k.replace("_", "-") for k in missing))
    for key in INPUT_FILES:
        path = getattr(cfg, key)
        if path and key in _used_inputs(cfg) and not os.path.exists(path):
            raise FileNotFoundError(f"--{key.replace('_', '-')}: no such file {path}")
    for path in list(cfg.models) + list(cfg.sources):
        if not os.path.exists(path):
            raise FileNotFoundError(f"no such file {path}")
    if cfg.command == "train" and cfg.data and not os.path.isdir(cfg.data):
        raise FileNotFoundError(f"--data: no such directory {cfg.data}")
    if cfg.command in ("train", "finetune"):
        if cfg.steps < 0 or cfg.batch < 1 or cfg.n < 1:
            raise UsageError("--steps must be >= 0, --batch and --n >= 1")
    if cfg.command == "datagen" and cfg.n < 1:
        raise UsageError("--n must be >= 1")
    if cfg.mode not in (LATENT, FEATURE):
        raise UsageError(f"--mode must be {LATENT} or {FEATURE}")
    if cfg.command == "generate" and cfg.mode == FEATURE and not cfg.save_latents:
        raise UsageError("--mode feature captures features only together with --save-latents")
    if cfg.command == "ditail":
        header_mode = _trajectory_mode(cfg.src_latents)
        if cfg.mode == FEATURE and header_mode != FEATURE:
            raise UsageError(f"--mode feature needs captured features, but {cfg.src_latents} "
                             f"holds a {header_mode} trajectory")
    if cfg.command == "metrics":
        if cfg.sources and not cfg.probe:
            raise UsageError("--sources needs --probe for structure distance")
        if cfg.sources and len(cfg.sources) != len(_expand(cfg.images)):
            raise UsageError(f"{len(cfg.sources)} sources for {len(_expand(cfg.images))} images")
        if cfg.reference and not os.path.isdir(cfg.reference):
            raise FileNotFoundError(f"--reference: no such directory {cfg.reference}")
    # constructing the config checks thresholds and layer sets
    _injection(cfg, with_mask=False)


def _used_inputs(cfg: RunConfig) -> set[str]:
    return {
        "finetune": {"model"},
        "generate": {"model"},
        "invert": {"model", "image"},
        "ditail": {"src_latents", "target", "mask"},
        "matrix": {"mask"},
        "edit": {"model", "target", "image", "mask"},
        "metrics": {"probe"},
    }.get(cfg.command, set())


def _trajectory_mode(path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != b"DTRJ":
            return "unknown"
        n = int.from_bytes(head[4:8], "little")
        try:
            return json.loads(fh.read(n)).get("mode", "unknown")
        except ValueError:
            return "unknown"


def _injection(cfg: RunConfig, with_mask: bool = True) -> InjectionConfig:
    mask = InjectionMask(imageio.read_mask(cfg.mask)) if (with_mask and cfg.mask) else None
    return InjectionConfig(tuple(cfg.residual_layers), tuple(cfg.attention_layers), cfg.thresh_res,
                           cfg.thresh_attn, cfg.omega, mask, cfg.mode)


def _expand(paths) -> list[str]:
    out = []
    for p in paths:
        if os.path.isdir(p):
            out.extend(sorted(os.path.join(p, f) for f in os.listdir(p)
                              if f.lower().endswith((".ppm", ".png"))))
        else:
            out.append(p)
    return out


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_datagen(cfg: RunConfig):
    synth.write_dataset(synth.datagen(cfg.style, cfg.n, seed=cfg.seed), cfg.out, cfg.style)


def cmd_train(cfg: RunConfig):
    if cfg.data:
        data = synth.read_dataset(cfg.data)
    else:
        data = synth.mixed_datagen(synth.STYLES, cfg.n, seed=cfg.seed)
    model = dn.DenoiserModel.init(seed=cfg.seed)
    dn.save(trainer.train(model, data, cfg.steps, cfg.lr, cfg.seed, cfg.batch).model, cfg.out)


def cmd_finetune(cfg: RunConfig):
    base = dn.load(cfg.model)
    res = trainer.finetune(base, cfg.style, cfg.steps, cfg.lr, cfg.seed, cfg.n, cfg.batch)
    dn.save(res.model, cfg.out)


def cmd_generate(cfg: RunConfig):
    model = dn.load(cfg.model)
    inj = _injection(cfg)
    rec = pipelines.generate(model, cfg.prompt, cfg.neg, cfg.seed, cfg.omega,
                             capture=bool(cfg.save_latents), mode=cfg.mode, config=inj)
    if cfg.save_latents:
        save_trajectory(rec.trajectory, cfg.save_latents)
    imageio.write_image(cfg.out, rec.image)


def cmd_invert(cfg: RunConfig):
    model = dn.load(cfg.model)
    image = imageio.read_image(cfg.image)
    traj = pipelines.invert(image, model, cfg.prompt, cfg.neg, cfg.alpha, cfg.beta, cfg.inversion_steps,
                            cfg.mode, _injection(cfg))
    save_trajectory(traj, cfg.out)


def cmd_ditail(cfg: RunConfig):
    traj = load_trajectory(cfg.src_latents)
    target = dn.load(cfg.target)
    inj = _injection(cfg)
    if inj.mode != traj.mode:
        inj = replace(inj, mode=traj.mode)
    imageio.write_image(cfg.out, ditail(traj, cfg.prompt, cfg.neg, target, inj))


def cmd_matrix(cfg: RunConfig):
    models = [dn.load(p) for p in cfg.models]
    grid = pipelines.transfer_matrix(models, cfg.prompt, cfg.neg, cfg.seed, _injection(cfg))
    imageio.write_image(cfg.out, imageio.assemble_grid(grid))


def cmd_edit(cfg: RunConfig):
    inv_model = dn.load(cfg.model)
    target = dn.load(cfg.target) if cfg.target else inv_model
    image = imageio.read_image(cfg.image)
    out = pipelines.stylized_edit(image, inv_model, target, cfg.prompt, cfg.neg, cfg.alpha, cfg.beta,
                                  cfg.omega, _injection(cfg), (cfg.caption, ""), cfg.inversion_steps)
    imageio.write_image(cfg.out, out)


def cmd_metrics(cfg: RunConfig):
    paths = _expand(cfg.images)
    images = [imageio.read_image(p) for p in paths]
    probe = dn.load(cfg.probe) if cfg.probe else None
    pairs = []
    for i, (path, im) in enumerate(zip(paths, images)):
        row = {"image": path}
        if cfg.prompt:
            vocab = probe.vocab if probe else Vocabulary.build()
            row["compliance"] = metrics.compliance_score(im, cfg.prompt, vocab)
        if cfg.sources:
            src = imageio.read_image(cfg.sources[i])
            row["source"] = cfg.sources[i]
            row["structure"] = metrics.structure_distance(im, src, probe)
        pairs.append(row)
    agg = {"n": len(images)}
    for key in ("compliance", "structure"):
        vals = [r[key] for r in pairs if key in r]
        if vals:
            agg[f"mean_{key}"] = float(np.mean(vals))
    if cfg.reference:
        ref = [imageio.read_image(p) for p in _expand([cfg.reference])]
        fd = metrics.frechet_distance(metrics.descriptors(images), metrics.descriptors(ref))
        agg["frechet"] = fd.value
        agg["frechet_regularized"] = fd.regularized
    metrics.write_report(cfg.out, pairs, agg)


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def run(cfg: RunConfig):
    validate(cfg)
    HANDLERS[cfg.command](cfg)
    cfg.save(echo_path(cfg.out))


def main(argv=None) -> int:
    try:
        cfg, verbose = resolve(argv)
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        run(cfg)
    except Exception as exc:  # noqa: BLE001 - the exit-code contract covers every failure
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
