"""Command-line entry point: preprocess | pretrain | train-gan | sample | eval."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import DatasetSplit, load_iam, vocabulary_stats
from .discriminator import DiscriminatorConfig
from .errors import HwganError
from .generator import GeneratorConfig, SamplerConfig, sample_batch
from .ink import dumps_samples, read_samples, write_samples
from .render import eval_report, render_png, render_svg
from .train import TrainConfig, TrainingState, gan_loop, pretrain_loop, psf_config_from_dict, psf_config_to_dict
from .psf import PsfConfig

log = logging.getLogger("hwgan")

MODES = ("prediction", "synthesis")


def default_config() -> dict:
    return {
        "train": TrainConfig().to_dict(),
        "generator": {"prediction": GeneratorConfig.prediction().to_dict(),
                      "synthesis": GeneratorConfig.synthesis().to_dict()},
        "discriminator": DiscriminatorConfig().to_dict(),
        "psf": psf_config_to_dict(PsfConfig()),
        "data": {"validation_fraction": 0.05, "split_seed": 0},
        "sampler": {"bias": 3.0, "max_points": 700},
    }


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    config = default_config()
    if path:
        try:
            config = _merge(config, json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise HwganError(f"cannot read config {path}: {exc}") from exc
    return config


def _fresh_log(out_dir: Path, resuming: bool) -> None:
    # a new run starts a new metric log; a resumed run keeps appending
    if not resuming:
        (out_dir / "metrics.jsonl").unlink(missing_ok=True)


def dump_config(config: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def default_cache() -> Path:
    return Path(os.environ.get("HWGAN_CACHE_DIR", "cache")) / "iam.jsonl"


def _cache_path(args) -> Path:
    return Path(args.cache) if args.cache else default_cache()


def _train_samples(config: dict, cache: Path):
    if not cache.is_file():
        raise HwganError(f"sample cache not found: {cache} (run `hwgan preprocess` first)")
    samples = read_samples(cache)
    split = DatasetSplit.from_samples(samples, config["data"]["validation_fraction"], config["data"]["split_seed"])
    return list(split.train) or list(samples)


def _apply_train_flags(config: dict, args) -> None:
    for flag, key in (("seed", "seed"), ("batch_size", "batch_size"), ("checkpoint_every", "checkpoint_every")):
        value = getattr(args, flag, None)
        if value is not None:
            config["train"][key] = value


# -- subcommands ------------------------------------------------------------------------

def cmd_preprocess(args, config: dict) -> int:
    root = Path(args.data_root)
    samples = load_iam(root)
    if not samples:
        raise HwganError(f"no usable IAM line samples under {root}")
    cache = _cache_path(args)
    cache.parent.mkdir(parents=True, exist_ok=True)
    cache.write_text(dumps_samples(samples), encoding="utf-8")
    stats = vocabulary_stats(samples)
    cache.with_suffix(".stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(samples)} samples to {cache}")
    return 0


def cmd_pretrain(args, config: dict) -> int:
    out = Path(args.out)
    _apply_train_flags(config, args)
    train_cfg = TrainConfig.from_dict(config["train"])
    if args.resume:
        state = TrainingState.load(args.resume, train_cfg)
        if state.gen_config.kind != args.mode:
            raise HwganError(f"checkpoint holds a {state.gen_config.kind} generator, not {args.mode}")
    else:
        state = TrainingState.create(train_cfg, GeneratorConfig.from_dict(config["generator"][args.mode]),
                                     psf_config_from_dict(config["psf"]))
    dump_config(config, out)
    _fresh_log(out, bool(args.resume))
    samples = _train_samples(config, _cache_path(args))
    history = pretrain_loop(state, samples, args.steps, out,
                            callback=lambda r: log.info("step %d nll %.4f", r["step"], r["nll"]))
    state.save(out / "last.hwgn")
    if history:
        print(f"step {state.step}: nll {history[-1]['nll']:.4f}")
    return 0


def cmd_train_gan(args, config: dict) -> int:
    out = Path(args.out)
    _apply_train_flags(config, args)
    train_cfg = TrainConfig.from_dict(config["train"])
    if args.resume:
        state = TrainingState.load(args.resume, train_cfg)
    elif args.pretrained:
        state = TrainingState.load(args.pretrained, train_cfg)
        state.step, state.baseline, state.phase = 0, None, "gan"
        state.rng = np.random.default_rng(train_cfg.seed)
        state.attach_discriminator(DiscriminatorConfig.from_dict(config["discriminator"]))
    else:
        raise HwganError("train-gan needs --pretrained or --resume")
    if state.gen_config.kind != args.mode:
        raise HwganError(f"checkpoint holds a {state.gen_config.kind} generator, not {args.mode}")
    if state.disc is None:
        raise HwganError("resumed checkpoint has no discriminator")
    dump_config(config, out)
    _fresh_log(out, bool(args.resume))
    samples = _train_samples(config, _cache_path(args))
    history = gan_loop(state, samples, args.steps, out,
                       callback=lambda m: log.info("step %d d_loss %.4f reward %.4f", m["step"], m["d_loss"],
                                                   m["g_reward_mean"]))
    state.save(out / "last.hwgn")
    if history:
        last = history[-1]
        print(f"step {state.step}: d_loss {last['d_loss']:.4f} reward {last['g_reward_mean']:.4f}")
    return 0


def cmd_sample(args, config: dict) -> int:
    if not Path(args.checkpoint).is_file():
        raise HwganError(f"checkpoint not found: {args.checkpoint}")
    state = TrainingState.load(args.checkpoint)
    wanted = "synthesis" if args.text is not None else "prediction"
    if state.gen_config.kind != wanted:
        raise HwganError(f"checkpoint holds a {state.gen_config.kind} generator; "
                         f"{'drop' if args.text is not None else 'pass'} --text")
    sampler = SamplerConfig(bias=args.bias, seed=args.seed,
                            max_points=args.max_points or config["sampler"]["max_points"])
    texts = [args.text] * args.count if args.text is not None else None
    result = sample_batch(state.gen, args.count, sampler, texts, np.random.default_rng(args.seed))
    out = Path(args.out)
    dump_config({**config, "sampler": {"bias": args.bias, "seed": args.seed, "max_points": sampler.max_points,
                                       "count": args.count, "text": args.text}}, out)
    write_samples(out / "samples.jsonl", result.samples)
    for i, sample in enumerate(result.samples):
        (out / f"sample_{i:03d}.svg").write_text(render_svg(sample), encoding="utf-8")
        render_png(sample, out / f"sample_{i:03d}.png")
    print(f"wrote {args.count} samples to {out}")
    return 0


def cmd_eval(args, config: dict) -> int:
    sample_dir = Path(args.sample_dir)
    files = sorted(sample_dir.glob("*.jsonl")) if sample_dir.is_dir() else []
    samples, names = [], []
    for path in files:
        try:
            loaded = read_samples(path)
        except HwganError as exc:
            raise HwganError(f"corrupt sample file {path}: {exc}") from exc
        samples += loaded
        names += [f"{path.name}:{i}" for i in range(len(loaded))]
    if not samples:
        raise HwganError(f"no samples found in {sample_dir}")
    report = eval_report(samples, names)
    out = Path(args.out) if args.out else sample_dir / "report.json"
    out.write_text(report.to_json(), encoding="utf-8")
    print(f"uniformity CV mean {report.uniformity_mean:.4f} over {len(samples)} samples -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hwgan", description="Adversarial handwriting generation for digital ink.")
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="parse IAM-OnDB into a sample cache")
    p.add_argument("--data-root", required=True)
    p.add_argument("--cache", help="output cache (default $HWGAN_CACHE_DIR/iam.jsonl)")
    p.set_defaults(func=cmd_preprocess)

    for name, func, help_text in (("pretrain", cmd_pretrain, "maximum-likelihood generator training"),
                                  ("train-gan", cmd_train_gan, "adversarial training")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--mode", choices=MODES, required=True)
        p.add_argument("--cache")
        p.add_argument("--out", required=True)
        p.add_argument("--steps", type=int, required=True)
        p.add_argument("--resume")
        p.add_argument("--seed", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--checkpoint-every", type=int)
        if name == "train-gan":
            p.add_argument("--pretrained", help="pretrained generator checkpoint")
        p.set_defaults(func=func)

    p = sub.add_parser("sample", help="draw samples from a trained generator")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text")
    p.add_argument("--bias", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--max-points", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="uniformity report over a directory of sample files")
    p.add_argument("sample_dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, load_config(args.config))
    except (HwganError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
