"""Command-line entry point: ``regnet <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import config as config_mod
from . import evaluation as ev
from .errors import ConfigError
from .model import IncompatibleCheckpoint, ModelConfig, load_params, save_params
from .spectro import SpectroError, SpectroParams, mel_to_wav, save_mel, save_wav
from .synthdata import (
    DatasetError, dataset_hash, generate_dataset, load_visual_features, read_dataset, read_manifest,
    write_dataset,
)
from .training import TrainingError, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
PROBE_IDS = ("l2", "cosine", "zero-visual", "mixin", "baseline", "sweep")

log = logging.getLogger("regnet")


# --------------------------------------------------------------------------- #
# helpers

def _versions() -> dict:
    return {"regnet": __version__, "torch": torch.__version__, "numpy": np.__version__,
            "python": platform.python_version()}


def write_run_manifest(out_dir, args: argparse.Namespace, resolved: dict, inputs: dict, outputs: dict,
                       started: str) -> Path:
    """Record everything needed to re-run a command: argv, resolved config, seeds, paths, versions."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = {"command": args.command, "argv": sys.argv[1:] if args.argv is None else args.argv,
           "config": resolved, "inputs": inputs, "outputs": outputs, "versions": _versions(),
           "started": started, "finished": _now()}
    path = out / "run_manifest.json"
    path.write_text(json.dumps(man, indent=2, default=str))
    return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _load_config(args) -> config_mod.RunConfig:
    return config_mod.load(args.config)


def _split(scenes, n_train: int, which: str):
    if which == "train":
        return scenes[:n_train]
    if which == "test":
        return scenes[n_train:]
    return scenes


def _read(path):
    scenes, cfg = read_dataset(path)
    n_train = read_manifest(path)["n_train"]
    return scenes, cfg, n_train


def _load_net(path, dtype=torch.float32):
    net, disc, payload = load_params(path)
    return net.to(dtype).eval(), disc.to(dtype).eval(), payload


def _spectro_for(payload: dict, model_cfg: ModelConfig, fallback: dict) -> SpectroParams:
    sp = dict(payload.get("spectro") or fallback)
    sp.pop("clip_samples", None)
    return SpectroParams.desk(n_frames=model_cfg.T_audio, **sp)


def _save_report(rep: ev.ProbeReport, out) -> None:
    rep.save(out)
    print(rep.to_text())


def _kv_list(items, what: str) -> dict[str, str]:
    out = {}
    for it in items or []:
        if "=" not in it:
            raise ConfigError(f"{what} entries must look like NAME=VALUE, got {it!r}")
        k, v = it.split("=", 1)
        out[k] = v
    return out


# --------------------------------------------------------------------------- #
# subcommands

def cmd_synth_data(args) -> int:
    started = _now()
    cfg = _load_config(args)
    cfg = config_mod.override(cfg, "data", relevant_class=args.relevant_class, background=args.background,
                              n_train=args.n_train, n_test=args.n_test, seed=args.seed,
                              gauss_std=args.gauss_std)
    scenes = generate_dataset(cfg.data)
    if args.visual_only:
        scenes = [dataclasses.replace(s, relevant=None, irrelevant=None, mixed=None) for s in scenes]
    write_dataset(scenes, args.out, cfg.data)
    h = dataset_hash(args.out)
    write_run_manifest(args.out, args, cfg.to_dict(), {}, {"dataset": str(args.out), "dataset_hash": h},
                       started)
    print(f"wrote {len(scenes)} scenes ({cfg.data.n_train} train / {cfg.data.n_test} test) to {args.out}")
    print(f"dataset hash {h}")
    return EXIT_OK


def _train_config(args, cfg: config_mod.RunConfig) -> config_mod.RunConfig:
    cfg = config_mod.override(cfg, "train", epochs=args.epochs, learning_rate=args.lr,
                              batch_size=args.batch_size, seed=args.seed, disc_seed=args.disc_seed,
                              alpha=args.alpha, beta=args.beta, checkpoint_every=args.checkpoint_every,
                              dtype=args.dtype, gan_enabled=False if args.no_gan else None)
    model = cfg.model
    if args.variant:
        model = model.with_variant(args.variant)
    if args.no_regularizer:
        model = dataclasses.replace(model, use_regularizer=False)
    return dataclasses.replace(cfg, model=model)


def _align_with_dataset(cfg: config_mod.RunConfig, data_cfg) -> config_mod.RunConfig:
    if data_cfg is None:
        return cfg
    m = cfg.model
    if (m.T, m.F, m.T_audio) != (data_cfg.T, data_cfg.F, data_cfg.T_audio):
        raise ConfigError(f"model (T={m.T}, F={m.F}, T_audio={m.T_audio}) does not match dataset "
                          f"(T={data_cfg.T}, F={data_cfg.F}, T_audio={data_cfg.T_audio})")
    return dataclasses.replace(cfg, data=data_cfg)


def _train_run(cfg: config_mod.RunConfig, data_path, out, resume: bool, extra: dict):
    scenes, data_cfg, n_train = _read(data_path)
    cfg = _align_with_dataset(cfg, data_cfg)
    tr_scenes = scenes[:n_train]
    if any(s.mixed is None for s in tr_scenes):
        raise ConfigError(f"{data_path}: training needs the mixed spectrograms (dataset is visual-only)")
    visual = np.stack([s.visual for s in tr_scenes])
    target = np.stack([s.mixed for s in tr_scenes])
    manifest = {"dataset": str(data_path), "dataset_hash": dataset_hash(data_path), **extra}
    trainer = train(visual, target, cfg.model, cfg.train, run_dir=out, resume=resume, manifest=manifest)
    save_params(Path(out) / "final.pt", trainer.net, trainer.disc, spectro=cfg.spectro, **trainer.state())
    test = scenes[n_train:]
    if test and all(s.relevant is not None for s in test):
        rep = ev.l2_probe(trainer.net, test)
        rep.config["gan_enabled"] = cfg.train.gan_enabled
        rep.save(Path(out) / "reports")
        log.info("held-out L2(S_0, S_r) = %.4f", rep.aggregates["l2_to_relevant"]["mean"])
    return trainer, cfg


def cmd_train(args) -> int:
    started = _now()
    cfg = _train_config(args, _load_config(args))
    trainer, cfg = _train_run(cfg, args.data, args.out, args.resume, {"command": "train"})
    write_run_manifest(args.out, args, cfg.to_dict(), {"dataset": str(args.data)},
                       {"checkpoint": str(Path(args.out) / "final.pt")}, started)
    print(f"trained {trainer.epoch} epochs -> {Path(args.out) / 'final.pt'}")
    return EXIT_OK


def cmd_generate(args) -> int:
    started = _now()
    net, _, payload = _load_net(args.checkpoint)
    p = _spectro_for(payload, net.cfg, config_mod.SPECTRO_DEFAULTS)
    if args.features:
        visual = np.stack([load_visual_features(f, net.cfg.T, net.cfg.F) for f in args.features])
        names = [Path(f).stem for f in args.features]
    elif args.data:
        scenes, _, n_train = _read(args.data)
        chosen = _split(scenes, n_train, args.split)
        visual = np.stack([s.visual for s in chosen])  # audio arrays are never read
        offset = n_train if args.split == "test" else 0
        names = [f"scene_{offset + i:05d}" for i in range(len(chosen))]
    else:
        raise ConfigError("generate needs --data or --features")
    if visual.shape[1:] != (net.cfg.T, net.cfg.F):
        raise ConfigError(f"visual features {visual.shape[1:]} do not match checkpoint (T={net.cfg.T}, F={net.cfg.F})")
    mels = ev.infer(net, visual)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, m in zip(names, mels):
        save_mel(m, out / f"{name}.mel.npy")
        if not args.no_wav:
            save_wav(mel_to_wav(m, p, iters=args.griffin_lim_iters, seed=p.griffin_lim_seed), out / f"{name}.wav", p)
    write_run_manifest(out, args, {"model": net.cfg.to_dict(), "spectro": dataclasses.asdict(p)},
                       {"checkpoint": str(args.checkpoint), "data": str(args.data), "features": args.features},
                       {"n_generated": len(names)}, started)
    print(f"generated {len(names)} clips in {out}")
    return EXIT_OK


def _test_scenes(path, which="test"):
    scenes, data_cfg, n_train = _read(path)
    return _split(scenes, n_train, which), data_cfg


def cmd_evaluate(args) -> int:
    started = _now()
    net, _, _ = _load_net(args.checkpoint)
    test, _ = _test_scenes(args.data, args.split)
    reports = [ev.l2_probe(net, test)]
    if all(s.irrelevant is not None for s in test):
        reports.append(ev.zero_visual_probe(net, test))
    for rep in reports:
        _save_report(rep, args.out)
    write_run_manifest(args.out, args, {"model": net.cfg.to_dict()},
                       {"checkpoint": str(args.checkpoint), "data": str(args.data)},
                       {"reports": [r.experiment for r in reports]}, started)
    return EXIT_OK


def cmd_probe(args) -> int:
    started = _now()
    pid = args.probe_id
    if pid not in PROBE_IDS:
        raise ConfigError(f"unknown probe id {pid!r}; valid ids: {', '.join(PROBE_IDS)}")
    ckpts = _kv_list([c for c in args.checkpoint if "=" in c], "--checkpoint")
    plain = [c for c in args.checkpoint if "=" not in c]
    datas = _kv_list([d for d in args.data if "=" in d], "--data")
    plain_data = [d for d in args.data if "=" not in d]

    def one(what, items):
        if len(items) != 1:
            raise ConfigError(f"probe {pid} needs exactly one {what}")
        return items[0]

    if pid in ("l2", "zero-visual"):
        net, _, _ = _load_net(one("--checkpoint", plain))
        test, _ = _test_scenes(one("--data", plain_data), args.split)
        rep = ev.l2_probe(net, test) if pid == "l2" else ev.zero_visual_probe(net, test)
    elif pid == "mixin":
        if not args.source:
            raise ConfigError("probe mixin needs --source (checkpoint trained on mixed data)")
        clean, _, _ = _load_net(one("--checkpoint", plain))
        source, _, _ = _load_net(args.source)
        test, _ = _test_scenes(one("--data", plain_data), args.split)
        rep = ev.mixin_probe(clean, source, test, margin=args.margin)
    elif pid == "cosine":
        if set(ckpts) != set(datas) or len(ckpts) < 2:
            raise ConfigError("probe cosine needs matching NAME=PATH lists for --checkpoint and --data (>= 2)")
        outputs, backgrounds = {}, {}
        for name, ck in ckpts.items():
            net, _, _ = _load_net(ck)
            test, dcfg = _test_scenes(datas[name], args.split)
            outputs[name] = ev.regularizer_outputs(net, np.stack([s.mixed for s in test]))
            backgrounds[name] = dcfg.background if dcfg is not None else name
        rep = ev.cosine_probe(outputs, backgrounds, reference=args.reference, margin=args.margin)
    elif pid == "baseline":
        scenes, dcfg, n_train = _read(one("--data", plain_data))
        net = _load_net(plain[0])[0] if plain else None
        cfg = _load_config(args)
        th = ev.ThresholdConfig(**{k: v for k, v in (("motion_threshold", args.motion_threshold),
                                                      ("sound_threshold", args.sound_threshold)) if v is not None})
        data_cfg = dcfg or cfg.data
        p = data_cfg.spectro(**cfg.spectro)
        rep = ev.baseline_probe(scenes[:n_train], scenes[n_train:], net, th, p, data_cfg.upsample)
    else:  # sweep: consolidate already-trained variants, ROLE=CHECKPOINT
        if not ckpts:
            raise ConfigError("probe sweep needs --checkpoint ROLE=PATH entries")
        test, _ = _test_scenes(one("--data", plain_data), args.split)
        rows = []
        for role, ck in ckpts.items():
            net, _, payload = _load_net(ck)
            r = ev.l2_probe(net, test).aggregates["l2_to_relevant"]["mean"]
            rows.append({"variant": role.split(":")[0], "preset": net.cfg.variant_name(),
                         "seed": payload.get("train_config", {}).get("seed", 0), "l2_to_relevant": r})
        rep = ev.sweep_report(rows)
    _save_report(rep, args.out)
    write_run_manifest(args.out, args, {"probe": pid}, {"checkpoint": args.checkpoint, "data": args.data},
                       {"report": rep.experiment, "passed": rep.passed}, started)
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = _now()
    cfg = _train_config(args, _load_config(args))
    variants = _kv_list(args.variants.split(","), "--variants") if args.variants else ev.desk_variants(cfg.model.T_audio)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    test, _ = _test_scenes(args.data)

    def train_fn(model_cfg, seed):
        run = out / "runs" / f"{model_cfg.variant_name()}_seed{seed}"
        c = dataclasses.replace(cfg, model=model_cfg, train=dataclasses.replace(cfg.train, seed=seed))
        log.info("training %s seed %d", model_cfg.variant_name(), seed)
        return _train_run(c, args.data, run, args.resume, {"command": "sweep"})[0].net

    rep = ev.capacity_sweep(train_fn, cfg.model, variants, seeds, test)
    _save_report(rep, out)
    write_run_manifest(out, args, cfg.to_dict(), {"dataset": str(args.data)},
                       {"variants": variants, "seeds": seeds, "passed": rep.passed}, started)
    return EXIT_OK


# --------------------------------------------------------------------------- #
# parser

def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training (override the config file)")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float, help="learning rate")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--disc-seed", type=int)
    g.add_argument("--alpha", type=float, help="weight of the initial-spectrogram loss")
    g.add_argument("--beta", type=float, help="weight of the adversarial loss")
    g.add_argument("--checkpoint-every", type=int)
    g.add_argument("--dtype", choices=("float32", "float64"))
    g.add_argument("--no-gan", action="store_true", help="train without the adversarial losses")
    g.add_argument("--variant", help="regularizer preset S<downsample>D<dim>, e.g. S128D16")
    g.add_argument("--no-regularizer", action="store_true", help="feed the zero vector during training too")
    g.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="regnet", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"regnet {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--class", dest="relevant_class", choices=("dog", "baby"))
    p.add_argument("--background", choices=("none", "gauss", "fireworks", "drum"))
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--gauss-std", type=float)
    p.add_argument("--visual-only", action="store_true", help="omit all audio arrays")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model on a dataset's training split")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate spectrograms and WAVs from visual features only")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (audio arrays are not needed)")
    p.add_argument("--features", nargs="+", help="T x F .npy feature files")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--no-wav", action="store_true")
    p.add_argument("--griffin-lim-iters", type=int, default=32)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="held-out L2 and zero-visual reports for one checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("probe", help=f"run one probe: {', '.join(PROBE_IDS)}")
    p.add_argument("probe_id")
    p.add_argument("--config")
    p.add_argument("--checkpoint", action="append", default=[],
                   help="checkpoint path, or NAME=PATH (cosine) / ROLE=PATH (sweep); repeatable")
    p.add_argument("--data", action="append", default=[], help="dataset path, or NAME=PATH (cosine)")
    p.add_argument("--source", help="mixin: checkpoint whose regularizer output is fed in")
    p.add_argument("--reference", help="cosine: only report pairs involving this name")
    p.add_argument("--margin", type=float, default=0.0)
    p.add_argument("--motion-threshold", type=float)
    p.add_argument("--sound-threshold", type=float)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sweep", help="train and compare regularizer capacity variants")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", help="ROLE=PRESET list, default narrow/just-right/wide-dim/wide-time")
    p.add_argument("--seeds", default="0,1,2")
    _train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SpectroError, IncompatibleCheckpoint, ev.ProbeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
