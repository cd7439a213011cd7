"""Command-line entry point.

Subcommands: synth-data, train, distill, finetune-decoder, upscale, eval,
ablate, audit, schedule-dump. Every command is deterministic given
(config, seed); run directories store the resolved config snapshot.
Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 image I/O error.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import ablate as ablate_mod
from . import image_io
from .degradation import load_dataset, synth_dataset
from .errors import (
    ConfigError,
    ImageIOError,
    InvalidArgument,
    LatentSRError,
    MissingPrerequisite,
)
from .inference import SuperResolver
from .metrics import MetricReport
from .models import PRESETS, audit_report
from .runcfg import RunConfig
from .schedule import make_schedule, schedule_table
from .seeding import derive_seed
from .tiling import plan_tiles, tiled_upscale
from .training import (
    TrainConfig,
    finetune_decoder,
    load_stage,
    pretrain_autoencoder,
    save_stage,
    scale_distill,
    train_joint,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_IO = 4


def _load_run_config(path) -> RunConfig:
    return RunConfig.from_file(path)


def _dataset_from_args(args, run_cfg: RunConfig):
    if args.data is not None:
        return load_dataset(args.data)
    raise MissingPrerequisite("no dataset directory given (use --data)")


def cmd_synth_data(args):
    run_cfg = _load_run_config(args.config)
    count = args.count if args.count is not None else run_cfg.data.count
    seed = args.seed if args.seed is not None else run_cfg.seed
    out = Path(args.out)
    synth_dataset(count, tuple(run_cfg.data.size), run_cfg.degradation,
                  seed, out_dir=out, image_format=run_cfg.data.image_format)
    run_cfg.snapshot(out)
    print(f"wrote {count} pairs to {out}")
    return EXIT_OK


def _stage_config(run_cfg: RunConfig, stage: str, args) -> TrainConfig:
    from dataclasses import asdict
    d = asdict(run_cfg.train)
    d["stage"] = stage
    if getattr(args, "iterations", None) is not None:
        d["iterations"] = args.iterations
    return TrainConfig.from_dict(d)


def cmd_train(args):
    run_cfg = _load_run_config(args.config)
    data = _dataset_from_args(args, run_cfg)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    run_cfg.snapshot(run_dir)
    stage = args.stage
    if stage == "autoencoder":
        cfg = _stage_config(run_cfg, "autoencoder", args)
        pretrain_autoencoder(data, run_cfg.model, cfg, run_dir=run_dir,
                             resume_from=args.resume)
    elif stage == "joint":
        if args.autoencoder is None:
            raise MissingPrerequisite(
                "joint training needs --autoencoder CHECKPOINT")
        stage0 = load_stage(args.autoencoder, expected_stage="autoencoder")
        cfg = _stage_config(run_cfg, "joint", args)
        train_joint(data, run_cfg.model, cfg, stage0.modules["hr_encoder"],
                    run_dir=run_dir, resume_from=args.resume)
    else:
        raise ConfigError(f"unknown training stage {stage!r}")
    print(f"stage {stage} complete; checkpoints in {run_dir}")
    return EXIT_OK


def cmd_distill(args):
    run_cfg = _load_run_config(args.config)
    data = _dataset_from_args(args, run_cfg)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    run_cfg.snapshot(run_dir)
    teacher = load_stage(args.teacher, expected_stage="joint")
    stage0 = load_stage(args.autoencoder, expected_stage="autoencoder")
    cfg = _stage_config(run_cfg, "distill", args)
    scale_distill(teacher, stage0.modules["decoder"], data, run_cfg.model,
                  cfg, run_dir=run_dir, resume_from=args.resume)
    print(f"distillation complete; checkpoints in {run_dir}")
    return EXIT_OK


def cmd_finetune_decoder(args):
    run_cfg = _load_run_config(args.config)
    data = _dataset_from_args(args, run_cfg)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    run_cfg.snapshot(run_dir)
    student = load_stage(args.student)
    if "unet" not in student.modules:
        raise MissingPrerequisite("--student checkpoint must hold a trained UNet")
    stage0 = load_stage(args.autoencoder, expected_stage="autoencoder")
    decoder = stage0.modules["decoder"]
    cfg = _stage_config(run_cfg, "decoder", args)
    state = finetune_decoder(student, decoder, data, cfg, run_dir=run_dir,
                             resume_from=args.resume)
    # bundle everything inference needs into one file
    bundle = student
    bundle.modules = dict(student.modules, decoder=state.modules["decoder"])
    save_stage(bundle, run_dir / "model_bundle.bin")
    print(f"decoder finetuning complete; bundle at {run_dir}/model_bundle.bin")
    return EXIT_OK


def _resolver_from_ckpt(ckpt_path, decoder_path, steps, seed,
                        quantize: bool) -> SuperResolver:
    state = load_stage(ckpt_path)
    if "unet" not in state.modules or "lr_encoder" not in state.modules:
        raise MissingPrerequisite(
            f"{ckpt_path} lacks the trained LR encoder + UNet pair")
    if "decoder" in state.modules:
        decoder = state.modules["decoder"]
    elif decoder_path is not None:
        dec_state = load_stage(decoder_path)
        if "decoder" not in dec_state.modules:
            raise MissingPrerequisite(f"{decoder_path} holds no decoder")
        decoder = dec_state.modules["decoder"]
    else:
        raise MissingPrerequisite(
            "checkpoint holds no decoder; pass --decoder CHECKPOINT")
    resolver = SuperResolver.from_states(state, decoder, num_steps=steps,
                                         seed=seed)
    if quantize:
        resolver = resolver.quantized(8, 16)
    return resolver


def cmd_upscale(args):
    resolver = _resolver_from_ckpt(args.ckpt, args.decoder, args.steps,
                                   args.seed, args.quantize)
    lr = image_io.load_image(args.input)
    t0 = time.monotonic()
    if args.tile:
        plan = plan_tiles(lr.shape[2], lr.shape[1], args.tile_size,
                          args.tile_overlap)
        if args.dump_trajectory:
            raise ConfigError("--dump-trajectory only applies to --no-tile runs")
        hr, stats = tiled_upscale(resolver.as_tile_model(), lr, plan,
                                  resolver.scale)
        evals = stats["model_evaluations"]
    else:
        x = torch.as_tensor(lr).to(resolver.dtype)[None]
        from .seeding import torch_gen
        rng = torch_gen(args.seed, "tile", 0)
        with torch.no_grad():
            cond = resolver.lr_encoder(x)
            from . import diffusion
            if args.dump_trajectory:
                z, traj = diffusion.sample(
                    resolver.unet, cond, resolver.schedule, resolver.num_steps,
                    resolver.mode, rng=rng, deterministic=resolver.deterministic,
                    collect_trajectory=True)
                np.savez(args.dump_trajectory,
                         **{f"z_{idx:05d}": t.numpy() for idx, t in traj})
            else:
                z = diffusion.sample(
                    resolver.unet, cond, resolver.schedule, resolver.num_steps,
                    resolver.mode, rng=rng, deterministic=resolver.deterministic)
            hr = resolver.decoder(z)[0].double().numpy()
        evals = 1
    dt = time.monotonic() - t0
    image_io.save_image(args.output, hr)
    tiles = evals if args.tile else 1
    print(f"tiles processed: {tiles}; model evaluations: {evals}; "
          f"wall-clock: {dt:.2f}s")
    print(f"wrote {args.output} ({hr.shape[2]}x{hr.shape[1]})")
    return EXIT_OK


def cmd_eval(args):
    resolver = _resolver_from_ckpt(args.ckpt, args.decoder, args.steps,
                                   args.seed, args.quantize)
    data = load_dataset(args.data)
    report = MetricReport()
    for i in range(len(data)):
        hr_hat = resolver.upscale_patch(data.lr[i], tile_index=i)
        report.add(hr_hat, data.hr[i].astype(np.float64))
    text = report.to_tsv()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_ablate(args):
    run_cfg = _load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_cfg.snapshot(out)
    modes = tuple(m.strip() for m in args.modes.split(","))
    name_map = {"uni": "unidirectional", "bi": "bidirectional",
                "mean-only": "mean-only"}
    modes = tuple(name_map.get(m, m) for m in modes)
    data_seed = derive_seed(run_cfg.seed, "dataset")
    train_ds = synth_dataset(run_cfg.data.count, tuple(run_cfg.data.size),
                             run_cfg.degradation, data_seed)
    val_ds = synth_dataset(run_cfg.data.val_count, tuple(run_cfg.data.size),
                           run_cfg.degradation, derive_seed(data_seed, "val"))
    settings = ablate_mod.AblationSettings(
        modes=modes, num_seeds=args.seeds,
        joint_iterations=args.iterations or 1500,
        include_independent_encoder=not args.skip_baselines,
        include_decoder_comparison=not args.skip_baselines
        and "bidirectional" in modes)
    report = ablate_mod.run_ablation(
        train_ds, val_ds, run_cfg.model, settings, root_seed=run_cfg.seed,
        run_dir=out, progress=lambda msg: print(f"[ablate] {msg}", flush=True))
    print(report.table(), end="")
    return EXIT_OK


def cmd_audit(args):
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r} (have {sorted(PRESETS)})")
    config = PRESETS[args.preset]
    print(audit_report(config, (args.patch, args.patch),
                       with_targets=args.preset == "full"), end="")
    return EXIT_OK


def cmd_schedule_dump(args):
    s = make_schedule(args.kind, args.T)
    text = schedule_table(s)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentsr",
                                description="latent-diffusion super-resolution")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth-data", help="generate an LR/HR pair dataset")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("train", help="run the autoencoder or joint stage")
    sp.add_argument("--config", required=True)
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--stage", choices=["autoencoder", "joint"], default="joint")
    sp.add_argument("--autoencoder", help="stage-0 checkpoint (joint stage)")
    sp.add_argument("--resume", help="continue from a stage checkpoint")
    sp.add_argument("--iterations", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("distill", help="distill a x2 teacher into a 1-step student")
    sp.add_argument("--config", required=True)
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--teacher", required=True, help="x2 joint checkpoint")
    sp.add_argument("--autoencoder", required=True, help="stage-0 checkpoint")
    sp.add_argument("--resume")
    sp.add_argument("--iterations", type=int)
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("finetune-decoder", help="finetune the decoder on 1-step outputs")
    sp.add_argument("--config", required=True)
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--student", required=True, help="joint or distill checkpoint")
    sp.add_argument("--autoencoder", required=True, help="stage-0 checkpoint")
    sp.add_argument("--resume")
    sp.add_argument("--iterations", type=int)
    sp.set_defaults(func=cmd_finetune_decoder)

    sp = sub.add_parser("upscale", help="super-resolve an image file")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--decoder", help="checkpoint holding the decoder if --ckpt lacks one")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", dest="output", required=True)
    sp.add_argument("--steps", type=int, default=1)
    sp.add_argument("--tile", action=argparse.BooleanOptionalAction, default=True)
    sp.add_argument("--tile-size", type=int, default=128)
    sp.add_argument("--tile-overlap", type=float, default=0.25)
    sp.add_argument("--quantize", action="store_true",
                    help="simulate 8-bit weights / 16-bit activations")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--dump-trajectory", help="write sampler latents to an .npz")
    sp.set_defaults(func=cmd_upscale)

    sp = sub.add_parser("eval", help="PSNR/SSIM report over a dataset")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--decoder")
    sp.add_argument("--data", required=True)
    sp.add_argument("--steps", type=int, default=1)
    sp.add_argument("--quantize", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and compare conditioning modes")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--modes", default="uni,bi,mean-only")
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--skip-baselines", action="store_true")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("audit", help="parameter/FLOP budget report")
    sp.add_argument("--preset", required=True)
    sp.add_argument("--patch", type=int, default=128)
    sp.set_defaults(func=cmd_audit)

    sp = sub.add_parser("schedule-dump", help="print the (alpha, sigma, lambda) table")
    sp.add_argument("--kind", default="cosine")
    sp.add_argument("--T", type=int, default=1000)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_schedule_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidArgument) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ImageIOError as exc:
        print(f"image I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except LatentSRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
