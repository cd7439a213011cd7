"""Conditioning-mode and training-strategy ablations at toy scale.

Trains each conditioning mode under an identical budget across seeds and
reports validation latent-MSE / PSNR / SSIM, plus two baselines: an LR
encoder pretrained independently of the UNet (reconstruction objective,
then frozen), and a decoder trained independently of the UNet versus one
finetuned on 1-step UNet outputs.
"""

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import diffusion
from .degradation import Dataset
from .diffusion import ConditioningMode
from .errors import InvalidArgument
from .metrics import psnr, ssim
from .models import ModelConfig
from .models.blocks import ResBlock, ShuffleUpsample, group_norm
from .schedule import make_schedule
from .seeding import derive_seed, np_rng, torch_gen
from .training import (
    TrainConfig,
    TrainState,
    _adam,
    _build,
    encode_dataset,
    finetune_decoder,
    pretrain_autoencoder,
    train_joint,
)

ALL_MODES = ("unidirectional", "bidirectional", "mean-only")


@dataclass
class AblationSettings:
    modes: tuple = ALL_MODES
    num_seeds: int = 3
    autoencoder_iterations: int = 1500
    autoencoder_crop: int = 64
    autoencoder_lr: float = 2e-3
    joint_iterations: int = 1500
    joint_lr: float = 1e-3
    batch_size: int = 8
    schedule_T: int = 1000
    top_p0: float = 0.5
    top_warmup: int = 1000
    val_steps: int = 4
    encoder_pretrain_iterations: int = 600
    decoder_iterations: int = 500
    decoder_lr: float = 5e-4
    decoder_batch_size: int = 4
    include_independent_encoder: bool = True
    include_decoder_comparison: bool = True
    dtype: str = "float32"


@dataclass
class ModeResult:
    label: str
    latent_mse: list = field(default_factory=list)  # one per seed
    psnr_db: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def row(self) -> str:
        def ms(vals):
            return f"{np.mean(vals):.5f}±{np.std(vals):.5f}"
        return (f"{self.label:<24}\t{ms(self.latent_mse)}"
                f"\t{ms(self.psnr_db)}\t{ms(self.ssim)}")


@dataclass
class AblationReport:
    results: dict = field(default_factory=dict)   # label -> ModeResult
    decoder_psnr: dict = field(default_factory=dict)  # independent/finetuned -> per-seed
    settings: AblationSettings | None = None
    artifacts: dict = field(default_factory=dict)  # populated with keep_states

    def mean_latent_mse(self, label: str) -> float:
        return float(np.mean(self.results[label].latent_mse))

    def decoder_gain_db(self) -> float:
        return float(np.mean(self.decoder_psnr["finetuned"])
                     - np.mean(self.decoder_psnr["independent"]))

    def table(self) -> str:
        lines = ["condition               \tlatent_mse\tpsnr_db\tssim"]
        for result in self.results.values():
            lines.append(result.row())
        if self.decoder_psnr:
            lines.append("")
            lines.append(f"decoder finetune gain: {self.decoder_gain_db():+.3f} dB "
                         f"(independent {np.mean(self.decoder_psnr['independent']):.2f}"
                         f" -> finetuned {np.mean(self.decoder_psnr['finetuned']):.2f})")
        return "\n".join(lines) + "\n"


class LRAuxDecoder(nn.Module):
    """Small decoder from LR latents back to the LR image, used only to
    pretrain the LR encoder independently of the UNet."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        widths = config.lr_encoder_widths
        c = widths[-1]
        self.stem = nn.Conv2d(config.latent_channels, c, 3, padding=1)
        blocks = []
        for s in reversed(range(config.lr_stages)):
            blocks.append(ShuffleUpsample(widths[s + 1], widths[s]))
            blocks.append(ResBlock(widths[s], widths[s]))
        self.up_path = nn.ModuleList(blocks)
        self.out_norm = group_norm(widths[0])
        self.out_conv = nn.Conv2d(widths[0], 3, 3, padding=1)
        nn.init.constant_(self.out_conv.bias, 0.5)

    def forward(self, z):
        h = self.stem(z)
        for block in self.up_path:
            h = block(h)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(h))).clamp(0, 1)


def pretrain_lr_encoder(dataset: Dataset, config: ModelConfig, iterations: int,
                        batch_size: int, lr: float, seed: int, dtype) -> "nn.Module":
    """Reconstruction-pretrain the LR encoder (mean head) without the UNet."""
    enc = _build(config, "lr_encoder", seed, dtype)
    torch.manual_seed(derive_seed(seed, "init", "lr_aux_decoder"))
    aux = LRAuxDecoder(config).to(dtype)
    cfg = TrainConfig(stage="joint", learning_rate=lr, seed=seed)
    opt_e, opt_a = _adam(enc, cfg), _adam(aux, cfg)
    n = len(dataset)
    for it in range(iterations):
        idx = np_rng(seed, "encdata", it).integers(0, n, batch_size)
        x_l = torch.as_tensor(dataset.lr[idx]).to(dtype)
        recon = aux(enc(x_l).z_mu)
        loss = (recon - x_l).abs().mean()
        opt_e.zero_grad()
        opt_a.zero_grad()
        loss.backward()
        opt_e.step()
        opt_a.step()
    enc.requires_grad_(False)
    return enc


def evaluate_joint(state: TrainState, decoder, val: Dataset,
                   z_val: torch.Tensor, val_steps: int, eval_seed: int,
                   compute_image_metrics: bool = True):
    """Validation latent-MSE (and image PSNR/SSIM) for a trained model."""
    cfg = state.train_config
    mode = ConditioningMode(cfg.mode)
    sched = make_schedule(cfg.schedule_kind, cfg.schedule_T)
    dtype = cfg.torch_dtype
    unet, lr_enc = state.modules["unet"], state.modules["lr_encoder"]
    mses, psnrs, ssims = [], [], []
    with torch.no_grad():
        for i in range(len(val)):
            x_l = torch.as_tensor(val.lr[i:i + 1]).to(dtype)
            cond = lr_enc(x_l)
            z = diffusion.sample(unet, cond, sched, val_steps, mode,
                                 rng=torch_gen(eval_seed, "val", i),
                                 deterministic=True)
            mses.append(float((z - z_val[i:i + 1]).square().mean()))
            if compute_image_metrics:
                img = decoder(z)[0].double().numpy()
                mses_ref = val.hr[i].astype(np.float64)
                psnrs.append(psnr(img, mses_ref))
                ssims.append(ssim(img, mses_ref))
    out = {"latent_mse": float(np.mean(mses))}
    if compute_image_metrics:
        out["psnr_db"] = float(np.mean(psnrs))
        out["ssim"] = float(np.mean(ssims))
    return out


def _joint_config(settings: AblationSettings, mode: str, seed: int) -> TrainConfig:
    return TrainConfig(
        stage="joint", iterations=settings.joint_iterations,
        batch_size=settings.batch_size, learning_rate=settings.joint_lr,
        mode=mode, schedule_T=settings.schedule_T, top_p0=settings.top_p0,
        top_warmup=settings.top_warmup, seed=seed, dtype=settings.dtype,
        log_every=0)


def run_ablation(train_ds: Dataset, val_ds: Dataset, config: ModelConfig,
                 settings: AblationSettings, root_seed: int = 0,
                 run_dir=None, progress=None,
                 keep_states: bool = False) -> AblationReport:
    """Train every requested condition under an identical budget."""
    for mode in settings.modes:
        ConditioningMode(mode)
    if settings.num_seeds < 1:
        raise InvalidArgument("num_seeds must be >= 1")
    say = progress or (lambda msg: None)
    dtype = torch.float64 if settings.dtype == "float64" else torch.float32

    ae_cfg = TrainConfig(stage="autoencoder",
                         iterations=settings.autoencoder_iterations,
                         batch_size=settings.batch_size,
                         crop=settings.autoencoder_crop,
                         learning_rate=settings.autoencoder_lr,
                         seed=derive_seed(root_seed, "autoencoder"),
                         dtype=settings.dtype, log_every=0)
    say("stage 0: autoencoder pretraining")
    stage0 = pretrain_autoencoder(train_ds, config, ae_cfg, run_dir=run_dir)
    hr_encoder = stage0.modules["hr_encoder"]
    decoder = stage0.modules["decoder"]
    z_val = encode_dataset(hr_encoder, val_ds, dtype)

    report = AblationReport(settings=settings)
    seeds = [derive_seed(root_seed, "seed", k) for k in range(settings.num_seeds)]
    eval_seed = derive_seed(root_seed, "eval")

    joint_states = {}
    for mode in settings.modes:
        result = ModeResult(label=mode)
        for k, seed in enumerate(seeds):
            say(f"joint: mode={mode} seed {k + 1}/{len(seeds)}")
            state = train_joint(train_ds, config,
                                _joint_config(settings, mode, seed), hr_encoder)
            metrics = evaluate_joint(state, decoder, val_ds, z_val,
                                     settings.val_steps, eval_seed)
            result.latent_mse.append(metrics["latent_mse"])
            result.psnr_db.append(metrics["psnr_db"])
            result.ssim.append(metrics["ssim"])
            joint_states[(mode, k)] = state
        report.results[mode] = result

    if settings.include_independent_encoder:
        result = ModeResult(label="independent-encoder")
        for k, seed in enumerate(seeds):
            say(f"independent-encoder baseline seed {k + 1}/{len(seeds)}")
            frozen = pretrain_lr_encoder(
                train_ds, config, settings.encoder_pretrain_iterations,
                settings.batch_size, settings.joint_lr,
                derive_seed(seed, "enc_pre"), dtype)
            state = train_joint(train_ds, config,
                                _joint_config(settings, "bidirectional", seed),
                                hr_encoder, frozen_lr_encoder=frozen)
            metrics = evaluate_joint(state, decoder, val_ds, z_val,
                                     settings.val_steps, eval_seed)
            result.latent_mse.append(metrics["latent_mse"])
            result.psnr_db.append(metrics["psnr_db"])
            result.ssim.append(metrics["ssim"])
        report.results["independent-encoder"] = result

    if settings.include_decoder_comparison and "bidirectional" in settings.modes:
        indep, tuned = [], []
        for k, seed in enumerate(seeds):
            say(f"decoder comparison seed {k + 1}/{len(seeds)}")
            student = joint_states[("bidirectional", k)]
            dec_cfg = TrainConfig(
                stage="decoder", iterations=settings.decoder_iterations,
                batch_size=settings.decoder_batch_size,
                learning_rate=settings.decoder_lr, mode="bidirectional",
                schedule_T=settings.schedule_T,
                seed=derive_seed(seed, "dec"), dtype=settings.dtype, log_every=0)
            finetuned = copy.deepcopy(decoder)
            finetune_decoder(student, finetuned, train_ds, dec_cfg)
            indep.append(_end_to_end_psnr(student, decoder, val_ds, eval_seed))
            tuned.append(_end_to_end_psnr(student, finetuned, val_ds, eval_seed))
        report.decoder_psnr = {"independent": indep, "finetuned": tuned}

    if keep_states:
        report.artifacts = {"hr_encoder": hr_encoder, "decoder": decoder,
                            "joint_states": joint_states, "z_val": z_val}
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "ablation.tsv").write_text(report.table())
        payload = {label: {"latent_mse": r.latent_mse, "psnr_db": r.psnr_db,
                           "ssim": r.ssim}
                   for label, r in report.results.items()}
        payload["decoder_psnr"] = report.decoder_psnr
        (run_dir / "ablation.json").write_text(json.dumps(payload, indent=1))
    return report


def _end_to_end_psnr(student: TrainState, decoder, val: Dataset,
                     eval_seed: int) -> float:
    """PSNR of decode(1-step student latents) against the HR references."""
    cfg = student.train_config
    mode = ConditioningMode(cfg.mode)
    sched = make_schedule(cfg.schedule_kind, cfg.schedule_T)
    dtype = cfg.torch_dtype
    vals = []
    with torch.no_grad():
        for i in range(len(val)):
            x_l = torch.as_tensor(val.lr[i:i + 1]).to(dtype)
            cond = student.modules["lr_encoder"](x_l)
            z = diffusion.sample(student.modules["unet"], cond, sched, 1, mode,
                                 rng=torch_gen(eval_seed, "dec_val", i),
                                 deterministic=True)
            img = decoder(z)[0].double().numpy()
            vals.append(psnr(img, val.hr[i].astype(np.float64)))
    return float(np.mean(vals))
