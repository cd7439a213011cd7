"""Staged training: autoencoder pretraining, joint LR-encoder + UNet
training, scale distillation to a 1-step student, decoder finetuning.

All randomness is regenerated per iteration from (seed, stream, iteration),
so resuming from a checkpoint replays the exact draws of an uninterrupted
run. The LR encoder only takes an optimizer step on iterations whose batch
contains the top index T (and its gradient flows only through those batch
elements); this is the degenerate-solution guard.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import diffusion
from .degradation import Dataset
from .diffusion import ConditioningMode, LossWeights, min_snr_weights
from .errors import InvalidArgument, InvariantViolation, NumericError
from .models import (
    Decoder,
    HREncoder,
    LREncoder,
    ModelConfig,
    UNet,
    load_checkpoint,
    load_module,
    load_optimizer,
    module_tensors,
    optimizer_tensors,
    save_checkpoint,
    unet_in_channels,
)
from .schedule import TimestepSampler, make_schedule, sample_timestep
from .seeding import derive_seed, np_rng, torch_gen

STAGES = ("autoencoder", "joint", "distill", "decoder")

STAGE_DEFAULT_LR = {
    "autoencoder": 1e-3,
    "joint": 5e-5,
    "distill": 5e-5,
    "decoder": 1.8e-5,
}


@dataclass
class TrainConfig:
    stage: str = "joint"
    iterations: int = 1000
    batch_size: int = 8
    learning_rate: float | None = None  # stage default when None
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    mode: str = "bidirectional"
    schedule_kind: str = "cosine"
    schedule_T: int = 1000
    top_p0: float = 0.5
    top_warmup: int = 2000
    loss_weighting: str = "constant"  # or "min-snr"
    cascade_steps: int = 4  # teacher sampling steps during distillation
    crop: int | None = None  # autoencoder stage: train on random HR crops
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 0  # 0 = final only
    log_every: int = 100

    def __post_init__(self):
        if self.stage not in STAGES:
            raise InvalidArgument(f"unknown stage {self.stage!r}")
        if self.iterations < 0:
            raise InvalidArgument("iterations must be >= 0")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise InvalidArgument("learning_rate must be > 0")
        if self.dtype not in ("float32", "float64"):
            raise InvalidArgument("dtype must be float32 or float64")
        ConditioningMode(self.mode)

    @property
    def lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None \
            else STAGE_DEFAULT_LR[self.stage]

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def weights(self) -> LossWeights:
        if self.loss_weighting == "min-snr":
            return min_snr_weights()
        return LossWeights()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown TrainConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


@dataclass
class TrainState:
    """Everything a stage produces: modules, moments, counters, history."""

    model_config: ModelConfig
    train_config: TrainConfig
    modules: dict = field(default_factory=dict)      # name -> nn.Module
    optimizers: dict = field(default_factory=dict)   # name -> Adam
    iteration: int = 0
    loss_history: list = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.train_config.seed

    def assert_finite(self):
        for name, module in self.modules.items():
            for pname, p in module.named_parameters():
                if not torch.isfinite(p).all():
                    raise NumericError(f"{name}.{pname}", "parameter")


def _build(config: ModelConfig, name: str, seed: int, dtype, mode=None):
    torch.manual_seed(derive_seed(seed, "init", name))
    if name == "hr_encoder":
        m = HREncoder(config)
    elif name == "lr_encoder":
        m = LREncoder(config)
    elif name == "unet":
        m = UNet(config, unet_in_channels(config, mode or "bidirectional"))
    elif name == "decoder":
        m = Decoder(config)
    else:
        raise InvalidArgument(f"unknown module name {name!r}")
    return m.to(dtype)


def _adam(module, cfg: TrainConfig):
    return torch.optim.Adam(module.parameters(), lr=cfg.lr,
                            betas=cfg.adam_betas, eps=cfg.adam_eps)


def _batch(dataset: Dataset, idx, dtype):
    hr = torch.as_tensor(dataset.hr[idx]).to(dtype)
    lr = torch.as_tensor(dataset.lr[idx]).to(dtype)
    return hr, lr


class MetricsLog:
    """Plain-text TSV training log (iteration, stage, loss, lr, t-histogram)."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.lines = ["iteration\tstage\tloss\tlearning_rate\tsampled_t_histogram"]
        if self.path:
            self.path.write_text(self.lines[0] + "\n")

    def log(self, iteration, stage, loss, lr, t_hist=""):
        line = f"{iteration}\t{stage}\t{loss:.8g}\t{lr:g}\t{t_hist}"
        self.lines.append(line)
        if self.path:
            with open(self.path, "a") as f:
                f.write(line + "\n")


def _t_histogram(draws: list, T: int) -> str:
    if not draws:
        return ""
    arr = np.concatenate(draws)
    top = int((arr == T).sum())
    return f"top={top}/{arr.size}"


def _dump_divergence(run_dir, it, seed, extra=None):
    batch_seed = derive_seed(seed, "data", it)
    if run_dir is not None:
        dump = {"iteration": it, "batch_seed": batch_seed}
        dump.update(extra or {})
        Path(run_dir, f"diverged_it{it}.json").write_text(json.dumps(dump, indent=1))
    return batch_seed


def _check_loss(loss, it, seed, run_dir=None, extra=None):
    if torch.isfinite(loss):
        return
    extra = dict(extra or {})
    extra["loss"] = str(float(loss.detach()))
    batch_seed = _dump_divergence(run_dir, it, seed, extra)
    raise NumericError("loss", f"iteration {it}, batch seed {batch_seed}")


# ---------------------------------------------------------------------------
# Stage 0: autoencoder pretraining (HR encoder + decoder, L1 reconstruction)


def pretrain_autoencoder(dataset: Dataset, model_config: ModelConfig,
                         cfg: TrainConfig, run_dir=None,
                         resume_from=None) -> TrainState:
    if len(dataset) == 0:
        raise InvalidArgument("empty dataset")
    if cfg.stage != "autoencoder":
        raise InvalidArgument(f"expected stage 'autoencoder', got {cfg.stage!r}")
    dtype = cfg.torch_dtype
    state = TrainState(model_config=model_config, train_config=cfg)
    state.modules = {
        "hr_encoder": _build(model_config, "hr_encoder", cfg.seed, dtype),
        "decoder": _build(model_config, "decoder", cfg.seed, dtype),
    }
    state.optimizers = {name: _adam(m, cfg) for name, m in state.modules.items()}
    if resume_from is not None:
        _restore(state, resume_from)
    log = MetricsLog(Path(run_dir, "log_autoencoder.tsv") if run_dir else None)

    enc, dec = state.modules["hr_encoder"], state.modules["decoder"]
    n = len(dataset)
    f = model_config.hr_downsample_factor
    crop = cfg.crop
    if crop is not None and crop % f:
        raise InvalidArgument(f"crop {crop} not divisible by factor {f}")
    for it in range(state.iteration, cfg.iterations):
        rng = np_rng(cfg.seed, "data", it)
        idx = rng.integers(0, n, cfg.batch_size)
        hr, _ = _batch(dataset, idx, dtype)
        if crop is not None and crop < hr.shape[-1]:
            # aligned random crops: same kernels, a fraction of the compute
            span = hr.shape[-1] - crop
            offs = rng.integers(0, span // f + 1, size=(cfg.batch_size, 2)) * f
            hr = torch.stack([im[:, y:y + crop, x:x + crop]
                              for im, (y, x) in zip(hr, offs)])
        recon = dec(enc(hr))
        loss = (recon - hr).abs().mean()
        _check_loss(loss, it, cfg.seed, run_dir)
        for opt in state.optimizers.values():
            opt.zero_grad()
        loss.backward()
        for opt in state.optimizers.values():
            opt.step()
        state.loss_history.append(float(loss.detach()))
        state.iteration = it + 1
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            log.log(it + 1, "autoencoder", state.loss_history[-1], cfg.lr)
        _maybe_checkpoint(state, run_dir, "autoencoder")
    state.assert_finite()
    if run_dir is not None:
        save_stage(state, Path(run_dir, "checkpoint_autoencoder.bin"))
    return state


# ---------------------------------------------------------------------------
# Stage 1: joint LR-encoder + UNet training


def train_joint(dataset: Dataset, model_config: ModelConfig, cfg: TrainConfig,
                hr_encoder: HREncoder, run_dir=None, resume_from=None,
                frozen_lr_encoder: LREncoder | None = None) -> TrainState:
    """Train the UNet (and, unless frozen, the LR encoder) with the
    conditioned diffusion loss, top-index oversampling, and the
    top-step-only encoder update rule."""
    if cfg.stage != "joint":
        raise InvalidArgument(f"expected stage 'joint', got {cfg.stage!r}")
    dtype = cfg.torch_dtype
    mode = ConditioningMode(cfg.mode)
    sched = make_schedule(cfg.schedule_kind, cfg.schedule_T)
    sampler = TimestepSampler(T=sched.T, p0=cfg.top_p0, warmup=cfg.top_warmup)
    weights = cfg.weights()

    state = TrainState(model_config=model_config, train_config=cfg)
    state.modules["unet"] = _build(model_config, "unet", cfg.seed, dtype, cfg.mode)
    if frozen_lr_encoder is not None:
        lr_enc = frozen_lr_encoder.to(dtype)
        lr_enc.requires_grad_(False)
        state.modules["lr_encoder"] = lr_enc
        state.optimizers = {"unet": _adam(state.modules["unet"], cfg)}
    else:
        state.modules["lr_encoder"] = _build(model_config, "lr_encoder",
                                             cfg.seed, dtype)
        state.optimizers = {"unet": _adam(state.modules["unet"], cfg),
                            "lr_encoder": _adam(state.modules["lr_encoder"], cfg)}
    if resume_from is not None:
        _restore(state, resume_from)
    log = MetricsLog(Path(run_dir, "log_joint.tsv") if run_dir else None)

    hr_encoder = hr_encoder.to(dtype)
    hr_encoder.requires_grad_(False)
    z_all = encode_dataset(hr_encoder, dataset, dtype, cfg.batch_size)

    unet, lr_enc = state.modules["unet"], state.modules["lr_encoder"]
    n = len(dataset)
    window_draws = []
    for it in range(state.iteration, cfg.iterations):
        idx = np_rng(cfg.seed, "data", it).integers(0, n, cfg.batch_size)
        _, x_l = _batch(dataset, idx, dtype)
        z_h = z_all[idx]
        i_batch = sample_timestep(sampler, it, np_rng(cfg.seed, "timestep", it),
                                  size=cfg.batch_size)
        window_draws.append(i_batch)
        eps = torch.randn(z_h.shape, generator=torch_gen(cfg.seed, "noise", it),
                          dtype=dtype)
        top_mask = torch.as_tensor(i_batch == sched.T)
        try:
            cond = lr_enc(x_l)
            loss = diffusion.diffusion_loss(
                unet, z_h, cond, i_batch, sched, eps, mode,
                weights=weights, cond_grad_mask=top_mask)
        except NumericError:
            _dump_divergence(run_dir, it, cfg.seed,
                             {"sampled_indices": i_batch.tolist()})
            raise
        _check_loss(loss, it, cfg.seed, run_dir,
                    {"sampled_indices": i_batch.tolist()})
        for opt in state.optimizers.values():
            opt.zero_grad()
        loss.backward()
        state.optimizers["unet"].step()
        # encoder parameters advance only when the batch reached index T
        if "lr_encoder" in state.optimizers and bool(top_mask.any()):
            state.optimizers["lr_encoder"].step()
        state.loss_history.append(float(loss.detach()))
        state.iteration = it + 1
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            log.log(it + 1, "joint", state.loss_history[-1], cfg.lr,
                    _t_histogram(window_draws, sched.T))
            window_draws = []
        _maybe_checkpoint(state, run_dir, "joint")
    state.assert_finite()
    if run_dir is not None:
        save_stage(state, Path(run_dir, "checkpoint_joint.bin"))
    return state


def encode_dataset(hr_encoder: HREncoder, dataset: Dataset, dtype,
                   batch_size: int = 16) -> torch.Tensor:
    """Latents of every HR image under the frozen encoder."""
    outs = []
    with torch.no_grad():
        for i in range(0, len(dataset), batch_size):
            hr = torch.as_tensor(dataset.hr[i:i + batch_size]).to(dtype)
            outs.append(hr_encoder(hr))
    return torch.cat(outs)


# ---------------------------------------------------------------------------
# Stage 2: scale distillation (x2 teacher -> 1-step x4 student)


def cascade_targets(teacher: TrainState, decoder: Decoder, x_l: torch.Tensor,
                    cascade_steps: int, rng_seed: int, it: int) -> torch.Tensor:
    """Pseudo-target latents: run the x2 teacher twice (LR -> x2 -> x4)."""
    tcfg = teacher.train_config
    mode = ConditioningMode(tcfg.mode)
    sched = make_schedule(tcfg.schedule_kind, tcfg.schedule_T)
    unet, lr_enc = teacher.modules["unet"], teacher.modules["lr_encoder"]
    with torch.no_grad():
        cond_a = lr_enc(x_l)
        z_a = diffusion.sample(unet, cond_a, sched, cascade_steps, mode,
                               rng=torch_gen(rng_seed, "cascade_a", it),
                               deterministic=True)
        x_mid = decoder(z_a).clamp(0.0, 1.0)
        cond_b = lr_enc(x_mid)
        z_b = diffusion.sample(unet, cond_b, sched, cascade_steps, mode,
                               rng=torch_gen(rng_seed, "cascade_b", it),
                               deterministic=True)
    return z_b


def scale_distill(teacher: TrainState, decoder: Decoder, dataset: Dataset,
                  student_config: ModelConfig, cfg: TrainConfig,
                  run_dir=None, resume_from=None) -> TrainState:
    """Distill the x2 teacher into a 1-step student at the target scale.

    The student regresses cascaded teacher latents with a single
    prediction at the top index, under the same loss form; the encoder
    always updates because every iteration sits at index T.
    """
    if cfg.stage != "distill":
        raise InvalidArgument(f"expected stage 'distill', got {cfg.stage!r}")
    if teacher.model_config.scale * 2 != student_config.scale:
        raise InvalidArgument(
            f"teacher scale {teacher.model_config.scale} cannot distill into "
            f"student scale {student_config.scale} (need teacher x2 cascade)")
    if teacher.model_config.hr_downsample_factor != student_config.hr_downsample_factor:
        raise InvalidArgument("teacher and student must share the HR latent grid")
    dtype = cfg.torch_dtype
    mode = ConditioningMode(cfg.mode)
    sched = make_schedule(cfg.schedule_kind, cfg.schedule_T)
    weights = cfg.weights()

    state = TrainState(model_config=student_config, train_config=cfg)
    state.modules["unet"] = _build(student_config, "unet", cfg.seed, dtype, cfg.mode)
    state.modules["lr_encoder"] = _build(student_config, "lr_encoder", cfg.seed, dtype)
    state.optimizers = {"unet": _adam(state.modules["unet"], cfg),
                        "lr_encoder": _adam(state.modules["lr_encoder"], cfg)}
    if resume_from is not None:
        _restore(state, resume_from)
    log = MetricsLog(Path(run_dir, "log_distill.tsv") if run_dir else None)

    decoder = decoder.to(dtype)
    decoder.requires_grad_(False)
    for m in teacher.modules.values():
        m.to(dtype).requires_grad_(False)

    unet, lr_enc = state.modules["unet"], state.modules["lr_encoder"]
    n = len(dataset)
    for it in range(state.iteration, cfg.iterations):
        idx = np_rng(cfg.seed, "data", it).integers(0, n, cfg.batch_size)
        _, x_l = _batch(dataset, idx, dtype)
        z_target = cascade_targets(teacher, decoder, x_l, cfg.cascade_steps,
                                   cfg.seed, it)
        eps = torch.randn(z_target.shape,
                          generator=torch_gen(cfg.seed, "noise", it), dtype=dtype)
        cond = lr_enc(x_l)
        i_batch = np.full(cfg.batch_size, sched.T)
        loss = diffusion.diffusion_loss(
            unet, z_target, cond, i_batch, sched, eps, mode, weights=weights,
            cond_grad_mask=torch.ones(cfg.batch_size, dtype=torch.bool))
        _check_loss(loss, it, cfg.seed, run_dir)
        for opt in state.optimizers.values():
            opt.zero_grad()
        loss.backward()
        for opt in state.optimizers.values():
            opt.step()
        state.loss_history.append(float(loss.detach()))
        state.iteration = it + 1
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            log.log(it + 1, "distill", state.loss_history[-1], cfg.lr,
                    f"top={cfg.batch_size}/{cfg.batch_size}")
        _maybe_checkpoint(state, run_dir, "distill")
    state.assert_finite()
    if run_dir is not None:
        save_stage(state, Path(run_dir, "checkpoint_distill.bin"))
    return state


# ---------------------------------------------------------------------------
# Stage 3: decoder finetuning on 1-step outputs


def one_step_latents(student: TrainState, x_l: torch.Tensor, it: int,
                     rng_name: str = "student_init") -> torch.Tensor:
    """z_0 from the student in a single step (prediction at the top index)."""
    cfg = student.train_config
    mode = ConditioningMode(cfg.mode)
    sched = make_schedule(cfg.schedule_kind, cfg.schedule_T)
    with torch.no_grad():
        cond = student.modules["lr_encoder"](x_l)
        return diffusion.sample(
            student.modules["unet"], cond, sched, 1, mode,
            rng=torch_gen(cfg.seed, rng_name, it), deterministic=True)


def finetune_decoder(student: TrainState, decoder: Decoder, dataset: Dataset,
                     cfg: TrainConfig, run_dir=None, resume_from=None) -> TrainState:
    """L1-finetune the decoder on frozen 1-step student latents."""
    if cfg.stage != "decoder":
        raise InvalidArgument(f"expected stage 'decoder', got {cfg.stage!r}")
    dtype = cfg.torch_dtype
    for m in student.modules.values():
        m.to(dtype).requires_grad_(False)
    upstream_before = {name: _param_bytes(m) for name, m in student.modules.items()}

    state = TrainState(model_config=student.model_config, train_config=cfg)
    state.modules["decoder"] = decoder.to(dtype)
    decoder.requires_grad_(True)
    state.optimizers = {"decoder": _adam(decoder, cfg)}
    if resume_from is not None:
        _restore(state, resume_from)
    log = MetricsLog(Path(run_dir, "log_decoder.tsv") if run_dir else None)

    n = len(dataset)
    for it in range(state.iteration, cfg.iterations):
        idx = np_rng(cfg.seed, "data", it).integers(0, n, cfg.batch_size)
        hr, x_l = _batch(dataset, idx, dtype)
        z = one_step_latents(student, x_l, it)
        recon = decoder(z)
        loss = (recon - hr).abs().mean()
        _check_loss(loss, it, cfg.seed, run_dir)
        state.optimizers["decoder"].zero_grad()
        loss.backward()
        state.optimizers["decoder"].step()
        state.loss_history.append(float(loss.detach()))
        state.iteration = it + 1
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            log.log(it + 1, "decoder", state.loss_history[-1], cfg.lr)
        _maybe_checkpoint(state, run_dir, "decoder")
    for name, m in student.modules.items():
        if _param_bytes(m) != upstream_before[name]:
            raise InvariantViolation(
                f"frozen upstream module {name!r} changed during decoder stage")
    state.assert_finite()
    if run_dir is not None:
        save_stage(state, Path(run_dir, "checkpoint_decoder.bin"))
    return state


def _param_bytes(module) -> bytes:
    return b"".join(p.detach().cpu().numpy().tobytes() for p in module.parameters())


# ---------------------------------------------------------------------------
# Checkpoint round-trips


def save_stage(state: TrainState, path):
    tensors = {}
    for name, module in state.modules.items():
        tensors.update(module_tensors(module, name))
    for name, opt in state.optimizers.items():
        tensors.update(optimizer_tensors(opt, f"adam_{name}"))
    tensors["loss_history"] = np.asarray(state.loss_history, dtype=np.float64)
    meta = {
        "stage": state.train_config.stage,
        "iteration": state.iteration,
        "seed": state.seed,
        "train_config": asdict(state.train_config),
        "module_names": sorted(state.modules),
        "optimizer_names": sorted(state.optimizers),
    }
    save_checkpoint(path, state.model_config, tensors, meta)


def _restore(state: TrainState, path):
    ck = load_checkpoint(path)
    if ck.config != state.model_config:
        raise InvalidArgument("checkpoint model config differs from requested")
    if ck.meta["stage"] != state.train_config.stage:
        raise InvalidArgument(
            f"checkpoint stage {ck.meta['stage']!r} != {state.train_config.stage!r}")
    dtype = state.train_config.torch_dtype
    for name, module in state.modules.items():
        if name in ck.meta["module_names"]:
            load_module(module, ck.tensors, name, dtype=dtype)
    for name, opt in state.optimizers.items():
        load_optimizer(opt, ck.tensors, f"adam_{name}")
    state.iteration = int(ck.meta["iteration"])
    state.loss_history = list(ck.tensors.get(
        "loss_history", np.empty(0)).astype(np.float64))


def load_stage(path, expected_stage: str | None = None) -> TrainState:
    """Rebuild a TrainState (modules + optimizers) from a checkpoint."""
    ck = load_checkpoint(path)
    cfg = TrainConfig.from_dict(ck.meta["train_config"])
    if expected_stage is not None and cfg.stage != expected_stage:
        raise InvalidArgument(
            f"checkpoint holds stage {cfg.stage!r}, expected {expected_stage!r}")
    state = TrainState(model_config=ck.config, train_config=cfg)
    dtype = cfg.torch_dtype
    for name in ck.meta["module_names"]:
        state.modules[name] = _build(ck.config, name, cfg.seed, dtype, cfg.mode)
        load_module(state.modules[name], ck.tensors, name, dtype=dtype)
    for name in ck.meta["optimizer_names"]:
        module = state.modules[name]
        state.optimizers[name] = _adam(module, cfg)
        load_optimizer(state.optimizers[name], ck.tensors, f"adam_{name}")
    state.iteration = int(ck.meta["iteration"])
    state.loss_history = list(ck.tensors.get(
        "loss_history", np.empty(0)).astype(np.float64))
    return state


def _maybe_checkpoint(state: TrainState, run_dir, stage: str):
    every = state.train_config.checkpoint_every
    if run_dir is not None and every and state.iteration % every == 0 \
            and state.iteration < state.train_config.iterations:
        save_stage(state, Path(run_dir, f"checkpoint_{stage}_it{state.iteration}.bin"))
