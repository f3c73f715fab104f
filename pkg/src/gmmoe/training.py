"""Optimization loop, learning-rate schedule, evaluation driver, and the
ablation preset registry.

Training is iteration-budgeted: every iteration samples a fresh batch with
replacement from the train manifest using one dedicated torch.Generator, so
a run is fully reproducible from (configs, master_seed) and resumable from
the generator state stored in checkpoints.
"""

import json
import os
import time
from dataclasses import dataclass, field, asdict, replace

import torch

from .checkpoint import (
    load_checkpoint,
    restore_optimizer,
    save_checkpoint,
)
from .data import AugmentSpec, eval_pair, sample_training_patch, sampler_stream
from .errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    GMMoEError,
    NumericError,
)
from .metrics import MetricReport, psnr_loss, psnr_metric, ssim_metric
from .network import GMMoENet, ModelConfig, build_model


@dataclass
class TrainConfig:
    """Optimizer, scheduler, sampling and logging knobs.

    milestones=None derives the default decay points at 50/75/90 percent of
    total_iters; an explicit empty tuple disables decay entirely.
    """

    lr0: float = 1e-3
    milestones: tuple = None
    gamma: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    patch: int = 256
    total_iters: int = 1000
    master_seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    patch_mode: str = "crop"
    rotations: tuple = (0, 90, 180, 270)
    hflip: bool = True
    vflip: bool = True
    grad_clip: float = 0.0
    loss_eps: float = 1e-8

    def resolved_milestones(self) -> tuple:
        if self.milestones is not None:
            return tuple(int(m) for m in self.milestones)
        t = self.total_iters
        out = []
        for frac in (0.50, 0.75, 0.90):
            m = int(t * frac)
            if 0 < m < t and (not out or m > out[-1]):
                out.append(m)
        return tuple(out)

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise ConfigurationError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.gamma <= 1:
            raise ConfigurationError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patch < 1:
            raise ConfigurationError(f"patch must be >= 1, got {self.patch}")
        if self.total_iters < 1:
            raise ConfigurationError(f"total_iters must be >= 1, got {self.total_iters}")
        if self.checkpoint_every < 0 or self.log_every < 1:
            raise ConfigurationError("checkpoint_every must be >= 0 and log_every >= 1")
        if self.patch_mode not in ("crop", "resize"):
            raise ConfigurationError(
                f"patch_mode must be 'crop' or 'resize', got {self.patch_mode!r}"
            )
        if not 0 <= self.grad_clip:
            raise ConfigurationError(f"grad_clip must be >= 0, got {self.grad_clip}")
        if self.loss_eps <= 0 or self.eps <= 0:
            raise ConfigurationError("eps values must be positive")
        ms = self.resolved_milestones()
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigurationError(f"milestones must be strictly increasing, got {ms}")
        if ms and (ms[0] <= 0 or ms[-1] >= self.total_iters):
            raise ConfigurationError(
                f"milestones must lie strictly inside (0, total_iters), got {ms}"
            )
        self.augment().validate()

    def augment(self) -> AugmentSpec:
        return AugmentSpec(
            rotations=tuple(self.rotations), hflip=self.hflip, vflip=self.vflip
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = None if self.milestones is None else list(self.milestones)
        d["rotations"] = list(self.rotations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if kwargs.get("milestones") is not None:
            kwargs["milestones"] = tuple(kwargs["milestones"])
        if "rotations" in kwargs:
            kwargs["rotations"] = tuple(kwargs["rotations"])
        return cls(**kwargs)


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Piecewise-constant schedule: lr0 * gamma^k with k the number of
    milestones at or before `iteration`."""
    if not 0 <= iteration < cfg.total_iters:
        raise ConfigurationError(
            f"iteration {iteration} outside [0, {cfg.total_iters})"
        )
    k = sum(1 for m in cfg.resolved_milestones() if m <= iteration)
    return cfg.lr0 * cfg.gamma ** k


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(
        model.parameters(), lr=cfg.lr0, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps
    )


def _sample_batch(manifest, cfg, rng):
    ids, lows, gts = [], [], []
    for _ in range(cfg.batch_size):
        idx = int(torch.randint(0, len(manifest.pairs), (1,), generator=rng).item())
        ids.append(manifest.pairs[idx]["id"])
        low, gt = sample_training_patch(
            manifest, idx, cfg.patch, rng,
            mode=cfg.patch_mode, augment=cfg.augment(), allow_upscale=True,
        )
        lows.append(low)
        gts.append(gt)
    return ids, torch.cat(lows, dim=0), torch.cat(gts, dim=0)


@dataclass
class TrainResult:
    model: GMMoENet
    log: list
    final_checkpoint: str = None
    start_iteration: int = 0
    iterations_run: int = 0


def train(model, manifest, cfg: TrainConfig, loss_fn=None, out_dir=None,
          resume=None, extra_meta=None) -> TrainResult:
    """Run the optimization loop.

    With out_dir set, writes ckpt_<iter>.bin (+ sidecar) per the checkpoint
    schedule plus a final one, and appends {iter, lr, loss, wall_ms} lines
    to log.jsonl. The logged loss is the pre-update loss of that iteration,
    so a zero-initialized model logs the identity baseline at iteration 0.
    A non-finite loss aborts with the iteration and batch pair ids.
    """
    cfg.validate()
    if len(manifest.pairs) == 0:
        raise DataError("training needs a non-empty manifest")
    if loss_fn is None:
        loss_fn = lambda pred, gt: psnr_loss(pred, gt, cfg.loss_eps)

    rng = sampler_stream(cfg.master_seed)
    optimizer = make_optimizer(model, cfg)
    start_iter = 0
    if resume is not None:
        bundle = load_checkpoint(resume)
        try:
            model.load_state_dict(bundle.model_state)
        except (RuntimeError, KeyError) as e:
            raise CheckpointError(f"resume checkpoint does not fit the model: {e}") from e
        if bundle.optimizer_state is not None:
            restore_optimizer(bundle, model, optimizer)
        if bundle.sampler_state is not None:
            rng.set_state(bundle.sampler_state)
        start_iter = bundle.iteration
        if start_iter >= cfg.total_iters:
            raise ConfigurationError(
                f"checkpoint is already at iteration {start_iter} of {cfg.total_iters}"
            )

    log_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, "log.jsonl"), "a")

    def checkpoint_extra():
        extra = {"train_config": cfg.to_dict()}
        if extra_meta:
            extra.update(extra_meta)
        return extra

    def write_checkpoint(iteration):
        path = os.path.join(out_dir, f"ckpt_{iteration:06d}.bin")
        return save_checkpoint(
            path, model, iteration=iteration, optimizer=optimizer,
            sampler_state=rng.get_state(), extra=checkpoint_extra(),
        )

    history = []
    final_path = None
    model.train()
    try:
        for it in range(start_iter, cfg.total_iters):
            t0 = time.perf_counter()
            lr = lr_at(cfg, it)
            for group in optimizer.param_groups:
                group["lr"] = lr

            batch_ids, low, gt = _sample_batch(manifest, cfg, rng)
            pred = model(low)
            loss = loss_fn(pred, gt)
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite loss {loss.item()} at iteration {it} "
                    f"on batch pairs {batch_ids}"
                )
            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()

            if it % cfg.log_every == 0 or it == cfg.total_iters - 1:
                entry = {
                    "iter": it,
                    "lr": lr,
                    "loss": float(loss.item()),
                    "wall_ms": (time.perf_counter() - t0) * 1e3,
                }
                history.append(entry)
                if log_file is not None:
                    log_file.write(json.dumps(entry) + "\n")
                    log_file.flush()

            done = it + 1
            if out_dir is not None:
                if cfg.checkpoint_every > 0 and done % cfg.checkpoint_every == 0:
                    final_path = write_checkpoint(done)
                elif done == cfg.total_iters:
                    final_path = write_checkpoint(done)
    finally:
        if log_file is not None:
            log_file.close()

    return TrainResult(
        model=model, log=history, final_checkpoint=final_path,
        start_iteration=start_iter, iterations_run=cfg.total_iters - start_iter,
    )


def evaluate(model, manifest, config_digest: str = "") -> MetricReport:
    """Full-resolution deterministic PSNR/SSIM over every manifest pair."""
    model.eval()
    entries = []
    with torch.no_grad():
        for i, rec in enumerate(manifest.pairs):
            try:
                low, gt = eval_pair(manifest, i)
                pred = model(low)
                p = float(psnr_metric(pred, gt)[0].item())
                s = float(ssim_metric(pred, gt)[0].item())
            except GMMoEError as e:
                raise type(e)(f"pair {rec['id']!r}: {e}") from e
            entries.append((rec["id"], p, s))
    return MetricReport.from_scores(entries, config_digest=config_digest)


@dataclass(frozen=True)
class AblationPreset:
    """One ablation row: which components are active, plus the published
    full-scale reference numbers for context (never asserted by tests)."""

    id: int
    baseline: bool
    sfeb: bool
    expert1: bool
    expert2: bool
    expert3: bool
    gate: bool
    reference: dict = field(default_factory=dict)

    def components(self) -> set:
        out = set()
        if self.sfeb:
            out.add("sfeb")
        if self.expert1:
            out.add("expert_color")
        if self.expert2:
            out.add("expert_detail")
        if self.expert3:
            out.add("expert_feature")
        if self.gate:
            out.add("gate")
        return out


def _preset(pid, sfeb, e1, e2, e3, gate, real, syn):
    return AblationPreset(
        id=pid, baseline=True, sfeb=sfeb, expert1=e1, expert2=e2, expert3=e3,
        gate=gate,
        reference={
            "lol_v2_real": {"psnr_db": real[0], "ssim": real[1]},
            "lol_v2_syn": {"psnr_db": syn[0], "ssim": syn[1]},
        },
    )


ABLATION_PRESETS = {
    1: _preset(1, False, False, False, False, False, (19.45, 0.7079), (20.35, 0.7431)),
    2: _preset(2, True, False, False, False, False, (20.27, 0.7236), (23.44, 0.7646)),
    3: _preset(3, True, True, False, False, False, (21.35, 0.7446), (24.35, 0.8436)),
    4: _preset(4, True, True, True, False, False, (22.11, 0.8021), (25.14, 0.9327)),
    5: _preset(5, True, True, True, False, True, (23.23, 0.8045), (26.08, 0.9351)),
    6: _preset(6, True, True, False, True, True, (23.31, 0.8054), (26.12, 0.9362)),
    7: _preset(7, True, False, True, True, True, (23.35, 0.8055), (26.15, 0.9366)),
    8: _preset(8, True, True, True, True, True, (23.65, 0.8060), (26.29, 0.9371)),
}


def ablation_preset(preset_id: int) -> AblationPreset:
    if preset_id not in ABLATION_PRESETS:
        raise ConfigurationError(
            f"ablation preset must be in 1..8, got {preset_id}"
        )
    return ABLATION_PRESETS[preset_id]


def ablation_config(preset, base_cfg: ModelConfig) -> ModelConfig:
    if isinstance(preset, int):
        preset = ablation_preset(preset)
    return replace(
        base_cfg,
        enable_sfeb=preset.sfeb,
        enable_expert1=preset.expert1,
        enable_expert2=preset.expert2,
        enable_expert3=preset.expert3,
        enable_gate=preset.gate,
    )


def ablation_model(preset, base_cfg: ModelConfig, seed: int) -> GMMoENet:
    """Model whose parameter tree contains exactly the enabled component
    subtrees of the preset."""
    return build_model(ablation_config(preset, base_cfg), seed)


def preset_structure_diff(a: int, b: int) -> set:
    """Component sets that differ between two presets."""
    return ablation_preset(a).components() ^ ablation_preset(b).components()
