"""Masked sequence pre-training and guidance fine-tuning loops.

Pre-training draws masked sequences, recovers masked image features against
gradient-free EMA-encoder targets and masked actions against their original
values, and advances the EMA decay linearly over the run. Fine-tuning attaches
the ten randomly initialized guidance heads and supervises them with expert
ground-truth actions under one of three protocols: single_frame (pooled
vision feature straight into the heads), uni (history from the side opposite
a per-example target plane), or bi (one plane-independent sequence, all heads
supervised jointly).

Every run writes a manifest directory (config snapshot, per-epoch
metrics.jsonl, per-epoch checkpoints) sufficient to re-launch the identical
run; per-epoch rng streams are derived from (seed, epoch) so a resumed run
reproduces the uninterrupted data stream.
"""

from __future__ import annotations

import json
import math
import random
import subprocess
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from echoguide import __version__
from echoguide.nets import GuidanceModel, ModelConfig, load_checkpoint, save_checkpoint
from echoguide.sequencing import (
    InsufficientHistoryError,
    SamplingConfig,
    make_mask_plan,
    sample_train_sequence,
    sampling_interval,
)
from echoguide.store import PLANE_IDS, Trajectory, guidance_ground_truth

FINETUNE_PROTOCOLS = ("single_frame", "uni", "bi")
TOLERANCE_MODE = "abs=1e-5"
CONFIG_SNAPSHOT = "config.snapshot"
METRICS_FILE = "metrics.jsonl"


@dataclass
class PretrainConfig:
    epochs: int = 50
    warmup_epochs: int = 7
    base_lr: float = 2.5e-4
    batch_size: int = 128
    weight_decay: float = 0.05
    ema_decay_start: float = 0.996
    ema_decay_end: float = 1.0
    mask_ratio_lo: float = 0.3
    mask_ratio_hi: float = 0.5
    mask_type: str = "both"
    seq_len: int = 6
    protocol: str = "bidirectional"
    strategy: str = "segmental"
    samples_per_epoch: int = 4096
    crop_scale_min: float = 0.7
    visual_loss_weight: float = 1.0
    action_loss_weight: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 <= self.mask_ratio_lo <= self.mask_ratio_hi <= 1.0:
            raise ValueError("mask ratio band must satisfy 0 <= lo <= hi <= 1")


@dataclass
class FinetuneConfig:
    epochs: int = 5
    lr: float = 1e-4
    batch_size: int = 128
    protocol: str = "bi"
    drop_path: float = 0.2            # applied to the sequence transformer, uni only
    layerwise_lr_decay: float = 0.4   # applied to the vision encoder, uni only
    freeze_vision: bool | None = None  # default: True for bi, False otherwise
    loss_beta: float = 1.0
    weight_decay: float = 0.01
    seq_len: int = 6
    strategy: str = "segmental"
    samples_per_epoch: int = 4096
    warmup_epochs: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.protocol not in FINETUNE_PROTOCOLS:
            raise ValueError(f"protocol must be one of {FINETUNE_PROTOCOLS}, got {self.protocol!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def vision_frozen(self, from_checkpoint: bool) -> bool:
        # freezing protects a pre-trained encoder (bi default); freezing a
        # randomly initialized one would just cripple scratch arms
        if self.freeze_vision is None:
            return self.protocol == "bi" and from_checkpoint
        return self.freeze_vision


# ---------------------------------------------------------------------------
# Small numerics
# ---------------------------------------------------------------------------


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Mean-reduced smooth L1; an empty prediction set contributes 0."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.numel() == 0:
        return torch.zeros((), dtype=torch.float32)
    return F.smooth_l1_loss(pred, target, beta=beta)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay toward zero."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def layerwise_scale(layer_index: int, depth: int, decay: float = 0.4) -> float:
    """LR multiplier for vision layer `layer_index` (0 = patch/pos embedding)."""
    return decay ** (depth - layer_index)


def ema_decay_at(step: int, total_steps: int, start: float, end: float) -> float:
    if total_steps <= 1:
        return end
    return start + (end - start) * step / (total_steps - 1)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def source_revision() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0:
            return rev.stdout.strip()
    except OSError:
        pass
    return f"echoguide-{__version__}"


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------


class RunManifest:
    """Run directory with config snapshot, metrics log, and checkpoints."""

    def __init__(self, run_dir: str | Path) -> None:
        self.run_dir = Path(run_dir)

    @property
    def config_path(self) -> Path:
        return self.run_dir / CONFIG_SNAPSHOT

    @property
    def metrics_path(self) -> Path:
        return self.run_dir / METRICS_FILE

    @classmethod
    def create(cls, run_dir: str | Path, config: dict) -> "RunManifest":
        manifest = cls(run_dir)
        manifest.run_dir.mkdir(parents=True, exist_ok=True)
        snapshot = dict(config)
        snapshot.setdefault("revision", source_revision())
        snapshot.setdefault("tolerance", TOLERANCE_MODE)
        manifest.config_path.write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
        if manifest.metrics_path.exists():
            manifest.metrics_path.unlink()
        return manifest

    def read_config(self) -> dict:
        return json.loads(self.config_path.read_text())

    def append_metrics(self, record: dict) -> None:
        with self.metrics_path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def read_metrics(self) -> list[dict]:
        if not self.metrics_path.exists():
            return []
        return [json.loads(line) for line in self.metrics_path.read_text().splitlines() if line]

    def checkpoint_path(self, epoch: int) -> Path:
        return self.run_dir / f"ckpt_epoch_{epoch:03d}.pt"

    def latest_checkpoint(self) -> Path | None:
        found = sorted(self.run_dir.glob("ckpt_epoch_*.pt"))
        return found[-1] if found else None


# ---------------------------------------------------------------------------
# Batch construction
# ---------------------------------------------------------------------------


def random_resized_crop(image: np.ndarray, out_size: int, rng: np.random.Generator,
                        scale_min: float) -> np.ndarray:
    """Area-scaled random crop resized back to out_size (bilinear)."""
    h, w = image.shape
    area = h * w
    scale = rng.uniform(scale_min, 1.0)
    ratio = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
    ch = int(round(math.sqrt(area * scale / ratio)))
    cw = int(round(math.sqrt(area * scale * ratio)))
    ch, cw = min(max(ch, 1), h), min(max(cw, 1), w)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = torch.from_numpy(image[top : top + ch, left : left + cw]).float()
    resized = F.interpolate(
        crop[None, None], size=(out_size, out_size), mode="bilinear", align_corners=False
    )
    return resized[0, 0].numpy()


@dataclass
class SequenceBatch:
    images: torch.Tensor       # (B, L, H, W)
    actions: torch.Tensor      # (B, L-1, 6)
    anchor_pos: torch.Tensor   # (B,)
    visibility: torch.Tensor | None = None  # (B, 2L-1) bool
    plane_targets: torch.Tensor | None = None  # (B, 10, 6) guidance ground truth
    plane_ids: torch.Tensor | None = None      # (B,) single supervised plane (uni)


def _draw_anchor(traj: Trajectory, rng: np.random.Generator) -> int:
    return int(rng.integers(0, traj.num_frames))


def build_pretrain_batch(
    trajectories: list[Trajectory],
    cfg: PretrainConfig,
    batch_size: int,
    rng: np.random.Generator,
    augment: bool = True,
) -> SequenceBatch:
    sampling = SamplingConfig(
        protocol=cfg.protocol, strategy=cfg.strategy, mode="train", seq_len=cfg.seq_len
    )
    images, actions, visibility, anchor_pos = [], [], [], []
    attempts = 0
    while len(images) < batch_size:
        attempts += 1
        if attempts > 50 * batch_size:
            raise InsufficientHistoryError("could not assemble a pre-training batch")
        traj = trajectories[int(rng.integers(0, len(trajectories)))]
        anchor = _draw_anchor(traj, rng)
        try:
            sample = sample_train_sequence(traj, anchor, sampling, rng)
        except InsufficientHistoryError:
            continue
        plan = make_mask_plan(
            cfg.seq_len, rng, cfg.mask_ratio_lo, cfg.mask_ratio_hi, cfg.mask_type
        )
        imgs = sample.images
        if augment:
            imgs = np.stack(
                [random_resized_crop(im, imgs.shape[-1], rng, cfg.crop_scale_min) for im in imgs]
            )
        images.append(imgs)
        actions.append(sample.actions)
        visibility.append(plan.visibility)
        anchor_pos.append(sample.anchor_pos)
    return SequenceBatch(
        images=torch.from_numpy(np.stack(images)).float(),
        actions=torch.from_numpy(np.stack(actions)).float(),
        anchor_pos=torch.tensor(anchor_pos, dtype=torch.long),
        visibility=torch.from_numpy(np.stack(visibility)),
    )


def _feasible_planes(traj: Trajectory, anchor: int, seq_len: int) -> list[int]:
    feasible = []
    for g in PLANE_IDS:
        t_g = traj.plane_annotations[g]
        try:
            sampling_interval(
                traj.num_frames, anchor, "unidirectional",
                target_plane_time=t_g, count=seq_len - 1,
            )
        except InsufficientHistoryError:
            continue
        feasible.append(g)
    return feasible


def build_finetune_batch(
    trajectories: list[Trajectory],
    cfg: FinetuneConfig,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[SequenceBatch, int]:
    """Assemble one fine-tuning batch; returns (batch, skipped_count)."""
    sampling = SamplingConfig(
        protocol="bidirectional" if cfg.protocol != "uni" else "unidirectional",
        strategy=cfg.strategy,
        mode="train",
        seq_len=cfg.seq_len,
    )
    images, actions, anchor_pos, plane_targets, plane_ids = [], [], [], [], []
    skipped = 0
    attempts = 0
    while len(images) < batch_size:
        attempts += 1
        if attempts > 50 * batch_size:
            raise InsufficientHistoryError("could not assemble a fine-tuning batch")
        traj = trajectories[int(rng.integers(0, len(trajectories)))]
        anchor = _draw_anchor(traj, rng)

        if cfg.protocol == "single_frame":
            images.append(traj.image(anchor)[None])
            actions.append(np.zeros((0, 6)))
            anchor_pos.append(0)
            plane_targets.append(
                np.stack([guidance_ground_truth(traj, anchor, g).as_array() for g in PLANE_IDS])
            )
            plane_ids.append(0)
            continue

        if cfg.protocol == "uni":
            feasible = _feasible_planes(traj, anchor, cfg.seq_len)
            if not feasible:
                skipped += 1
                continue
            g = int(feasible[int(rng.integers(0, len(feasible)))])
            t_g = traj.plane_annotations[g]
            try:
                sample = sample_train_sequence(
                    traj, anchor, sampling, rng, target_plane_time=t_g
                )
            except InsufficientHistoryError:
                skipped += 1
                continue
            plane_ids.append(g)
        else:  # bi: plane-independent sampling, all heads supervised
            try:
                sample = sample_train_sequence(traj, anchor, sampling, rng)
            except InsufficientHistoryError:
                skipped += 1
                continue
            plane_ids.append(0)

        images.append(sample.images)
        actions.append(sample.actions)
        anchor_pos.append(sample.anchor_pos)
        plane_targets.append(
            np.stack([guidance_ground_truth(traj, anchor, g).as_array() for g in PLANE_IDS])
        )

    batch = SequenceBatch(
        images=torch.from_numpy(np.stack(images)).float(),
        actions=torch.from_numpy(np.stack(actions)).float(),
        anchor_pos=torch.tensor(anchor_pos, dtype=torch.long),
        plane_targets=torch.from_numpy(np.stack(plane_targets)).float(),
        plane_ids=torch.tensor(plane_ids, dtype=torch.long),
    )
    return batch, skipped


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------


def pretrain_step(
    model: GuidanceModel,
    batch: SequenceBatch,
    cfg: PretrainConfig,
) -> dict[str, torch.Tensor]:
    """Forward + loss for one masked-recovery batch (no optimizer step)."""
    visibility = batch.visibility
    img_vis = visibility[:, 0::2]
    act_vis = visibility[:, 1::2]
    tokens = model.assemble_tokens(
        batch.images, batch.actions, visibility=visibility, anchor_pos=batch.anchor_pos
    )
    out = model.sequence_forward(tokens)
    out_images = out[:, 0::2]
    out_actions = out[:, 1::2]

    masked_img = ~img_vis
    masked_act = ~act_vis
    visual_loss = torch.zeros((), dtype=out.dtype)
    action_loss = torch.zeros((), dtype=out.dtype)
    if bool(masked_img.any()):
        pred_v = model.visual_predictor(out_images[masked_img])
        target_v = model.ema_image_targets(batch.images, masked_img)[masked_img]
        visual_loss = smooth_l1(pred_v, target_v)
    if bool(masked_act.any()):
        pred_a = model.action_predictor(out_actions[masked_act])
        # supervised in the model's normalized action space
        target_a = batch.actions[masked_act].detach() / model.cfg.action_scale
        action_loss = smooth_l1(pred_a, target_a)
    total = cfg.visual_loss_weight * visual_loss + cfg.action_loss_weight * action_loss
    if not torch.isfinite(total):
        raise RuntimeError(
            f"non-finite pre-training loss: visual={visual_loss.item()} "
            f"action={action_loss.item()}"
        )
    return {
        "total": total,
        "visual": visual_loss,
        "action": action_loss,
        "masked_images": masked_img.sum(),
        "masked_actions": masked_act.sum(),
    }


def finetune_step(
    model: GuidanceModel,
    batch: SequenceBatch,
    cfg: FinetuneConfig,
) -> torch.Tensor:
    """Guidance loss for one batch under the configured protocol.

    Smooth L1 is taken in the model's normalized action space so the loss
    scale matches pre-training regardless of raw mm/deg magnitudes.
    """
    scale = model.cfg.action_scale

    def head_loss(query_like: torch.Tensor, g: int, target: torch.Tensor) -> torch.Tensor:
        pred = model.predict_guidance(query_like, g) / scale
        return smooth_l1(pred, target / scale, beta=cfg.loss_beta)

    if cfg.protocol == "single_frame":
        pooled = model.single_frame_features(batch.images[:, 0])
        losses = [
            head_loss(pooled, g, batch.plane_targets[:, gi])
            for gi, g in enumerate(PLANE_IDS)
        ]
        return torch.stack(losses).mean()

    query = model.guidance_query_output(batch.images, batch.actions, batch.anchor_pos)
    if cfg.protocol == "uni":
        losses = []
        for gi, g in enumerate(PLANE_IDS):
            rows = batch.plane_ids == g
            if not bool(rows.any()):
                continue
            losses.append(head_loss(query[rows], g, batch.plane_targets[rows, gi]))
        return torch.stack(losses).mean()

    losses = [
        head_loss(query, g, batch.plane_targets[:, gi]) for gi, g in enumerate(PLANE_IDS)
    ]
    return torch.stack(losses).mean()


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, stream]))


def _trainable_parameters(model: GuidanceModel):
    return [p for p in model.parameters() if p.requires_grad]


def run_pretraining(
    model: GuidanceModel,
    trajectories: list[Trajectory],
    cfg: PretrainConfig,
    run_dir: str | Path,
    data_root: str | None = None,
    start_epoch: int = 0,
    optimizer_state: dict | None = None,
    manifest: RunManifest | None = None,
) -> RunManifest:
    """Masked sequence pre-training; one checkpoint and metric row per epoch."""
    if not trajectories:
        raise ValueError("no training trajectories")
    if manifest is None:
        manifest = RunManifest.create(
            run_dir,
            {
                "kind": "pretrain",
                "model": asdict(model.cfg),
                "train": asdict(cfg),
                "data_root": data_root,
            },
        )
    optimizer = torch.optim.AdamW(
        _trainable_parameters(model), lr=cfg.base_lr, weight_decay=cfg.weight_decay
    )
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    steps_per_epoch = max(1, math.ceil(cfg.samples_per_epoch / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    for epoch in range(start_epoch, cfg.epochs):
        rng = _epoch_rng(cfg.seed, epoch, stream=1)
        torch.manual_seed(cfg.seed * 100_003 + epoch)
        model.train()
        t0 = time.time()
        sums = {"total": 0.0, "visual": 0.0, "action": 0.0}
        last_lr = 0.0
        for local_step in range(steps_per_epoch):
            step = epoch * steps_per_epoch + local_step
            last_lr = lr_schedule(step, total_steps, warmup_steps, cfg.base_lr)
            for group in optimizer.param_groups:
                group["lr"] = last_lr
            batch = build_pretrain_batch(trajectories, cfg, cfg.batch_size, rng)
            losses = pretrain_step(model, batch, cfg)
            optimizer.zero_grad()
            losses["total"].backward()
            optimizer.step()
            model.ema_update(
                ema_decay_at(step, total_steps, cfg.ema_decay_start, cfg.ema_decay_end)
            )
            for key in sums:
                sums[key] += float(losses[key].detach())
        record = {
            "epoch": epoch,
            "lr": last_lr,
            "loss_total": sums["total"] / steps_per_epoch,
            "loss_visual": sums["visual"] / steps_per_epoch,
            "loss_action": sums["action"] / steps_per_epoch,
            "seconds": round(time.time() - t0, 3),
        }
        manifest.append_metrics(record)
        save_checkpoint(
            model,
            manifest.checkpoint_path(epoch),
            extra={
                "kind": "pretrain",
                "epoch": epoch,
                "optimizer": optimizer.state_dict(),
            },
        )
    return manifest


def resume_pretraining(
    run_dir: str | Path, trajectories: list[Trajectory]
) -> RunManifest:
    """Continue an interrupted pre-training run from its latest checkpoint."""
    manifest = RunManifest(run_dir)
    config = manifest.read_config()
    if config.get("kind") != "pretrain":
        raise ValueError(f"{run_dir} is not a pre-training run")
    ckpt = manifest.latest_checkpoint()
    if ckpt is None:
        raise ValueError(f"{run_dir} holds no checkpoint to resume from")
    model, extra = load_checkpoint(ckpt, expected_config=ModelConfig(**config["model"]))
    cfg = PretrainConfig(**config["train"])
    done_epochs = extra["epoch"] + 1
    # drop metric rows beyond the checkpoint so the log stays consistent
    records = [r for r in manifest.read_metrics() if r["epoch"] < done_epochs]
    manifest.metrics_path.write_text(
        "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    )
    return run_pretraining(
        model,
        trajectories,
        cfg,
        run_dir,
        start_epoch=done_epochs,
        optimizer_state=extra["optimizer"],
        manifest=manifest,
    )


def set_drop_path(model: GuidanceModel, rate: float) -> None:
    """Set stochastic-depth rate on the sequence transformer blocks."""
    for block in model.seq_transformer.blocks:
        block.drop_path.rate = rate


def build_pretrain_model(model_cfg: ModelConfig, seed: int) -> GuidanceModel:
    """Seeded model construction; replays must reproduce the original init."""
    torch.manual_seed(seed)
    return GuidanceModel(model_cfg)


def initialize_finetune_model(
    model_cfg: ModelConfig,
    cfg: FinetuneConfig,
    init_checkpoint: str | Path | None,
) -> GuidanceModel:
    """Build the fine-tuning model with matched random initialization.

    The model is always constructed under the fine-tune seed; loading a
    pre-trained checkpoint then replaces everything except the guidance heads,
    so scratch and pre-trained arms share identical head initialization.
    """
    if init_checkpoint is None:
        torch.manual_seed(cfg.seed)
        model = GuidanceModel(model_cfg)
    else:
        pretrained, _ = load_checkpoint(init_checkpoint)
        if pretrained.cfg != model_cfg:
            raise ValueError(
                f"checkpoint model config {pretrained.cfg} does not match requested {model_cfg}"
            )
        torch.manual_seed(cfg.seed)
        model = GuidanceModel(pretrained.cfg)
        state = {
            k: v
            for k, v in pretrained.state_dict().items()
            if not k.startswith("guidance_heads.")
        }
        missing, unexpected = model.load_state_dict(state, strict=False)
        if unexpected or any(not k.startswith("guidance_heads.") for k in missing):
            raise ValueError(f"unexpected checkpoint contents: {missing} / {unexpected}")
    if cfg.protocol == "uni":
        set_drop_path(model, cfg.drop_path)
    if cfg.vision_frozen(from_checkpoint=init_checkpoint is not None):
        for p in model.vision.parameters():
            p.requires_grad_(False)
    return model


def finetune_param_groups(model: GuidanceModel, cfg: FinetuneConfig) -> list[dict]:
    """AdamW groups; layer-wise LR decay on the vision encoder for uni."""
    vision_trainable = any(p.requires_grad for p in model.vision.parameters())
    if cfg.protocol != "uni" or not vision_trainable:
        return [{"params": _trainable_parameters(model), "lr_scale": 1.0}]
    depth = model.cfg.vision_depth
    groups: list[dict] = []
    embed_params = list(model.vision.patch_embed.parameters()) + [model.vision.pos_embed]
    groups.append(
        {"params": embed_params, "lr_scale": layerwise_scale(0, depth, cfg.layerwise_lr_decay)}
    )
    for i, block in enumerate(model.vision.blocks, start=1):
        groups.append(
            {
                "params": list(block.parameters()),
                "lr_scale": layerwise_scale(i, depth, cfg.layerwise_lr_decay),
            }
        )
    tail = list(model.vision.norm.parameters()) + list(model.vision.pool_proj.parameters())
    groups.append({"params": tail, "lr_scale": 1.0})
    vision_ids = {id(p) for g in groups for p in g["params"]}
    rest = [p for p in _trainable_parameters(model) if id(p) not in vision_ids]
    groups.append({"params": rest, "lr_scale": 1.0})
    return [g for g in groups if g["params"]]


def run_finetuning(
    model: GuidanceModel,
    trajectories: list[Trajectory],
    cfg: FinetuneConfig,
    run_dir: str | Path,
    data_root: str | None = None,
    init_checkpoint: str | None = None,
) -> RunManifest:
    """Guidance fine-tuning; one checkpoint and metric row per epoch."""
    if not trajectories:
        raise ValueError("no training trajectories")
    manifest = RunManifest.create(
        run_dir,
        {
            "kind": "finetune",
            "model": asdict(model.cfg),
            "train": asdict(cfg),
            "data_root": data_root,
            "init_checkpoint": str(init_checkpoint) if init_checkpoint else "scratch",
        },
    )
    groups = finetune_param_groups(model, cfg)
    optimizer = torch.optim.AdamW(groups, lr=cfg.lr, weight_decay=cfg.weight_decay)

    steps_per_epoch = max(1, math.ceil(cfg.samples_per_epoch / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    for epoch in range(cfg.epochs):
        rng = _epoch_rng(cfg.seed, epoch, stream=2)
        torch.manual_seed(cfg.seed * 100_019 + epoch)
        model.train()
        t0 = time.time()
        loss_sum = 0.0
        skipped_total = 0
        last_lr = 0.0
        for local_step in range(steps_per_epoch):
            step = epoch * steps_per_epoch + local_step
            last_lr = lr_schedule(step, total_steps, warmup_steps, cfg.lr)
            for group in optimizer.param_groups:
                group["lr"] = last_lr * group.get("lr_scale", 1.0)
            batch, skipped = build_finetune_batch(trajectories, cfg, cfg.batch_size, rng)
            skipped_total += skipped
            loss = finetune_step(model, batch, cfg)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite fine-tuning loss at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += float(loss.detach())
        record = {
            "epoch": epoch,
            "lr": last_lr,
            "loss": loss_sum / steps_per_epoch,
            "skipped": skipped_total,
            "seconds": round(time.time() - t0, 3),
        }
        manifest.append_metrics(record)
        save_checkpoint(
            model,
            manifest.checkpoint_path(epoch),
            extra={"kind": "finetune", "epoch": epoch, "protocol": cfg.protocol},
        )
    return manifest


def rerun_from_manifest(
    run_dir: str | Path,
    out_dir: str | Path,
    trajectories: list[Trajectory],
) -> RunManifest:
    """Re-execute a recorded run into a fresh directory (reproducibility check)."""
    config = RunManifest(run_dir).read_config()
    model_cfg = ModelConfig(**config["model"])
    if config["kind"] == "pretrain":
        cfg = PretrainConfig(**config["train"])
        model = build_pretrain_model(model_cfg, cfg.seed)
        return run_pretraining(model, trajectories, cfg, out_dir, data_root=config.get("data_root"))
    if config["kind"] == "finetune":
        cfg = FinetuneConfig(**config["train"])
        init = config.get("init_checkpoint")
        init_ckpt = None if init in (None, "scratch") else init
        model = initialize_finetune_model(model_cfg, cfg, init_ckpt)
        return run_finetuning(
            model, trajectories, cfg, out_dir,
            data_root=config.get("data_root"), init_checkpoint=init_ckpt,
        )
    raise ValueError(f"unknown run kind {config.get('kind')!r}")
