import json

import numpy as np
import pytest
import torch

from echoguide.nets import GuidanceModel, ModelConfig
from echoguide.training import (
    FinetuneConfig,
    PretrainConfig,
    RunManifest,
    SequenceBatch,
    build_finetune_batch,
    build_pretrain_batch,
    build_pretrain_model,
    ema_decay_at,
    finetune_param_groups,
    finetune_step,
    initialize_finetune_model,
    layerwise_scale,
    lr_schedule,
    pretrain_step,
    resume_pretraining,
    rerun_from_manifest,
    run_finetuning,
    run_pretraining,
    smooth_l1,
)

TINY_MODEL = ModelConfig(
    image_size=32, patch_size=8, vision_width=64, vision_depth=2, vision_heads=2,
    seq_width=64, seq_depth=2, seq_heads=2, max_seq_len=8,
)


def tiny_pretrain_cfg(**kw):
    base = dict(
        epochs=2, warmup_epochs=1, batch_size=8, samples_per_epoch=32, seq_len=4, seed=5
    )
    base.update(kw)
    return PretrainConfig(**base)


def tiny_finetune_cfg(**kw):
    base = dict(
        epochs=1, batch_size=8, samples_per_epoch=32, seq_len=4, seed=5, protocol="bi"
    )
    base.update(kw)
    return FinetuneConfig(**base)


class TestSmoothL1:
    def test_zero_difference(self):
        x = torch.randn(4, 6)
        assert smooth_l1(x, x).item() == 0.0

    def test_quadratic_region(self):
        pred, target = torch.tensor([0.5]), torch.tensor([0.0])
        assert smooth_l1(pred, target).item() == pytest.approx(0.125)

    def test_linear_region(self):
        pred, target = torch.tensor([2.0]), torch.tensor([0.0])
        assert smooth_l1(pred, target).item() == pytest.approx(1.5)

    def test_empty_is_zero(self):
        assert smooth_l1(torch.zeros(0, 6), torch.zeros(0, 6)).item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            smooth_l1(torch.zeros(2), torch.zeros(3))


class TestSchedules:
    def test_warmup_starts_at_zero(self):
        assert lr_schedule(0, 100, 10, 1e-3) == 0.0

    def test_warmup_end_reaches_base(self):
        assert lr_schedule(10, 100, 10, 1e-3) == pytest.approx(1e-3)

    def test_cosine_end_near_zero(self):
        assert lr_schedule(99, 100, 10, 1e-3) < 1e-5

    def test_layerwise_scale(self):
        assert layerwise_scale(4, 4, 0.4) == pytest.approx(1.0)
        assert layerwise_scale(3, 4, 0.4) == pytest.approx(0.4)
        assert layerwise_scale(0, 4, 0.4) == pytest.approx(0.4**4)

    def test_ema_decay_linear(self):
        assert ema_decay_at(0, 11, 0.9, 1.0) == pytest.approx(0.9)
        assert ema_decay_at(10, 11, 0.9, 1.0) == pytest.approx(1.0)
        assert ema_decay_at(5, 11, 0.9, 1.0) == pytest.approx(0.95)


class TestPretrainStep:
    def test_loss_finite_positive_at_init(self, tiny_trajs):
        model = build_pretrain_model(TINY_MODEL, seed=0)
        cfg = tiny_pretrain_cfg()
        rng = np.random.default_rng(0)
        batch = build_pretrain_batch(tiny_trajs, cfg, 8, rng)
        losses = pretrain_step(model, batch, cfg)
        assert torch.isfinite(losses["total"])
        assert losses["total"].item() > 0.0

    def test_no_masked_actions_gives_zero_action_term(self, tiny_trajs):
        model = build_pretrain_model(TINY_MODEL, seed=0)
        cfg = tiny_pretrain_cfg(mask_type="image")
        rng = np.random.default_rng(1)
        batch = build_pretrain_batch(tiny_trajs, cfg, 8, rng)
        losses = pretrain_step(model, batch, cfg)
        assert losses["action"].item() == 0.0
        assert losses["visual"].item() > 0.0

    def test_mask_type_action_only(self, tiny_trajs):
        model = build_pretrain_model(TINY_MODEL, seed=0)
        cfg = tiny_pretrain_cfg(mask_type="action")
        rng = np.random.default_rng(2)
        batch = build_pretrain_batch(tiny_trajs, cfg, 8, rng)
        losses = pretrain_step(model, batch, cfg)
        assert losses["visual"].item() == 0.0
        assert losses["action"].item() > 0.0

    def test_ema_gradient_absent_after_step(self, tiny_trajs):
        model = build_pretrain_model(TINY_MODEL, seed=0)
        cfg = tiny_pretrain_cfg()
        rng = np.random.default_rng(3)
        batch = build_pretrain_batch(tiny_trajs, cfg, 8, rng)
        losses = pretrain_step(model, batch, cfg)
        losses["total"].backward()
        for p in model.ema_vision.parameters():
            assert p.grad is None
        assert any(
            p.grad is not None and p.grad.abs().sum() > 0 for p in model.vision.parameters()
        )


class TestFinetuneStep:
    def test_perfect_predictions_give_zero_loss(self):
        # with all-zero targets and forcibly zeroed heads, loss must be 0
        model = build_pretrain_model(TINY_MODEL, seed=1)
        with torch.no_grad():
            for head in model.guidance_heads.values():
                for p in head.parameters():
                    p.zero_()
        batch = SequenceBatch(
            images=torch.rand(2, 4, 32, 32),
            actions=torch.randn(2, 3, 6),
            anchor_pos=torch.tensor([3, 3]),
            plane_targets=torch.zeros(2, 10, 6),
            plane_ids=torch.zeros(2, dtype=torch.long),
        )
        loss = finetune_step(model, batch, tiny_finetune_cfg())
        assert loss.item() == 0.0

    def test_bi_averages_ten_heads(self):
        model = build_pretrain_model(TINY_MODEL, seed=2)
        model.eval()
        batch = SequenceBatch(
            images=torch.rand(1, 4, 32, 32),
            actions=torch.randn(1, 3, 6),
            anchor_pos=torch.tensor([3]),
            plane_targets=torch.zeros(1, 10, 6),
            plane_ids=torch.zeros(1, dtype=torch.long),
        )
        cfg = tiny_finetune_cfg()
        scale = model.cfg.action_scale
        with torch.no_grad():
            loss = finetune_step(model, batch, cfg)
            query = model.guidance_query_output(batch.images, batch.actions, batch.anchor_pos)
            per_head = [
                smooth_l1(model.predict_guidance(query, g) / scale, torch.zeros(1, 6))
                for g in range(1, 11)
            ]
        assert loss.item() == pytest.approx(torch.stack(per_head).mean().item(), abs=1e-6)

    def test_anchor_at_annotation_gives_zero_target(self, tiny_trajs):
        traj = tiny_trajs[0]
        g = 5
        t_g = traj.plane_annotations[g]
        from echoguide.store import guidance_ground_truth

        assert np.allclose(guidance_ground_truth(traj, t_g, g).as_array(), 0.0)

    def test_single_frame_uses_only_anchor_image(self):
        model = build_pretrain_model(TINY_MODEL, seed=3)
        model.eval()
        cfg = tiny_finetune_cfg(protocol="single_frame")
        batch = SequenceBatch(
            images=torch.rand(2, 1, 32, 32),
            actions=torch.zeros(2, 0, 6),
            anchor_pos=torch.zeros(2, dtype=torch.long),
            plane_targets=torch.zeros(2, 10, 6),
            plane_ids=torch.zeros(2, dtype=torch.long),
        )
        loss = finetune_step(model, batch, cfg)
        assert torch.isfinite(loss)


class TestBatchBuilders:
    def test_pretrain_batch_shapes(self, tiny_trajs):
        cfg = tiny_pretrain_cfg()
        batch = build_pretrain_batch(tiny_trajs, cfg, 8, np.random.default_rng(0))
        assert batch.images.shape == (8, 4, 32, 32)
        assert batch.actions.shape == (8, 3, 6)
        assert batch.visibility.shape == (8, 7)

    def test_finetune_uni_batch_has_plane_ids(self, tiny_trajs):
        cfg = tiny_finetune_cfg(protocol="uni")
        batch, skipped = build_finetune_batch(tiny_trajs, cfg, 8, np.random.default_rng(1))
        assert batch.plane_ids.min() >= 1
        assert batch.plane_targets.shape == (8, 10, 6)

    def test_single_frame_batch(self, tiny_trajs):
        cfg = tiny_finetune_cfg(protocol="single_frame")
        batch, _ = build_finetune_batch(tiny_trajs, cfg, 4, np.random.default_rng(2))
        assert batch.images.shape == (4, 1, 32, 32)
        assert batch.actions.shape == (4, 0, 6)


class TestLayerwiseGroups:
    def test_uni_vision_groups_decay(self):
        cfg = tiny_finetune_cfg(protocol="uni", freeze_vision=False)
        model = initialize_finetune_model(TINY_MODEL, cfg, None)
        groups = finetune_param_groups(model, cfg)
        scales = [g["lr_scale"] for g in groups]
        assert scales[0] == pytest.approx(0.4**2)  # embeddings, depth 2
        assert scales[1] == pytest.approx(0.4)
        assert scales[2] == pytest.approx(1.0)
        total = sum(len(g["params"]) for g in groups)
        assert total == len([p for p in model.parameters() if p.requires_grad])

    def test_bi_freezes_vision_only_from_checkpoint(self, tmp_path):
        from echoguide.nets import save_checkpoint

        cfg = tiny_finetune_cfg(protocol="bi")
        scratch = initialize_finetune_model(TINY_MODEL, cfg, None)
        assert any(p.requires_grad for p in scratch.vision.parameters())
        donor = build_pretrain_model(TINY_MODEL, seed=9)
        save_checkpoint(donor, tmp_path / "donor.pt")
        warm = initialize_finetune_model(TINY_MODEL, cfg, tmp_path / "donor.pt")
        assert all(not p.requires_grad for p in warm.vision.parameters())
        assert any(p.requires_grad for p in warm.seq_transformer.parameters())


class TestMatchedInitialization:
    def test_scratch_and_pretrained_share_head_init(self, tiny_trajs, tmp_path):
        pre_cfg = tiny_pretrain_cfg(epochs=1, warmup_epochs=0, samples_per_epoch=16)
        model = build_pretrain_model(TINY_MODEL, seed=pre_cfg.seed)
        manifest = run_pretraining(model, tiny_trajs, pre_cfg, tmp_path / "pre")
        ckpt = manifest.latest_checkpoint()

        ft_cfg = tiny_finetune_cfg()
        scratch = initialize_finetune_model(TINY_MODEL, ft_cfg, None)
        warm = initialize_finetune_model(TINY_MODEL, ft_cfg, ckpt)
        for g in range(1, 11):
            for p_a, p_b in zip(
                scratch.guidance_heads[str(g)].parameters(),
                warm.guidance_heads[str(g)].parameters(),
            ):
                assert torch.equal(p_a, p_b)
        # but the encoders differ (pre-trained weights loaded)
        diffs = [
            (a - b).abs().max().item()
            for a, b in zip(scratch.vision.parameters(), warm.vision.parameters())
        ]
        assert max(diffs) > 0


class TestRunLoops:
    def test_pretrain_writes_manifest(self, tiny_trajs, tmp_path):
        cfg = tiny_pretrain_cfg()
        model = build_pretrain_model(TINY_MODEL, seed=cfg.seed)
        manifest = run_pretraining(model, tiny_trajs, cfg, tmp_path / "run")
        metrics = manifest.read_metrics()
        assert len(metrics) == cfg.epochs
        assert all("loss_total" in r for r in metrics)
        assert manifest.checkpoint_path(cfg.epochs - 1).exists()
        snapshot = manifest.read_config()
        assert snapshot["train"]["epochs"] == cfg.epochs
        assert snapshot["tolerance"] == "abs=1e-5"

    def test_identical_runs_reproduce_metrics(self, tiny_trajs, tmp_path):
        cfg = tiny_pretrain_cfg()
        m1 = build_pretrain_model(TINY_MODEL, seed=cfg.seed)
        r1 = run_pretraining(m1, tiny_trajs, cfg, tmp_path / "a").read_metrics()
        m2 = build_pretrain_model(TINY_MODEL, seed=cfg.seed)
        r2 = run_pretraining(m2, tiny_trajs, cfg, tmp_path / "b").read_metrics()
        for a, b in zip(r1, r2):
            assert a["loss_total"] == pytest.approx(b["loss_total"], abs=1e-5)
            assert a["loss_visual"] == pytest.approx(b["loss_visual"], abs=1e-5)

    def test_resume_matches_uninterrupted(self, tiny_trajs, tmp_path):
        cfg = tiny_pretrain_cfg(epochs=3)
        m1 = build_pretrain_model(TINY_MODEL, seed=cfg.seed)
        full = run_pretraining(m1, tiny_trajs, cfg, tmp_path / "full").read_metrics()

        m2 = build_pretrain_model(TINY_MODEL, seed=cfg.seed)
        interrupted = run_pretraining(m2, tiny_trajs, cfg, tmp_path / "resumed")
        # simulate a crash after epoch 1: drop the last checkpoint and metrics
        interrupted.checkpoint_path(2).unlink()
        resumed = resume_pretraining(tmp_path / "resumed", tiny_trajs).read_metrics()
        assert len(resumed) == 3
        assert resumed[2]["loss_total"] == pytest.approx(full[2]["loss_total"], abs=1e-5)

    def test_finetune_writes_manifest(self, tiny_trajs, tmp_path):
        cfg = tiny_finetune_cfg()
        model = initialize_finetune_model(TINY_MODEL, cfg, None)
        manifest = run_finetuning(model, tiny_trajs, cfg, tmp_path / "ft")
        metrics = manifest.read_metrics()
        assert len(metrics) == cfg.epochs
        assert "skipped" in metrics[0]

    def test_rerun_from_manifest_matches(self, tiny_trajs, tmp_path):
        cfg = tiny_pretrain_cfg()
        model = build_pretrain_model(TINY_MODEL, seed=cfg.seed)
        original = run_pretraining(
            model, tiny_trajs, cfg, tmp_path / "orig"
        ).read_metrics()
        replay = rerun_from_manifest(tmp_path / "orig", tmp_path / "replay", tiny_trajs)
        for a, b in zip(original, replay.read_metrics()):
            assert a["loss_total"] == pytest.approx(b["loss_total"], abs=1e-5)


class TestManifest:
    def test_snapshot_round_trip(self, tmp_path):
        config = {"kind": "pretrain", "train": {"epochs": 3}, "model": {}}
        manifest = RunManifest.create(tmp_path / "run", config)
        back = manifest.read_config()
        for key, value in config.items():
            assert back[key] == value
        assert "revision" in back

    def test_metrics_append(self, tmp_path):
        manifest = RunManifest.create(tmp_path / "run", {"kind": "x"})
        manifest.append_metrics({"epoch": 0, "loss": 1.0})
        manifest.append_metrics({"epoch": 1, "loss": 0.5})
        assert [r["epoch"] for r in manifest.read_metrics()] == [0, 1]
