import numpy as np
import pytest
import torch

from echoguide.evaluation import (
    EvalConfig,
    EvalItem,
    FeatureExtractor,
    ModelPredictor,
    OraclePredictor,
    SequenceFeatureExtractor,
    SingleFrameFeatureExtractor,
    ZeroPredictor,
    evaluate_guidance,
    evenly_spaced_anchors,
    identity_probe,
    latency_bench,
    mae,
    phase_robustness,
    retrieval_visualization,
    single_frame_phase_predict_fn,
)
from echoguide.nets import GuidanceModel, ModelConfig
from echoguide.pose import normalize_angle
from echoguide.store import PLANE_IDS, Trajectory

TINY_MODEL = ModelConfig(
    image_size=32, patch_size=8, vision_width=64, vision_depth=2, vision_heads=2,
    seq_width=64, seq_depth=2, seq_heads=2, max_seq_len=8,
)


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    m = GuidanceModel(TINY_MODEL)
    m.eval()
    return m


def brute_force_zero_mae(trajectories, cfg):
    """Independent single-pass MAE of the constant-zero predictor."""
    from echoguide.pose import pose_distance_many
    from echoguide.store import guidance_ground_truth

    sums = {g: [0.0, 0.0, 0] for g in PLANE_IDS}
    for traj in trajectories:
        anchors = np.unique(
            np.linspace(0, traj.num_frames - 1, cfg.anchors_per_scan).round().astype(int)
        )
        for g in PLANE_IDS:
            t_g = traj.plane_annotations[g]
            dists = pose_distance_many(traj.poses_array, traj.pose(t_g))
            allowed = set(np.flatnonzero(dists >= cfg.leakage_tau).tolist()) - {t_g}
            for anchor in anchors:
                anchor = int(anchor)
                if cfg.protocol == "bi":
                    if anchor not in allowed:
                        continue
                    if len(allowed - {anchor}) < cfg.seq_len - 1:
                        continue
                elif cfg.protocol == "uni":
                    side = anchor if t_g >= anchor else traj.num_frames - 1 - anchor
                    if side < cfg.seq_len - 1:
                        continue
                gt = guidance_ground_truth(traj, anchor, g).as_array()
                trans = np.abs(gt[:3]).mean()
                rot = np.mean([abs(normalize_angle(v)) for v in gt[3:]])
                sums[g][0] += trans
                sums[g][1] += rot
                sums[g][2] += 1
    per_plane = {g: (s[0] / s[2], s[1] / s[2]) for g, s in sums.items()}
    trans_avg = float(np.mean([v[0] for v in per_plane.values()]))
    rot_avg = float(np.mean([v[1] for v in per_plane.values()]))
    return per_plane, trans_avg, rot_avg


class TestMae:
    def test_hand_example(self):
        trans, rot = mae(np.array([1, 1, 1, 2, 2, 2.0]), np.zeros(6))
        assert trans == pytest.approx(1.0)
        assert rot == pytest.approx(2.0)

    def test_exact_prediction(self):
        v = np.array([3, -1, 2, 10, -20, 30.0])
        assert mae(v, v) == (0.0, 0.0)

    def test_wraparound(self):
        pred = np.array([0, 0, 0, 179.0, 0, 0])
        gt = np.array([0, 0, 0, -179.0, 0, 0])
        trans, rot = mae(pred, gt)
        assert rot == pytest.approx(2.0 / 3.0)


class TestEvaluateGuidance:
    def test_oracle_is_perfect(self, tiny_trajs):
        cfg = EvalConfig(protocol="bi", seq_len=4, anchors_per_scan=8)
        report = evaluate_guidance(OraclePredictor(), tiny_trajs, cfg)
        assert report.trans_avg == pytest.approx(0.0, abs=1e-12)
        assert report.rot_avg == pytest.approx(0.0, abs=1e-12)
        assert report.total_pairs > 0

    @pytest.mark.parametrize("protocol", ["single_frame", "uni", "bi"])
    def test_zero_model_matches_brute_force(self, tiny_trajs, protocol):
        cfg = EvalConfig(protocol=protocol, seq_len=4, anchors_per_scan=8)
        report = evaluate_guidance(ZeroPredictor(), tiny_trajs, cfg)
        per_plane, trans_avg, rot_avg = brute_force_zero_mae(tiny_trajs, cfg)
        assert report.trans_avg == pytest.approx(trans_avg, abs=1e-9)
        assert report.rot_avg == pytest.approx(rot_avg, abs=1e-9)
        for g in PLANE_IDS:
            assert report.per_plane[g].trans_mae == pytest.approx(per_plane[g][0], abs=1e-9)

    def test_repeat_invocation_identical(self, tiny_trajs, tiny_model):
        cfg = EvalConfig(protocol="bi", seq_len=4, anchors_per_scan=6)
        predictor = ModelPredictor(tiny_model)
        a = evaluate_guidance(predictor, tiny_trajs, cfg)
        b = evaluate_guidance(predictor, tiny_trajs, cfg)
        for g in PLANE_IDS:
            assert a.per_plane[g].trans_mae == b.per_plane[g].trans_mae
            assert a.per_plane[g].rot_mae == b.per_plane[g].rot_mae

    def test_averages_are_plane_means(self, tiny_trajs):
        cfg = EvalConfig(protocol="bi", seq_len=4, anchors_per_scan=8)
        report = evaluate_guidance(ZeroPredictor(), tiny_trajs, cfg)
        assert report.trans_avg == pytest.approx(
            np.mean([report.per_plane[g].trans_mae for g in PLANE_IDS])
        )

    def test_no_leakage_violations(self, tiny_trajs, tiny_model):
        cfg = EvalConfig(protocol="bi", seq_len=4, anchors_per_scan=10)
        report = evaluate_guidance(ModelPredictor(tiny_model), tiny_trajs, cfg)
        assert report.leakage_violations == 0

    def test_rotation_mae_invariant_to_360_shifts(self, tiny_trajs):
        traj = tiny_trajs[0]
        shifted_poses = traj.poses_array.copy()
        shifted_poses[:, 5] += 360.0
        shifted = Trajectory(
            traj.subject_id,
            traj.images_u8.copy(),
            shifted_poses,
            traj.phases.copy(),
            dict(traj.plane_annotations),
            scan_name=traj.scan_name,
        )
        cfg = EvalConfig(protocol="bi", seq_len=4, anchors_per_scan=6)
        a = evaluate_guidance(ZeroPredictor(), [traj], cfg)
        b = evaluate_guidance(ZeroPredictor(), [shifted], cfg)
        assert a.rot_avg == pytest.approx(b.rot_avg, abs=1e-9)
        assert a.trans_avg == pytest.approx(b.trans_avg, abs=1e-9)

    def test_report_outputs(self, tiny_trajs, tmp_path):
        cfg = EvalConfig(protocol="bi", seq_len=4, anchors_per_scan=6)
        report = evaluate_guidance(ZeroPredictor(), tiny_trajs, cfg)
        report.to_csv(tmp_path / "report.csv")
        lines = (tmp_path / "report.csv").read_text().splitlines()
        assert lines[0] == "plane,trans_mae,rot_mae,count"
        assert len(lines) == 12  # header + 10 planes + average
        table = report.format_table()
        assert "Average" in table and "PLAX" in table

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError):
            evaluate_guidance(ZeroPredictor(), [], EvalConfig())


class TestAnchors:
    def test_evenly_spaced_deterministic(self):
        a = evenly_spaced_anchors(260, 10)
        b = evenly_spaced_anchors(260, 10)
        assert np.array_equal(a, b)
        assert a[0] == 0 and a[-1] == 259


class _OneHotExtractor(FeatureExtractor):
    def __init__(self, ids):
        self.index = {sid: i for i, sid in enumerate(sorted(ids))}

    def features(self, traj, anchors):
        out = np.zeros((len(anchors), len(self.index) + 1))
        out[:, self.index[traj.subject_id]] = 1.0
        return out


class _NoiseExtractor(FeatureExtractor):
    def __init__(self):
        self.rng = np.random.default_rng(123)

    def features(self, traj, anchors):
        return self.rng.standard_normal((len(anchors), 16))


class TestIdentityProbe:
    def test_one_hot_features_reach_perfect_accuracy(self, tiny_trajs):
        ids = [t.subject_id for t in tiny_trajs]
        report = identity_probe(_OneHotExtractor(ids), tiny_trajs, n_pairs=256, seed=0)
        assert report.accuracy > 0.95

    def test_subject_independent_features_are_chance(self, tiny_trajs):
        report = identity_probe(_NoiseExtractor(), tiny_trajs, n_pairs=1000, seed=1)
        assert abs(report.accuracy - 0.5) < 0.06

    def test_needs_two_subjects(self, tiny_trajs):
        with pytest.raises(ValueError):
            identity_probe(_NoiseExtractor(), tiny_trajs[:1], n_pairs=64)

    def test_model_extractors_run(self, tiny_trajs, tiny_model):
        seq = SequenceFeatureExtractor(tiny_model, seq_len=4)
        single = SingleFrameFeatureExtractor(tiny_model)
        f1 = seq.features(tiny_trajs[0], [50, 100])
        f2 = single.features(tiny_trajs[0], [50, 100])
        assert f1.shape == (2, TINY_MODEL.seq_width)
        assert f2.shape == (2, TINY_MODEL.seq_width)


class TestPhaseRobustness:
    def test_image_blind_model_has_zero_difference(self, tiny_trajs):
        from echoguide import phantom

        seeds = {t.subject_id: 200 + i for i, t in enumerate(tiny_trajs)}

        def constant_fn(traj, anchor, image):
            return np.ones((10, 6))

        report = phase_robustness(
            constant_fn,
            tiny_trajs,
            lambda sid: phantom.sample_subject(seeds[sid]),
            n_pairs=20,
            seed=3,
            image_size=32,
        )
        assert report.mean_abs_diff == 0.0

    def test_single_frame_model_sensitive(self, tiny_trajs, tiny_model):
        from echoguide import phantom

        seeds = {t.subject_id: 200 + i for i, t in enumerate(tiny_trajs)}
        report = phase_robustness(
            single_frame_phase_predict_fn(tiny_model),
            tiny_trajs,
            lambda sid: phantom.sample_subject(seeds[sid]),
            n_pairs=10,
            seed=4,
            image_size=32,
        )
        assert report.mean_abs_diff >= 0.0
        assert len(report.per_component) == 6

    def test_requires_phase(self, tiny_trajs):
        traj = tiny_trajs[0]
        no_phase = Trajectory(
            traj.subject_id,
            traj.images_u8.copy(),
            traj.poses_array.copy(),
            np.zeros(traj.num_frames),
            dict(traj.plane_annotations),
            scan_name=traj.scan_name,
            has_phase=False,
        )
        with pytest.raises(ValueError, match="phase"):
            phase_robustness(lambda *a: np.zeros((10, 6)), [no_phase], lambda sid: None)


class TestRetrieval:
    def test_oracle_retrieves_annotated_frame(self, tiny_trajs, tmp_path):
        traj = tiny_trajs[0]
        cfg = EvalConfig(protocol="bi", seq_len=4, anchors_per_scan=8)
        out = tmp_path / "grid.png"
        result = retrieval_visualization(OraclePredictor(), traj, 40, 7, cfg, out)
        assert result["retrieved"] == result["annotated"]
        from PIL import Image

        with Image.open(out) as img:
            assert img.size == (32 * 3 + 4, 32)

    def test_retrieved_minimizes_pose_distance(self, tiny_trajs, tiny_model, tmp_path):
        from echoguide.pose import Action, apply_action, pose_distance

        traj = tiny_trajs[1]
        cfg = EvalConfig(protocol="bi", seq_len=4, anchors_per_scan=8)
        predictor = ModelPredictor(tiny_model)
        result = retrieval_visualization(predictor, traj, 60, 3, cfg, tmp_path / "g.png")
        # brute-force: recompute the prediction and scan every frame
        from echoguide.evaluation import prepare_eval_items

        items = [
            i
            for i in prepare_eval_items(traj, cfg)[0]
            if i.g == 3 and i.sample is not None and i.sample.anchor == 60
        ]
        if items:
            action = predictor.predict(items)[0]
            target = apply_action(traj.pose(60), Action.from_array(action))
            best = min(
                range(traj.num_frames), key=lambda t: pose_distance(traj.pose(t), target)
            )
            assert result["retrieved"] == best


class TestLatency:
    def test_zero_iters_rejected(self, tiny_model):
        with pytest.raises(ValueError):
            latency_bench(tiny_model, n_iters=0)

    def test_reports_positive_mean(self, tiny_model):
        report = latency_bench(tiny_model, seq_len=4, n_iters=5, warmup=1)
        assert report.mean_ms > 0
        assert report.hardware
