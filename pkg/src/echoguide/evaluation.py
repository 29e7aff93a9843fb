"""Measurements: guidance MAE tables, probes, retrieval grids, latency.

Evaluation is read-only and deterministic: anchors are evenly spaced over
each scan, histories are built with segment-center sampling, and under the
bidirectional protocol every history is drawn from the leakage-filtered
remainder of the scan (instrumented: the report counts violations, which must
be zero). Predictors share one small interface so learned models, the
constant-zero baseline, and the ground-truth oracle are interchangeable.
"""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from echoguide.nets import GuidanceModel
from echoguide.pose import (
    Action,
    Pose,
    apply_action,
    normalize_angle,
    pose_distance_many,
)
from echoguide.sequencing import (
    InsufficientHistoryError,
    SamplingConfig,
    SequenceSample,
    build_eval_sequence,
    leakage_filter,
)
from echoguide.store import PLANE_IDS, PLANE_NAMES, Trajectory, guidance_ground_truth


def mae(pred: Action | np.ndarray, gt: Action | np.ndarray) -> tuple[float, float]:
    """(translation MAE, rotation MAE); rotation on shortest signed differences."""
    p = pred.as_array() if isinstance(pred, Action) else np.asarray(pred, dtype=np.float64)
    g = gt.as_array() if isinstance(gt, Action) else np.asarray(gt, dtype=np.float64)
    if p.shape != (6,) or g.shape != (6,):
        raise ValueError("mae expects 6-vectors")
    trans = float(np.abs(p[:3] - g[:3]).mean())
    rot = float(np.mean([abs(normalize_angle(a - b)) for a, b in zip(p[3:], g[3:])]))
    return trans, rot


@dataclass
class EvalConfig:
    protocol: str = "bi"  # single_frame | uni | bi
    seq_len: int = 6
    strategy: str = "segmental"
    anchors_per_scan: int = 50
    leakage_tau: float = 5.0

    def __post_init__(self) -> None:
        if self.protocol not in ("single_frame", "uni", "bi"):
            raise ValueError(f"unknown evaluation protocol {self.protocol!r}")


@dataclass
class EvalItem:
    """One prepared (anchor, target plane) evaluation pair."""

    g: int
    gt: np.ndarray                      # (6,)
    sample: SequenceSample | None = None  # sequence protocols
    image: np.ndarray | None = None       # single-frame protocol


class Predictor:
    """Maps prepared evaluation items to predicted 6-DOF actions."""

    def predict(self, items: list[EvalItem]) -> np.ndarray:
        raise NotImplementedError


class ZeroPredictor(Predictor):
    """Constant-zero baseline; its MAE equals the mean |ground truth|."""

    def predict(self, items: list[EvalItem]) -> np.ndarray:
        return np.zeros((len(items), 6))


class OraclePredictor(Predictor):
    """Returns the ground truth; upper bound used by harness checks."""

    def predict(self, items: list[EvalItem]) -> np.ndarray:
        return np.stack([item.gt for item in items]) if items else np.zeros((0, 6))


def predict_planes_sequence(
    model: GuidanceModel, samples: list[SequenceSample], batch_size: int = 256
) -> np.ndarray:
    """All ten plane predictions for each sequence sample, (N, 10, 6)."""
    model.eval()
    out = np.zeros((len(samples), len(PLANE_IDS), 6))
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo : lo + batch_size]
            images = torch.from_numpy(np.stack([s.images for s in chunk])).float()
            actions = torch.from_numpy(np.stack([s.actions for s in chunk])).float()
            anchor_pos = torch.tensor([s.anchor_pos for s in chunk], dtype=torch.long)
            query = model.guidance_query_output(images, actions, anchor_pos)
            for gi, g in enumerate(PLANE_IDS):
                out[lo : lo + len(chunk), gi] = model.predict_guidance(query, g).numpy()
    return out


def predict_planes_single_frame(
    model: GuidanceModel, images: np.ndarray, batch_size: int = 512
) -> np.ndarray:
    """All ten plane predictions from lone frames, (N, 10, 6)."""
    model.eval()
    images = np.asarray(images, dtype=np.float32)
    out = np.zeros((images.shape[0], len(PLANE_IDS), 6))
    with torch.no_grad():
        for lo in range(0, images.shape[0], batch_size):
            chunk = torch.from_numpy(images[lo : lo + batch_size])
            pooled = model.single_frame_features(chunk)
            for gi, g in enumerate(PLANE_IDS):
                out[lo : lo + chunk.shape[0], gi] = model.predict_guidance(pooled, g).numpy()
    return out


class ModelPredictor(Predictor):
    """Runs a GuidanceModel on prepared items, batching internally."""

    def __init__(self, model: GuidanceModel) -> None:
        self.model = model

    def predict(self, items: list[EvalItem]) -> np.ndarray:
        out = np.zeros((len(items), 6))
        seq_idx = [i for i, item in enumerate(items) if item.sample is not None]
        frame_idx = [i for i, item in enumerate(items) if item.sample is None]
        if seq_idx:
            preds = predict_planes_sequence(self.model, [items[i].sample for i in seq_idx])
            for row, i in enumerate(seq_idx):
                out[i] = preds[row, items[i].g - 1]
        if frame_idx:
            preds = predict_planes_single_frame(
                self.model, np.stack([items[i].image for i in frame_idx])
            )
            for row, i in enumerate(frame_idx):
                out[i] = preds[row, items[i].g - 1]
        return out


@dataclass
class PlaneStats:
    trans_sum: float = 0.0
    rot_sum: float = 0.0
    count: int = 0

    @property
    def trans_mae(self) -> float:
        return self.trans_sum / self.count if self.count else float("nan")

    @property
    def rot_mae(self) -> float:
        return self.rot_sum / self.count if self.count else float("nan")


@dataclass
class GuidanceReport:
    protocol: str
    model_id: str
    per_plane: dict[int, PlaneStats] = field(default_factory=dict)
    skipped: int = 0
    leakage_violations: int = 0

    @property
    def trans_avg(self) -> float:
        return float(np.mean([self.per_plane[g].trans_mae for g in PLANE_IDS]))

    @property
    def rot_avg(self) -> float:
        return float(np.mean([self.per_plane[g].rot_mae for g in PLANE_IDS]))

    @property
    def total_pairs(self) -> int:
        return sum(s.count for s in self.per_plane.values())

    def to_rows(self) -> list[dict]:
        rows = [
            {
                "plane": PLANE_NAMES[g],
                "trans_mae": self.per_plane[g].trans_mae,
                "rot_mae": self.per_plane[g].rot_mae,
                "count": self.per_plane[g].count,
            }
            for g in PLANE_IDS
        ]
        rows.append(
            {
                "plane": "Average",
                "trans_mae": self.trans_avg,
                "rot_mae": self.rot_avg,
                "count": self.total_pairs,
            }
        )
        return rows

    def to_csv(self, path) -> None:
        lines = ["plane,trans_mae,rot_mae,count"]
        for row in self.to_rows():
            lines.append(
                f"{row['plane']},{row['trans_mae']:.6f},{row['rot_mae']:.6f},{row['count']}"
            )
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def format_table(self) -> str:
        header = (
            f"model: {self.model_id}  protocol: {self.protocol}  "
            f"pairs: {self.total_pairs}  skipped: {self.skipped}  "
            f"leakage_violations: {self.leakage_violations}"
        )
        lines = [header, f"{'plane':<12}{'trans (mm)':>12}{'rot (deg)':>12}{'count':>8}"]
        for row in self.to_rows():
            lines.append(
                f"{row['plane']:<12}{row['trans_mae']:>12.3f}{row['rot_mae']:>12.3f}"
                f"{row['count']:>8}"
            )
        return "\n".join(lines)


def evenly_spaced_anchors(num_frames: int, count: int) -> np.ndarray:
    """Deterministic evaluation anchors covering the scan."""
    return np.unique(np.linspace(0, num_frames - 1, count).round().astype(int))


def prepare_eval_items(
    traj: Trajectory, cfg: EvalConfig
) -> tuple[list[EvalItem], int, int]:
    """Build every feasible (anchor, plane) item for one scan.

    Returns (items, skipped, leakage_violations). Under the bidirectional
    protocol anchors that fall inside a plane's leakage zone are skipped, and
    every built history is audited against the allowed set.
    """
    anchors = evenly_spaced_anchors(traj.num_frames, cfg.anchors_per_scan)
    sampling = SamplingConfig(
        protocol="unidirectional" if cfg.protocol == "uni" else "bidirectional",
        strategy=cfg.strategy,
        mode="eval",
        seq_len=cfg.seq_len,
    )
    items: list[EvalItem] = []
    skipped = 0
    violations = 0
    for g in PLANE_IDS:
        allowed: set[int] | None = None
        if cfg.protocol == "bi":
            try:
                allowed = set(leakage_filter(traj, g, cfg.leakage_tau).tolist())
            except InsufficientHistoryError:
                skipped += len(anchors)
                continue
        for anchor in anchors:
            anchor = int(anchor)
            gt = guidance_ground_truth(traj, anchor, g).as_array()
            if cfg.protocol == "single_frame":
                items.append(EvalItem(g=g, gt=gt, image=traj.image(anchor)))
                continue
            if cfg.protocol == "bi" and anchor not in allowed:
                skipped += 1
                continue
            try:
                sample = build_eval_sequence(
                    traj, anchor, g, sampling, leakage_threshold=cfg.leakage_tau
                )
            except InsufficientHistoryError:
                skipped += 1
                continue
            if allowed is not None:
                history = [int(t) for t in sample.frame_indices if int(t) != anchor]
                violations += sum(1 for t in history if t not in allowed)
            items.append(EvalItem(g=g, gt=gt, sample=sample))
    return items, skipped, violations


def evaluate_guidance(
    predictor: Predictor,
    trajectories: list[Trajectory],
    cfg: EvalConfig,
    model_id: str = "model",
) -> GuidanceReport:
    """Per-plane MAE over deterministic anchors; byte-stable across calls."""
    if not trajectories:
        raise ValueError("empty evaluation split")
    report = GuidanceReport(protocol=cfg.protocol, model_id=model_id)
    report.per_plane = {g: PlaneStats() for g in PLANE_IDS}
    for traj in trajectories:
        items, skipped, violations = prepare_eval_items(traj, cfg)
        report.skipped += skipped
        report.leakage_violations += violations
        if not items:
            continue
        preds = predictor.predict(items)
        for item, pred in zip(items, preds):
            trans, rot = mae(pred, item.gt)
            stats = report.per_plane[item.g]
            stats.trans_sum += trans
            stats.rot_sum += rot
            stats.count += 1
    return report


# ---------------------------------------------------------------------------
# Identity probe
# ---------------------------------------------------------------------------


class FeatureExtractor:
    """Frozen per-input features used by the identity probe."""

    def features(self, traj: Trajectory, anchors: list[int]) -> np.ndarray:
        raise NotImplementedError


class SequenceFeatureExtractor(FeatureExtractor):
    """Query-token representation of a deterministic bidirectional sequence."""

    def __init__(self, model: GuidanceModel, seq_len: int = 6) -> None:
        self.model = model
        self.sampling = SamplingConfig(
            protocol="bidirectional", strategy="segmental", mode="eval", seq_len=seq_len
        )

    def features(self, traj: Trajectory, anchors: list[int]) -> np.ndarray:
        from echoguide.sequencing import build_sequence, interval_indices, sampling_interval, segmental_sample

        samples = []
        for anchor in anchors:
            intervals = sampling_interval(
                traj.num_frames, anchor, "bidirectional", count=self.sampling.seq_len - 1
            )
            candidates = interval_indices(intervals)
            history = segmental_sample(candidates, self.sampling.seq_len - 1, mode="eval")
            samples.append(build_sequence(traj, history, anchor))
        self.model.eval()
        with torch.no_grad():
            images = torch.from_numpy(np.stack([s.images for s in samples])).float()
            actions = torch.from_numpy(np.stack([s.actions for s in samples])).float()
            anchor_pos = torch.tensor([s.anchor_pos for s in samples], dtype=torch.long)
            query = self.model.guidance_query_output(images, actions, anchor_pos)
        return query.numpy()


class SingleFrameFeatureExtractor(FeatureExtractor):
    """Pooled vision feature of the anchor frame."""

    def __init__(self, model: GuidanceModel) -> None:
        self.model = model

    def features(self, traj: Trajectory, anchors: list[int]) -> np.ndarray:
        self.model.eval()
        with torch.no_grad():
            images = torch.from_numpy(
                np.stack([traj.image(a) for a in anchors])
            ).float()
            pooled = self.model.single_frame_features(images)
        return pooled.numpy()


@dataclass
class ProbeReport:
    accuracy: float
    curve: list[dict] = field(default_factory=list)
    n_train_pairs: int = 0
    n_test_pairs: int = 0


def identity_probe(
    extractor: FeatureExtractor,
    trajectories: list[Trajectory],
    n_pairs: int = 512,
    seed: int = 0,
    steps: int = 500,
    lr: float = 1e-3,
) -> ProbeReport:
    """Same-subject vs different-subject linear probe on frozen features.

    Balanced pair sampling, fixed small training budget so accuracies are
    comparable across models; reports held-out accuracy.
    """
    subjects: dict[str, list[Trajectory]] = {}
    for traj in trajectories:
        subjects.setdefault(traj.subject_id, []).append(traj)
    if len(subjects) < 2:
        raise ValueError("identity probe needs at least 2 subjects")

    rng = np.random.default_rng(seed)
    ids = sorted(subjects)

    feats: dict[str, np.ndarray] = {}
    per_subject = max(8, (4 * n_pairs) // len(ids))
    for sid in ids:
        traj = subjects[sid][0]
        anchors = rng.integers(0, traj.num_frames, per_subject).tolist()
        feats[sid] = extractor.features(traj, anchors)

    def draw_pairs(count: int) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for i in range(count):
            same = i % 2 == 0
            if same:
                sid = ids[int(rng.integers(0, len(ids)))]
                a, b = rng.integers(0, len(feats[sid]), 2)
                xs.append(np.abs(feats[sid][a] - feats[sid][b]))
            else:
                ia, ib = rng.choice(len(ids), size=2, replace=False)
                a = int(rng.integers(0, len(feats[ids[ia]])))
                b = int(rng.integers(0, len(feats[ids[ib]])))
                xs.append(np.abs(feats[ids[ia]][a] - feats[ids[ib]][b]))
            ys.append(1.0 if same else 0.0)
        return np.stack(xs), np.array(ys)

    x_train, y_train = draw_pairs(n_pairs)
    x_test, y_test = draw_pairs(n_pairs)

    torch.manual_seed(seed)
    head = torch.nn.Linear(x_train.shape[1], 1)
    optimizer = torch.optim.Adam(head.parameters(), lr=lr)
    xt = torch.from_numpy(x_train).float()
    yt = torch.from_numpy(y_train).float()
    curve = []
    for step in range(steps):
        logits = head(xt).squeeze(-1)
        loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, yt)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % 50 == 0 or step == steps - 1:
            curve.append({"step": step, "loss": float(loss.detach())})
    with torch.no_grad():
        test_logits = head(torch.from_numpy(x_test).float()).squeeze(-1)
        accuracy = float(((test_logits > 0).float().numpy() == y_test).mean())
    return ProbeReport(
        accuracy=accuracy, curve=curve, n_train_pairs=len(y_train), n_test_pairs=len(y_test)
    )


# ---------------------------------------------------------------------------
# Phase robustness
# ---------------------------------------------------------------------------


@dataclass
class PhaseReport:
    mean_abs_diff: float
    per_component: list[float]
    n_pairs: int


def phase_robustness(
    predict_fn,
    trajectories: list[Trajectory],
    subject_lookup,
    n_pairs: int = 500,
    min_phase_gap: float = 0.3,
    seed: int = 0,
    image_size: int = 64,
) -> PhaseReport:
    """Sensitivity of predictions to the anchor frame's cardiac phase.

    For each pair the probe pose and the whole history stay fixed; only the
    anchor image's phase changes (re-rendered through the phantom). predict_fn
    maps (traj, anchor, anchor_image) -> (10, 6) predictions.

    subject_lookup maps subject_id -> PhantomSubject.
    """
    from echoguide.phantom import render

    if not trajectories:
        raise ValueError("empty split")
    if not all(t.has_phase for t in trajectories):
        raise ValueError("phase robustness requires phase-enabled data")

    rng = np.random.default_rng(seed)
    diffs = np.zeros((n_pairs, 6))
    for i in range(n_pairs):
        traj = trajectories[int(rng.integers(0, len(trajectories)))]
        subject = subject_lookup(traj.subject_id)
        anchor = int(rng.integers(0, traj.num_frames))
        pose = traj.pose(anchor)
        phase_a = float(rng.uniform(0, 1))
        gap = float(rng.uniform(min_phase_gap, 1.0 - min_phase_gap))
        phase_b = (phase_a + gap) % 1.0
        noise_seed = int(rng.integers(0, 2**31 - 1))
        img_a = render(subject, pose, phase_a, noise_seed, image_size).astype(np.float32)
        img_b = render(subject, pose, phase_b, noise_seed, image_size).astype(np.float32)
        pred_a = predict_fn(traj, anchor, img_a)
        pred_b = predict_fn(traj, anchor, img_b)
        diffs[i] = np.abs(pred_a - pred_b).mean(axis=0)  # mean over the ten planes
    per_component = diffs.mean(axis=0)
    return PhaseReport(
        mean_abs_diff=float(per_component.mean()),
        per_component=[float(v) for v in per_component],
        n_pairs=n_pairs,
    )


def sequence_phase_predict_fn(model: GuidanceModel, seq_len: int = 6):
    """predict_fn for phase_robustness: fixed history, swapped anchor image."""
    sampling = SamplingConfig(
        protocol="bidirectional", strategy="segmental", mode="eval", seq_len=seq_len
    )
    from echoguide.sequencing import build_sequence, interval_indices, sampling_interval, segmental_sample

    def predict(traj: Trajectory, anchor: int, anchor_image: np.ndarray) -> np.ndarray:
        intervals = sampling_interval(
            traj.num_frames, anchor, "bidirectional", count=seq_len - 1
        )
        history = segmental_sample(interval_indices(intervals), seq_len - 1, mode="eval")
        sample = build_sequence(traj, history, anchor)
        sample.images = sample.images.copy()
        sample.images[sample.anchor_pos] = anchor_image
        return predict_planes_sequence(model, [sample])[0]

    return predict


def single_frame_phase_predict_fn(model: GuidanceModel):
    def predict(traj: Trajectory, anchor: int, anchor_image: np.ndarray) -> np.ndarray:
        return predict_planes_single_frame(model, anchor_image[None])[0]

    return predict


# ---------------------------------------------------------------------------
# Retrieval visualization
# ---------------------------------------------------------------------------


def retrieval_visualization(
    predictor: Predictor,
    traj: Trajectory,
    anchor: int,
    g: int,
    cfg: EvalConfig,
    out_path,
) -> dict:
    """Write an (anchor | retrieved | ground-truth plane) grid image.

    The predicted pose is the anchor pose advanced by the predicted action;
    the retrieved frame minimizes pose distance to it within the same scan.
    """
    from PIL import Image

    gt = guidance_ground_truth(traj, anchor, g).as_array()
    if cfg.protocol == "single_frame":
        item = EvalItem(g=g, gt=gt, image=traj.image(anchor))
    else:
        sampling = SamplingConfig(
            protocol="unidirectional" if cfg.protocol == "uni" else "bidirectional",
            strategy=cfg.strategy,
            mode="eval",
            seq_len=cfg.seq_len,
        )
        sample = build_eval_sequence(traj, anchor, g, sampling, cfg.leakage_tau)
        item = EvalItem(g=g, gt=gt, sample=sample)
    action = predictor.predict([item])[0]
    predicted_pose = apply_action(traj.pose(anchor), Action.from_array(action))
    dists = pose_distance_many(traj.poses_array, predicted_pose)
    retrieved = int(np.argmin(dists))

    t_g = traj.plane_annotations[g]
    panels = [traj.images_u8[anchor], traj.images_u8[retrieved], traj.images_u8[t_g]]
    sep = np.full((panels[0].shape[0], 2), 255, dtype=np.uint8)
    grid = np.hstack([panels[0], sep, panels[1], sep, panels[2]])
    Image.fromarray(grid, mode="L").save(out_path)
    return {
        "anchor": anchor,
        "retrieved": retrieved,
        "annotated": t_g,
        "plane": PLANE_NAMES[g],
        "path": str(out_path),
    }


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------


@dataclass
class LatencyReport:
    mean_ms: float
    std_ms: float
    n_iters: int
    seq_len: int
    hardware: str


def latency_bench(
    model: GuidanceModel, seq_len: int = 6, n_iters: int = 100, warmup: int = 10
) -> LatencyReport:
    """Wall-clock per single-sequence guidance inference."""
    if n_iters <= 0:
        raise ValueError("n_iters must be positive")
    model.eval()
    size = model.cfg.image_size
    torch.manual_seed(0)
    images = torch.rand(1, seq_len, size, size)
    actions = torch.randn(1, seq_len - 1, 6)
    anchor_pos = torch.tensor([seq_len - 1])
    with torch.no_grad():
        for _ in range(warmup):
            query = model.guidance_query_output(images, actions, anchor_pos)
            model.predict_guidance(query, 1)
        times = []
        for _ in range(n_iters):
            t0 = time.perf_counter()
            query = model.guidance_query_output(images, actions, anchor_pos)
            for g in PLANE_IDS:
                model.predict_guidance(query, g)
            times.append((time.perf_counter() - t0) * 1000.0)
    return LatencyReport(
        mean_ms=float(np.mean(times)),
        std_ms=float(np.std(times)),
        n_iters=n_iters,
        seq_len=seq_len,
        hardware=f"{platform.platform()} / {platform.processor() or 'unknown-cpu'}",
    )
