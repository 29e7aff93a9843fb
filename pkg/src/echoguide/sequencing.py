"""Model-ready sequence construction from scan trajectories.

Turns a trajectory plus an anchor frame into the interleaved image/action
stream the sequence model consumes: protocol-dependent sampling intervals
(history on one side of the anchor, or the whole scan), segmental / random /
dense index selection, per-token mask plans for pre-training, and the
evaluation-time leakage filter that keeps near-target frames out of the
history. All sampling is pure given an explicit rng; evaluation mode is fully
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from echoguide.pose import Pose, pose_distance_many, relative_action
from echoguide.store import Trajectory

PROTOCOLS = ("unidirectional", "bidirectional")
STRATEGIES = ("segmental", "random", "dense")
MASK_TYPES = ("both", "image", "action")


class InsufficientHistoryError(Exception):
    """Not enough candidate frames to build the requested sequence."""


@dataclass(frozen=True)
class SamplingConfig:
    protocol: str = "bidirectional"
    strategy: str = "segmental"
    mode: str = "train"
    seq_len: int = 6

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        if self.seq_len < 2:
            raise ValueError(f"seq_len must be >= 2, got {self.seq_len}")


@dataclass
class SequenceSample:
    """Ordered length-L subsequence with the L-1 inter-frame actions.

    `frame_indices` are strictly increasing trajectory timestamps; the anchor
    (the "current plane" frame) sits at `anchor_pos`, which is the last
    position unless history frames later than the anchor were sampled.
    """

    frame_indices: np.ndarray  # (L,) int
    images: np.ndarray        # (L, H, W) float32 in [0, 1]
    poses: np.ndarray         # (L, 6)
    actions: np.ndarray       # (L-1, 6)
    anchor_pos: int

    @property
    def seq_len(self) -> int:
        return len(self.frame_indices)

    @property
    def anchor(self) -> int:
        return int(self.frame_indices[self.anchor_pos])


@dataclass
class MaskPlan:
    """Per-token visibility over the 2L-1 interleaved (image, action) stream.

    Token 2i is image i; token 2i+1 is the action between frames i and i+1.
    """

    visibility: np.ndarray  # (2L-1,) bool, True = visible
    drawn_count: int

    def __post_init__(self) -> None:
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if int((~self.visibility).sum()) != self.drawn_count:
            raise ValueError("drawn_count does not match the number of masked tokens")
        if not self.visibility[0::2].any():
            raise ValueError("at least one image token must stay visible")

    @property
    def num_tokens(self) -> int:
        return len(self.visibility)

    @property
    def image_visible(self) -> np.ndarray:
        return self.visibility[0::2]

    @property
    def action_visible(self) -> np.ndarray:
        return self.visibility[1::2]


def mask_count_bounds(num_tokens: int, ratio_lo: float = 0.3, ratio_hi: float = 0.5) -> tuple[int, int]:
    """Inclusive [lo, hi] masked-token counts realizing the ratio band."""
    lo = int(np.ceil(ratio_lo * num_tokens))
    hi = int(np.floor(ratio_hi * num_tokens))
    return lo, hi


def make_mask_plan(
    seq_len: int,
    rng: np.random.Generator,
    ratio_lo: float = 0.3,
    ratio_hi: float = 0.5,
    mask_type: str = "both",
) -> MaskPlan:
    """Draw a mask plan with the masked fraction inside [ratio_lo, ratio_hi].

    The masked count is uniform over the integer band; positions are uniform
    without replacement over the eligible tokens (both modalities by default,
    restricted for the mask-type ablation). Resampled a bounded number of
    times until at least one image token stays visible.
    """
    if mask_type not in MASK_TYPES:
        raise ValueError(f"mask_type must be one of {MASK_TYPES}, got {mask_type!r}")
    num_tokens = 2 * seq_len - 1
    if num_tokens < 3:
        raise ValueError(f"need at least 3 tokens (L >= 2), got L={seq_len}")
    lo, hi = mask_count_bounds(num_tokens, ratio_lo, ratio_hi)

    if mask_type == "both":
        eligible = np.arange(num_tokens)
        hi_eff = min(hi, num_tokens - 1)
    elif mask_type == "image":
        eligible = np.arange(0, num_tokens, 2)
        hi_eff = min(hi, seq_len - 1)  # one image must survive
    else:
        eligible = np.arange(1, num_tokens, 2)
        hi_eff = min(hi, seq_len - 1)
    if lo > hi_eff or lo < 1:
        raise ValueError(
            f"mask ratio band [{ratio_lo}, {ratio_hi}] with mask_type={mask_type!r} "
            f"admits no valid masked count for L={seq_len}"
        )

    drawn = int(rng.integers(lo, hi_eff + 1))
    for _ in range(100):
        masked = rng.choice(eligible, size=drawn, replace=False)
        visibility = np.ones(num_tokens, dtype=bool)
        visibility[masked] = False
        if visibility[0::2].any():
            return MaskPlan(visibility=visibility, drawn_count=drawn)
    raise ValueError("could not satisfy the visible-image constraint; mask band too wide")


def sampling_interval(
    traj_len: int,
    anchor: int,
    protocol: str,
    target_plane_time: int | None = None,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    count: int | None = None,
) -> list[tuple[int, int]]:
    """Inclusive candidate interval(s) for history sampling around an anchor.

    Unidirectional: the side of the anchor opposite the target plane (past
    history for a later target, future frames for an earlier one); with no
    target (pre-training) a side is drawn uniformly in train mode and the past
    side is used in eval mode. Bidirectional: the whole scan minus the anchor.
    With `count` given, intervals whose total size falls short raise
    InsufficientHistoryError.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    if not 0 <= anchor < traj_len:
        raise ValueError(f"anchor {anchor} outside scan of length {traj_len}")

    if protocol == "bidirectional":
        intervals = [(0, anchor - 1), (anchor + 1, traj_len - 1)]
    else:
        if target_plane_time is not None:
            past = target_plane_time >= anchor
        elif mode == "train" and rng is not None:
            past = bool(rng.integers(0, 2))
        else:
            past = True
        intervals = [(0, anchor - 1)] if past else [(anchor + 1, traj_len - 1)]

    intervals = [(lo, hi) for lo, hi in intervals if hi >= lo]
    total = sum(hi - lo + 1 for lo, hi in intervals)
    if total == 0 or (count is not None and total < count):
        raise InsufficientHistoryError(
            f"anchor {anchor}: {total} candidate frames available, need {count or 1}"
        )
    return intervals


def interval_indices(intervals: list[tuple[int, int]]) -> np.ndarray:
    """Flatten inclusive intervals into one sorted candidate index array."""
    if not intervals:
        return np.empty(0, dtype=np.int64)
    return np.concatenate([np.arange(lo, hi + 1) for lo, hi in intervals])


def segmental_sample(
    candidates: np.ndarray,
    count: int,
    mode: str = "train",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One index per equal segment of the candidate array.

    Segment boundaries are floor(i*n/count). Train mode draws uniformly within
    each segment; eval mode deterministically takes each segment's center.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    n = len(candidates)
    if n < count:
        raise InsufficientHistoryError(f"{n} candidates cannot fill {count} segments")
    bounds = [(i * n) // count for i in range(count + 1)]
    picks = []
    for i in range(count):
        lo, hi = bounds[i], bounds[i + 1] - 1
        if mode == "eval" or rng is None:
            picks.append(candidates[(lo + hi) // 2])
        else:
            picks.append(candidates[int(rng.integers(lo, hi + 1))])
    return np.array(picks, dtype=np.int64)


def random_sample(
    candidates: np.ndarray,
    count: int,
    mode: str = "train",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """`count` distinct uniform candidates, sorted; segment centers in eval mode."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if len(candidates) < count:
        raise InsufficientHistoryError(f"{len(candidates)} candidates, need {count}")
    if mode == "eval" or rng is None:
        return segmental_sample(candidates, count, mode="eval")
    return np.sort(rng.choice(candidates, size=count, replace=False))


def dense_sample(candidates: np.ndarray, count: int, anchor: int) -> np.ndarray:
    """The `count` candidate indices immediately preceding the anchor."""
    candidates = np.asarray(candidates, dtype=np.int64)
    before = candidates[candidates < anchor]
    if len(before) < count:
        raise InsufficientHistoryError(
            f"{len(before)} candidates precede anchor {anchor}, need {count}"
        )
    return before[-count:]


def select_history(
    candidates: np.ndarray,
    count: int,
    strategy: str,
    anchor: int,
    mode: str = "train",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    if strategy == "segmental":
        return segmental_sample(candidates, count, mode=mode, rng=rng)
    if strategy == "random":
        return random_sample(candidates, count, mode=mode, rng=rng)
    if strategy == "dense":
        return dense_sample(candidates, count, anchor)
    raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")


def leakage_filter(traj: Trajectory, g: int, threshold: float) -> np.ndarray:
    """Frame indices safe to use when the target is plane g.

    Excludes the annotated frame itself and every frame whose pose lies within
    `threshold` (combined mm + deg) of the plane pose.
    """
    if g not in traj.plane_annotations:
        raise ValueError(f"plane {g} not annotated in scan {traj.scan_name}")
    t_g = traj.plane_annotations[g]
    dists = pose_distance_many(traj.poses_array, traj.pose(t_g))
    allowed = np.flatnonzero(dists >= threshold)
    allowed = allowed[allowed != t_g]
    if len(allowed) == 0:
        raise InsufficientHistoryError(
            f"leakage filter with threshold {threshold} removed every frame"
        )
    return allowed


def build_sequence(traj: Trajectory, history_indices: np.ndarray, anchor: int) -> SequenceSample:
    """Assemble the chronologic sample for given history indices plus anchor."""
    history = np.asarray(history_indices, dtype=np.int64)
    all_indices = np.concatenate([history, [anchor]])
    if len(np.unique(all_indices)) != len(all_indices):
        raise ValueError(f"duplicate frame indices in {all_indices.tolist()}")
    if all_indices.min() < 0 or all_indices.max() >= traj.num_frames:
        raise ValueError("frame index outside scan")
    order = np.sort(all_indices)
    anchor_pos = int(np.searchsorted(order, anchor))

    images = traj.images_u8[order].astype(np.float32) / 255.0
    poses = traj.poses_array[order]
    actions = np.empty((len(order) - 1, 6))
    for k in range(len(order) - 1):
        actions[k] = relative_action(
            Pose.from_array(poses[k]), Pose.from_array(poses[k + 1])
        ).as_array()
    return SequenceSample(
        frame_indices=order,
        images=images,
        poses=poses,
        actions=actions,
        anchor_pos=anchor_pos,
    )


def sample_train_sequence(
    traj: Trajectory,
    anchor: int,
    config: SamplingConfig,
    rng: np.random.Generator,
    target_plane_time: int | None = None,
) -> SequenceSample:
    """History selection + assembly for one training sequence."""
    count = config.seq_len - 1
    intervals = sampling_interval(
        traj.num_frames,
        anchor,
        config.protocol,
        target_plane_time=target_plane_time,
        mode="train",
        rng=rng,
        count=count,
    )
    candidates = interval_indices(intervals)
    history = select_history(candidates, count, config.strategy, anchor, mode="train", rng=rng)
    return build_sequence(traj, history, anchor)


def build_eval_sequence(
    traj: Trajectory,
    anchor: int,
    g: int,
    config: SamplingConfig,
    leakage_threshold: float,
) -> SequenceSample:
    """Deterministic evaluation sequence for one (anchor, target plane) pair.

    Bidirectional histories come from the leakage-filtered remainder of the
    scan; unidirectional histories come from the side opposite the target.
    """
    count = config.seq_len - 1
    if config.protocol == "bidirectional":
        allowed = leakage_filter(traj, g, leakage_threshold)
        candidates = allowed[allowed != anchor]
        if len(candidates) < count:
            raise InsufficientHistoryError(
                f"anchor {anchor}: {len(candidates)} leakage-safe frames, need {count}"
            )
    else:
        t_g = traj.plane_annotations[g]
        intervals = sampling_interval(
            traj.num_frames, anchor, "unidirectional",
            target_plane_time=t_g, mode="eval", count=count,
        )
        candidates = interval_indices(intervals)
    history = select_history(candidates, count, config.strategy, anchor, mode="eval")
    return build_sequence(traj, history, anchor)
