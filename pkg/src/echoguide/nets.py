"""Learnable components: vision/action encoders, sequence transformer, heads.

The vision encoder is a small ViT over non-overlapping patches whose mean
patch feature is projected into the sequence-transformer width. Actions pass
through a single affine map. Image and action features are interleaved into
one token stream, sharing a modality-agnostic timestep embedding table;
masked positions carry only learnable mask embeddings (plus timestep and, for
images, the projected mean positional embedding), so masked content can never
influence the forward pass. A gradient-free EMA copy of the vision encoder
provides pre-training targets. Ten independent guidance heads read the query
token's representation.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from echoguide.store import PLANE_IDS


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 16
    channels: int = 1
    vision_depth: int = 4
    vision_width: int = 96
    vision_heads: int = 4
    seq_width: int = 192
    seq_depth: int = 4
    seq_heads: int = 4
    seq_mlp_ratio: float = 2.0
    max_seq_len: int = 16
    drop_path: float = 0.0
    # fixed normalization between raw mm/deg actions and network space; the
    # public prediction interface stays in raw units
    action_scale: float = 25.0

    def __post_init__(self) -> None:
        if self.action_scale <= 0:
            raise ValueError("action_scale must be positive")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.vision_width % self.vision_heads != 0:
            raise ValueError("vision_heads must divide vision_width")
        if self.seq_width % self.seq_heads != 0:
            raise ValueError("seq_heads must divide seq_width")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def max_tokens(self) -> int:
        # 2L-1 interleaved tokens plus the appended guidance query
        return 2 * self.max_seq_len

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        """ViT-Small/16 vision encoder over 224x224 inputs."""
        return cls(image_size=224, patch_size=16, vision_depth=12, vision_width=384, vision_heads=6)


class DropPath(nn.Module):
    """Per-sample stochastic depth."""

    def __init__(self, rate: float = 0.0) -> None:
        super().__init__()
        self.rate = rate

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.rate == 0.0 or not self.training:
            return x
        keep = 1.0 - self.rate
        shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        mask = torch.bernoulli(torch.full(shape, keep, device=x.device, dtype=x.dtype))
        return x * mask / keep


class TransformerBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float, drop_path: float = 0.0) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))
        self.drop_path = DropPath(drop_path)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        attn_out, _ = self.attn(h, h, h, need_weights=False)
        x = x + self.drop_path(attn_out)
        x = x + self.drop_path(self.mlp(self.norm2(x)))
        return x


class VisionEncoder(nn.Module):
    """Patch ViT returning per-patch features and a projected pooled feature."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
        self.patch_embed = nn.Linear(patch_dim, cfg.vision_width)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.num_patches, cfg.vision_width))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.vision_width, cfg.vision_heads, 4.0)
            for _ in range(cfg.vision_depth)
        )
        self.norm = nn.LayerNorm(cfg.vision_width)
        self.pool_proj = nn.Sequential(
            nn.Linear(cfg.vision_width, cfg.vision_width),
            nn.GELU(),
            nn.Linear(cfg.vision_width, cfg.seq_width),
        )

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if images.ndim == 3:
            images = images.unsqueeze(1)
        b, c, h, w = images.shape
        if c != cfg.channels or h != cfg.image_size or w != cfg.image_size:
            raise ValueError(
                f"expected images ({cfg.channels}, {cfg.image_size}, {cfg.image_size}), "
                f"got ({c}, {h}, {w})"
            )
        p = cfg.patch_size
        x = images.reshape(b, c, h // p, p, w // p, p)
        x = x.permute(0, 2, 4, 3, 5, 1)
        return x.reshape(b, cfg.num_patches, p * p * c)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(patch features (B, N, D_v), pooled projected feature (B, D))."""
        x = self.patch_embed(self.patchify(images)) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        pooled = self.pool_proj(x.mean(dim=1))
        return x, pooled

    def pos_mean_projected(self) -> torch.Tensor:
        """Mean positional embedding carried into the pooled feature space."""
        return self.pool_proj(self.pos_embed.mean(dim=0))


class SequenceTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.seq_width, cfg.seq_heads, cfg.seq_mlp_ratio, cfg.drop_path)
            for _ in range(cfg.seq_depth)
        )
        self.norm = nn.LayerNorm(cfg.seq_width)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[1] > self.cfg.max_tokens:
            raise ValueError(
                f"token stream of length {tokens.shape[1]} exceeds max {self.cfg.max_tokens}"
            )
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens)


class GuidanceModel(nn.Module):
    """Full model: encoders, EMA target encoder, transformer, and all heads."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        d = cfg.seq_width
        self.vision = VisionEncoder(cfg)
        self.ema_vision = copy.deepcopy(self.vision)
        for p in self.ema_vision.parameters():
            p.requires_grad_(False)
        self.action_encoder = nn.Linear(6, d)
        self.seq_transformer = SequenceTransformer(cfg)
        # timestep table: slots 0..max_seq_len-1 for stream tokens, slot
        # max_seq_len reachable by the query at the longest sequence
        self.timestep_embed = nn.Parameter(torch.zeros(cfg.max_seq_len + 1, d))
        nn.init.trunc_normal_(self.timestep_embed, std=0.02)
        self.mask_image_embed = nn.Parameter(torch.zeros(d))
        self.mask_action_embed = nn.Parameter(torch.zeros(d))
        nn.init.trunc_normal_(self.mask_image_embed, std=0.02)
        nn.init.trunc_normal_(self.mask_action_embed, std=0.02)
        # marks which image token is the guidance anchor; without it the
        # anchor is unidentifiable when history frames are later than it
        self.anchor_embed = nn.Parameter(torch.zeros(d))
        nn.init.trunc_normal_(self.anchor_embed, std=0.02)
        self.visual_predictor = nn.Linear(d, d)
        self.action_predictor = nn.Linear(d, 6)
        self.guidance_heads = nn.ModuleDict(
            {str(g): nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, 6)) for g in PLANE_IDS}
        )

    # ---------------- encoding ----------------

    def encode_visible_images(
        self, images: torch.Tensor, visible: torch.Tensor
    ) -> torch.Tensor:
        """Pooled features for visible slots only; masked slots return zeros.

        Masked images are never passed through the encoder, so their pixels
        cannot influence any output.
        """
        b, l = images.shape[:2]
        flat = images.reshape(b * l, *images.shape[2:])
        vis = visible.reshape(b * l)
        pooled = torch.zeros(b * l, self.cfg.seq_width, device=images.device, dtype=images.dtype)
        if bool(vis.any()):
            _, pooled_vis = self.vision(flat[vis])
            pooled[vis] = pooled_vis
        return pooled.reshape(b, l, self.cfg.seq_width)

    @torch.no_grad()
    def ema_image_targets(self, images: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
        """EMA pooled feature + timestep embedding at masked image slots.

        Gradient-free by construction; unmasked slots return zeros.
        """
        b, l = images.shape[:2]
        flat = images.reshape(b * l, *images.shape[2:])
        sel = masked.reshape(b * l)
        pooled = torch.zeros(b * l, self.cfg.seq_width, device=images.device, dtype=images.dtype)
        if bool(sel.any()):
            _, pooled_sel = self.ema_vision(flat[sel])
            pooled[sel] = pooled_sel
        pooled = pooled.reshape(b, l, self.cfg.seq_width)
        target = pooled + self.timestep_embed[:l].unsqueeze(0)
        return target * masked.unsqueeze(-1)

    # ---------------- token assembly ----------------

    def assemble_tokens(
        self,
        images: torch.Tensor,
        actions: torch.Tensor,
        visibility: torch.Tensor | None = None,
        anchor_pos: torch.Tensor | None = None,
        query: bool = False,
    ) -> torch.Tensor:
        """Interleave image/action features into the (B, 2L-1[+1], D) stream.

        Masked image tokens are mask_image_embed + timestep + projected mean
        positional embedding; masked action tokens are mask_action_embed +
        timestep. With query=True an extra action-mask token carrying the
        anchor's timestep embedding is appended: the guidance query attaches
        to the anchor frame, inheriting the pre-trained masked-action
        semantics of "recover the movement departing this timestep".
        """
        b, l = images.shape[:2]
        if l > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {l} exceeds max {self.cfg.max_seq_len}")
        if actions.shape[:2] != (b, l - 1):
            raise ValueError(f"expected actions (B, {l - 1}, 6), got {tuple(actions.shape)}")
        num_tokens = 2 * l - 1
        if visibility is None:
            visibility = torch.ones(b, num_tokens, dtype=torch.bool, device=images.device)
        if visibility.shape != (b, num_tokens):
            raise ValueError(
                f"expected visibility (B, {num_tokens}), got {tuple(visibility.shape)}"
            )
        img_vis = visibility[:, 0::2]
        act_vis = visibility[:, 1::2]
        d = self.cfg.seq_width

        pooled = self.encode_visible_images(images, img_vis)
        masked_image_token = self.mask_image_embed + self.vision.pos_mean_projected()
        img_tokens = torch.where(img_vis.unsqueeze(-1), pooled, masked_image_token.expand(b, l, d))
        img_tokens = img_tokens + self.timestep_embed[:l].unsqueeze(0)
        if anchor_pos is not None:
            marker = torch.zeros(b, l, 1, device=images.device, dtype=images.dtype)
            marker[torch.arange(b), anchor_pos.long()] = 1.0
            img_tokens = img_tokens + marker * self.anchor_embed

        encoded_actions = self.action_encoder(
            actions.to(img_tokens.dtype) / self.cfg.action_scale
        )
        act_tokens = torch.where(
            act_vis.unsqueeze(-1), encoded_actions, self.mask_action_embed.expand(b, l - 1, d)
        )
        act_tokens = act_tokens + self.timestep_embed[: l - 1].unsqueeze(0)

        tokens = torch.empty(b, num_tokens, d, device=images.device, dtype=img_tokens.dtype)
        tokens[:, 0::2] = img_tokens
        tokens[:, 1::2] = act_tokens
        if query:
            if anchor_pos is None:
                raise ValueError("query tokens require anchor positions")
            q = self.mask_action_embed + self.timestep_embed[anchor_pos.long()]
            tokens = torch.cat([tokens, q.unsqueeze(1)], dim=1)
        return tokens

    # ---------------- forward paths ----------------

    def sequence_forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.seq_transformer(tokens)

    def guidance_query_output(
        self,
        images: torch.Tensor,
        actions: torch.Tensor,
        anchor_pos: torch.Tensor,
    ) -> torch.Tensor:
        """Query-token representation for a fully visible sequence, (B, D)."""
        tokens = self.assemble_tokens(images, actions, anchor_pos=anchor_pos, query=True)
        return self.sequence_forward(tokens)[:, -1]

    def predict_guidance(self, query_out: torch.Tensor, g: int) -> torch.Tensor:
        """Per-plane head on the query representation; raw mm/deg, (B, 6)."""
        if g not in PLANE_IDS:
            raise ValueError(f"plane id must be in 1..10, got {g}")
        return self.guidance_heads[str(g)](query_out) * self.cfg.action_scale

    def single_frame_features(self, images: torch.Tensor) -> torch.Tensor:
        """Pooled vision feature of lone frames (B, H, W) -> (B, D)."""
        _, pooled = self.vision(images)
        return pooled

    # ---------------- EMA ----------------

    @torch.no_grad()
    def ema_update(self, decay: float) -> None:
        """theta' <- decay * theta' + (1 - decay) * theta, elementwise."""
        if not 0.0 <= decay <= 1.0:
            raise ValueError(f"decay must be in [0, 1], got {decay}")
        for p_ema, p in zip(self.ema_vision.parameters(), self.vision.parameters()):
            if p_ema.shape != p.shape:
                raise ValueError("EMA/online parameter shape mismatch")
            p_ema.mul_(decay).add_(p, alpha=1.0 - decay)


def save_checkpoint(model: GuidanceModel, path: str | Path, extra: dict | None = None) -> None:
    payload = {
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(
    path: str | Path, expected_config: ModelConfig | None = None
) -> tuple[GuidanceModel, dict]:
    """Rebuild a model from an archive; refuses config mismatches."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "model_config" not in payload:
        raise ValueError(f"checkpoint {path} is not a model archive")
    cfg = ModelConfig(**payload["model_config"])
    if expected_config is not None and cfg != expected_config:
        raise ValueError(
            f"checkpoint {path} was trained with a different model config: "
            f"{cfg} != {expected_config}"
        )
    model = GuidanceModel(cfg)
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("extra", {})
