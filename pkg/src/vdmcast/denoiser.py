"""Conditional factorised 3D UNet that predicts the noise of a video clip.

Spatial layers act on every frame independently; temporal layers mix along
the frame axis per pixel. Clips of a single frame skip the temporal layers
entirely, so single-frame and multi-frame training share one parameter set.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    temporal_attention_heads: int = 2
    cond_channels: int = 3
    cond_timesteps: int = 3
    embed_dim: int = 128
    image_size: int = 64
    num_frames: int = 10
    max_frames: int = 16
    attention_levels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        if not self.channel_multipliers or min(self.channel_multipliers) < 1:
            raise ValueError("channel_multipliers must be a non-empty list of positive integers")
        if self.base_channels < 1 or self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError("base_channels must be >= 1 and embed_dim a positive even integer")
        if self.cond_timesteps < 1:
            raise ValueError("cond_timesteps must be >= 1")
        if self.image_size % (2 ** (self.num_levels - 1)):
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{self.num_levels - 1} "
                f"required by {self.num_levels} levels"
            )
        if not 1 <= self.num_frames <= self.max_frames:
            raise ValueError("num_frames must lie in [1, max_frames]")
        for m in self.channel_multipliers:
            if (self.base_channels * m) % self.temporal_attention_heads:
                raise ValueError("level widths must be divisible by temporal_attention_heads")

    @property
    def num_levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def in_channels(self) -> int:
        # noisy frame + initial frame + flattened conditioning stack
        return 2 + self.cond_timesteps * self.cond_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**{**d, "channel_multipliers": tuple(d["channel_multipliers"])})


@dataclass
class ConditioningBundle:
    """Conditioning for one clip: initial frame, stacked fields, validity mask.

    Invalid pixels are zeroed on construction; ``is_null`` bundles carry only
    zeros and select the unconditional branch of the denoiser.
    """

    initial_frame: np.ndarray
    era5_stack: np.ndarray
    mask: np.ndarray
    is_null: bool = False

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        frame = np.asarray(self.initial_frame, dtype=np.float32)
        stack = np.asarray(self.era5_stack, dtype=np.float32)
        if frame.shape != self.mask.shape or stack.ndim != 4 or stack.shape[-2:] != self.mask.shape:
            raise ValueError(
                f"bundle shapes inconsistent: frame {frame.shape}, stack {stack.shape}, mask {self.mask.shape}"
            )
        if not (np.isfinite(frame).all() and np.isfinite(stack).all()):
            raise ValueError("conditioning contains non-finite values")
        if self.is_null:
            frame = np.zeros_like(frame)
            stack = np.zeros_like(stack)
        self.initial_frame = np.where(self.mask, frame, np.float32(0))
        self.era5_stack = np.where(self.mask, stack, np.float32(0))

    def null(self) -> "ConditioningBundle":
        return null_bundle(self)

    def with_frame(self, frame) -> "ConditioningBundle":
        return replace(self, initial_frame=np.asarray(frame, dtype=np.float32))


def null_bundle(like: ConditioningBundle) -> ConditioningBundle:
    return ConditioningBundle(
        np.zeros_like(like.initial_frame), np.zeros_like(like.era5_stack), like.mask.copy(), is_null=True
    )


def collate_bundles(bundles, dtype=torch.float32) -> dict[str, torch.Tensor]:
    return {
        "frame": torch.from_numpy(np.stack([b.initial_frame for b in bundles])).to(dtype),
        "era5": torch.from_numpy(np.stack([b.era5_stack for b in bundles])).to(dtype),
        "mask": torch.from_numpy(np.stack([b.mask for b in bundles])),
        "null": torch.tensor([bool(b.is_null) for b in bundles]),
    }


def _groups(ch: int) -> int:
    return math.gcd(ch, 8)


def sinusoidal_embedding(x: torch.Tensor, dim: int, max_period: float = 1000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=x.dtype) / half)
    args = x[:, None] * freqs[None] * 10.0
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, embed_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(embed_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TemporalConv(nn.Module):
    """Residual 1-D convolution along frames, applied at every pixel."""

    def __init__(self, ch: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.conv = nn.Conv1d(ch, ch, 3, padding=1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x: torch.Tensor, T: int) -> torch.Tensor:
        if T == 1:
            return x
        BT, C, H, W = x.shape
        h = F.silu(self.norm(x))
        h = h.reshape(BT // T, T, C, H, W).permute(0, 3, 4, 2, 1).reshape(-1, C, T)
        h = self.conv(h)
        h = h.reshape(BT // T, H, W, C, T).permute(0, 4, 3, 1, 2).reshape(BT, C, H, W)
        return x + h


class TemporalAttention(nn.Module):
    """Residual multi-head self-attention over frames with learned positions."""

    def __init__(self, ch: int, heads: int, max_frames: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.pos = nn.Parameter(torch.zeros(max_frames, ch))
        nn.init.normal_(self.pos, std=0.02)
        self.qkv = nn.Linear(ch, 3 * ch)
        self.out = nn.Linear(ch, ch)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, T: int, frame_index: torch.Tensor) -> torch.Tensor:
        if T == 1:
            return x
        BT, C, H, W = x.shape
        B = BT // T
        h = self.norm(x).reshape(B, T, C, H, W).permute(0, 3, 4, 1, 2)  # B H W T C
        h = h + self.pos[frame_index][:, None, None]
        h = h.reshape(B * H * W, T, C)
        q, k, v = self.qkv(h).reshape(-1, T, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(C // self.heads), dim=-1)
        h = (attn @ v).transpose(1, 2).reshape(-1, T, C)
        h = self.out(h).reshape(B, H, W, T, C).permute(0, 3, 4, 1, 2).reshape(BT, C, H, W)
        return x + h


class Stage(nn.Module):
    """Spatial residual block followed by temporal mixing."""

    def __init__(self, cin: int, cout: int, cfg: DenoiserConfig, attention: bool):
        super().__init__()
        self.res = ResBlock(cin, cout, cfg.embed_dim)
        self.tconv = TemporalConv(cout)
        self.tattn = TemporalAttention(cout, cfg.temporal_attention_heads, cfg.max_frames) if attention else None

    def forward(self, x, emb, T, frame_index):
        x = self.tconv(self.res(x, emb), T)
        if self.tattn is not None:
            x = self.tattn(x, T, frame_index)
        return x


class Denoiser(nn.Module):
    """Noise predictor ``eps_hat = f(z_t, log_snr_t, conditioning)``.

    Input ``z`` has shape ``(B, T, 1, H, W)``; ``frame_index`` gives each
    frame's lead index (``(B, T)`` integers) so a single-frame clip can stand
    for any position of a longer forecast.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        E = config.embed_dim
        widths = [config.base_channels * m for m in config.channel_multipliers]
        L = len(widths)
        attn_from = L - config.attention_levels
        self.time_mlp = nn.Sequential(nn.Linear(E, E), nn.SiLU(), nn.Linear(E, E))
        self.frame_embed = nn.Embedding(config.max_frames, E)
        self.null_embed = nn.Parameter(torch.zeros(E))
        nn.init.normal_(self.frame_embed.weight, std=0.02)
        nn.init.normal_(self.null_embed, std=0.02)

        self.stem = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        cin = widths[0]
        for i, w in enumerate(widths):
            self.down.append(Stage(cin, w, config, attention=i >= attn_from))
            cin = w
            if i < L - 1:
                self.downsample.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
        self.mid = Stage(cin, cin, config, attention=True)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(L)):
            w = widths[i]
            self.up.append(Stage(cin + w, w, config, attention=i >= attn_from))
            cin = w
            if i > 0:
                self.upsample.append(nn.Conv2d(w, widths[i - 1], 3, padding=1))
                cin = widths[i - 1]
        self.head_norm = nn.GroupNorm(_groups(cin), cin)
        self.head = nn.Conv2d(cin, 1, 3, padding=1)

    @property
    def dtype(self) -> torch.dtype:
        return self.stem.weight.dtype

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, z: torch.Tensor, log_snr: torch.Tensor, cond: dict, frame_index: torch.Tensor) -> torch.Tensor:
        if z.dim() != 5 or z.shape[2] != 1:
            raise ValueError(f"expected z of shape (B, T, 1, H, W), got {tuple(z.shape)}")
        B, T, _, H, W = z.shape
        if cond["frame"].shape != (B, H, W):
            raise ValueError(f"conditioning frame {tuple(cond['frame'].shape)} does not match clip {(B, H, W)}")
        cfg = self.config
        if cond["era5"].shape != (B, cfg.cond_timesteps, cfg.cond_channels, H, W):
            raise ValueError(f"conditioning stack has shape {tuple(cond['era5'].shape)}")
        if T > cfg.max_frames:
            raise ValueError(f"clip of {T} frames exceeds max_frames={cfg.max_frames}")
        frame_index = torch.as_tensor(frame_index).expand(B, T)

        emb = self.time_mlp(sinusoidal_embedding(log_snr.to(z.dtype), cfg.embed_dim))
        emb = emb + cond["null"].to(z.dtype)[:, None] * self.null_embed
        emb = (emb[:, None] + self.frame_embed(frame_index)).reshape(B * T, -1)
        emb = F.silu(emb)

        c = torch.cat([cond["frame"][:, None], cond["era5"].reshape(B, -1, H, W)], dim=1)
        c = c[:, None].expand(B, T, -1, H, W)
        x = torch.cat([z, c], dim=2).reshape(B * T, -1, H, W)

        x = self.stem(x)
        skips = []
        for i, stage in enumerate(self.down):
            x = stage(x, emb, T, frame_index)
            skips.append(x)
            if i < len(self.downsample):
                x = self.downsample[i](x)
        x = self.mid(x, emb, T, frame_index)
        for j, stage in enumerate(self.up):
            x = stage(torch.cat([x, skips.pop()], dim=1), emb, T, frame_index)
            if j < len(self.upsample):
                x = self.upsample[j](F.interpolate(x, scale_factor=2, mode="nearest"))
        out = self.head(F.silu(self.head_norm(x))).reshape(B, T, 1, H, W)
        if not torch.isfinite(out).all():
            raise FloatingPointError("denoiser produced non-finite activations")
        return out


def build_denoiser(cfg: DenoiserConfig, seed: int = 0) -> Denoiser:
    """Construct a denoiser with weights drawn from a seeded torch generator."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Denoiser(cfg)
    return model


def parameter_checksum(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def spatial_parameter_names(model: nn.Module) -> list[str]:
    """Parameters that act on frames independently (everything non-temporal)."""
    return [n for n, _ in model.named_parameters() if ".tconv." not in n and ".tattn." not in n]
