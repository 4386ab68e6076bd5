from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.errors import OptiwingError


N_CONDITION_VALUES = 4
FEATURES_PER_CONTROL = 3


@dataclass(frozen=True)
class UNetPreset:
    base_channels: int
    channel_mults: tuple[int, ...]

    def to_dict(self) -> dict[str, object]:
        return asdict(self)


PRESETS = {
    "full": UNetPreset(base_channels=64, channel_mults=(1, 2, 4)),
    "desk": UNetPreset(base_channels=32, channel_mults=(1, 2)),
    "tiny": UNetPreset(base_channels=8, channel_mults=(1, 2)),
}


def get_preset(name: str) -> UNetPreset:
    try:
        return PRESETS[name]
    except KeyError as exc:
        raise OptiwingError(
            "unknown_preset",
            f"Unknown network preset {name!r}; choose one of {sorted(PRESETS)}.",
        ) from exc


def _groups(channels: int) -> int:
    for groups in (8, 4, 2):
        if channels % groups == 0:
            return groups
    return 1


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    scale = math.log(10000.0) / max(half - 1, 1)
    freqs = torch.exp(torch.arange(half, device=t.device, dtype=torch.float32) * -scale)
    angles = t.float()[:, None] * freqs[None, :]
    embedding = torch.cat([angles.sin(), angles.cos()], dim=-1)
    if dim % 2:
        embedding = F.pad(embedding, (0, 1))
    return embedding


class ResBlock1D(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, time_dim: int) -> None:
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_channels), in_channels)
        self.conv1 = nn.Conv1d(in_channels, out_channels, kernel_size=3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = nn.GroupNorm(_groups(out_channels), out_channels)
        self.conv2 = nn.Conv1d(out_channels, out_channels, kernel_size=3, padding=1)
        self.skip = (
            nn.Conv1d(in_channels, out_channels, kernel_size=1)
            if in_channels != out_channels
            else nn.Identity()
        )

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(t_emb))[:, :, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class WingUNet1D(nn.Module):
    """1D convolutional U-Net predicting the noise of every head from one shared body.

    Shape latents enter as 3 * n_slices channels (x, y, log w per slice) over the
    control-point axis; eta and alpha are broadcast as extra channels. The timestep
    goes through a sinusoidal embedding, the conditioning vector (flow condition plus
    the initial section's latent) through an MLP, and both are concatenated with the
    features at the bottleneck.
    """

    def __init__(
        self,
        n_slices: int = 9,
        n_control: int = 30,
        condition_dim: int = N_CONDITION_VALUES + FEATURES_PER_CONTROL * 30,
        preset: UNetPreset = PRESETS["desk"],
    ) -> None:
        super().__init__()
        self.n_slices = n_slices
        self.n_control = n_control
        self.condition_dim = condition_dim
        self.preset = preset
        base = preset.base_channels
        time_dim = 4 * base
        shape_channels = FEATURES_PER_CONTROL * n_slices
        in_channels = shape_channels + n_slices + 1

        self.time_mlp = nn.Sequential(
            nn.Linear(base, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )
        self.cond_mlp = nn.Sequential(
            nn.Linear(condition_dim, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )
        self.stem = nn.Conv1d(in_channels, base, kernel_size=3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skip_channels = []
        channels = base
        for level, mult in enumerate(preset.channel_mults):
            out = base * mult
            self.down.append(ResBlock1D(channels, out, time_dim))
            skip_channels.append(out)
            channels = out
            last = level == len(preset.channel_mults) - 1
            self.downsample.append(
                nn.Identity() if last else nn.Conv1d(channels, channels, kernel_size=3, stride=2, padding=1)
            )

        self.mid = ResBlock1D(channels + time_dim, channels, time_dim)

        self.up = nn.ModuleList()
        for mult, skip in zip(reversed(preset.channel_mults), reversed(skip_channels)):
            out = base * mult
            self.up.append(ResBlock1D(channels + skip, out, time_dim))
            channels = out

        self.out_norm = nn.GroupNorm(_groups(channels), channels)
        self.shape_head = nn.Conv1d(channels, shape_channels, kernel_size=1)
        self.eta_head = nn.Linear(channels, n_slices)
        self.alpha_head = nn.Linear(channels, 1)

    def forward(
        self,
        shape: torch.Tensor,
        eta: torch.Tensor,
        alpha: torch.Tensor,
        t: torch.Tensor,
        cond: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        batch = shape.shape[0]
        # (B, slices, 3 * n_control) -> (B, slices * 3, n_control)
        x = shape.reshape(batch, self.n_slices, FEATURES_PER_CONTROL, self.n_control)
        x = x.reshape(batch, self.n_slices * FEATURES_PER_CONTROL, self.n_control)
        scalars = torch.cat([eta, alpha], dim=1)[:, :, None].expand(-1, -1, self.n_control)
        h = self.stem(torch.cat([x, scalars], dim=1))

        t_emb = self.time_mlp(sinusoidal_embedding(t, self.preset.base_channels))
        c_emb = self.cond_mlp(cond)

        skips = []
        for block, downsample in zip(self.down, self.downsample):
            h = block(h, t_emb)
            skips.append(h)
            h = downsample(h)

        h = torch.cat([h, c_emb[:, :, None].expand(-1, -1, h.shape[-1])], dim=1)
        h = self.mid(h, t_emb)

        for block in self.up:
            skip = skips.pop()
            if h.shape[-1] != skip.shape[-1]:
                h = F.interpolate(h, size=skip.shape[-1], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), t_emb)

        h = F.silu(self.out_norm(h))
        eps_shape = self.shape_head(h).reshape(batch, self.n_slices, FEATURES_PER_CONTROL * self.n_control)
        pooled = h.mean(dim=-1)
        return eps_shape, self.eta_head(pooled), self.alpha_head(pooled)


def build_denoiser(preset: str | UNetPreset, n_slices: int = 9, n_control: int = 30) -> WingUNet1D:
    resolved = get_preset(preset) if isinstance(preset, str) else preset
    return WingUNet1D(
        n_slices=n_slices,
        n_control=n_control,
        condition_dim=N_CONDITION_VALUES + FEATURES_PER_CONTROL * n_control,
        preset=resolved,
    )


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
