"""Learnable maps: the conditional bridge predictor, the reconstruction
generator and the patch discriminator.

All three image-to-image nets share one small UNet backbone.  The predictor
takes ``(x_t, x_T, s)`` and concatenates the condition ``x_T`` along the
channel axis; the generator is the same backbone with the time path removed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

# Unit times are stretched to the usual diffusion step range before embedding.
TIME_EMBED_SCALE = 1000.0


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int
    out_channels: int
    base_width: int = 16
    depth: int = 2
    time_embedding: bool = True
    time_embed_dim: int = 32
    norm_groups: int = 4
    zero_init_out: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 4:
            raise ValueError(f"base_width must be >= 4, got {self.base_width}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.time_embedding and self.time_embed_dim < 2:
            raise ValueError("time_embed_dim must be >= 2")

    def check_size(self, size: int) -> None:
        factor = 2 ** self.depth
        if size < factor or size % factor:
            raise ValueError(f"spatial size {size} is not divisible by 2**depth = {factor}")


@dataclass(frozen=True)
class ModelConfig:
    """User-facing architecture knobs shared by the three nets."""

    base_width: int = 16
    depth: int = 2
    time_embed_dim: int = 32
    norm_groups: int = 4
    disc_base_width: int = 16
    disc_blocks: int = 3
    disc_kernel: int = 4
    zero_init_epsilon: bool = True
    source_skip: bool = False

    def __post_init__(self):
        if self.disc_blocks < 1:
            raise ValueError("disc_blocks must be >= 1")
        if self.disc_base_width < 4:
            raise ValueError("disc_base_width must be >= 4")

    def backbone(self, in_channels: int, out_channels: int, time_embedding: bool,
                 zero_init_out: bool = False) -> BackboneConfig:
        return BackboneConfig(
            in_channels=in_channels,
            out_channels=out_channels,
            base_width=self.base_width,
            depth=self.depth,
            time_embedding=time_embedding,
            time_embed_dim=self.time_embed_dim,
            norm_groups=self.norm_groups,
            zero_init_out=zero_init_out,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, groups), channels)


def sinusoidal_embedding(s: torch.Tensor, dim: int) -> torch.Tensor:
    """Transformer-style sin/cos features of ``TIME_EMBED_SCALE * s``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=s.dtype, device=s.device) / max(half - 1, 1))
    args = TIME_EMBED_SCALE * s[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, groups: int, time_dim: int | None):
        super().__init__()
        self.norm1 = _norm(in_ch, groups)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch) if time_dim else None
        self.norm2 = _norm(out_ch, groups)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time_proj is not None:
            h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNet(nn.Module):
    """Encoder-decoder with one residual block per level and skip connections.

    Downsampling is a stride-2 conv; upsampling is nearest-neighbour followed
    by a 3x3 conv.  With ``time_embedding`` on, ``forward`` takes a ``(batch,)``
    tensor of unit times that is embedded and added inside every block.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.norm_groups
        widths = [cfg.base_width * 2 ** i for i in range(cfg.depth)]
        time_dim = None
        if cfg.time_embedding:
            time_dim = cfg.time_embed_dim
            self.time_mlp = nn.Sequential(
                nn.Linear(cfg.time_embed_dim, time_dim),
                nn.SiLU(),
                nn.Linear(time_dim, time_dim),
            )
        else:
            self.time_mlp = None

        self.conv_in = nn.Conv2d(cfg.in_channels, cfg.base_width, 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = cfg.base_width
        for w in widths:
            self.down_blocks.append(ResBlock(ch, w, g, time_dim))
            self.downsamples.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            ch = w
        self.mid = ResBlock(ch, ch, g, time_dim)
        self.upsamples = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for w in reversed(widths):
            self.upsamples.append(nn.Conv2d(ch, w, 3, padding=1))
            self.up_blocks.append(ResBlock(2 * w, w, g, time_dim))
            ch = w
        self.norm_out = _norm(ch, g)
        self.conv_out = nn.Conv2d(ch, cfg.out_channels, 3, padding=1)
        if cfg.zero_init_out:
            nn.init.zeros_(self.conv_out.weight)
            nn.init.zeros_(self.conv_out.bias)

    def forward(self, x: torch.Tensor, s: torch.Tensor | None = None) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, H, W) input, got {tuple(x.shape)}")
        self.cfg.check_size(x.shape[-1])
        self.cfg.check_size(x.shape[-2])
        temb = None
        if self.time_mlp is not None:
            if s is None:
                raise ValueError("this backbone needs a unit-time input")
            s = torch.as_tensor(s, dtype=x.dtype, device=x.device).reshape(-1).expand(x.shape[0])
            temb = self.time_mlp(sinusoidal_embedding(s, self.cfg.time_embed_dim))

        h = self.conv_in(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb)
        for up, block in zip(self.upsamples, self.up_blocks):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


class EpsilonNet(nn.Module):
    """Bridge predictor ``eps(x_t, x_T, s)``.

    In unconditional mode (the plain bridge ablation) the condition is
    ignored and the backbone only sees ``x_t`` and ``s``.

    With ``source_skip`` the output is ``x_t - x_T + backbone(...)``.  The
    regression target ``x_t - x_0`` then leaves the backbone a residual
    ``x_T - x_0`` that does not depend on ``s``, instead of having to copy the
    noisy ``x_t`` through the whole UNet.  Only a conditional net can use it.
    """

    def __init__(self, backbone: UNet, conditional: bool = True, source_skip: bool = False):
        super().__init__()
        if source_skip and not conditional:
            raise ValueError("source_skip needs the conditional predictor")
        self.backbone = backbone
        self.conditional = conditional
        self.source_skip = source_skip

    def forward(self, x_t, x_T, s):
        if not self.conditional:
            return self.backbone(x_t, s)
        if x_T is None or x_T.shape != x_t.shape:
            raise ValueError("conditional predictor needs x_T with the shape of x_t")
        out = self.backbone(torch.cat([x_t, x_T], dim=1), s)
        if self.source_skip:
            out = out + (x_t - x_T)
        return out


class Generator(nn.Module):
    """Reconstruction map from the target domain back to the source domain."""

    def __init__(self, backbone: UNet):
        super().__init__()
        if backbone.cfg.time_embedding:
            raise ValueError("the reconstruction generator takes no time input")
        self.backbone = backbone

    def forward(self, x):
        return self.backbone(x)


class PatchDiscriminator(nn.Module):
    """Stride-2 conv stack emitting one raw logit per receptive-field patch.

    The head is a stride-1 3x3 conv, so the logit map is the input size
    divided by ``2 ** n_blocks``.
    """

    def __init__(self, in_channels: int, base_width: int = 16, n_blocks: int = 3,
                 kernel: int = 4, norm_groups: int = 4):
        super().__init__()
        self.in_channels = in_channels
        self.n_blocks = n_blocks
        layers: list[nn.Module] = []
        ch = in_channels
        pad = (kernel - 1) // 2
        for i in range(n_blocks):
            w = base_width * 2 ** min(i, 3)
            layers.append(nn.Conv2d(ch, w, kernel, stride=2, padding=pad))
            if i > 0:
                layers.append(_norm(w, norm_groups))
            layers.append(nn.LeakyReLU(0.2))
            ch = w
        layers.append(nn.Conv2d(ch, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (B, {self.in_channels}, H, W) input, got {tuple(x.shape)}")
        factor = 2 ** self.n_blocks
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ValueError(f"spatial size must be divisible by {factor}")
        return self.net(x)


class AffineEpsilon(nn.Module):
    """Per-channel affine predictor ``a x_t + c x_T + w s + b`` for scalar toys."""

    def __init__(self, channels: int = 1, conditional: bool = True):
        super().__init__()
        self.conditional = conditional
        self.a = nn.Parameter(torch.zeros(channels))
        self.c = nn.Parameter(torch.zeros(channels))
        self.w = nn.Parameter(torch.zeros(channels))
        self.b = nn.Parameter(torch.zeros(channels))

    def forward(self, x_t, x_T, s):
        view = lambda p: p.view(1, -1, 1, 1)
        s = torch.as_tensor(s, dtype=x_t.dtype).reshape(-1, 1, 1, 1)
        out = view(self.a) * x_t + view(self.w) * s + view(self.b)
        if self.conditional:
            out = out + view(self.c) * x_T
        return out


class AffineGenerator(nn.Module):
    def __init__(self, channels: int = 1):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(channels))
        self.shift = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return self.scale.view(1, -1, 1, 1) * x + self.shift.view(1, -1, 1, 1)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class ModelBundle:
    epsilon_net: nn.Module
    generator: nn.Module
    discriminator: nn.Module

    @property
    def param_counts(self) -> dict[str, int]:
        return {
            "epsilon_net": count_parameters(self.epsilon_net),
            "generator": count_parameters(self.generator),
            "discriminator": count_parameters(self.discriminator),
        }

    @property
    def conditional(self) -> bool:
        return bool(getattr(self.epsilon_net, "conditional", True))

    def modules(self) -> dict[str, nn.Module]:
        return {
            "epsilon_net": self.epsilon_net,
            "generator": self.generator,
            "discriminator": self.discriminator,
        }

    def to(self, dtype: torch.dtype) -> "ModelBundle":
        for m in self.modules().values():
            m.to(dtype)
        return self


def build_models(
    cfg: ModelConfig,
    image_channels: int,
    seed: int,
    conditional: bool = True,
    image_size: int | None = None,
    dtype: torch.dtype = torch.float32,
) -> ModelBundle:
    """Construct the predictor, generator and discriminator from one seed.

    Initialisation runs inside a forked RNG so the global torch state is left
    untouched; the same ``(cfg, seed)`` always yields identical parameters.
    """
    eps_cfg = cfg.backbone(image_channels * (2 if conditional else 1), image_channels,
                           time_embedding=True, zero_init_out=cfg.zero_init_epsilon)
    gen_cfg = cfg.backbone(image_channels, image_channels, time_embedding=False)
    if image_size is not None:
        eps_cfg.check_size(image_size)
        if image_size % 2 ** cfg.disc_blocks:
            raise ValueError(f"image size {image_size} is not divisible by 2**disc_blocks")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        bundle = ModelBundle(
            epsilon_net=EpsilonNet(UNet(eps_cfg), conditional=conditional,
                                   source_skip=cfg.source_skip and conditional),
            generator=Generator(UNet(gen_cfg)),
            discriminator=PatchDiscriminator(
                image_channels, cfg.disc_base_width, cfg.disc_blocks, cfg.disc_kernel, cfg.norm_groups
            ),
        )
    return bundle.to(dtype)


def epsilon_forward(net: nn.Module, x_t: torch.Tensor, x_T: torch.Tensor, t, total_steps: int) -> torch.Tensor:
    """Evaluate the predictor at discrete step ``t`` of a ``total_steps`` grid."""
    if x_t.shape != x_T.shape:
        raise ValueError(f"shape mismatch: {tuple(x_t.shape)} vs {tuple(x_T.shape)}")
    s = torch.as_tensor(t, dtype=torch.float64) / total_steps
    s = s.reshape(-1).expand(x_t.shape[0]).to(x_t.dtype)
    return net(x_t, x_T if getattr(net, "conditional", True) else None, s)
