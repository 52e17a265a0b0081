"""Network construction for the dual in-painting models.

Five networks: the correction generator ``g_x`` (masked face + content code
-> face), the animation generator ``g_y`` (adds a 2-d angle code), the angle
encoder ``e_r``, the mirror autoencoder ``g_pre`` (whose encoder is the
content encoder), and two independent global+local discriminators.

Architectures are declarative layer stacks that rebuild at any power-of-two
resolution: stride-2 stages are dropped near the bottom so the same stack
spec works at 64x64 (tests) and 256x256 (canonical). Channel widths follow
``min(base * 2^k, max)`` on the way down and ``max(bottleneck / 2^(k+1),
base)`` on the way up, which reproduces the canonical stacks exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeMismatchError

LEAKY_SLOPE = 0.2
NORM_EPS = 1e-5


@dataclass(frozen=True)
class ArchitectureConfig:
    """Widths and depths for every network; defaults are the canonical ones."""

    resolution: int = 256
    content_dim: int = 256
    angle_dim: int = 2
    gen_base: int = 16
    gen_max: int = 256
    gen_downs: int = 5
    er_base: int = 32
    er_max: int = 128
    er_downs: int = 3
    pre_base: int = 16
    pre_max: int = 128
    pre_downs: int = 3
    disc_base: int = 32
    disc_max: int = 256
    disc_downs: int = 6
    init_std: float = 0.02
    power_iterations: int = 1

    def scaled(self, resolution: int) -> "ArchitectureConfig":
        return replace(self, resolution=resolution)


def tiny_config(resolution: int = 16) -> ArchitectureConfig:
    """A narrow configuration for gradient checks and shape-level tests."""
    return ArchitectureConfig(
        resolution=resolution, content_dim=16,
        gen_base=4, gen_max=16, er_base=4, er_max=8,
        pre_base=4, pre_max=8, disc_base=4, disc_max=16)


def _num_downs(size: int, cap: int, min_out: int) -> int:
    """Stride-2 stages that fit: stop once the map would shrink past min_out."""
    n, s = 0, size
    while n < cap and s // 2 >= min_out:
        s //= 2
        n += 1
    return n


def _check_pow2(size: int, downs: int, what: str) -> None:
    if size % (1 << downs) != 0:
        raise ConfigError(
            f"{what}: size {size} not divisible by 2^{downs}; "
            "use a power-of-two resolution")


class SpectralNormConv2d(nn.Conv2d):
    """Conv whose weight is divided by a power-iteration estimate of its top
    singular value. The left/right vectors persist as buffers; one iteration
    runs per training-mode forward. A zero weight passes through unchanged
    (sigma is clamped away from zero, and 0 / eps = 0).
    """

    def __init__(self, *args, power_iterations: int = 1, **kwargs):
        super().__init__(*args, **kwargs)
        self.power_iterations = power_iterations
        flat = self.weight.view(self.out_channels, -1)
        self.register_buffer("weight_u",
                             F.normalize(torch.randn(flat.shape[0]), dim=0))
        self.register_buffer("weight_v",
                             F.normalize(torch.randn(flat.shape[1]), dim=0))
        # flips true after the first update so sigma is never the raw
        # (possibly negative) projection onto the random init vectors
        self.register_buffer("sn_warm", torch.zeros((), dtype=torch.bool))

    def _power_iterate(self, flat: torch.Tensor) -> None:
        u, v = self.weight_u, self.weight_v
        for _ in range(max(1, self.power_iterations)):
            wu = flat.t().mv(u)
            if wu.norm() == 0:
                return
            v = F.normalize(wu, dim=0, eps=1e-12)
            u = F.normalize(flat.mv(v), dim=0, eps=1e-12)
        self.weight_u.copy_(u)
        self.weight_v.copy_(v)
        self.sn_warm.fill_(True)

    def normalized_weight(self) -> torch.Tensor:
        flat = self.weight.view(self.out_channels, -1)
        if self.training or not bool(self.sn_warm):
            with torch.no_grad():
                self._power_iterate(flat.detach())
        # clone so a later in-place vector update cannot corrupt a graph
        # built by an earlier forward
        u, v = self.weight_u.clone(), self.weight_v.clone()
        sigma = torch.dot(u, flat.mv(v))
        return self.weight / sigma.clamp_min(1e-12)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._conv_forward(x, self.normalized_weight(), self.bias)


def _conv_block(in_ch, out_ch, kernel, stride, norm=True, spectral=False,
                power_iterations=1) -> list[nn.Module]:
    pad = kernel // 2 if stride == 1 else 1
    if spectral:
        conv = SpectralNormConv2d(in_ch, out_ch, kernel, stride, pad,
                                  power_iterations=power_iterations)
    else:
        conv = nn.Conv2d(in_ch, out_ch, kernel, stride, pad)
    layers: list[nn.Module] = [conv]
    if norm:
        layers.append(nn.InstanceNorm2d(out_ch, eps=NORM_EPS))
    layers.append(nn.LeakyReLU(LEAKY_SLOPE))
    return layers


def _deconv_block(in_ch, out_ch) -> list[nn.Module]:
    return [nn.ConvTranspose2d(in_ch, out_ch, 4, 2, 1),
            nn.InstanceNorm2d(out_ch, eps=NORM_EPS),
            nn.LeakyReLU(LEAKY_SLOPE)]


def _checked_fc(fc: nn.Linear, flat: torch.Tensor, what: str) -> torch.Tensor:
    if flat.shape[-1] != fc.in_features:
        raise ShapeMismatchError(
            f"{what}: flattened features {flat.shape[-1]} != expected "
            f"{fc.in_features}; wrong input resolution?")
    return fc(flat)


def _check_input_size(x: torch.Tensor, expected: int, what: str) -> None:
    if x.shape[-2] != expected or x.shape[-1] != expected:
        raise ShapeMismatchError(
            f"{what}: input is {tuple(x.shape[-2:])}, expected "
            f"({expected}, {expected})")


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """Zero-mean Gaussian init for conv/deconv/linear weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        if isinstance(m, SpectralNormConv2d):
            m.sn_warm.fill_(False)  # re-estimate after the re-init


class Generator(nn.Module):
    """In-painting generator: masked 4-channel face -> 3-channel face.

    The encoder bottleneck is fused with the content code by element-wise
    addition; the animation variant then appends the angle code, so the
    decoder input width is ``content_dim`` (correction) or
    ``content_dim + angle_dim`` (animation). Output is tanh-bounded.
    """

    def __init__(self, cfg: ArchitectureConfig, with_angle: bool):
        super().__init__()
        self.cfg = cfg
        self.with_angle = with_angle
        h = cfg.resolution
        self.num_downs = _num_downs(h, cfg.gen_downs, 2)
        _check_pow2(h, self.num_downs, "generator")
        self.bottleneck_hw = h >> self.num_downs

        layers = _conv_block(4, cfg.gen_base, 7, 1)
        ch = cfg.gen_base
        for k in range(self.num_downs):
            out = min(cfg.gen_base * 2 ** (k + 1), cfg.gen_max)
            layers += _conv_block(ch, out, 4, 2)
            ch = out
        self.encoder = nn.Sequential(*layers)
        self.fc_bottleneck = nn.Linear(ch * self.bottleneck_hw ** 2,
                                       cfg.content_dim)

        z_dim = cfg.content_dim + (cfg.angle_dim if with_angle else 0)
        self.fc_decode = nn.Linear(
            z_dim, cfg.content_dim * self.bottleneck_hw ** 2)
        dec: list[nn.Module] = []
        ch = cfg.content_dim
        for k in range(self.num_downs):
            out = max(cfg.content_dim >> (k + 1), cfg.gen_base)
            dec += _deconv_block(ch, out)
            ch = out
        dec += [nn.Conv2d(ch, 3, 7, 1, 3), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)

    def encode(self, masked: torch.Tensor) -> torch.Tensor:
        if masked.shape[-3] != 4:
            raise ShapeMismatchError(
                f"expected 4-channel masked input, got {tuple(masked.shape)}")
        _check_input_size(masked, self.cfg.resolution, "generator")
        return _checked_fc(self.fc_bottleneck,
                           self.encoder(masked).flatten(1), "generator")

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        s = self.bottleneck_hw
        x = self.fc_decode(z).view(-1, self.cfg.content_dim, s, s)
        return self.decoder(x)

    def forward(self, masked: torch.Tensor, content: torch.Tensor,
                angle: torch.Tensor | None = None) -> torch.Tensor:
        z = self.encode(masked) + content
        if self.with_angle:
            if angle is None or angle.shape[-1] != self.cfg.angle_dim:
                raise ShapeMismatchError(
                    f"angle code must be (B, {self.cfg.angle_dim})")
            z = torch.cat([z, angle], dim=1)
        elif angle is not None:
            raise ShapeMismatchError("this generator takes no angle code")
        return self.decode(z)


class AngleEncoder(nn.Module):
    """Eye composite -> 2-d angle code."""

    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.resolution // 2
        self.num_downs = _num_downs(h, cfg.er_downs, 2)
        layers = _conv_block(3, cfg.er_base, 7, 1)
        ch = cfg.er_base
        for k in range(self.num_downs):
            out = min(cfg.er_base * 2 ** (k + 1), cfg.er_max)
            layers += _conv_block(ch, out, 4, 2)
            ch = out
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(ch * (h >> self.num_downs) ** 2, cfg.angle_dim)

    def forward(self, composite: torch.Tensor) -> torch.Tensor:
        _check_input_size(composite, self.cfg.resolution // 2,
                          "angle encoder")
        return _checked_fc(self.fc, self.features(composite).flatten(1),
                           "angle encoder")


class MirrorAutoencoder(nn.Module):
    """Eye-composite autoencoder; its bottleneck is the content code."""

    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.resolution // 2
        self.num_downs = _num_downs(h, cfg.pre_downs, 2)
        _check_pow2(h, self.num_downs, "mirror autoencoder")
        self.bottleneck_hw = h >> self.num_downs

        layers = _conv_block(3, cfg.pre_base, 7, 1)
        ch = cfg.pre_base
        for k in range(self.num_downs):
            out = min(cfg.pre_base * 2 ** (k + 1), cfg.pre_max)
            layers += _conv_block(ch, out, 4, 2)
            ch = out
        self.encoder = nn.Sequential(*layers)
        self.fc_bottleneck = nn.Linear(ch * self.bottleneck_hw ** 2,
                                       cfg.content_dim)

        self.fc_decode = nn.Linear(cfg.content_dim,
                                   cfg.content_dim * self.bottleneck_hw ** 2)
        dec: list[nn.Module] = []
        ch = cfg.content_dim
        for k in range(self.num_downs):
            out = max(cfg.content_dim >> (k + 1), cfg.pre_base)
            dec += _deconv_block(ch, out)
            ch = out
        dec += [nn.Conv2d(ch, 3, 7, 1, 3), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)

    def encode(self, composite: torch.Tensor) -> torch.Tensor:
        _check_input_size(composite, self.cfg.resolution // 2,
                          "mirror autoencoder")
        return _checked_fc(self.fc_bottleneck,
                           self.encoder(composite).flatten(1),
                           "mirror autoencoder")

    def decode(self, content: torch.Tensor) -> torch.Tensor:
        s = self.bottleneck_hw
        x = self.fc_decode(content).view(-1, self.cfg.content_dim, s, s)
        return self.decoder(x)

    def forward(self, composite: torch.Tensor):
        content = self.encode(composite)
        return content, self.decode(content)


class _DiscriminatorBranch(nn.Module):
    def __init__(self, cfg: ArchitectureConfig, input_size: int):
        super().__init__()
        self.num_downs = _num_downs(input_size, cfg.disc_downs, 1)
        layers: list[nn.Module] = []
        ch = 3
        for k in range(self.num_downs):
            out = min(cfg.disc_base * 2 ** k, cfg.disc_max)
            layers += _conv_block(ch, out, 4, 2, norm=False, spectral=True,
                                  power_iterations=cfg.power_iterations)
            ch = out
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(ch * (input_size >> self.num_downs) ** 2,
                            cfg.content_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return _checked_fc(self.fc, self.features(x).flatten(1),
                           "discriminator branch")


class Discriminator(nn.Module):
    """Global branch on the face, local branch on the eye composite; the two
    feature vectors are concatenated and merged into one real/fake logit.
    All conv layers are spectrally normalized.
    """

    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.cfg = cfg
        self.global_branch = _DiscriminatorBranch(cfg, cfg.resolution)
        self.local_branch = _DiscriminatorBranch(cfg, cfg.resolution // 2)
        self.fc_merge = nn.Linear(2 * cfg.content_dim, 2 * cfg.content_dim)
        self.fc_out = nn.Linear(2 * cfg.content_dim, 1)

    def forward(self, face: torch.Tensor,
                composite: torch.Tensor) -> torch.Tensor:
        if face.shape[-1] != self.cfg.resolution:
            raise ShapeMismatchError(
                f"face width {face.shape[-1]} != {self.cfg.resolution}")
        merged = torch.cat([self.global_branch(face),
                            self.local_branch(composite)], dim=1)
        h = F.leaky_relu(self.fc_merge(merged), LEAKY_SLOPE)
        return self.fc_out(h).squeeze(-1)


@dataclass
class NetworkBundle:
    """All parameter sets for one experiment."""

    config: ArchitectureConfig
    g_x: Generator
    g_y: Generator
    e_r: AngleEncoder
    g_pre: MirrorAutoencoder
    d_x: Discriminator
    d_y: Discriminator

    def named_nets(self) -> dict[str, nn.Module]:
        return {"g_x": self.g_x, "g_y": self.g_y, "e_r": self.e_r,
                "g_pre": self.g_pre, "d_x": self.d_x, "d_y": self.d_y}

    def train(self) -> "NetworkBundle":
        for net in self.named_nets().values():
            net.train()
        return self

    def eval(self) -> "NetworkBundle":
        for net in self.named_nets().values():
            net.eval()
        return self

    def to(self, dtype: torch.dtype) -> "NetworkBundle":
        for net in self.named_nets().values():
            net.to(dtype)
        return self


def build_bundle(cfg: ArchitectureConfig,
                 seed: int | None = None) -> NetworkBundle:
    """Construct and initialize all six networks.

    The two discriminators share an architecture but never share weights.
    """
    if seed is not None:
        torch.manual_seed(seed)
    bundle = NetworkBundle(
        config=cfg,
        g_x=Generator(cfg, with_angle=False),
        g_y=Generator(cfg, with_angle=True),
        e_r=AngleEncoder(cfg),
        g_pre=MirrorAutoencoder(cfg),
        d_x=Discriminator(cfg),
        d_y=Discriminator(cfg),
    )
    for net in bundle.named_nets().values():
        init_weights(net, cfg.init_std)
    return bundle


def trace_activation_shapes(module: nn.Module, *inputs: torch.Tensor,
                            kinds: tuple = (nn.Conv2d, nn.ConvTranspose2d,
                                            nn.Linear)):
    """Run a forward pass and record each layer's output shape by name."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    hooks = []
    for name, m in module.named_modules():
        if isinstance(m, kinds):
            hooks.append(m.register_forward_hook(
                lambda mod, inp, out, name=name:
                shapes.append((name, tuple(out.shape)))))
    try:
        with torch.no_grad():
            module(*inputs)
    finally:
        for h in hooks:
            h.remove()
    return shapes


def spectral_conv_layers(module: nn.Module) -> list[SpectralNormConv2d]:
    return [m for m in module.modules() if isinstance(m, SpectralNormConv2d)]


def conv_singular_values(module: nn.Module,
                         normalized: bool = True) -> list[float]:
    """Top singular value of each conv weight, by full SVD (test oracle aid)."""
    values = []
    for m in module.modules():
        if isinstance(m, SpectralNormConv2d):
            w = m.normalized_weight() if normalized else m.weight
        elif isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            w = m.weight
        else:
            continue
        flat = w.detach().reshape(w.shape[0], -1)
        values.append(float(torch.linalg.svdvals(flat)[0]))
    return values
