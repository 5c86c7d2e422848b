"""Decomposer (one encoder, k decoders) and merger (k encoders, per-head decoders).

Both are UNets built from the same stage blocks.  Stage 0 works at full
resolution; each later stage halves the spatial side and doubles the channel
count, so a ``depth``-stage encoder shrinks the input by ``2 ** (depth - 1)``.
Decoders mirror this with ``depth - 1`` upsampling stages plus a
full-resolution output stage, each built from two transposed convolutions.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, DimensionError

# softplus(INIT_WEIGHT) == 1
INIT_WEIGHT = math.log(math.e - 1.0)


@dataclass(frozen=True)
class NetworkConfig:
    k: int = 3
    resolution: int = 64
    base_channels: int = 16
    depth: int = 5
    heads: int = 1

    def validate(self):
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.heads not in (1, 2):
            raise ConfigError(f"heads must be 1 or 2, got {self.heads}")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        if self.resolution <= 0 or self.resolution % (2 ** (self.depth - 1)):
            raise ConfigError(
                f"resolution {self.resolution} is not divisible by 2**{self.depth - 1}")
        return self

    @property
    def channels(self):
        return [self.base_channels * 2 ** s for s in range(self.depth)]

    @property
    def latent_shape(self):
        side = self.resolution // 2 ** (self.depth - 1)
        return (self.channels[-1], side, side)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: int(v) for k, v in d.items()}).validate()


PAPER_NETWORK = NetworkConfig(k=3, resolution=224, base_channels=64, depth=5)
DESK_NETWORK = NetworkConfig(k=3, resolution=64, base_channels=16, depth=5)


def _conv_block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def _tconv_block(cin, cout, upsample):
    if upsample:
        conv = nn.ConvTranspose2d(cin, cout, 2, stride=2, bias=False)
    else:
        conv = nn.ConvTranspose2d(cin, cout, 3, padding=1, bias=False)
    return nn.Sequential(conv, nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class Encoder(nn.Module):
    """Returns ``(latent, skips)`` with ``skips[s]`` the output of stage ``s < depth-1``."""

    def __init__(self, config, in_channels=3):
        super().__init__()
        chans = config.channels
        stages = [_conv_block(in_channels, chans[0])]
        for s in range(1, config.depth):
            stages.append(nn.Sequential(nn.MaxPool2d(2), _conv_block(chans[s - 1], chans[s])))
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
        return skips.pop(), skips


class UpStage(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.up = _tconv_block(cin, cout, upsample=True)
        self.refine = _tconv_block(2 * cout, cout, upsample=False)

    def forward(self, x, skip):
        x = self.up(x)
        return self.refine(torch.cat([x, skip], dim=1))


class Decoder(nn.Module):
    def __init__(self, config, out_channels=3):
        super().__init__()
        chans = config.channels
        self.ups = nn.ModuleList(UpStage(chans[s], chans[s - 1])
                                 for s in range(config.depth - 1, 0, -1))
        self.head = nn.Sequential(
            _tconv_block(chans[0], chans[0], upsample=False),
            nn.ConvTranspose2d(chans[0], out_channels, 3, padding=1),
        )

    def forward(self, latent, skips):
        x = latent
        for up, skip in zip(self.ups, reversed(skips)):
            x = up(x, skip)
        return torch.sigmoid(self.head(x))


def _check_batch(image, config):
    if image.dim() != 4 or tuple(image.shape[1:]) != (3, config.resolution, config.resolution):
        raise DimensionError(
            f"expected (N, 3, {config.resolution}, {config.resolution}), got {tuple(image.shape)}")


class Decomposer(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config.validate()
        self.encoder = Encoder(config)
        self.decoders = nn.ModuleList(Decoder(config) for _ in range(config.k))

    def forward(self, image):
        _check_batch(image, self.config)
        latent, skips = self.encoder(image)
        # every decoder sees the same latent and skip tensor objects
        return [decoder(latent, skips) for decoder in self.decoders]


class Merger(nn.Module):
    """k encoders shared by all heads; one decoder and one weight vector per head."""

    def __init__(self, config):
        super().__init__()
        self.config = config.validate()
        self.encoders = nn.ModuleList(Encoder(config) for _ in range(config.k))
        self.decoders = nn.ModuleList(Decoder(config) for _ in range(config.heads))
        self.weights = nn.Parameter(torch.full((config.heads, config.k), INIT_WEIGHT))

    def component_weights(self, head):
        if not 0 <= head < self.config.heads:
            raise IndexError(f"head {head} out of range for {self.config.heads} head(s)")
        return F.softplus(self.weights[head])

    def apply_weights(self, head, components):
        w = self.component_weights(head)
        return [w[i] * c for i, c in enumerate(components)]

    def forward(self, components, head=0):
        if len(components) != self.config.k:
            raise DimensionError(f"expected {self.config.k} components, got {len(components)}")
        for c in components:
            _check_batch(c, self.config)
        weighted = self.apply_weights(head, components)
        latent_sum, skip_sums = None, None
        for encoder, comp in zip(self.encoders, weighted):
            latent, skips = encoder(comp)
            if latent_sum is None:
                latent_sum, skip_sums = latent, list(skips)
            else:
                latent_sum = latent_sum + latent
                skip_sums = [a + b for a, b in zip(skip_sums, skips)]
        return self.decoders[head](latent_sum, skip_sums)


def init_params(config, seed=0):
    """Build a (Decomposer, Merger) pair deterministically from ``seed``.

    Convolutions keep torch's default fan-in scaled uniform initialisation;
    component weights start at ``softplus(w) == 1``.
    """
    config = config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        dec = Decomposer(config)
        mer = Merger(config)
    return dec, mer


def _as_batch(image):
    image = torch.as_tensor(image)
    return image.unsqueeze(0) if image.dim() == 3 else image


def _match_input(out, image):
    return out.squeeze(0) if torch.as_tensor(image).dim() == 3 else out


def decompose(dec, image):
    """k components for a ``(3, H, W)`` or ``(N, 3, H, W)`` image."""
    comps = dec(_as_batch(image))
    return [_match_input(c, image) for c in comps]


def apply_weights(mer, head, components):
    return mer.apply_weights(head, components)


def merge(mer, head, components):
    single = torch.as_tensor(components[0]).dim() == 3
    out = mer([_as_batch(c) for c in components], head=head)
    return out.squeeze(0) if single else out


def demorph(dec, mer, morph):
    """Return ``(O1, O2, components)`` for a morph using both merger heads."""
    if mer.config.heads != 2:
        raise ConfigError(f"demorphing needs a 2-head merger, got {mer.config.heads}")
    components = decompose(dec, morph)
    return merge(mer, 0, components), merge(mer, 1, components), components


def audit_shapes(config):
    """Construction-time shape audit: per-stage encoder and decoder channel counts."""
    dec = Decomposer(config)
    enc_channels = [stage[-1][0].out_channels if s else stage[0].out_channels
                    for s, stage in enumerate(dec.encoder.stages)]
    dec_channels = [up.refine[0].out_channels for up in dec.decoders[0].ups]
    return enc_channels, dec_channels


def latent_shape(config, image=None):
    """Latent shape produced by the encoder, measured with a forward pass."""
    config = config.validate()
    enc = Encoder(config).eval()
    if image is None:
        image = torch.zeros(1, 3, config.resolution, config.resolution)
    with torch.no_grad():
        latent, _ = enc(image)
    return tuple(latent.shape[1:])
