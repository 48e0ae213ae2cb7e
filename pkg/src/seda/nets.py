"""Segmentation stream, gated edge stream, and the two patch discriminators.

The semantic net is a small encoder-decoder (stride-16 bottleneck, bilinear
upsampling) exposing the intermediate maps the edge stream taps; group norm
everywhere so forward passes carry no running statistics. The classification
head always sees a fusion channel so the same weights serve both the fused
and the edge-free path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class NetConfig:
    num_classes: int = 5
    image_size: int = 64
    stem_width: int = 16
    encoder_widths: tuple = (32, 64, 128, 256)
    decoder_widths: tuple = (128, 64, 32, 16)
    edge_width: int = 16
    edge_blocks: int = 3
    d_sem_widths: tuple = (64, 128, 256, 512)
    d_eg_widths: tuple = (32, 64, 128)
    leaky_slope: float = 0.2
    fusion: str = "boundary"

    def validate(self) -> None:
        widths = (self.stem_width, self.edge_width, *self.encoder_widths,
                  *self.decoder_widths, *self.d_sem_widths, *self.d_eg_widths)
        if any(w <= 0 for w in widths):
            raise ValueError("all channel widths must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if len(self.decoder_widths) != len(self.encoder_widths):
            raise ValueError("decoder must mirror encoder stage count")
        total_stride = 2 ** len(self.encoder_widths)
        if self.image_size % total_stride != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by total stride {total_stride}")
        if self.edge_blocks != len(self.encoder_widths) - 1:
            raise ValueError(
                f"edge stream has {self.edge_blocks} blocks but the encoder exposes "
                f"{len(self.encoder_widths) - 1} gating taps")
        if self.fusion not in ("boundary", "features"):
            raise ValueError(f"fusion must be boundary or features, got {self.fusion!r}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in vars(self)}
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        kw = dict(d)
        for k, v in kw.items():
            if isinstance(v, list):
                kw[k] = tuple(v)
        cfg = cls(**kw)
        cfg.validate()
        return cfg


def _gn(ch: int) -> nn.GroupNorm:
    groups = 8 if ch % 8 == 0 else 1
    return nn.GroupNorm(groups, ch)


def resample(x: torch.Tensor, size, like_labels: bool = False) -> torch.Tensor:
    if x.shape[-2:] == tuple(size):
        return x
    mode = "nearest" if like_labels else "bilinear"
    kwargs = {} if like_labels else {"align_corners": False}
    return F.interpolate(x, size=size, mode=mode, **kwargs)


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm = _gn(out_ch)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm1 = _gn(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = _gn(ch)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(x + h)


class GatedConv2d(nn.Module):
    """Attention-gated conv: the gate tap decides which edge activations pass.

    attention = sigmoid(1x1 conv over the normalized concat of edge features
    and the (resampled) gate source); output = conv(edge * attention). Pass
    `attention` explicitly to override the computed map.
    """

    def __init__(self, edge_ch: int, gate_ch: int):
        super().__init__()
        self.attn_norm = nn.GroupNorm(1, edge_ch + gate_ch)
        self.attn_conv = nn.Conv2d(edge_ch + gate_ch, 1, 1)
        self.out_conv = nn.Conv2d(edge_ch, edge_ch, 3, padding=1)

    def forward(self, x, gate, attention=None):
        if attention is None:
            gate = resample(gate, x.shape[-2:])
            attention = torch.sigmoid(self.attn_conv(self.attn_norm(torch.cat([x, gate], dim=1))))
        return self.out_conv(x * attention), attention


class Backbone(nn.Module):
    """Encoder-decoder returning the maps other components tap."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.stem = ConvBlock(3, cfg.stem_width)
        downs = []
        in_ch = cfg.stem_width
        for w in cfg.encoder_widths:
            downs.append(ConvBlock(in_ch, w, stride=2))
            in_ch = w
        self.downs = nn.ModuleList(downs)
        ups = []
        skips = (cfg.stem_width, *cfg.encoder_widths[:-1])[::-1]
        for skip_ch, w in zip(skips, cfg.decoder_widths):
            ups.append(ConvBlock(in_ch + skip_ch, w))
            in_ch = w
        self.ups = nn.ModuleList(ups)

    def forward(self, image):
        first_conv = self.stem(image)
        feats = [first_conv]
        x = first_conv
        for down in self.downs:
            x = down(x)
            feats.append(x)
        bottleneck = x
        for i, up in enumerate(self.ups):
            skip = feats[-(i + 2)]
            x = up(torch.cat([resample(x, skip.shape[-2:]), skip], dim=1))
        return {
            "first_conv": first_conv,
            "stage_feats": feats[1:-1],  # encoder stages 1..n-1, the gating taps
            "bottleneck": bottleneck,
            "decoder_feat": x,
        }


class FusionHead(nn.Module):
    """Classifier over decoder features concatenated with the fusion channel(s)."""

    def __init__(self, decoder_ch: int, fusion_ch: int, num_classes: int):
        super().__init__()
        self.fusion_ch = fusion_ch
        self.mix = ConvBlock(decoder_ch + fusion_ch, decoder_ch)
        self.classify = nn.Conv2d(decoder_ch, num_classes, 1)

    def forward(self, decoder_feat, fused=None):
        if fused is None:
            b, _, h, w = decoder_feat.shape
            fused = decoder_feat.new_zeros(b, self.fusion_ch, h, w)
        fused = resample(fused, decoder_feat.shape[-2:])
        return self.classify(self.mix(torch.cat([decoder_feat, fused], dim=1)))


@dataclass
class BackboneSpec:
    """Channel plan any backbone must declare for the other nets to attach."""

    first_conv_ch: int
    tap_channels: tuple
    decoder_ch: int

    @classmethod
    def from_config(cls, cfg: NetConfig) -> "BackboneSpec":
        return cls(cfg.stem_width, tuple(cfg.encoder_widths[:-1]), cfg.decoder_widths[-1])


class SemanticNet(nn.Module):
    def __init__(self, cfg: NetConfig, backbone: nn.Module | None = None,
                 spec: BackboneSpec | None = None):
        super().__init__()
        self.backbone = backbone if backbone is not None else Backbone(cfg)
        spec = spec if spec is not None else BackboneSpec.from_config(cfg)
        fusion_ch = 1 if cfg.fusion == "boundary" else cfg.edge_width
        self.head = FusionHead(spec.decoder_ch, fusion_ch, cfg.num_classes)

    def forward_features(self, image):
        if not torch.isfinite(image).all():
            raise ValueError("image contains non-finite values")
        if image.min() < -1e-6 or image.max() > 1.0 + 1e-6:
            raise ValueError("image values must lie in [0, 1]")
        out = self.backbone(image)
        out["logits"] = self.head(out["decoder_feat"])
        return out

    def fuse(self, decoder_feat, fused):
        return self.head(decoder_feat, fused)

    def forward(self, image):
        return self.forward_features(image)["logits"]


class EdgeStream(nn.Module):
    """Residual blocks with gated convs; emits a boundary map and features for D_eg."""

    def __init__(self, in_ch: int, tap_channels: Sequence[int], width: int):
        super().__init__()
        self.proj = ConvBlock(in_ch, width)
        self.blocks = nn.ModuleList(ResidualBlock(width) for _ in tap_channels)
        self.gates = nn.ModuleList(GatedConv2d(width, g) for g in tap_channels)
        self.boundary_head = nn.Conv2d(width, 1, 1)

    def forward(self, first_conv, gating_feats, attention_overrides=None):
        if len(gating_feats) != len(self.blocks):
            raise ValueError(
                f"expected {len(self.blocks)} gating feature maps, got {len(gating_feats)}")
        x = self.proj(first_conv)
        attentions = []
        for i, (block, gate) in enumerate(zip(self.blocks, self.gates)):
            x = block(x)
            override = attention_overrides[i] if attention_overrides is not None else None
            x, attn = gate(x, gating_feats[i], attention=override)
            attentions.append(attn)
        boundary = torch.sigmoid(self.boundary_head(x))
        return {"boundary": boundary, "edge_feat": x, "attentions": attentions}


class PatchDiscriminator(nn.Module):
    """Stack of stride-2 4x4 convs with leaky relu, 1x1 classifier to raw scores."""

    def __init__(self, in_ch: int, widths: Sequence[int], slope: float):
        super().__init__()
        self.in_ch = in_ch
        layers = []
        ch = in_ch
        for w in widths:
            layers += [nn.Conv2d(ch, w, 4, stride=2, padding=1), nn.LeakyReLU(slope)]
            ch = w
        layers.append(nn.Conv2d(ch, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[1] != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {x.shape[1]}")
        return self.net(x)


class SedaModel(nn.Module):
    """The four networks plus the fusion seam, as one checkpointable unit."""

    def __init__(self, cfg: NetConfig, backbone: nn.Module | None = None,
                 backbone_spec: BackboneSpec | None = None):
        super().__init__()
        cfg.validate()
        spec = backbone_spec if backbone_spec is not None else BackboneSpec.from_config(cfg)
        if cfg.edge_blocks != len(spec.tap_channels):
            raise ValueError(
                f"edge stream has {cfg.edge_blocks} blocks but the backbone exposes "
                f"{len(spec.tap_channels)} gating taps")
        self.cfg = cfg
        self.semantic = SemanticNet(cfg, backbone=backbone, spec=spec)
        self.edge = EdgeStream(spec.first_conv_ch, spec.tap_channels, cfg.edge_width)
        self.d_sem = PatchDiscriminator(cfg.num_classes, cfg.d_sem_widths, cfg.leaky_slope)
        self.d_eg = PatchDiscriminator(cfg.edge_width, cfg.d_eg_widths, cfg.leaky_slope)

    def generator_parameters(self):
        yield from self.semantic.parameters()
        yield from self.edge.parameters()

    def forward(self, image, use_edge: bool = True):
        sem = self.semantic.forward_features(image)
        if not use_edge:
            return {"logits": sem["logits"], "boundary": None, "edge_feat": None, "sem": sem}
        edge = self.edge(sem["first_conv"], sem["stage_feats"])
        fused = edge["boundary"] if self.cfg.fusion == "boundary" else edge["edge_feat"]
        logits = self.semantic.fuse(sem["decoder_feat"], fused)
        return {"logits": logits, "boundary": edge["boundary"],
                "edge_feat": edge["edge_feat"], "sem": sem}

    def discriminate(self, feat, which: str):
        if which == "sem":
            return self.d_sem(feat)
        if which == "edge":
            return self.d_eg(feat)
        raise ValueError(f"which must be 'sem' or 'edge', got {which!r}")


def build_nets(cfg: NetConfig, backbone: nn.Module | None = None,
               backbone_spec: BackboneSpec | None = None) -> SedaModel:
    return SedaModel(cfg, backbone=backbone, backbone_spec=backbone_spec)
