"""Shared-encoder, twin-decoder segmentation network.

A residual encoder produces a five-level feature pyramid (stem at half
resolution plus four stages at strides 4, 8, 16, 32).  Two structurally
identical U-Net style decoders hang off it: ``dec_labeled`` learns from
ground-truth masks and supplies pseudo-labels, ``dec_pseudo`` learns from
pseudo-labels under feature dropout and is the decoder used at inference.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint

_DEPTH_BLOCKS = {10: (1, 1, 1, 1), 18: (2, 2, 2, 2), 34: (3, 4, 6, 3)}


@dataclass(frozen=True)
class EncoderSpec:
    depth: int = 34
    base_width: int = 64
    in_channels: int = 1
    pretrained: bool = False

    def __post_init__(self) -> None:
        if self.depth not in _DEPTH_BLOCKS:
            raise ValueError(f"depth must be one of {sorted(_DEPTH_BLOCKS)}, got {self.depth}")
        if self.base_width < 1 or self.in_channels < 1:
            raise ValueError("base_width and in_channels must be >= 1")

    @property
    def stage_widths(self) -> tuple[int, int, int, int]:
        w = self.base_width
        return (w, 2 * w, 4 * w, 8 * w)


@dataclass(frozen=True)
class DecoderSpec:
    """Output channels of the five upsampling blocks, deepest first."""

    widths: tuple[int, int, int, int, int] = (256, 128, 64, 32, 16)

    def __post_init__(self) -> None:
        if len(self.widths) != 5 or any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be five positive ints, got {self.widths}")


@dataclass(frozen=True)
class FeatureDropoutConfig:
    """Multiplicative Bernoulli dropout on encoder features with 1/(1-p) rescaling."""

    drop_rate: float = 0.5
    granularity: str = "channel"
    level: str = "deepest"

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError(f"drop_rate must be in [0, 1), got {self.drop_rate}")
        if self.granularity not in ("channel", "element"):
            raise ValueError(f"granularity must be 'channel' or 'element', got {self.granularity!r}")
        if self.level not in ("deepest", "all"):
            raise ValueError(f"level must be 'deepest' or 'all', got {self.level!r}")


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.shortcut: nn.Module = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class ResNetEncoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        w = spec.base_width
        blocks = _DEPTH_BLOCKS[spec.depth]
        self.stem = nn.Sequential(
            nn.Conv2d(spec.in_channels, w, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(w),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        widths = spec.stage_widths
        self.layer1 = self._make_stage(w, widths[0], blocks[0], stride=1)
        self.layer2 = self._make_stage(widths[0], widths[1], blocks[1], stride=2)
        self.layer3 = self._make_stage(widths[1], widths[2], blocks[2], stride=2)
        self.layer4 = self._make_stage(widths[2], widths[3], blocks[3], stride=2)
        self.spec = spec

    @staticmethod
    def _make_stage(in_ch: int, out_ch: int, count: int, stride: int) -> nn.Sequential:
        stages = [BasicBlock(in_ch, out_ch, stride)]
        stages.extend(BasicBlock(out_ch, out_ch) for _ in range(count - 1))
        return nn.Sequential(*stages)

    @property
    def pyramid_channels(self) -> tuple[int, ...]:
        w = self.spec.base_width
        return (w,) + self.spec.stage_widths

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() != 4:
            raise ValueError(f"expected [B,C,H,W] input, got shape {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        if h % 32 != 0 or w % 32 != 0:
            raise ValueError(f"input spatial size {h}x{w} must be a multiple of 32")
        s = self.stem(x)           # [B,w,H/2,W/2]
        c1 = self.layer1(self.pool(s))  # H/4
        c2 = self.layer2(c1)       # H/8
        c3 = self.layer3(c2)       # H/16
        c4 = self.layer4(c3)       # H/32
        return [s, c1, c2, c3, c4]


class UpBlock(nn.Module):
    """x2 bilinear upsample, skip concat, then two conv-bn-relu."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch + skip_ch, out_ch, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor, skip: torch.Tensor | None = None) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        x = self.relu(self.bn1(self.conv1(x)))
        return self.relu(self.bn2(self.conv2(x)))


class Decoder(nn.Module):
    def __init__(self, pyramid_channels: tuple[int, ...], spec: DecoderSpec, num_classes: int = 2):
        super().__init__()
        widths = spec.widths
        # Skips pair with pyramid levels from stride 16 down to the stem;
        # the final block restores full resolution without a skip.
        skip_channels = list(pyramid_channels[-2::-1]) + [0]
        blocks = []
        in_ch = pyramid_channels[-1]
        for skip_ch, out_ch in zip(skip_channels, widths):
            blocks.append(UpBlock(in_ch, skip_ch, out_ch))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(widths[-1], num_classes, 1)

    def forward(self, pyramid: list[torch.Tensor]) -> torch.Tensor:
        skips = pyramid[-2::-1] + [None]
        x = pyramid[-1]
        for block, skip in zip(self.blocks, skips):
            x = block(x, skip)
        return self.head(x)  # [B,2,H,W]


def _feature_dropout(
    feat: torch.Tensor, cfg: FeatureDropoutConfig, rng: torch.Generator
) -> torch.Tensor:
    keep = 1.0 - cfg.drop_rate
    if cfg.granularity == "channel":
        shape: tuple[int, ...] = (feat.shape[0], feat.shape[1], 1, 1)
    else:
        shape = tuple(feat.shape)
    draw = torch.rand(shape, generator=rng, dtype=feat.dtype, device=feat.device)
    mask = (draw < keep).to(feat.dtype)
    return feat * mask / keep


class SegModel(nn.Module):
    """Encoder plus twin decoders; the pseudo branch owns inference."""

    def __init__(
        self,
        enc_spec: EncoderSpec,
        dec_spec: DecoderSpec,
        dropout_cfg: FeatureDropoutConfig,
        eval_size: int = 256,
    ):
        super().__init__()
        if eval_size % 32 != 0:
            raise ValueError(f"eval_size {eval_size} must be a multiple of 32")
        self.encoder = ResNetEncoder(enc_spec)
        channels = self.encoder.pyramid_channels
        self.dec_labeled = Decoder(channels, dec_spec)
        self.dec_pseudo = Decoder(channels, dec_spec)
        self.enc_spec = enc_spec
        self.dec_spec = dec_spec
        self.dropout_cfg = dropout_cfg
        self.eval_size = eval_size
        if enc_spec.pretrained:
            _load_pretrained_encoder(self.encoder)

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.encoder(x)

    def decode_labeled(self, pyramid: list[torch.Tensor]) -> torch.Tensor:
        return self.dec_labeled(pyramid)

    def decode_pseudo(
        self,
        pyramid: list[torch.Tensor],
        dropout_cfg: FeatureDropoutConfig | None = None,
        rng: torch.Generator | None = None,
        training: bool = False,
    ) -> torch.Tensor:
        """Decode with a fresh dropout mask per call while training; at
        evaluation the features pass through untouched."""
        cfg = dropout_cfg or self.dropout_cfg
        if training and cfg.drop_rate > 0.0:
            if rng is None:
                raise ValueError("feature dropout needs an explicit torch.Generator")
            if cfg.level == "deepest":
                pyramid = pyramid[:-1] + [_feature_dropout(pyramid[-1], cfg, rng)]
            else:
                pyramid = [_feature_dropout(level, cfg, rng) for level in pyramid]
        return self.dec_pseudo(pyramid)

    def predict_mask(self, image: np.ndarray, eval_size: int | None = None) -> np.ndarray:
        """Binary mask at the image's own resolution via the inference branch.

        The image is resized to the working resolution, passed through
        encoder and pseudo decoder in eval mode, argmaxed with ties going to
        background, then upsampled back with nearest-neighbor.
        """
        if image.ndim != 2:
            raise ValueError(f"expected HxW image, got shape {image.shape}")
        size = eval_size or self.eval_size
        if size % 32 != 0:
            raise ValueError(f"eval size {size} must be a multiple of 32")
        resized = cv2.resize(image.astype(np.float32), (size, size), interpolation=cv2.INTER_LINEAR)
        x = torch.from_numpy(resized)[None, None]  # [1,1,S,S]
        was_training = self.training
        self.eval()
        with torch.no_grad():
            logits = self.decode_pseudo(self.encode(x))
        self.train(was_training)
        mask = (logits[0, 1] > logits[0, 0]).numpy().astype(np.uint8)
        if mask.shape != image.shape:
            mask = cv2.resize(mask, (image.shape[1], image.shape[0]), interpolation=cv2.INTER_NEAREST)
        return mask


def foreground_prob_64(logits: torch.Tensor) -> torch.Tensor:
    """Softmax foreground probability pooled to the prior's 64x64 grid.

    Differentiable; average pooling keeps the mean exactly when the input is
    an integer multiple of 64.
    """
    if logits.dim() != 4 or logits.shape[1] != 2:
        raise ValueError(f"expected [B,2,H,W] logits, got shape {tuple(logits.shape)}")
    probs = torch.softmax(logits, dim=1)[:, 1:2]  # [B,1,H,W]
    return F.adaptive_avg_pool2d(probs, 64).squeeze(1)  # [B,64,64]


def build_segmodel(
    enc_spec: EncoderSpec,
    dec_spec: DecoderSpec,
    dropout_cfg: FeatureDropoutConfig,
    seed: int,
    eval_size: int = 256,
) -> SegModel:
    torch.manual_seed(seed)
    return SegModel(enc_spec, dec_spec, dropout_cfg, eval_size)


def _load_pretrained_encoder(encoder: ResNetEncoder) -> None:
    """Initialize from torchvision ImageNet weights (optional dependency).

    Only the standard depth-34, width-64 layout matches; the RGB stem is
    collapsed to one channel by summing over the color axis.
    """
    spec = encoder.spec
    if spec.depth != 34 or spec.base_width != 64:
        raise ValueError("pretrained weights require depth=34 and base_width=64")
    try:
        from torchvision.models import ResNet34_Weights, resnet34
    except ImportError as err:
        raise ImportError("pretrained=True needs the 'pretrained' extra (torchvision)") from err
    reference = resnet34(weights=ResNet34_Weights.IMAGENET1K_V1)
    state = encoder.state_dict()
    ref = reference.state_dict()
    mapping = {"stem.0": "conv1", "stem.1": "bn1"}
    for name in state:
        stage = name.split(".")[0]
        if stage in ("layer1", "layer2", "layer3", "layer4"):
            ref_name = name.replace("shortcut", "downsample")
        else:
            prefix = ".".join(name.split(".")[:2])
            if prefix not in mapping:
                continue
            ref_name = name.replace(prefix, mapping[prefix])
        if ref_name not in ref:
            continue
        value = ref[ref_name]
        if name == "stem.0.weight" and spec.in_channels == 1:
            value = value.sum(dim=1, keepdim=True)
        if value.shape == state[name].shape:
            state[name] = value
    encoder.load_state_dict(state)


def save_segmodel(model: SegModel, path: str | Path, extra_meta: dict[str, Any] | None = None) -> Path:
    meta = {
        "kind": "segmodel",
        "encoder_spec": asdict(model.enc_spec),
        "decoder_spec": {"widths": list(model.dec_spec.widths)},
        "dropout_config": asdict(model.dropout_cfg),
        "eval_size": model.eval_size,
    }
    if extra_meta:
        meta.update(extra_meta)
    return checkpoint.save_npz(path, checkpoint.module_arrays(model, prefix="model."), meta)


def load_segmodel(path: str | Path) -> SegModel:
    arrays, meta = checkpoint.load_npz(path)
    checkpoint.expect_kind(meta, "segmodel", path)
    enc_spec_fields = dict(meta["encoder_spec"])
    enc_spec_fields["pretrained"] = False  # weights come from the checkpoint itself
    enc_spec = EncoderSpec(**enc_spec_fields)
    dec_spec = DecoderSpec(widths=tuple(meta["decoder_spec"]["widths"]))
    dropout_cfg = FeatureDropoutConfig(**meta["dropout_config"])
    model = SegModel(enc_spec, dec_spec, dropout_cfg, eval_size=int(meta["eval_size"]))
    checkpoint.load_module_arrays(model, arrays, prefix="model.")
    return model
