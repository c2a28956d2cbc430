"""Segmentation network.

Five stride-2 conv+relu encoder stages halve the resolution at each level;
the decoder mirrors them with nearest upsampling, 1x1-adapted skip additions
and 3x3 conv+relu stages that halve the channel count, finished by a 1x1
classification head.  Stage I runs a single RGB encoder.  Stage II runs RGB
and depth encoders whose per-stage features are fused by elementwise sum
into the shared decoder; a frozen copy of the Stage-I RGB encoder supplies
contrastive target features during training and is never evaluated at
inference.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ResolutionError, ShapeError

N_STAGES = 5
DOWN_FACTOR = 2 ** N_STAGES


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int
    stage_channels: tuple
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if len(self.stage_channels) != N_STAGES:
            raise ShapeError(f"need exactly {N_STAGES} stage widths, got {len(self.stage_channels)}")
        if any(c < 1 for c in self.stage_channels) or self.in_channels < 1:
            raise ShapeError("channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ShapeError("encoder kernel must be odd so stride-2 stages halve exactly")


class EncoderParams:
    def __init__(self, cfg: EncoderConfig, stages):
        if len(stages) != N_STAGES:
            raise ShapeError("encoder needs one (kernel, bias) pair per stage")
        self.cfg = cfg
        self.stages = list(stages)

    def named(self, prefix=""):
        out = {}
        for i, (k, b) in enumerate(self.stages, 1):
            out[f"{prefix}s{i}.kernel"] = k
            out[f"{prefix}s{i}.bias"] = b
        return out

    def tensors(self):
        return [t for pair in self.stages for t in pair]


class DecoderParams:
    """Skip adapters (1x1), five upsampling conv stages (3x3), and the head."""

    def __init__(self, enc_channels, num_classes, skips, stages, head):
        self.enc_channels = tuple(enc_channels)
        self.num_classes = int(num_classes)
        self.skips = list(skips)
        self.stages = list(stages)
        self.head = head

    def named(self, prefix=""):
        out = {}
        for i, (k, b) in enumerate(self.skips, 1):
            out[f"{prefix}skip{i}.kernel"] = k
            out[f"{prefix}skip{i}.bias"] = b
        for i, (k, b) in enumerate(self.stages, 1):
            out[f"{prefix}s{i}.kernel"] = k
            out[f"{prefix}s{i}.bias"] = b
        out[f"{prefix}head.kernel"] = self.head[0]
        out[f"{prefix}head.bias"] = self.head[1]
        return out

    def tensors(self):
        pairs = self.skips + self.stages + [self.head]
        return [t for pair in pairs for t in pair]


def decoder_widths(stage_channels):
    widths = []
    cur = stage_channels[-1]
    for _ in range(N_STAGES):
        cur = (cur + 1) // 2
        widths.append(cur)
    return widths


def _draw_conv(rng, cout, cin, k):
    # fan-in counted as input channels per pixel; folding the kernel area in
    # as well shrinks the per-layer gain to sqrt(k^2/6) ~ 0.41 at k=3, and with
    # no normalization layers anywhere that attenuates activations ~2500x
    # across the ten-layer encoder-decoder path and stalls training
    bound = float(np.sqrt(1.0 / cin))
    kernel = ad.parameter(rng.uniform(-bound, bound, size=(cout, cin, k, k)))
    bias = ad.parameter(rng.uniform(-bound, bound, size=cout))
    return kernel, bias


def build_encoder(cfg: EncoderConfig, rng) -> EncoderParams:
    stages = []
    cin = cfg.in_channels
    for cout in cfg.stage_channels:
        stages.append(_draw_conv(rng, cout, cin, cfg.kernel_size))
        cin = cout
    return EncoderParams(cfg, stages)


def build_decoder(stage_channels, num_classes, rng) -> DecoderParams:
    if num_classes < 2:
        raise ShapeError(f"num_classes must be >= 2, got {num_classes}")
    skips = []
    stages = []
    cur = stage_channels[-1]
    for j in range(1, N_STAGES + 1):
        if j <= N_STAGES - 1:
            # adapt encoder stage (5-j) features to the running channel width
            skips.append(_draw_conv(rng, cur, stage_channels[N_STAGES - 1 - j], 1))
        nxt = (cur + 1) // 2
        stages.append(_draw_conv(rng, nxt, cur, 3))
        cur = nxt
    head = _draw_conv(rng, num_classes, cur, 1)
    return DecoderParams(stage_channels, num_classes, skips, stages, head)


class NetworkParams:
    """Single-modality network: one encoder plus the decoder (Stage I form)."""

    def __init__(self, encoder: EncoderParams, decoder: DecoderParams, modality="rgb"):
        if modality not in ("rgb", "depth"):
            raise ShapeError(f"unknown modality {modality!r}")
        self.encoder = encoder
        self.decoder = decoder
        self.modality = modality

    @property
    def num_classes(self):
        return self.decoder.num_classes

    def named(self):
        out = self.encoder.named("enc.")
        out.update(self.decoder.named("dec."))
        return out

    def tensors(self):
        return self.encoder.tensors() + self.decoder.tensors()


class Stage2Network:
    """Dual-encoder network plus the frozen Stage-I reference encoder."""

    def __init__(self, rgb_encoder, depth_encoder, decoder, frozen_encoder):
        self.rgb_encoder = rgb_encoder
        self.depth_encoder = depth_encoder
        self.decoder = decoder
        self.frozen_encoder = frozen_encoder
        for t in frozen_encoder.tensors():
            if t.requires_grad:
                raise ShapeError("frozen encoder tensors must not require grad")

    @property
    def num_classes(self):
        return self.decoder.num_classes

    def named(self):
        out = self.rgb_encoder.named("rgb_enc.")
        out.update(self.depth_encoder.named("depth_enc."))
        out.update(self.decoder.named("dec."))
        out.update(self.frozen_encoder.named("frozen_enc."))
        return out

    def trainable_named(self):
        out = self.rgb_encoder.named("rgb_enc.")
        out.update(self.depth_encoder.named("depth_enc."))
        out.update(self.decoder.named("dec."))
        return out


@dataclass
class ContrastFeatures:
    """Flattened deepest features, one row per batch sample."""

    f_depth: Tensor
    f_rgb_ref: Tensor

    def __post_init__(self):
        if self.f_depth.shape != self.f_rgb_ref.shape:
            raise ShapeError(
                f"contrast feature shapes differ: {self.f_depth.shape} vs {self.f_rgb_ref.shape}"
            )


def build_network(cfg: EncoderConfig, num_classes: int, seed: int, modality="rgb") -> NetworkParams:
    rng = np.random.default_rng(seed)
    encoder = build_encoder(cfg, rng)
    decoder = build_decoder(cfg.stage_channels, num_classes, rng)
    return NetworkParams(encoder, decoder, modality=modality)


def _clone_encoder(enc: EncoderParams, requires_grad: bool) -> EncoderParams:
    stages = []
    for k, b in enc.stages:
        stages.append(
            (
                Tensor(k.data.copy(), requires_grad=requires_grad),
                Tensor(b.data.copy(), requires_grad=requires_grad),
            )
        )
    return EncoderParams(enc.cfg, stages)


def _clone_decoder(dec: DecoderParams) -> DecoderParams:
    def cp(pair):
        return (Tensor(pair[0].data.copy(), requires_grad=True), Tensor(pair[1].data.copy(), requires_grad=True))

    return DecoderParams(
        dec.enc_channels,
        dec.num_classes,
        [cp(p) for p in dec.skips],
        [cp(p) for p in dec.stages],
        cp(dec.head),
    )


def build_stage2(stage1: NetworkParams, seed: int) -> Stage2Network:
    """Warm-start the Stage-II RGB encoder and decoder from Stage I, add a fresh
    depth encoder, and keep a frozen verbatim copy of the Stage-I encoder."""
    if stage1.modality != "rgb":
        raise ShapeError("stage 2 must be seeded from an RGB stage-1 network")
    rgb_cfg = stage1.encoder.cfg
    depth_cfg = EncoderConfig(1, rgb_cfg.stage_channels, rgb_cfg.kernel_size)
    rng = np.random.default_rng(seed)
    return Stage2Network(
        rgb_encoder=_clone_encoder(stage1.encoder, requires_grad=True),
        depth_encoder=build_encoder(depth_cfg, rng),
        decoder=_clone_decoder(stage1.decoder),
        frozen_encoder=_clone_encoder(stage1.encoder, requires_grad=False),
    )


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def encode(params: EncoderParams, image: Tensor) -> List[Tensor]:
    if image.data.ndim != 3:
        raise ShapeError(f"encode expects (C,H,W), got {image.shape}")
    c, h, w = image.shape
    if c != params.cfg.in_channels:
        raise ShapeError(f"encoder expects {params.cfg.in_channels} channels, got {c}")
    if h % DOWN_FACTOR or w % DOWN_FACTOR or h == 0 or w == 0:
        raise ResolutionError(f"input {h}x{w} not divisible by {DOWN_FACTOR}")
    pad = params.cfg.kernel_size // 2
    feats = []
    x = image
    for k, b in params.stages:
        x = ad.relu(ad.conv2d(x, k, b, stride=2, padding=pad))
        feats.append(x)
    return feats


def decode(params: DecoderParams, skips: List[Tensor]) -> Tensor:
    if len(skips) != N_STAGES:
        raise ShapeError(f"decoder expects {N_STAGES} skip features, got {len(skips)}")
    for s, (feat, want) in enumerate(zip(skips, params.enc_channels), 1):
        if feat.shape[0] != want:
            raise ShapeError(f"skip stage {s} has {feat.shape[0]} channels, decoder expects {want}")
    x = skips[-1]
    for j in range(1, N_STAGES + 1):
        x = ad.upsample_nearest(x, 2)
        if j <= N_STAGES - 1:
            sk, sb = params.skips[j - 1]
            adapted = ad.conv2d(skips[N_STAGES - 1 - j], sk, sb, stride=1, padding=0)
            if adapted.shape != x.shape:
                raise ShapeError(f"skip stage mismatch at decoder stage {j}: {adapted.shape} vs {x.shape}")
            x = ad.add(x, adapted)
        kk, kb = params.stages[j - 1]
        x = ad.relu(ad.conv2d(x, kk, kb, stride=1, padding=1))
    hk, hb = params.head
    return ad.conv2d(x, hk, hb, stride=1, padding=0)


def forward_stage1(net: NetworkParams, image: Tensor):
    feats = encode(net.encoder, image)
    return decode(net.decoder, feats), feats


def forward_stage2(
    rgb_encoder: EncoderParams,
    depth_encoder: EncoderParams,
    decoder: DecoderParams,
    frozen_encoder: Optional[EncoderParams],
    rgb: Tensor,
    depth: Tensor,
    training: bool = False,
):
    """One RGB-D pair through the fused network.

    Returns (logits, (depth_stage5, frozen_stage5)) with the feature pair
    present only when ``training`` is set; the frozen encoder is not touched
    otherwise.
    """
    if rgb.data.ndim != 3 or depth.data.ndim != 3:
        raise ShapeError("forward_stage2 expects (C,H,W) rgb and depth")
    if rgb.shape[1:] != depth.shape[1:]:
        raise ShapeError(f"rgb {rgb.shape[1:]} and depth {depth.shape[1:]} are not aligned")
    rgb_feats = encode(rgb_encoder, rgb)
    depth_feats = encode(depth_encoder, depth)
    fused = [ad.add(a, b) for a, b in zip(rgb_feats, depth_feats)]
    logits = decode(decoder, fused)
    if not training:
        return logits, None
    if frozen_encoder is None:
        raise ShapeError("training pass needs the frozen reference encoder")
    frozen_feats = encode(frozen_encoder, rgb)
    return logits, (ad.flatten(depth_feats[-1]), ad.flatten(frozen_feats[-1]))


def batch_contrast_features(pairs) -> ContrastFeatures:
    """Stack per-sample (depth, frozen-rgb) stage-5 vectors into N x D matrices."""
    if not pairs:
        raise ShapeError("no contrast feature pairs to stack")
    return ContrastFeatures(
        f_depth=ad.stack_rows([p[0] for p in pairs]),
        f_rgb_ref=ad.stack_rows([p[1] for p in pairs]),
    )


def infer_stage2(net2: Stage2Network, rgb: Tensor, depth: Tensor) -> Tensor:
    logits, _ = forward_stage2(net2.rgb_encoder, net2.depth_encoder, net2.decoder, None, rgb, depth, training=False)
    return logits
