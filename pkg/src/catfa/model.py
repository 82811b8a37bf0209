"""Dual-branch encoder, SAFG-gated Conv-G-NeXt decoder and prediction head.

Encoder stage s (1..4) runs an overlap patch merge + CAT blocks on the
transformer arm and a patch embedding/downsample + ConvNeXt blocks on the
convolutional arm; CCTFA fuses the two into E_s, which feeds both the next
transformer stage and the decoder skip at that resolution.

Decoder: a Conv-G-NeXt block on the bottleneck E_4, then three stages that
upsample by a stride-2 transposed conv (halving channels), gate against the
skip E_s with SAFG and refine with a Conv-G-NeXt block, except the final
stage. A 1x1 head, bilinear upsampling to the input size and a sigmoid give
the mask probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import layers as L
from . import tensor as T
from .attention import CatSpec, cat_block_vjp, init_cat_block, reduction_factors
from .blocks import (MergeSpec, conv_g_next_block_vjp, convnext_block_vjp, init_conv_g_next_block,
                     init_convnext_block, init_patch_merge, patch_merge_vjp)
from .fusion import cctfa_vjp, init_cctfa, init_safg, safg_vjp
from .params import ParamStore, init_conv, trunc_normal


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple = (96, 192, 384, 768)
    cat_blocks: tuple = (1, 1, 3, 1)
    convnext_blocks: tuple = (3, 3, 9, 3)
    heads: tuple = (1, 2, 4, 8)
    reduction: tuple = (8, 4, 2, 1)
    input_hw: tuple = (224, 224)
    in_channels: int = 3
    out_channels: int = 1
    mlp_ratio: int = 4
    dfcn_padding: str = "zeros"

    @classmethod
    def variant(cls, name: str, **overrides) -> "ModelConfig":
        presets = {
            "S": {},
            "L": dict(channels=(128, 256, 512, 1024), cat_blocks=(2, 2, 6, 2),
                      convnext_blocks=(3, 3, 27, 3)),
            "tiny": dict(channels=(16, 32, 64, 128), cat_blocks=(1, 1, 1, 1),
                         convnext_blocks=(1, 1, 1, 1), input_hw=(64, 64)),
        }
        if name not in presets:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})

    def errors(self) -> list[str]:
        errs = []
        for f in ("channels", "cat_blocks", "convnext_blocks", "heads", "reduction"):
            v = getattr(self, f)
            if len(v) != 4 or any(int(n) < 1 for n in v):
                errs.append(f"{f} must be 4 positive ints, got {v}")
        if len(self.channels) == 4:
            c = self.channels[0]
            if tuple(self.channels) != (c, 2 * c, 4 * c, 8 * c):
                errs.append(f"channels must double per stage, got {self.channels}")
            if len(self.heads) == 4:
                for s, (ch, m) in enumerate(zip(self.channels, self.heads), 1):
                    if m >= 1 and ch % m:
                        errs.append(f"stage {s}: {ch} channels not divisible by {m} heads")
        if len(self.input_hw) != 2 or any(n % 32 or n < 32 for n in self.input_hw):
            errs.append(f"input_hw must be positive multiples of 32, got {self.input_hw}")
        elif len(self.reduction) == 4:
            for s, R in enumerate(self.reduction, 1):
                if R < 1:
                    continue
                rh, rw = reduction_factors(R)
                gh, gw = (n // 2 ** (s + 1) for n in self.input_hw)
                if gh % rh or gw % rw:
                    errs.append(f"stage {s}: token grid {gh}x{gw} not divisible by reduction blocks {rh}x{rw}")
        if self.out_channels != 1:
            errs.append("only single-channel (binary) output is supported")
        if self.in_channels < 1:
            errs.append("in_channels must be >= 1")
        if self.dfcn_padding not in T.PAD_MODES:
            errs.append(f"dfcn_padding must be one of {T.PAD_MODES}")
        return errs

    def validate(self) -> "ModelConfig":
        errs = self.errors()
        if errs:
            raise ConfigError("invalid model config:\n  " + "\n  ".join(errs))
        return self

    def cat_spec(self, s: int) -> CatSpec:
        return CatSpec(self.channels[s], self.heads[s], self.reduction[s], self.mlp_ratio,
                       self.dfcn_padding)

    def hcat_merge(self, s: int) -> MergeSpec:
        if s == 0:
            return MergeSpec("overlap", self.in_channels, self.channels[0], 7, 4)
        return MergeSpec("overlap", self.channels[s - 1], self.channels[s], 3, 2)

    def convnext_merge(self, s: int) -> MergeSpec:
        if s == 0:
            return MergeSpec("nonoverlap", self.in_channels, self.channels[0], 4, 4)
        return MergeSpec("nonoverlap", self.channels[s - 1], self.channels[s], 2, 2, norm_first=True)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class FeatureMap:
    tensor: np.ndarray
    stage: int
    branch: str  # "hcat", "convnext", "fused" or "decoder"

    @property
    def shape(self):
        return self.tensor.shape


@dataclass
class Model:
    config: ModelConfig
    store: ParamStore = field(repr=False)

    def scope(self, name: str):
        return self.store.scope(name + ".")


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    config.validate()
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype=dtype)
    P = store.scope()
    cfg = config
    for s in range(4):
        enc = P.child("enc")
        init_patch_merge(enc.child(f"hcat{s + 1}").child("merge"), rng, cfg.hcat_merge(s))
        for i in range(cfg.cat_blocks[s]):
            init_cat_block(enc.child(f"hcat{s + 1}").child(f"block{i}"), rng, cfg.cat_spec(s))
        init_patch_merge(enc.child(f"cnx{s + 1}").child("merge"), rng, cfg.convnext_merge(s))
        for i in range(cfg.convnext_blocks[s]):
            init_convnext_block(enc.child(f"cnx{s + 1}").child(f"block{i}"), rng, cfg.channels[s])
        init_cctfa(enc.child(f"fuse{s + 1}"), rng, cfg.channels[s])
    dec = P.child("dec")
    init_conv_g_next_block(dec.child("bottleneck"), rng, cfg.channels[3])
    for s in (2, 1, 0):
        up = dec.child(f"up{s + 1}")
        up.add("w", trunc_normal(rng, (cfg.channels[s + 1], cfg.channels[s], 2, 2)))
        up.add("b", np.zeros(cfg.channels[s]))
        init_safg(dec.child(f"safg{s + 1}"), rng, cfg.channels[s])
        if s > 0:
            init_conv_g_next_block(dec.child(f"block{s + 1}"), rng, cfg.channels[s])
    init_conv(P, rng, "head", cfg.out_channels, cfg.channels[0], 1)
    return Model(config, store)


def _check_input(model: Model, x):
    if x.ndim != 4 or x.shape[1] != model.config.in_channels:
        raise T.ShapeError(f"expected B x {model.config.in_channels} x H x W input, got {x.shape}")
    H, W = x.shape[2:]
    if H % 32 or W % 32:
        raise T.ShapeError(f"input {H}x{W} must have height and width divisible by 32")


def encode_vjp(model: Model, x):
    """Run both encoder arms; returns (t_outs, c_outs, fused, back).

    ``back(g_fused)`` takes one cotangent per fused map (None allowed) and
    returns the input cotangent.
    """
    _check_input(model, x)
    cfg = model.config
    enc = model.store.scope("enc.")
    t_outs, c_outs, fused = [], [], []
    t_backs, c_backs, f_backs = [], [], []
    t_prev = c_prev = x
    for s in range(4):
        th = enc.child(f"hcat{s + 1}")
        t, mb = patch_merge_vjp(th.child("merge"), t_prev, cfg.hcat_merge(s))
        tb = [mb]
        for i in range(cfg.cat_blocks[s]):
            t, b = cat_block_vjp(th.child(f"block{i}"), t, cfg.cat_spec(s))
            tb.append(b)
        ch = enc.child(f"cnx{s + 1}")
        c, mb = patch_merge_vjp(ch.child("merge"), c_prev, cfg.convnext_merge(s))
        cb = [mb]
        for i in range(cfg.convnext_blocks[s]):
            c, b = convnext_block_vjp(ch.child(f"block{i}"), c)
            cb.append(b)
        e, fb = cctfa_vjp(enc.child(f"fuse{s + 1}"), t, c)
        t_outs.append(t)
        c_outs.append(c)
        fused.append(e)
        t_backs.append(L.chain(*tb))
        c_backs.append(L.chain(*cb))
        f_backs.append(fb)
        t_prev, c_prev = e, c

    def back(g_fused):
        g_t_next = None
        g_c_next = None
        for s in range(3, -1, -1):
            g_e = g_fused[s]
            if g_t_next is not None:
                g_e = g_t_next if g_e is None else g_e + g_t_next
            if g_e is None:
                g_e = np.zeros_like(fused[s])
            g_t, g_c = f_backs[s](g_e)
            if g_c_next is not None:
                g_c = g_c + g_c_next
            g_t_next = t_backs[s](g_t)
            g_c_next = c_backs[s](g_c)
        return g_t_next + g_c_next

    return t_outs, c_outs, fused, back


def encode(model: Model, x) -> dict:
    """Stage feature maps of both arms and the fused maps, tagged by stage."""
    t_outs, c_outs, fused, _ = encode_vjp(model, x)
    return {
        "hcat": [FeatureMap(t, s + 1, "hcat") for s, t in enumerate(t_outs)],
        "convnext": [FeatureMap(c, s + 1, "convnext") for s, c in enumerate(c_outs)],
        "fused": [FeatureMap(e, s + 1, "fused") for s, e in enumerate(fused)],
    }


def decode_vjp(model: Model, fused, training: bool):
    dec = model.store.scope("dec.")
    backs = []
    d, b = conv_g_next_block_vjp(dec.child("bottleneck"), fused[3], training)
    backs.append(("bottleneck", b))
    for s in (2, 1, 0):
        u, b = L.tconv(dec, f"up{s + 1}", d, stride=2)
        backs.append(("up", b))
        d, b = safg_vjp(dec.child(f"safg{s + 1}"), fused[s], u)
        backs.append((f"safg{s}", b))
        if s > 0:
            d, b = conv_g_next_block_vjp(dec.child(f"block{s + 1}"), d, training)
            backs.append(("block", b))

    def back(g):
        g_fused = [None, None, None, None]
        for tag, b in reversed(backs):
            if tag.startswith("safg"):
                g_skip, g = b(g)
                g_fused[int(tag[4:])] = g_skip
            elif tag == "bottleneck":
                g_fused[3] = b(g)
            else:
                g = b(g)
        return g_fused

    return d, back


def forward_vjp(model: Model, x, training: bool = False):
    """Probabilities ``B x 1 x H x W`` and a pullback to the input cotangent."""
    _, _, fused, enc_back = encode_vjp(model, x)
    d, dec_back = decode_vjp(model, fused, training)
    logits, head_back = L.conv(model.store.scope(), "head", d)
    H, W = x.shape[2:]
    up, up_back = T.bilinear_upsample_vjp(logits, H, W)
    y, y_back = T.sigmoid_vjp(up)

    def back(g):
        (g_up,) = y_back(g)
        (g_logits,) = up_back(g_up)
        return enc_back(dec_back(head_back(g_logits)))

    return y, back


def forward(model: Model, x, training: bool = False):
    return forward_vjp(model, x, training)[0]


def count_params(model: Model, prefix: str = "") -> int:
    return model.store.n_params(prefix)


def decoder_share(model: Model) -> float:
    return (count_params(model, "dec.") + count_params(model, "head.")) / count_params(model)
