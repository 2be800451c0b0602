"""Encoder/decoder segmentation network built from slice-scan S3 blocks.

Layout (feature maps are ``(B, C, H, W)``):

* patch embedding: 4x4/stride-4 convolution to ``C`` channels, then LayerNorm;
* encoder: 4 stages of S3 blocks, patch merging between stages;
* decoder: 4 stages, deepest first. Stage 0 runs at the bottleneck
  resolution; stages 1..3 start with a patch expansion, add the matching
  encoder stage output, then run their S3 blocks;
* final mapping: two patch expansions (x4 total) and a 1x1 convolution.

Every S3 block consumes one slice config of the genotype, encoder blocks
first (stage by stage), then decoder blocks. A slice larger than the current
map is clamped to the map, so ``(H, W)`` at full resolution is the plain cross
scan at every stage.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, DivisibilityError, ShapeError
from .scan_geometry import SliceConfig, build_slice_plan, restore_merge, scan_all
from .ssm_kernel import S6, S6Options

LN_EPS = 1e-5
NUM_STAGES = 4
DEFAULT_SLICE = SliceConfig(2, 2)


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 3
    num_classes: int = 2
    base_width: int = 16
    encoder_depths: tuple = (1, 1, 2, 1)
    decoder_depths: tuple = (1, 1, 1, 1)
    state_dim: int = 8
    genotype: tuple = ()  # empty -> DEFAULT_SLICE everywhere
    input_resolution: tuple = (64, 64)
    expansion: int = 2
    shared_directions: bool = True
    exact_zoh: bool = True
    use_skip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_depths", tuple(int(d) for d in self.encoder_depths))
        object.__setattr__(self, "decoder_depths", tuple(int(d) for d in self.decoder_depths))
        object.__setattr__(self, "input_resolution", tuple(int(r) for r in self.input_resolution))
        geno = tuple(g if isinstance(g, SliceConfig) else _as_slice(g) for g in self.genotype)
        if not geno:
            geno = (DEFAULT_SLICE,) * self.num_blocks
        object.__setattr__(self, "genotype", geno)
        self.validate()

    @property
    def num_blocks(self) -> int:
        return sum(self.encoder_depths) + sum(self.decoder_depths)

    def stage_resolution(self, stage: int) -> tuple:
        H, W = self.input_resolution
        f = 4 * 2**stage
        return H // f, W // f

    def block_stages(self) -> list:
        """``(part, stage_index, resolution_stage)`` for each block, in genotype order."""
        out = []
        for s, d in enumerate(self.encoder_depths):
            out += [("encoder", s, s)] * d
        for j, d in enumerate(self.decoder_depths):
            out += [("decoder", j, NUM_STAGES - 1 - j)] * d
        return out

    def validate(self):
        if len(self.encoder_depths) != NUM_STAGES or len(self.decoder_depths) != NUM_STAGES:
            raise ConfigError(f"encoder and decoder need {NUM_STAGES} stages each")
        if any(d < 0 for d in self.encoder_depths + self.decoder_depths):
            raise ConfigError("stage depths must be non-negative")
        if self.base_width < 4 or self.base_width % 4:
            raise ConfigError(f"base_width must be a positive multiple of 4, got {self.base_width}")
        if self.num_classes < 1 or self.input_channels < 1 or self.state_dim < 1 or self.expansion < 1:
            raise ConfigError("num_classes, input_channels, state_dim and expansion must be >= 1")
        H, W = self.input_resolution
        if H < 32 or W < 32 or H % 32 or W % 32:
            raise DivisibilityError(f"input resolution {H}x{W} must be a multiple of 32 (4 * 2**3)")
        if len(self.genotype) != self.num_blocks:
            raise ConfigError(
                f"genotype has {len(self.genotype)} entries but the model has {self.num_blocks} blocks"
            )
        for idx, (g, (part, stage, res)) in enumerate(zip(self.genotype, self.block_stages())):
            h, w = self.stage_resolution(res)
            eff = g.clamp(h, w)
            if h % eff.m or w % eff.n:
                raise DivisibilityError(
                    f"block {idx} ({part} stage {stage}, map {h}x{w}) cannot use slice {g}"
                )

    def with_genotype(self, genotype) -> "ModelConfig":
        return replace(self, genotype=tuple(genotype))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["genotype"] = [str(g) for g in self.genotype]
        d["encoder_depths"] = list(self.encoder_depths)
        d["decoder_depths"] = list(self.decoder_depths)
        d["input_resolution"] = list(self.input_resolution)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


def _as_slice(g):
    if isinstance(g, str):
        return SliceConfig.parse(g)
    m, n = g
    return SliceConfig(int(m), int(n))


def desk_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def full_config(**overrides) -> ModelConfig:
    base = dict(
        base_width=96,
        state_dim=16,
        encoder_depths=(2, 2, 9, 2),
        decoder_depths=(2, 2, 2, 1),
        input_resolution=(256, 256),
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(base_width=4, state_dim=2, encoder_depths=(1, 1, 1, 1),
                decoder_depths=(1, 1, 1, 1), input_resolution=(32, 32))
    base.update(overrides)
    return ModelConfig(**base)


PRESETS = {"desk": desk_config, "full": full_config, "tiny": tiny_config}


def channel_layer_norm(x, norm: nn.LayerNorm):
    """LayerNorm over the channel axis of a ``(B, C, H, W)`` map."""
    return norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


def channel_linear(x, lin: nn.Linear):
    return lin(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class PatchEmbed(nn.Module):
    def __init__(self, in_ch, dim):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, dim, kernel_size=4, stride=4)
        self.norm = nn.LayerNorm(dim, eps=LN_EPS)

    def forward(self, x):
        H, W = x.shape[-2:]
        if H % 4 or W % 4:
            raise DivisibilityError(f"patch embedding needs H, W divisible by 4, got {H}x{W}")
        return channel_layer_norm(self.proj(x), self.norm)


def space_to_depth(x):
    """``(B, C, H, W) -> (B, 4C, H/2, W/2)``; channel blocks are the (row, col) offsets (0,0), (0,1), (1,0), (1,1)."""
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ShapeError(f"patch merging needs even H, W, got {H}x{W}")
    parts = [x[..., 0::2, 0::2], x[..., 0::2, 1::2], x[..., 1::2, 0::2], x[..., 1::2, 1::2]]
    return torch.cat(parts, dim=1)


def depth_to_space(x):
    """``(B, 4C, H, W) -> (B, C, 2H, 2W)``; the 4C channels are laid out as (p_row, p_col, c)."""
    B, C4, H, W = x.shape
    c = C4 // 4
    x = x.reshape(B, 2, 2, c, H, W).permute(0, 3, 4, 1, 5, 2)
    return x.reshape(B, c, 2 * H, 2 * W)


class PatchMerge(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim, eps=LN_EPS)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        x = space_to_depth(x)
        return channel_linear(channel_layer_norm(x, self.norm), self.reduction)


class PatchExpand(nn.Module):
    def __init__(self, dim):
        super().__init__()
        if dim % 2:
            raise ShapeError(f"patch expanding needs an even channel count, got {dim}")
        self.expand = nn.Linear(dim, 2 * dim, bias=False)

    def forward(self, x):
        if x.shape[1] != self.expand.in_features:
            raise ShapeError(f"patch expand expects {self.expand.in_features} channels, got {x.shape[1]}")
        return depth_to_space(channel_linear(x, self.expand))


def _run_s6(s6s, seqs):
    """seqs: four ``(B, D, L)`` sequences in DIRECTIONS order."""
    if len(s6s) == 1:
        B = seqs[0].shape[0]
        stacked = torch.cat(seqs, dim=0).transpose(1, 2)
        out = s6s[0](stacked).transpose(1, 2)
        return list(out.split(B, dim=0))
    return [s6(s.transpose(1, 2)).transpose(1, 2) for s6, s in zip(s6s, seqs)]


def bss_forward(F_, slice_config: SliceConfig, s6s):
    """Slice, scan in four directions, run the S6 branch(es), restore and add."""
    H, W = F_.shape[-2:]
    plan = build_slice_plan(H, W, slice_config.clamp(H, W))
    outs = _run_s6(s6s, scan_all(F_, plan))
    return restore_merge(*outs, plan)


def ss2d_forward(F_, s6s):
    """Plain cross scan written with transposes and flips; reference for the ``m=H, n=W`` case."""
    B, D, H, W = F_.shape
    col = F_.transpose(-1, -2).reshape(B, D, H * W)
    row = F_.reshape(B, D, H * W)
    outs = _run_s6(s6s, [col, col.flip(-1), row, row.flip(-1)])
    y_col = outs[0].reshape(B, D, W, H).transpose(-1, -2)
    y_colb = outs[1].flip(-1).reshape(B, D, W, H).transpose(-1, -2)
    y_row = outs[2].reshape(B, D, H, W)
    y_rowb = outs[3].flip(-1).reshape(B, D, H, W)
    return y_col + y_colb + y_row + y_rowb


class S3Block(nn.Module):
    def __init__(self, dim, state_dim, expansion=2, shared_directions=True, options=S6Options()):
        super().__init__()
        inner = expansion * dim
        self.inner = inner
        self.in_proj = nn.Linear(dim, 2 * inner)
        self.dwconv = nn.Conv2d(inner, inner, kernel_size=3, padding=1, groups=inner)
        self.s6 = nn.ModuleList(S6(inner, state_dim, options=options) for _ in range(1 if shared_directions else 4))
        self.norm = nn.LayerNorm(inner, eps=LN_EPS)
        self.out_proj = nn.Linear(inner, dim)

    def forward(self, x, slice_config: SliceConfig, scan="bss"):
        z = channel_linear(x, self.in_proj)
        p1, p2 = z.split(self.inner, dim=1)
        p1 = F.silu(self.dwconv(p1))
        if scan == "ss2d":
            p1 = ss2d_forward(p1, self.s6)
        else:
            p1 = bss_forward(p1, slice_config, self.s6)
        p1 = channel_layer_norm(p1, self.norm)
        return x + channel_linear(p1 * F.silu(p2), self.out_proj)


def s3_block_forward(F_, slice_config, block: S3Block):
    H, W = F_.shape[-2:]
    eff = slice_config.clamp(H, W)
    if H % eff.m or W % eff.n:
        raise DivisibilityError(f"S3 block cannot slice a {H}x{W} map with {slice_config}")
    return block(F_, slice_config)


class SliceScanNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        C = config.base_width
        opts = S6Options(exact_zoh=config.exact_zoh, use_skip=config.use_skip)

        def blocks(dim, depth):
            return nn.ModuleList(
                S3Block(dim, config.state_dim, config.expansion, config.shared_directions, opts)
                for _ in range(depth)
            )

        self.embed = PatchEmbed(config.input_channels, C)
        self.encoder = nn.ModuleList(blocks(C * 2**s, d) for s, d in enumerate(config.encoder_depths))
        self.merges = nn.ModuleList(PatchMerge(C * 2**s) for s in range(NUM_STAGES - 1))
        self.expands = nn.ModuleList(PatchExpand(C * 2 ** (NUM_STAGES - j)) for j in range(1, NUM_STAGES))
        self.decoder = nn.ModuleList(
            blocks(C * 2 ** (NUM_STAGES - 1 - j), d) for j, d in enumerate(config.decoder_depths)
        )
        self.final_expand = nn.ModuleList([PatchExpand(C), PatchExpand(C // 2)])
        self.head = nn.Conv2d(C // 4, config.num_classes, kernel_size=1)

    def forward(self, image, genotype=None, scan="bss"):
        cfg = self.config
        if image.dim() != 4 or image.shape[1] != cfg.input_channels or tuple(image.shape[-2:]) != cfg.input_resolution:
            raise ShapeError(
                f"expected input (B, {cfg.input_channels}, {cfg.input_resolution[0]}, {cfg.input_resolution[1]}), "
                f"got {tuple(image.shape)}"
            )
        genotype = cfg.genotype if genotype is None else tuple(genotype)
        if len(genotype) != cfg.num_blocks:
            raise ConfigError(f"genotype has {len(genotype)} entries but the model has {cfg.num_blocks} blocks")
        genes = iter(genotype)

        x = self.embed(image)
        skips = []
        for s, stage in enumerate(self.encoder):
            for blk in stage:
                x = self._block(blk, x, next(genes), scan, f"encoder stage {s}")
            skips.append(x)
            if s < NUM_STAGES - 1:
                x = self.merges[s](x)
        for j, stage in enumerate(self.decoder):
            if j > 0:
                x = self.expands[j - 1](x) + skips[NUM_STAGES - 1 - j]
            for blk in stage:
                x = self._block(blk, x, next(genes), scan, f"decoder stage {j}")
        for pe in self.final_expand:
            x = pe(x)
        return self.head(x)

    @staticmethod
    def _block(blk, x, gene, scan, where):
        H, W = x.shape[-2:]
        eff = gene.clamp(H, W)
        if H % eff.m or W % eff.n:
            raise DivisibilityError(f"{where}: slice {gene} does not tile the {H}x{W} map")
        return blk(x, gene, scan=scan)


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """Deterministic initialisation from ``seed``; independent of torch's global RNG."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, S6):
                mod.reset_parameters(gen)
            elif isinstance(mod, (nn.Linear, nn.Conv2d)):
                fan_in = mod.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                mod.weight.copy_(torch.rand(mod.weight.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
                if mod.bias is not None:
                    mod.bias.copy_(torch.rand(mod.bias.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
            elif isinstance(mod, nn.LayerNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
    return model


def build_model(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> SliceScanNet:
    return init_weights(SliceScanNet(config), seed).to(dtype)


def parameter_count(config: ModelConfig) -> int:
    with torch.device("meta"):
        model = SliceScanNet(config)
    return sum(p.numel() for p in model.parameters())


def zero_non_residual(model: nn.Module) -> None:
    """Zero every parameter so that each S3 block reduces to its residual path."""
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()


def forward(image, config: ModelConfig, model: SliceScanNet, genotype=None):
    if model.config != config:
        raise ConfigError("model weights were built for a different config")
    return model(image, genotype=genotype)
