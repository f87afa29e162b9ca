"""Dual-branch CNN/Transformer segmentation network.

The encoder interleaves the two branches stage by stage: every transformer
stage patch-embeds the current CNN map and adds it to its tokens before
self-attention, and every convolution stage adds the freshly produced tokens
(reshaped to a map, 1x1-projected) to its input before convolving and
downsampling. Two decoders follow: a CNN decoder with encoder skips and a
transformer decoder without them.
"""

from dataclasses import asdict, dataclass, field
from typing import List, Optional

import torch
import torch.nn.functional as F
from torch import nn

BRANCHES = ("dual", "cnn", "trans")


@dataclass
class ModelConfig:
    num_classes: int = 4
    num_stages: int = 4
    base_channels: int = 16
    num_heads: tuple = (1, 2, 4, 4)
    mlp_ratio: float = 2.0
    image_size: int = 64
    branches: str = "dual"
    pos_embed: bool = True

    def __post_init__(self):
        self.num_heads = tuple(self.num_heads)
        if self.num_stages < 2:
            raise ValueError(f"num_stages must be >= 2, got {self.num_stages}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.image_size % (2 ** self.num_stages):
            raise ValueError(
                f"image_size {self.image_size} is not divisible by 2**{self.num_stages}")
        if len(self.num_heads) != self.num_stages:
            raise ValueError(
                f"num_heads has {len(self.num_heads)} entries for {self.num_stages} stages")
        for c, h in zip(self.channels, self.num_heads):
            if c % h:
                raise ValueError(f"stage width {c} not divisible by {h} heads")
        if self.branches not in BRANCHES:
            raise ValueError(f"branches must be one of {BRANCHES}, got {self.branches!r}")

    @property
    def channels(self):
        return [self.base_channels * 2 ** i for i in range(self.num_stages)]

    @property
    def feature_dim(self):
        return self.channels[-1]

    @property
    def grid_sizes(self):
        return [self.image_size // 2 ** (i + 1) for i in range(self.num_stages)]

    def to_dict(self):
        d = asdict(self)
        d["num_heads"] = list(self.num_heads)
        return d


@dataclass
class EncoderState:
    cnn_feats: List[torch.Tensor] = field(default_factory=list)
    stem: Optional[torch.Tensor] = None
    trans_feats: List[torch.Tensor] = field(default_factory=list)
    trans_grid: List[int] = field(default_factory=list)

    @property
    def cnn_bottleneck(self):
        return self.cnn_feats[-1] if self.cnn_feats else None

    @property
    def trans_bottleneck(self):
        return self.trans_feats[-1] if self.trans_feats else None


@dataclass
class DualPrediction:
    y_cnn: torch.Tensor
    y_trans: torch.Tensor
    p_cnn: torch.Tensor
    p_trans: torch.Tensor
    logits_cnn: Optional[torch.Tensor] = None
    logits_trans: Optional[torch.Tensor] = None


def tokens_to_map(tokens, grid):
    b, n, d = tokens.shape
    return tokens.transpose(1, 2).reshape(b, d, grid, grid)


def map_to_tokens(fmap):
    return fmap.flatten(2).transpose(1, 2)


def conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, padding_mode="replicate"),
        nn.GroupNorm(1 if cout < 8 else 4, cout),
        nn.GELU(),
    )


class TransformerBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class TransStage(nn.Module):
    """Trans_i: tokens at half the previous resolution, fused with the CNN map."""

    def __init__(self, cnn_in, tok_in, dim, heads, grid, mlp_ratio, pos_embed):
        super().__init__()
        self.grid = grid
        # patch embedding of the CNN feature map (2x2 patches)
        self.embed = nn.Conv2d(cnn_in, dim, 2, stride=2) if cnn_in else None
        # patch merging of the previous tokens
        self.merge = nn.Conv2d(tok_in, dim, 2, stride=2) if tok_in else None
        self.pos = nn.Parameter(torch.zeros(1, grid * grid, dim)) if pos_embed else None
        if self.pos is not None:
            nn.init.trunc_normal_(self.pos, std=0.02)
        self.block = TransformerBlock(dim, heads, mlp_ratio)

    def forward(self, cnn_map, prev_tokens, prev_grid):
        x = 0
        if self.embed is not None and cnn_map is not None:
            x = x + self.embed(cnn_map)
        if self.merge is not None and prev_tokens is not None:
            x = x + self.merge(tokens_to_map(prev_tokens, prev_grid))
        tokens = map_to_tokens(x)
        if self.pos is not None:
            tokens = tokens + self.pos
        return self.block(tokens)


class ConvStage(nn.Module):
    """Conv_i: add projected tokens, convolve, downsample by 2."""

    def __init__(self, cin, cout, tok_dim):
        super().__init__()
        self.down = nn.Conv2d(cin, cout, 3, stride=2, padding=1, padding_mode="replicate")
        self.fuse = nn.Conv2d(tok_dim, cout, 1) if tok_dim else None
        self.conv = conv_block(cout, cout)

    def forward(self, x, tokens, grid):
        x = self.down(x)
        if self.fuse is not None and tokens is not None:
            x = x + self.fuse(tokens_to_map(tokens, grid))
        return self.conv(x)


class UpStage(nn.Module):
    def __init__(self, cin, cout, skip_ch):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, 2, stride=2)
        self.conv = conv_block(cout + skip_ch, cout)
        self.skip_ch = skip_ch

    def forward(self, x, skip=None):
        x = self.up(x)
        if self.skip_ch:
            x = torch.cat([x, skip], dim=1)
        return self.conv(x)


class Decoder(nn.Module):
    def __init__(self, channels, num_classes, skips, stem_channels=None):
        super().__init__()
        stages = []
        rev = channels[::-1]
        # the last stage upsamples to full resolution and takes the stem map
        skip_rev = rev[1:] + [stem_channels or rev[-1]]
        for i in range(len(channels)):
            cin = rev[i]
            cout = rev[i + 1] if i + 1 < len(rev) else rev[-1]
            skip_ch = skip_rev[i] if skips else 0
            stages.append(UpStage(cin, cout, skip_ch))
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(rev[-1], num_classes, 1)

    def forward(self, x, skips=None):
        for i, stage in enumerate(self.stages):
            skip = None
            if stage.skip_ch:
                # skips = [stem, x_cnn_1, ..., x_cnn_S]
                skip = skips[-(i + 2)]
            x = stage(x, skip)
        return self.head(x)


class CnnClassHead(nn.Module):
    """1x1 convolution followed by global average pooling."""

    def __init__(self, dim, num_classes):
        super().__init__()
        self.conv = nn.Conv2d(dim, num_classes, 1)

    def forward(self, fmap):
        return self.conv(fmap).mean(dim=(2, 3))

    def on_vector(self, v):
        # a 1x1 conv on a constant map equals a linear map on the vector
        w = self.conv.weight.flatten(1)
        return v @ w.t() + self.conv.bias


class TransClassHead(nn.Module):
    """LayerNorm + linear on mean-pooled tokens."""

    def __init__(self, dim, num_classes):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc = nn.Linear(dim, num_classes)

    def forward(self, tokens):
        return self.on_vector(tokens.mean(dim=1))

    def on_vector(self, v):
        return self.fc(self.norm(v))


class ScribbleVCNet(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        ch = config.channels
        S = config.num_stages
        K = config.num_classes
        use_cnn = config.branches in ("dual", "cnn")
        use_trans = config.branches in ("dual", "trans")
        self.use_cnn, self.use_trans = use_cnn, use_trans

        self.stem = conv_block(1, config.base_channels)
        self.conv_stages = nn.ModuleList()
        self.trans_stages = nn.ModuleList()
        for i in range(S):
            cnn_in = config.base_channels if i == 0 else ch[i - 1]
            if use_trans:
                # transformer-only variant embeds only the stem map
                embed_in = cnn_in if (use_cnn or i == 0) else 0
                tok_in = ch[i - 1] if i > 0 else 0
                self.trans_stages.append(TransStage(
                    embed_in, tok_in, ch[i], config.num_heads[i], config.grid_sizes[i],
                    config.mlp_ratio, config.pos_embed))
            if use_cnn:
                self.conv_stages.append(ConvStage(cnn_in, ch[i], ch[i] if use_trans else 0))

        if use_cnn:
            self.cls_cnn = CnnClassHead(ch[-1], K)
            self.dec_cnn = Decoder(ch, K, skips=True, stem_channels=config.base_channels)
        if use_trans:
            self.cls_trans = TransClassHead(ch[-1], K)
            self.dec_trans = Decoder(ch, K, skips=False)

    # -- encoder -----------------------------------------------------------
    def encode(self, images, trans_hook=None):
        """Run the interleaved encoder.

        ``trans_hook(i, tokens)`` may replace the stage-i tokens before the
        matching convolution stage consumes them (used for probing).
        """
        S = self.config.num_stages
        if images.shape[-1] != self.config.image_size or images.shape[-2] != self.config.image_size:
            raise ValueError(
                f"expected {self.config.image_size}x{self.config.image_size} input, "
                f"got {tuple(images.shape[-2:])}")
        state = EncoderState()
        x_cnn = self.stem(images)
        stem = x_cnn
        state.stem = stem
        tokens, grid = None, None
        for i in range(S):
            g = self.config.grid_sizes[i]
            if self.use_trans:
                cnn_src = x_cnn if self.use_cnn else (stem if i == 0 else None)
                tokens = self.trans_stages[i](cnn_src, tokens, grid)
                if trans_hook is not None:
                    tokens = trans_hook(i, tokens)
                grid = g
                state.trans_feats.append(tokens)
                state.trans_grid.append(g)
            if self.use_cnn:
                x_cnn = self.conv_stages[i](x_cnn, tokens, g)
                state.cnn_feats.append(x_cnn)
        return state

    # -- heads ---------------------------------------------------------------
    def classify(self, state):
        logits_cnn = self.cls_cnn(state.cnn_bottleneck) if self.use_cnn else None
        logits_trans = self.cls_trans(state.trans_bottleneck) if self.use_trans else None
        return logits_cnn, logits_trans

    def class_head(self, branch):
        return self.cls_cnn if branch == "cnn" else self.cls_trans

    def pooled(self, state, branch):
        if branch == "cnn":
            return state.cnn_bottleneck.mean(dim=(2, 3))
        return state.trans_bottleneck.mean(dim=1)

    # -- decoders ------------------------------------------------------------
    def decode(self, state, fused_cnn=None, fused_trans=None, zero_skips=False):
        """Return softmax maps (y_cnn, y_trans); a missing branch yields None."""
        y_cnn = y_trans = None
        if self.use_cnn:
            x = state.cnn_bottleneck if fused_cnn is None else fused_cnn
            if x.shape != state.cnn_bottleneck.shape:
                raise ValueError(f"fused CNN features must have shape "
                                 f"{tuple(state.cnn_bottleneck.shape)}, got {tuple(x.shape)}")
            skips = [state.stem] + state.cnn_feats
            if zero_skips:
                skips = [torch.zeros_like(s) for s in skips]
            y_cnn = torch.softmax(self.dec_cnn(x, skips), dim=1)
        if self.use_trans:
            g = state.trans_grid[-1]
            raw = tokens_to_map(state.trans_bottleneck, g)
            x = raw if fused_trans is None else fused_trans
            if x.shape != raw.shape:
                raise ValueError(f"fused transformer features must have shape "
                                 f"{tuple(raw.shape)}, got {tuple(x.shape)}")
            y_trans = torch.softmax(self.dec_trans(x), dim=1)
        return y_cnn, y_trans

    def forward(self, images, bank=None, mode="eval"):
        from . import mie

        state = self.encode(images)
        logits_cnn, logits_trans = self.classify(state)
        fused = {}
        for branch, logits in (("cnn", logits_cnn), ("trans", logits_trans)):
            if logits is None:
                continue
            feats = self.bottleneck_map(state, branch)
            if bank is None:
                fused[branch] = feats
                continue
            probs = torch.sigmoid(logits).detach()
            if mode == "train":
                pooled = self.pooled(state, branch).detach()
                vectors = mie.extract_batch_class_vectors(pooled, probs)
                mie.update_bank(bank, branch, vectors, self.class_head(branch))
                fused[branch], _ = mie.fuse_train(feats, probs, bank, branch)
            else:
                fused[branch] = mie.fuse_infer(feats, probs, bank, branch)
        y_cnn, y_trans = self.decode(state, fused.get("cnn"), fused.get("trans"))
        return make_prediction(y_cnn, y_trans, logits_cnn, logits_trans)

    def bottleneck_map(self, state, branch):
        if branch == "cnn":
            return state.cnn_bottleneck
        return tokens_to_map(state.trans_bottleneck, state.trans_grid[-1])


def make_prediction(y_cnn, y_trans, logits_cnn, logits_trans):
    """Single-branch models mirror their one output into both slots."""
    if y_cnn is None:
        y_cnn, logits_cnn = y_trans, logits_trans
    if y_trans is None:
        y_trans, logits_trans = y_cnn, logits_cnn
    return DualPrediction(
        y_cnn=y_cnn, y_trans=y_trans,
        p_cnn=torch.sigmoid(logits_cnn), p_trans=torch.sigmoid(logits_trans),
        logits_cnn=logits_cnn, logits_trans=logits_trans,
    )
