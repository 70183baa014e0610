"""Gaze-target detection network.

CNN feature extraction, fixed 2-d sinusoidal positions, a transformer
encoder-decoder over a fixed set of learnable instance queries, and
per-query prediction heads (is-head, watch-in/out, head box, gaze
heatmap).  One forward pass predicts every person in the image at once.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import (
    GazeHeatmap,
    GazeInstance,
    GazeTarget,
    HeadBox,
    heatmap_argmax,
)

# Class index conventions shared by the loss and the metrics.
NO_HEAD, HAS_HEAD = 0, 1
WATCH_OUTSIDE, WATCH_INSIDE = 0, 1

_BACKBONE_STRIDES = {"tiny": 16, "resnet50": 32, "resnet101": 32}

CHECKPOINT_FORMAT = "gazedet-checkpoint-v1"
_CHECKPOINT_MAGIC = b"GZDCKPT1"


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Defaults correspond to the full-scale profile; the CLI's desk profile
    shrinks them for fast CPU runs.  `d_model` must be divisible by 4 (for
    the 2-d positional encoding) and by `num_heads`.
    """

    d_model: int = 256
    num_encoder_layers: int = 6
    num_decoder_layers: int = 6
    num_heads: int = 8
    num_queries: int = 20
    backbone: str = "tiny"
    heatmap_h: int = 64
    heatmap_w: int = 64
    ffn_dim: int = 2048
    dropout: float = 0.1

    def __post_init__(self):
        if self.backbone not in _BACKBONE_STRIDES:
            known = ", ".join(sorted(_BACKBONE_STRIDES))
            raise ValueError(f"unknown backbone '{self.backbone}' (known: {known})")
        if self.d_model < 4 or self.d_model % 4 != 0:
            raise ValueError(f"d_model must be a positive multiple of 4, got {self.d_model}")
        if self.num_heads < 1 or self.d_model % self.num_heads != 0:
            raise ValueError(
                f"num_heads must divide d_model, got {self.num_heads} heads for d_model {self.d_model}"
            )
        for name in ("num_encoder_layers", "num_decoder_layers", "num_queries",
                     "heatmap_h", "heatmap_w", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def backbone_stride(self) -> int:
        return _BACKBONE_STRIDES[self.backbone]


@dataclass
class FlattenedFeatures:
    """Backbone features flattened to a token sequence.

    `values` has shape (batch, grid_h * grid_w, d_model), tokens in
    row-major grid order.
    """

    values: Tensor
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"expected (batch, tokens, channels), got shape {tuple(self.values.shape)}")
        if self.values.shape[1] != self.grid_h * self.grid_w:
            raise ValueError(
                f"token count {self.values.shape[1]} does not match grid "
                f"{self.grid_h}x{self.grid_w}"
            )


def positional_encoding_2d(
    grid_h: int,
    grid_w: int,
    d_model: int,
    dtype: torch.dtype = torch.float32,
    device=None,
) -> Tensor:
    """Fixed 2-d sinusoidal position features for a flattened grid.

    The first half of the channels encodes the row index, the second half
    the column index, each as interleaved sin/cos over geometrically spaced
    frequencies (temperature 10000).  Returns (grid_h * grid_w, d_model)
    in row-major token order.
    """
    if d_model % 4 != 0:
        raise ValueError(f"d_model must be divisible by 4, got {d_model}")
    if grid_h < 1 or grid_w < 1:
        raise ValueError(f"grid must be non-empty, got {grid_h}x{grid_w}")
    half = d_model // 2
    freq_idx = torch.arange(0, half, 2, dtype=dtype, device=device)
    inv_freq = torch.pow(torch.tensor(10000.0, dtype=dtype, device=device), -freq_idx / half)

    def axis_encoding(positions: Tensor) -> Tensor:
        angles = positions[:, None] * inv_freq[None, :]
        enc = torch.zeros(positions.shape[0], half, dtype=dtype, device=device)
        enc[:, 0::2] = torch.sin(angles)
        enc[:, 1::2] = torch.cos(angles)
        return enc

    row_enc = axis_encoding(torch.arange(grid_h, dtype=dtype, device=device))
    col_enc = axis_encoding(torch.arange(grid_w, dtype=dtype, device=device))
    rows = row_enc[:, None, :].expand(grid_h, grid_w, half)
    cols = col_enc[None, :, :].expand(grid_h, grid_w, half)
    return torch.cat([rows, cols], dim=-1).reshape(grid_h * grid_w, d_model)


def attention(
    q_f: Tensor,
    k_f: Tensor,
    v_f: Tensor,
    q_p: Optional[Tensor] = None,
    k_p: Optional[Tensor] = None,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention with additive position terms.

    Positions enter the query/key sides only — the values carry pure
    content.  Shapes are (..., length, channels) with matching leading
    dimensions.  Returns (output, weights); each weight row sums to 1.
    """
    q = q_f if q_p is None else q_f + q_p
    k = k_f if k_p is None else k_f + k_p
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key channel mismatch: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v_f.shape[-2]:
        raise ValueError(f"key/value length mismatch: {k.shape[-2]} vs {v_f.shape[-2]}")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    weights = scores.softmax(dim=-1)
    return weights @ v_f, weights


class MultiHeadAttention(nn.Module):
    """Multi-head wrapper around :func:`attention`.

    Learned input/output projections with the channel dimension split
    across heads; positional terms are added to the query/key inputs
    before their projections, never to the values.
    """

    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        if d_model % num_heads != 0:
            raise ValueError(f"num_heads must divide d_model ({num_heads} vs {d_model})")
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        q_f: Tensor,
        k_f: Tensor,
        v_f: Tensor,
        q_p: Optional[Tensor] = None,
        k_p: Optional[Tensor] = None,
        need_weights: bool = False,
    ) -> tuple[Tensor, Optional[Tensor]]:
        q = self.q_proj(q_f if q_p is None else q_f + q_p)
        k = self.k_proj(k_f if k_p is None else k_f + k_p)
        v = self.v_proj(v_f)
        out, weights = attention(self._split(q), self._split(k), self._split(v))
        b, _, n, _ = out.shape
        out = out.transpose(1, 2).reshape(b, n, self.num_heads * self.head_dim)
        out = self.out_proj(out)
        return out, (weights.mean(dim=1) if need_weights else None)


class EncoderLayer(nn.Module):
    """Post-norm transformer encoder layer: self-attention + feed-forward."""

    def __init__(self, d_model: int, num_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, num_heads)
        self.linear1 = nn.Linear(d_model, ffn_dim)
        self.linear2 = nn.Linear(ffn_dim, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout1 = nn.Dropout(dropout)
        self.dropout2 = nn.Dropout(dropout)
        self.dropout_ffn = nn.Dropout(dropout)

    def forward(self, src: Tensor, pos: Tensor) -> Tensor:
        attn_out, _ = self.self_attn(src, src, src, q_p=pos, k_p=pos)
        src = self.norm1(src + self.dropout1(attn_out))
        ffn = self.linear2(self.dropout_ffn(F.relu(self.linear1(src))))
        return self.norm2(src + self.dropout2(ffn))


class TransformerEncoder(nn.Module):
    """Stack of encoder layers over the flattened feature tokens."""

    def __init__(self, num_layers: int, d_model: int, num_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.layers = nn.ModuleList(
            EncoderLayer(d_model, num_heads, ffn_dim, dropout) for _ in range(num_layers)
        )

    def forward(self, src: Tensor, pos: Tensor) -> Tensor:
        for layer in self.layers:
            src = layer(src, pos)
        return src


class DecoderLayer(nn.Module):
    """Post-norm decoder layer: query self-attention, cross-attention into
    the encoder memory, feed-forward."""

    def __init__(self, d_model: int, num_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, num_heads)
        self.cross_attn = MultiHeadAttention(d_model, num_heads)
        self.linear1 = nn.Linear(d_model, ffn_dim)
        self.linear2 = nn.Linear(ffn_dim, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.dropout1 = nn.Dropout(dropout)
        self.dropout2 = nn.Dropout(dropout)
        self.dropout3 = nn.Dropout(dropout)
        self.dropout_ffn = nn.Dropout(dropout)

    def forward(
        self,
        tgt: Tensor,
        memory: Tensor,
        pos: Tensor,
        query_pos: Tensor,
        need_weights: bool = False,
    ) -> tuple[Tensor, Optional[Tensor]]:
        sa, _ = self.self_attn(tgt, tgt, tgt, q_p=query_pos, k_p=query_pos)
        tgt = self.norm1(tgt + self.dropout1(sa))
        ca, weights = self.cross_attn(
            tgt, memory, memory, q_p=query_pos, k_p=pos, need_weights=need_weights
        )
        tgt = self.norm2(tgt + self.dropout2(ca))
        ffn = self.linear2(self.dropout_ffn(F.relu(self.linear1(tgt))))
        return self.norm3(tgt + self.dropout3(ffn)), weights


class TransformerDecoder(nn.Module):
    """Decoder stack; returns every layer's query embeddings so auxiliary
    losses can supervise intermediate layers."""

    def __init__(self, num_layers: int, d_model: int, num_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.d_model = d_model
        self.layers = nn.ModuleList(
            DecoderLayer(d_model, num_heads, ffn_dim, dropout) for _ in range(num_layers)
        )

    def forward(
        self,
        memory: Tensor,
        pos: Tensor,
        query_pos: Tensor,
        need_weights: bool = False,
    ) -> tuple[Tensor, list[Optional[Tensor]]]:
        batch = memory.shape[0]
        # Queries start from content-free zeros; identity comes from query_pos.
        tgt = torch.zeros(
            batch, query_pos.shape[0], self.d_model, dtype=memory.dtype, device=memory.device
        )
        outputs, attn = [], []
        for layer in self.layers:
            tgt, weights = layer(tgt, memory, pos, query_pos, need_weights=need_weights)
            outputs.append(tgt)
            attn.append(weights)
        return torch.stack(outputs), attn


class MLP(nn.Module):
    """`num_layers` linear layers with LeakyReLU between them (none after
    the last).

    The leak is load-bearing for the heatmap head: early in training most
    of a rendered target map is empty, so every hidden unit receives the
    same "paint less" pressure and a plain ReLU stack dies wholesale —
    measured 99.96% dead penultimate pre-activations, which silences the
    gradient into the query embeddings and freezes gaze learning for good.
    """

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, num_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.leaky_relu(x, negative_slope=0.1)
        return x


def center_size_to_corners(cs: Tensor) -> Tensor:
    """(cx, cy, w, h) boxes -> corner boxes clamped to the unit square.

    With the center strictly inside (0, 1)^2 at most one side per axis can
    clamp, so ordering is preserved and gradients keep flowing through the
    other side.
    """
    cx, cy, w, h = cs.unbind(-1)
    corners = torch.stack(
        [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], dim=-1
    )
    return corners.clamp(0.0, 1.0)


class PredictionHeads(nn.Module):
    """Per-query output heads shared across decoder layers.

    Single linear layers (+ softmax downstream) for the is-head and
    watch-in/out classifications, a three-layer MLP with sigmoid
    center-size output for the head box, and a five-layer MLP with
    per-cell sigmoid for the gaze heatmap.
    """

    def __init__(self, d_model: int, heatmap_h: int, heatmap_w: int):
        super().__init__()
        self.heatmap_h = heatmap_h
        self.heatmap_w = heatmap_w
        self.is_head = nn.Linear(d_model, 2)
        self.watch = nn.Linear(d_model, 2)
        self.box = MLP(d_model, d_model, 4, 3)
        self.heatmap = MLP(d_model, d_model, heatmap_h * heatmap_w, 5)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for p in self.parameters():
            if p.dim() > 1:
                nn.init.xavier_uniform_(p)
        # Prior-informed output layers: start from small centered boxes and
        # an exactly blank heatmap, instead of half-intensity white-noise
        # sigmoid outputs.  The heatmap init matters beyond a warm start.
        # Target maps are ~99% empty, so a map that starts above the mean
        # target value feeds every cell a coherent "paint less" gradient;
        # riding the hidden layer's shared mean direction, that march
        # overshoots the optimum and parks the sigmoid deep in saturation,
        # where training freezes for good (measured: logits near -14, map
        # gradients below Adam's epsilon).  Zero output weights make the
        # start exactly constant, and a bias at the squashed mean target
        # value (target maps average ~1% full) starts the map at the
        # regression-optimal blank: the erase-everything pressure is zero
        # from step one, undershoot self-corrects, and the only persistent
        # gradient is the localized "paint here" one at annotated cells.
        with torch.no_grad():
            self.box.layers[-1].bias.zero_()
            self.box.layers[-1].bias[2:].fill_(-1.5)
            self.heatmap.layers[-1].weight.zero_()
            self.heatmap.layers[-1].bias.fill_(-4.5)

    def forward(self, embeddings: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        is_head_logits = self.is_head(embeddings)
        watch_logits = self.watch(embeddings)
        center_size = self.box(embeddings).sigmoid()
        # Guard against numerically-zero sizes from saturated sigmoids.
        cx, cy, w, h = center_size.unbind(-1)
        center_size = torch.stack([cx, cy, w.clamp_min(1e-6), h.clamp_min(1e-6)], dim=-1)
        boxes = center_size_to_corners(center_size)
        heat = self.heatmap(embeddings).sigmoid()
        heat = heat.reshape(*embeddings.shape[:-1], self.heatmap_h, self.heatmap_w)
        return is_head_logits, watch_logits, boxes, heat


@dataclass
class PredictionSet:
    """Fixed-size set of predicted instances for one image.

    Attributes:
        is_head_logits: (num_queries, 2); class 1 means "is a head".
        watch_logits: (num_queries, 2); class 1 means "gaze inside frame".
        boxes: (num_queries, 4) normalized corner boxes.
        heatmaps: (num_queries, H_o, W_o) gaze heatmaps, cells in (0, 1).
    """

    is_head_logits: Tensor
    watch_logits: Tensor
    boxes: Tensor
    heatmaps: Tensor

    def __post_init__(self):
        n = self.is_head_logits.shape[0]
        if self.is_head_logits.shape != (n, 2) or self.watch_logits.shape != (n, 2):
            raise ValueError("classification logits must have shape (num_queries, 2)")
        if self.boxes.shape != (n, 4):
            raise ValueError(f"boxes must have shape ({n}, 4), got {tuple(self.boxes.shape)}")
        if self.heatmaps.ndim != 3 or self.heatmaps.shape[0] != n:
            raise ValueError(f"heatmaps must have shape ({n}, H, W), got {tuple(self.heatmaps.shape)}")

    @property
    def num_queries(self) -> int:
        return self.is_head_logits.shape[0]

    @property
    def is_head_probs(self) -> Tensor:
        return self.is_head_logits.softmax(dim=-1)

    @property
    def watch_probs(self) -> Tensor:
        return self.watch_logits.softmax(dim=-1)

    def instance(self, slot: int) -> GazeInstance:
        """Materialize one slot as a domain-level instance."""
        if not 0 <= slot < self.num_queries:
            raise ValueError(f"slot {slot} out of range (num_queries={self.num_queries})")
        x0, y0, x1, y1 = (float(v) for v in self.boxes[slot])
        head = _safe_box(x0, y0, x1, y1)
        heat = GazeHeatmap(self.heatmaps[slot].detach().cpu().numpy())
        inside = float(self.watch_probs[slot, WATCH_INSIDE]) > 0.5
        point = heatmap_argmax(heat) if inside else None
        return GazeInstance(head=head, gaze=GazeTarget(point, inside), heatmap=heat)


def _safe_box(x0: float, y0: float, x1: float, y1: float, min_size: float = 1e-4) -> HeadBox:
    """Build a HeadBox, widening numerically-degenerate sides to min_size."""
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    w = max(x1 - x0, min_size)
    h = max(y1 - y0, min_size)
    cx = min(max(cx, w / 2.0), 1.0 - w / 2.0)
    cy = min(max(cy, h / 2.0), 1.0 - h / 2.0)
    return HeadBox(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


class TinyBackbone(nn.Module):
    """Small from-scratch CNN: four stride-2 conv stages (overall stride 16)
    with GroupNorm, suited to CPU-scale synthetic scenes.

    The input is augmented with two coordinate channels (x and y ramps over
    [-1, 1]).  A deep pretrained trunk encodes absolute position implicitly
    through dozens of zero-padded convolutions; four layers cannot, and
    attention value paths carry no positional term, so without explicit
    coordinates the queries can learn *what* is in a cell but have no
    workable route to *where* it is.
    """

    out_channels = 128

    def __init__(self):
        super().__init__()
        chans = (16, 32, 64, 128)
        layers: list[nn.Module] = []
        prev = 5
        for c in chans:
            layers += [
                nn.Conv2d(prev, c, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(8, c),
                nn.ReLU(inplace=True),
            ]
            prev = c
        self.stages = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        b, _, h, w = x.shape
        ys = torch.linspace(-1.0, 1.0, h, dtype=x.dtype, device=x.device)
        xs = torch.linspace(-1.0, 1.0, w, dtype=x.dtype, device=x.device)
        grid_y = ys.view(1, 1, h, 1).expand(b, 1, h, w)
        grid_x = xs.view(1, 1, 1, w).expand(b, 1, h, w)
        return self.stages(torch.cat([x, grid_x, grid_y], dim=1))


def build_backbone(name: str) -> tuple[nn.Module, int]:
    """Backbone module and its output channel count for a config identifier."""
    if name == "tiny":
        net = TinyBackbone()
        return net, net.out_channels
    if name in ("resnet50", "resnet101"):
        from torchvision import models  # imported lazily; only these configs need it

        resnet = getattr(models, name)(weights=None)
        trunk = nn.Sequential(
            resnet.conv1, resnet.bn1, resnet.relu, resnet.maxpool,
            resnet.layer1, resnet.layer2, resnet.layer3, resnet.layer4,
        )
        return trunk, 2048
    known = ", ".join(sorted(_BACKBONE_STRIDES))
    raise ValueError(f"unknown backbone '{name}' (known: {known})")


class FeatureExtractor(nn.Module):
    """Backbone + 1x1 projection to d_model + row-major flattening."""

    def __init__(self, backbone: str = "tiny", d_model: int = 256):
        super().__init__()
        self.backbone, out_ch = build_backbone(backbone)
        self.project = nn.Conv2d(out_ch, d_model, kernel_size=1)

    def forward(self, images: Tensor) -> FlattenedFeatures:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (batch, 3, H, W) images, got {tuple(images.shape)}")
        fmap = self.project(self.backbone(images))
        b, d, gh, gw = fmap.shape
        values = fmap.flatten(2).transpose(1, 2)
        return FlattenedFeatures(values, gh, gw)


@dataclass
class ForwardResult:
    """Everything one forward pass produces.

    `layers[k][b]` is the PredictionSet of decoder layer k for batch image
    b; the last layer is the model's actual output, earlier ones exist for
    auxiliary supervision.  `cross_attention` (when requested) holds the
    final layer's head-averaged cross-attention, shape
    (batch, num_queries, grid_h * grid_w).
    """

    layers: list[list[PredictionSet]]
    grid_h: int
    grid_w: int
    cross_attention: Optional[Tensor] = None

    @property
    def final(self) -> list[PredictionSet]:
        return self.layers[-1]


class GazeTargetDetector(nn.Module):
    """End-to-end detector of every person's head box, watch-in/out state,
    and gaze-target heatmap in a single forward pass."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.features = FeatureExtractor(config.backbone, config.d_model)
        self.encoder = TransformerEncoder(
            config.num_encoder_layers, config.d_model, config.num_heads,
            config.ffn_dim, config.dropout,
        )
        self.decoder = TransformerDecoder(
            config.num_decoder_layers, config.d_model, config.num_heads,
            config.ffn_dim, config.dropout,
        )
        self.query_embed = nn.Embedding(config.num_queries, config.d_model)
        self.heads = PredictionHeads(config.d_model, config.heatmap_h, config.heatmap_w)
        self._reset_transformer_parameters()

    def _reset_transformer_parameters(self):
        for module in (self.encoder, self.decoder):
            for p in module.parameters():
                if p.dim() > 1:
                    nn.init.xavier_uniform_(p)
        # The heads carry structured output-layer inits that a blanket
        # xavier sweep must not erase; they reset themselves.
        self.heads.reset_parameters()

    def extract_features(self, images: Tensor) -> FlattenedFeatures:
        return self.features(images)

    def encode(self, features, pos: Tensor) -> Tensor:
        values = features.values if isinstance(features, FlattenedFeatures) else features
        return self.encoder(values, pos)

    def decode(
        self, memory: Tensor, pos: Tensor, need_weights: bool = False
    ) -> tuple[Tensor, list[Optional[Tensor]]]:
        return self.decoder(memory, pos, self.query_embed.weight, need_weights=need_weights)

    def predict_instances(self, embeddings: Tensor):
        """Prediction heads over query embeddings.

        (num_queries, d_model) yields one PredictionSet; a batched
        (batch, num_queries, d_model) input yields a list of them.
        """
        single = embeddings.ndim == 2
        batched = embeddings[None] if single else embeddings
        sets = self._prediction_sets(self.heads(batched))
        return sets[0] if single else sets

    @staticmethod
    def _prediction_sets(head_outputs) -> list[PredictionSet]:
        is_head, watch, boxes, heat = head_outputs
        return [
            PredictionSet(is_head[b], watch[b], boxes[b], heat[b])
            for b in range(is_head.shape[0])
        ]

    def forward(self, images: Tensor, need_attention: bool = False) -> ForwardResult:
        feats = self.extract_features(images)
        pos = positional_encoding_2d(
            feats.grid_h, feats.grid_w, self.config.d_model,
            dtype=feats.values.dtype, device=feats.values.device,
        )
        memory = self.encode(feats, pos)
        stack, attn = self.decode(memory, pos, need_weights=need_attention)
        is_head, watch, boxes, heat = self.heads(stack)
        layers = [
            self._prediction_sets((is_head[k], watch[k], boxes[k], heat[k]))
            for k in range(stack.shape[0])
        ]
        return ForwardResult(
            layers=layers,
            grid_h=feats.grid_h,
            grid_w=feats.grid_w,
            cross_attention=attn[-1] if need_attention else None,
        )


def prepare_images(images, size: Optional[int] = None, dtype: torch.dtype = torch.float32) -> Tensor:
    """uint8 RGB arrays (H, W, 3) -> normalized model input batch (B, 3, H, W).

    Accepts raw arrays or objects with a `.pixels` attribute; images are
    bilinearly resized to (size, size) when a size is given.
    """
    tensors = []
    for im in images:
        arr = np.asarray(getattr(im, "pixels", im))
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) RGB pixels, got shape {arr.shape}")
        if not arr.flags.writeable:
            arr = arr.copy()
        t = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype).permute(2, 0, 1) / 255.0
        if size is not None and t.shape[-2:] != (size, size):
            t = F.interpolate(t[None], size=(size, size), mode="bilinear", align_corners=False)[0]
        tensors.append(t)
    return torch.stack(tensors)


_DTYPE_TO_NUMPY = {
    "float32": np.float32,
    "float64": np.float64,
    "float16": np.float16,
    "int64": np.int64,
    "int32": np.int32,
    "uint8": np.uint8,
    "bool": np.bool_,
}


def save_checkpoint(path, model: GazeTargetDetector, meta: Optional[dict] = None) -> None:
    """Serialize a model to a deterministic binary container.

    Layout: magic, little-endian header length, JSON header (format tag,
    config, metadata, sorted tensor index), then each tensor's raw
    little-endian bytes in index order.  Identical weights always produce
    identical files.
    """
    state = model.state_dict()
    names = sorted(state)
    entries = []
    for name in names:
        t = state[name]
        dtype = str(t.dtype).replace("torch.", "")
        if dtype not in _DTYPE_TO_NUMPY:
            raise ValueError(f"unsupported tensor dtype in checkpoint: {dtype}")
        entries.append({"name": name, "dtype": dtype, "shape": list(t.shape)})
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "meta": meta or {},
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name in names:
            arr = state[name].detach().cpu().contiguous().numpy()
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> tuple[GazeTargetDetector, dict]:
    """Rebuild a model (and its saved metadata) from :func:`save_checkpoint` output."""
    with open(path, "rb") as f:
        magic = f.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a gazedet checkpoint")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(
                f"{path}: unsupported checkpoint format {header.get('format')!r} "
                f"(expected {CHECKPOINT_FORMAT!r})"
            )
        config = ModelConfig(**header["config"])
        state = {}
        for entry in header["tensors"]:
            np_dtype = np.dtype(_DTYPE_TO_NUMPY[entry["dtype"]]).newbyteorder("<")
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = f.read(count * np_dtype.itemsize)
            if len(raw) != count * np_dtype.itemsize:
                raise ValueError(f"{path}: truncated checkpoint at tensor {entry['name']}")
            arr = np.frombuffer(raw, dtype=np_dtype).reshape(entry["shape"])
            state[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    model = GazeTargetDetector(config)
    model.load_state_dict(state, strict=True)
    return model, header.get("meta", {})
