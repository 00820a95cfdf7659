"""Stem, transformer encoder, decoder and 3D refiner."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Tensor, ops
from ..pointops import KernelDisposition, NeighborIndex, kpconv, radius_neighbors
from ..projection import sample_points
from .config import ModelConfig
from .params import ParamSpec, ParamStore, conv_spec, linear_spec, norm_spec

RANGE_CHANNEL = 0


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------


def _bn(prefix: str, width: int, specs: list, buffers: dict) -> None:
    specs += norm_spec(prefix, width)
    buffers[f"{prefix}.running_mean"] = np.zeros(width)
    buffers[f"{prefix}.running_var"] = np.ones(width)


def _stem_block_widths(cfg: ModelConfig) -> list[tuple[int, int]]:
    w = cfg.stem_width
    return [(cfg.in_channels, w), (w, w), (w, w), (w, cfg.hidden_dim)]


def stem_layout(cfg: ModelConfig) -> tuple[list[ParamSpec], dict]:
    specs: list[ParamSpec] = []
    buffers: dict = {}
    if cfg.stem_kind == "linear":
        specs += conv_spec("stem.patch_embed", cfg.in_channels, cfg.embed_dim, cfg.patch_height, cfg.patch_width)
        return specs, buffers
    for i, (c_in, c_out) in enumerate(_stem_block_widths(cfg)):
        p = f"stem.block{i}"
        specs += conv_spec(f"{p}.conv1", c_in, c_out, 1)
        _bn(f"{p}.bn1", c_out, specs, buffers)
        specs += conv_spec(f"{p}.conv2", c_out, c_out, 3)
        _bn(f"{p}.bn2", c_out, specs, buffers)
        specs += conv_spec(f"{p}.conv3", c_out, c_out, 3)
        _bn(f"{p}.bn3", c_out, specs, buffers)
        specs += conv_spec(f"{p}.conv4", 2 * c_out, c_out, 1)
        _bn(f"{p}.bn4", c_out, specs, buffers)
        if c_in != c_out:
            specs += conv_spec(f"{p}.shortcut", c_in, c_out, 1)
    specs += conv_spec("stem.token_proj", cfg.hidden_dim, cfg.embed_dim, 1)
    return specs, buffers


def block_layout(prefix: str, dim: int, mlp_ratio: int) -> list[ParamSpec]:
    hidden = dim * mlp_ratio
    return (norm_spec(f"{prefix}.ln1", dim)
            + linear_spec(f"{prefix}.attn.qkv", dim, 3 * dim)
            + linear_spec(f"{prefix}.attn.proj", dim, dim)
            + norm_spec(f"{prefix}.ln2", dim)
            + linear_spec(f"{prefix}.ffn.fc1", dim, hidden)
            + linear_spec(f"{prefix}.ffn.fc2", hidden, dim))


def encoder_layout(cfg: ModelConfig) -> list[ParamSpec]:
    if cfg.encoder_kind == "identity":
        return []
    d = cfg.embed_dim
    specs = []
    if cfg.use_class_token:
        specs.append(ParamSpec("encoder.cls_token", (1, d), "trunc_normal"))
    specs.append(ParamSpec("encoder.pos_embed", (cfg.sequence_length, d), "trunc_normal"))
    for i in range(cfg.depth):
        specs += block_layout(f"encoder.block{i}", d, cfg.mlp_ratio)
    specs += norm_spec("encoder.norm", d)
    return specs


def decoder_layout(cfg: ModelConfig) -> tuple[list[ParamSpec], dict]:
    specs: list[ParamSpec] = []
    buffers: dict = {}
    dh = cfg.hidden_dim
    if cfg.decoder_kind == "linear":
        specs += conv_spec("decoder.classifier", cfg.embed_dim, cfg.num_classes, 1)
        return specs, buffers
    specs += conv_spec("decoder.expand", cfg.embed_dim, dh * cfg.patch_height * cfg.patch_width, 1)
    specs += conv_spec("decoder.fuse", 2 * dh, dh, 3)
    _bn("decoder.bn1", dh, specs, buffers)
    specs += conv_spec("decoder.mix", dh, dh, 1)
    _bn("decoder.bn2", dh, specs, buffers)
    return specs, buffers


def head_layout(cfg: ModelConfig) -> tuple[list[ParamSpec], dict]:
    specs: list[ParamSpec] = []
    buffers: dict = {}
    dh = cfg.hidden_dim
    if cfg.use_refiner:
        k = cfg.kernel_points
        specs.append(ParamSpec("refiner.kpconv.weight", (k, dh, dh), "kaiming", k * dh))
        _bn("refiner.bn", dh, specs, buffers)
        specs += linear_spec("refiner.head", dh, cfg.num_classes, init="linear")
    elif cfg.decoder_kind == "upconv":
        specs += conv_spec("pixel_head", dh, cfg.num_classes, 1)
    return specs, buffers


def layout(cfg: ModelConfig) -> tuple[list[ParamSpec], dict]:
    """All parameter specs in registration order, plus initial buffers."""
    stem, b1 = stem_layout(cfg)
    dec, b2 = decoder_layout(cfg)
    head, b3 = head_layout(cfg)
    buffers = {"input.mean": np.zeros(cfg.in_channels), "input.std": np.ones(cfg.in_channels)}
    buffers.update(b1)
    buffers.update(b2)
    buffers.update(b3)
    return stem + encoder_layout(cfg) + dec + head, buffers


def count_params(cfg: ModelConfig) -> int:
    """Number of parameter scalars (buffers excluded); nothing is allocated."""
    return sum(s.size for s in layout(cfg)[0])


def param_breakdown(cfg: ModelConfig) -> dict[str, int]:
    out: dict[str, int] = {}
    for s in layout(cfg)[0]:
        top = s.name.split(".")[0]
        out[top] = out.get(top, 0) + s.size
    return out


# ---------------------------------------------------------------------------
# point inputs
# ---------------------------------------------------------------------------


@dataclass
class CropPoints:
    """Points attached to one crop.

    ``point_pixel`` is in crop pixel coordinates (centers at +0.5);
    ``coords`` are the raw xyz positions used by the refiner.
    """

    coords: np.ndarray
    point_pixel: np.ndarray
    valid: np.ndarray | None = None
    _geometry: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        self.point_pixel = np.asarray(self.point_pixel, dtype=np.float64).reshape(-1, 2)
        if self.coords.shape[0] != self.point_pixel.shape[0]:
            raise ValueError(f"{self.coords.shape[0]} coordinates for {self.point_pixel.shape[0]} pixel positions")
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)

    def __len__(self) -> int:
        return self.coords.shape[0]

    def geometry(self, kernel: KernelDisposition, max_neighbors: int) -> tuple[NeighborIndex, np.ndarray]:
        key = (id(kernel), max_neighbors)
        if key not in self._geometry:
            nb = radius_neighbors(self.coords, self.coords, kernel.sigma, max_neighbors)
            self._geometry = {key: (nb, kernel.influences(self.coords, nb))}
        return self._geometry[key]


def _stack_geometry(parts: list[tuple[NeighborIndex, np.ndarray]], max_neighbors: int, num_kernel: int):
    idx, counts, infl = [], [], []
    offset = 0
    for nb, h in parts:
        idx.append(np.where(nb.indices >= 0, nb.indices + offset, -1))
        counts.append(nb.counts)
        infl.append(h)
        offset += nb.indices.shape[0]
    if not idx:
        return (NeighborIndex(np.zeros((0, max_neighbors), np.int64), np.zeros(0, np.int64)),
                np.zeros((0, max_neighbors, num_kernel)))
    return NeighborIndex(np.concatenate(idx), np.concatenate(counts)), np.concatenate(infl)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class RangeViT:
    """Convolutional stem -> ViT encoder -> decoder -> 3D refiner.

    ``training`` selects batch statistics (and running-stat updates) in
    batch normalization; call :meth:`eval` for deterministic inference.
    """

    def __init__(self, config: ModelConfig, params: ParamStore | None = None, *, seed: int = 0,
                 dtype=np.float32):
        self.config = config
        self.kernel = KernelDisposition.default(config.kernel_points, config.influence_radius)
        if params is None:
            specs, buffers = layout(config)
            params = ParamStore.from_specs(specs, buffers, np.random.default_rng(seed), dtype)
        self.params = params
        self.training = True

    @property
    def dtype(self):
        return next(iter(self.params.items()))[1].dtype if len(self.params) else np.float64

    def train(self) -> "RangeViT":
        self.training = True
        return self

    def eval(self) -> "RangeViT":
        self.training = False
        return self

    # -- building blocks ----------------------------------------------------------
    def _conv(self, name: str, x: Tensor, padding=0, dilation=1, stride=1) -> Tensor:
        p = self.params
        return ops.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride, padding=padding,
                          dilation=dilation)

    def _bn(self, name: str, x: Tensor) -> Tensor:
        p = self.params
        return ops.batch_norm(x, p[f"{name}.weight"], p[f"{name}.bias"], p.buffers[f"{name}.running_mean"],
                              p.buffers[f"{name}.running_var"], self.training)

    def _conv_act_bn(self, conv: str, bn: str, x: Tensor, padding=0, dilation=1) -> Tensor:
        return self._bn(bn, ops.leaky_relu(self._conv(conv, x, padding, dilation)))

    def _residual_block(self, prefix: str, x: Tensor) -> Tensor:
        y = self._conv_act_bn(f"{prefix}.conv1", f"{prefix}.bn1", x)
        local = self._conv_act_bn(f"{prefix}.conv2", f"{prefix}.bn2", y, padding=1)
        wide = self._conv_act_bn(f"{prefix}.conv3", f"{prefix}.bn3", y, padding=2, dilation=2)
        y = self._conv_act_bn(f"{prefix}.conv4", f"{prefix}.bn4", ops.concat([local, wide], axis=1))
        skip = self._conv(f"{prefix}.shortcut", x) if f"{prefix}.shortcut.weight" in self.params else x
        return ops.add(y, skip)

    def normalize_input(self, crops: np.ndarray) -> Tensor:
        """Standardize channels on occupied pixels; empty pixels stay zero."""
        cfg = self.config
        crops = np.asarray(crops)
        if crops.ndim == 3:
            crops = crops[None]
        expect = (cfg.in_channels, cfg.crop_height, cfg.crop_width)
        if crops.ndim != 4 or crops.shape[1:] != expect:
            raise ValueError(f"crop shape {crops.shape[1:]} does not match configured {expect}")
        mean = self.params.buffers["input.mean"].reshape(1, -1, 1, 1)
        std = self.params.buffers["input.std"].reshape(1, -1, 1, 1)
        occupied = crops[:, RANGE_CHANNEL:RANGE_CHANNEL + 1] > 0
        x = np.where(occupied, (crops - mean) / std, 0.0)
        return Tensor(x.astype(self.dtype))

    # -- stages --------------------------------------------------------------------
    def stem(self, x: Tensor) -> tuple[Tensor | None, Tensor]:
        """B x C x H x W -> (context B x D_h x H x W or None, tokens B x M x D)."""
        cfg = self.config
        bsz = x.shape[0]
        if cfg.stem_kind == "linear":
            context = None
            grid = self._conv("stem.patch_embed", x, stride=(cfg.patch_height, cfg.patch_width))
        else:
            h = x
            for i in range(4):
                h = self._residual_block(f"stem.block{i}", h)
            context = h
            pooled = ops.avg_pool2d(
                context,
                kernel=(cfg.patch_height + 1, cfg.patch_width + 1),
                stride=(cfg.patch_height, cfg.patch_width),
                padding=(cfg.patch_height // 2, cfg.patch_width // 2),
            )
            grid = self._conv("stem.token_proj", pooled)
        tokens = ops.transpose(ops.reshape(grid, (bsz, cfg.embed_dim, cfg.num_patches)), (0, 2, 1))
        return context, tokens

    def encoder(self, tokens: Tensor) -> Tensor:
        """B x M x D -> B x M x D."""
        cfg = self.config
        if tokens.ndim != 3 or tokens.shape[1:] != (cfg.num_patches, cfg.embed_dim):
            raise ValueError(f"encoder expects {cfg.num_patches} tokens of width {cfg.embed_dim}, got {tokens.shape}")
        if cfg.encoder_kind == "identity":
            return tokens
        p = self.params
        bsz = tokens.shape[0]
        x = tokens
        if cfg.use_class_token:
            cls = ops.add(Tensor(np.zeros((bsz, 1, cfg.embed_dim), dtype=tokens.dtype)), p["encoder.cls_token"])
            x = ops.concat([cls, x], axis=1)
        x = ops.add(x, p["encoder.pos_embed"])
        for i in range(cfg.depth):
            x = ops.attention_block(x, p.group(f"encoder.block{i}"), cfg.num_heads)
        x = ops.layer_norm(x, p["encoder.norm.weight"], p["encoder.norm.bias"])
        if cfg.use_class_token:
            x = x[:, 1:, :]
        return x

    def decoder(self, tokens: Tensor, context: Tensor | None) -> Tensor:
        """Patch tokens (+ stem context) -> B x C x H x W feature map."""
        cfg = self.config
        bsz = tokens.shape[0]
        grid = ops.reshape(ops.transpose(tokens, (0, 2, 1)), (bsz, cfg.embed_dim, cfg.grid_height, cfg.grid_width))
        if cfg.decoder_kind == "linear":
            return self._upsample(self._conv("decoder.classifier", grid))
        if context is None or context.shape != (bsz, cfg.hidden_dim, cfg.crop_height, cfg.crop_width):
            raise ValueError("decoder context does not match the configured hidden size and crop")
        up = ops.pixel_shuffle(self._conv("decoder.expand", grid), cfg.patch_height, cfg.patch_width)
        y = ops.concat([up, context], axis=1)
        y = self._conv_act_bn("decoder.fuse", "decoder.bn1", y, padding=1)
        return self._conv_act_bn("decoder.mix", "decoder.bn2", y)

    def _upsample(self, coarse: Tensor) -> Tensor:
        """Bilinear upsampling by the patch size (half-pixel aligned)."""
        cfg = self.config
        bsz, ch = coarse.shape[:2]
        ys = (np.arange(cfg.crop_height) + 0.5) / cfg.patch_height - 0.5
        xs = (np.arange(cfg.crop_width) + 0.5) / cfg.patch_width - 0.5
        coords = np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1).reshape(-1, 2)
        maps = []
        for b in range(bsz):
            fine = ops.bilinear_sample(coarse[b], coords)  # HW x C
            maps.append(ops.reshape(ops.transpose(fine, (1, 0)), (1, ch, cfg.crop_height, cfg.crop_width)))
        return maps[0] if bsz == 1 else ops.concat(maps, axis=0)

    def feature_maps(self, crops) -> Tensor:
        """Stem, encoder and decoder on raw crops (C x H x W or B x C x H x W)."""
        x = crops if isinstance(crops, Tensor) else self.normalize_input(crops)
        context, tokens = self.stem(x)
        return self.decoder(self.encoder(tokens), context)

    def pixel_logits(self, maps: Tensor) -> Tensor:
        """Per-pixel class scores for models without the 3D refiner."""
        if self.config.use_refiner:
            raise ValueError("per-pixel logits are only defined for models without the refiner")
        if self.config.decoder_kind == "linear":
            return maps
        return self._conv("pixel_head", maps)

    def refine(self, point_feats: Tensor, neighbors: NeighborIndex, influences: np.ndarray) -> Tensor:
        """KPConv -> BN -> ReLU -> linear head, N x D_h -> N x K."""
        p = self.params
        if point_feats.shape[0] == 0:
            return ops.linear(point_feats, p["refiner.head.weight"], p["refiner.head.bias"])
        y = kpconv(point_feats, p["refiner.kpconv.weight"], neighbors, influences)
        y = ops.relu(self._bn("refiner.bn", y))
        return ops.linear(y, p["refiner.head.weight"], p["refiner.head.bias"])

    def refine_points(self, point_feats: Tensor, coords: np.ndarray) -> Tensor:
        pts = CropPoints(coords, np.zeros((len(np.asarray(coords).reshape(-1, 3)), 2)))
        nb, h = pts.geometry(self.kernel, self.config.max_neighbors)
        return self.refine(point_feats, nb, h)

    def point_logits(self, maps: Tensor, points: list[CropPoints]) -> Tensor:
        """Lift B feature maps onto their points; logits concatenated in order."""
        if maps.shape[0] != len(points):
            raise ValueError(f"{maps.shape[0]} feature maps for {len(points)} point sets")
        cfg = self.config
        source = maps if cfg.use_refiner else self.pixel_logits(maps)
        per_crop = [sample_points(source[b], pts.point_pixel, pts.valid) for b, pts in enumerate(points)]
        feats = per_crop[0] if len(per_crop) == 1 else ops.concat(per_crop, axis=0)
        if not cfg.use_refiner:
            return feats
        geometry = [pts.geometry(self.kernel, cfg.max_neighbors) for pts in points]
        nb, h = _stack_geometry(geometry, cfg.max_neighbors, cfg.kernel_points)
        return self.refine(feats, nb, h.astype(self.dtype))

    def forward(self, crop, points: CropPoints) -> Tensor:
        """Single crop (C x H x W) and its points -> N x K logits."""
        return self.point_logits(self.feature_maps(crop), [points])

    def forward_batch(self, crops, points: list[CropPoints]) -> Tensor:
        return self.point_logits(self.feature_maps(crops), points)

    __call__ = forward

