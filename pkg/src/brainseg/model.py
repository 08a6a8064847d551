"""Promptable three-class segmentation model.

A frozen ViT-style image encoder produces an embedding grid; a box prompt
encoder and a two-way transformer decoder turn it into per-pixel logits.
The decoder keeps the usual upscaling path and ends in a convolutional
projection with exactly three output channels (background / gray matter /
white matter); predictions are the per-pixel argmax.

Two named variants are provided: "tiny" (desk-scale, fast on CPU) and
"base" (ViT-B-scale dimensions for use with converted pretrained weights).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import IncompatibleCheckpoint, MissingFile, MissingKeys, NonFiniteActivation

CHECKPOINT_FORMAT_VERSION = 1
NUM_CLASSES = 3
OUTPUT_RESOLUTION = 256


@dataclass(frozen=True)
class VariantConfig:
    name: str
    native_res: int
    patch: int
    embed_dim: int
    depth: int
    heads: int
    mlp_ratio: float
    emb_channels: int  # embedding-grid channels shared by prompt encoder and decoder
    decoder_depth: int
    decoder_heads: int

    @property
    def grid(self) -> int:
        return self.native_res // self.patch


VARIANTS = {
    "tiny": VariantConfig(
        name="tiny", native_res=256, patch=16, embed_dim=96, depth=2, heads=4,
        mlp_ratio=2.0, emb_channels=64, decoder_depth=2, decoder_heads=4,
    ),
    "base": VariantConfig(
        name="base", native_res=1024, patch=16, embed_dim=768, depth=12, heads=12,
        mlp_ratio=4.0, emb_channels=256, decoder_depth=2, decoder_heads=8,
    ),
}


@dataclass
class PromptSpec:
    """Bounding-box prompt in normalized [0,1] image coordinates."""

    box: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        for v in self.box:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"box coordinates must be in [0,1], got {self.box}")
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"box must satisfy x0 < x1 and y0 < y1, got {self.box}")


FULL_IMAGE_BOX = (0.0, 0.0, 1.0, 1.0)


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel dimension of (B, C, H, W) tensors."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
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


class ImageEncoder(nn.Module):
    """Patch-embedding transformer producing a (emb_channels, grid, grid) feature map."""

    def __init__(self, cfg: VariantConfig):
        super().__init__()
        self.patch_embed = nn.Conv2d(3, cfg.embed_dim, kernel_size=cfg.patch, stride=cfg.patch)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.grid * cfg.grid, cfg.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.neck = nn.Sequential(
            nn.Conv2d(cfg.embed_dim, cfg.emb_channels, 1, bias=False),
            LayerNorm2d(cfg.emb_channels),
            nn.Conv2d(cfg.emb_channels, cfg.emb_channels, 3, padding=1, bias=False),
            LayerNorm2d(cfg.emb_channels),
        )
        self.grid = cfg.grid

    def forward(self, images):
        x = self.patch_embed(images)  # (B, D, g, g)
        b, d, gh, gw = x.shape
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        x = x.transpose(1, 2).reshape(b, d, gh, gw)
        return self.neck(x)


class PositionalRandomFeatures(nn.Module):
    """Random-Fourier positional encoding over normalized [0,1] coordinates."""

    def __init__(self, channels: int):
        super().__init__()
        if channels % 2:
            raise ValueError("positional feature channels must be even")
        self.register_buffer("gauss", torch.randn(2, channels // 2))

    def encode(self, coords):
        # coords (..., 2) in [0,1] -> (..., channels)
        proj = (2.0 * coords - 1.0) @ self.gauss * (2.0 * math.pi)
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)

    def grid_encoding(self, size: int):
        device = self.gauss.device
        centers = (torch.arange(size, device=device, dtype=torch.float32) + 0.5) / size
        yy, xx = torch.meshgrid(centers, centers, indexing="ij")
        pe = self.encode(torch.stack([xx, yy], dim=-1))  # (g, g, C)
        return pe.permute(2, 0, 1)  # (C, g, g)


class BoxPromptEncoder(nn.Module):
    """Embed a bounding-box prompt as two corner tokens plus a dense no-mask map."""

    def __init__(self, cfg: VariantConfig):
        super().__init__()
        self.pe = PositionalRandomFeatures(cfg.emb_channels)
        self.corner_embed = nn.Embedding(2, cfg.emb_channels)
        self.no_mask_embed = nn.Embedding(1, cfg.emb_channels)
        self.grid = cfg.grid

    def forward(self, boxes):
        # boxes (B, 4) normalized -> sparse (B, 2, C), dense (B, C, g, g)
        corners = boxes.reshape(-1, 2, 2)
        sparse = self.pe.encode(corners)
        sparse = sparse + self.corner_embed.weight[None, :, :]
        dense = self.no_mask_embed.weight.reshape(1, -1, 1, 1).expand(
            boxes.shape[0], -1, self.grid, self.grid
        )
        return sparse, dense

    def dense_pe(self):
        return self.pe.grid_encoding(self.grid)[None]


class TwoWayBlock(nn.Module):
    """Token self-attention, token->image and image->token cross-attention."""

    def __init__(self, dim: int, heads: int, skip_first_pe: bool = False):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm4 = nn.LayerNorm(dim)
        self.skip_first_pe = skip_first_pe

    def forward(self, tokens, image, token_pe, image_pe):
        q = tokens if self.skip_first_pe else tokens + token_pe
        tokens = self.norm1(tokens + self.self_attn(q, q, tokens, need_weights=False)[0])
        q = tokens + token_pe
        k = image + image_pe
        tokens = self.norm2(tokens + self.cross_t2i(q, k, image, need_weights=False)[0])
        tokens = self.norm3(tokens + self.mlp(tokens))
        q = tokens + token_pe
        image = self.norm4(image + self.cross_i2t(k, q, tokens, need_weights=False)[0])
        return tokens, image


class MaskDecoder(nn.Module):
    """Two-way transformer over image/prompt embeddings with an upscaling head
    ending in a three-channel class projection."""

    def __init__(self, cfg: VariantConfig):
        super().__init__()
        c = cfg.emb_channels
        self.mask_token = nn.Embedding(1, c)
        self.blocks = nn.ModuleList(
            TwoWayBlock(c, cfg.decoder_heads, skip_first_pe=(i == 0))
            for i in range(cfg.decoder_depth)
        )
        self.final_t2i = nn.MultiheadAttention(c, cfg.decoder_heads, batch_first=True)
        self.final_norm = nn.LayerNorm(c)
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(c, c // 4, 2, stride=2),
            LayerNorm2d(c // 4),
            nn.GELU(),
            nn.ConvTranspose2d(c // 4, c // 8, 2, stride=2),
            nn.GELU(),
        )
        self.class_head = nn.Conv2d(c // 8, NUM_CLASSES, 1)
        nn.init.normal_(self.class_head.weight, std=0.01)
        nn.init.zeros_(self.class_head.bias)

    def forward(self, image_emb, image_pe, sparse, dense):
        b, c, gh, gw = image_emb.shape
        tokens = torch.cat(
            [self.mask_token.weight[None].expand(b, -1, -1), sparse], dim=1
        )
        token_pe = tokens
        image = (image_emb + dense).flatten(2).transpose(1, 2)  # (B, g*g, C)
        image_pe = image_pe.expand(b, -1, -1, -1).flatten(2).transpose(1, 2)
        for blk in self.blocks:
            tokens, image = blk(tokens, image, token_pe, image_pe)
        q = tokens + token_pe
        k = image + image_pe
        tokens = self.final_norm(tokens + self.final_t2i(q, k, image, need_weights=False)[0])
        feats = image.transpose(1, 2).reshape(b, c, gh, gw)
        return self.class_head(self.upscale(feats))  # (B, 3, 4g, 4g)


class SegNet(nn.Module):
    """End-to-end network: grayscale slice + box prompt -> 3x256x256 logits."""

    def __init__(self, cfg: VariantConfig):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg)
        self.prompt_encoder = BoxPromptEncoder(cfg)
        self.mask_decoder = MaskDecoder(cfg)

    def forward(self, images, boxes):
        if images.shape[1] == 1:
            images = images.repeat(1, 3, 1, 1)
        if images.shape[-2:] != (self.cfg.native_res, self.cfg.native_res):
            images = F.interpolate(
                images, size=(self.cfg.native_res, self.cfg.native_res),
                mode="bilinear", align_corners=False,
            )
        emb = self.image_encoder(images)
        sparse, dense = self.prompt_encoder(boxes)
        logits = self.mask_decoder(emb, self.prompt_encoder.dense_pe(), sparse, dense)
        return F.interpolate(
            logits, size=(OUTPUT_RESOLUTION, OUTPUT_RESOLUTION),
            mode="bilinear", align_corners=False,
        )


class SegModel:
    """Wrapper pairing a SegNet with its variant config and freeze state."""

    def __init__(self, net: SegNet, variant: str, model_id: str | None = None):
        self.net = net
        self.variant = variant
        self.config = VARIANTS.get(variant, net.cfg)
        self.model_id = model_id or variant
        self.net.image_encoder.requires_grad_(False)

    @property
    def encoder_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.net.image_encoder.parameters())

    def trainable_parameters(self):
        yield from self.net.prompt_encoder.parameters()
        yield from self.net.mask_decoder.parameters()

    def encoder_parameters(self):
        yield from self.net.image_encoder.parameters()

    def forward_logits(self, image: np.ndarray, prompt: PromptSpec | None = None) -> np.ndarray:
        """Run one grayscale [0,1] slice through the network; returns 3x256x256 logits."""
        return forward(self, image, prompt)

    def predict(self, image: np.ndarray, prompt: PromptSpec | None = None):
        return predict(self, image, prompt)


def build_model(variant: str, seed: int = 0) -> SegModel:
    """Deterministically construct a model of the named variant."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {sorted(VARIANTS)}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = SegNet(VARIANTS[variant])
    return SegModel(net, variant)


def init_tiny(seed: int = 0) -> SegModel:
    """Desk-scale stand-in model with the same interface as the full variant."""
    return build_model("tiny", seed)


def _image_to_tensor(image: np.ndarray) -> torch.Tensor:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ValueError(f"expected a 2D grayscale slice, got shape {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0,1]")
    return torch.from_numpy(image)[None, None]


def forward(model: SegModel, image: np.ndarray, prompt: PromptSpec | None = None) -> np.ndarray:
    """Single-slice forward pass returning a 3x256x256 logit array."""
    prompt = prompt or PromptSpec()
    boxes = torch.tensor([prompt.box], dtype=torch.float32)
    model.net.eval()
    with torch.no_grad():
        logits = model.net(_image_to_tensor(image), boxes)[0].numpy()
    if not np.isfinite(logits).all():
        raise NonFiniteActivation("model produced NaN/Inf logits")
    return logits


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the leading class axis."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def logits_to_prediction(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(label, probabilities) from a class-logit array; ties pick the lowest class."""
    probs = softmax_probs(logits)
    label = np.argmax(probs, axis=0).astype(np.uint8)
    return label, probs


def predict(model: SegModel, image: np.ndarray, prompt: PromptSpec | None = None):
    """Segment one slice: returns (label mask 256x256, probability maps 3x256x256)."""
    return logits_to_prediction(forward(model, image, prompt))


def save_checkpoint(model: SegModel, path, extra_meta: dict | None = None) -> None:
    """Write weights plus a JSON sidecar recording variant, head shape, and format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.net.state_dict(), path)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "variant": model.variant,
        "head_channels": NUM_CLASSES,
        "native_res": model.net.cfg.native_res,
    }
    if extra_meta:
        meta.update(extra_meta)
    Path(str(path) + ".json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


_HEAD_PREFIX = "mask_decoder.class_head."


def load_pretrained(checkpoint) -> SegModel:
    """Load a checkpoint written by save_checkpoint (or converted into its format).

    The three-channel head has no counterpart in binary-decoder checkpoints,
    so its keys may be absent; they keep their deterministic fresh
    initialization. Any other missing key is an error.
    """
    path = Path(checkpoint)
    if not path.is_file():
        raise MissingFile(f"no checkpoint at {path}")
    sidecar = Path(str(path) + ".json")
    if not sidecar.is_file():
        raise IncompatibleCheckpoint(f"missing sidecar {sidecar.name}")
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise IncompatibleCheckpoint(f"unreadable sidecar: {e}")
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise IncompatibleCheckpoint(f"unsupported format_version {meta.get('format_version')}")
    variant = meta.get("variant")
    if variant not in VARIANTS:
        raise IncompatibleCheckpoint(f"unknown encoder variant {variant!r}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise IncompatibleCheckpoint(f"unreadable checkpoint {path.name}: {e}")

    model = build_model(variant, seed=0)
    expected = model.net.state_dict()
    missing = [k for k in expected if k not in state]
    unexpected = [k for k in state if k not in expected]
    hard_missing = [k for k in missing if not k.startswith(_HEAD_PREFIX)]
    if hard_missing:
        raise MissingKeys(f"checkpoint lacks required weights: {hard_missing[:5]}")
    if unexpected:
        raise IncompatibleCheckpoint(f"checkpoint has unexpected keys: {unexpected[:5]}")
    try:
        model.net.load_state_dict(state, strict=False)
    except RuntimeError as e:
        raise IncompatibleCheckpoint(f"weight shapes do not match variant {variant}: {e}")
    model.net.image_encoder.requires_grad_(False)
    return model
