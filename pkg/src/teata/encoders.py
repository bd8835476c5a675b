"""Tiny dual encoders: a patch-transformer image encoder exposing both the
pre-projection class token and the projected feature, and a freeze-capable
text encoder that consumes token-embedding sequences with externally supplied
learnable slots.

Architecture sizes are config-driven; the defaults (4x4 patches, 2 blocks,
48 -> 32 projection) are sized for CPU desk runs.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ShapeError

# Fixed template vocabulary; slots are spliced between the two "a ... person"
# halves, so a full sequence is 2M + 8 tokens long.
VOCAB = ("[start]", "[end]", "a", "photo", "of", "person", ".")
_START, _END, _A, _PHOTO, _OF, _PERSON, _PERIOD = range(len(VOCAB))
_PREFIX = (_START, _A, _PHOTO, _OF, _A)
_SUFFIX = (_PERSON, _PERIOD, _END)


def seeded_trunc_normal_(tensor: torch.Tensor, std: float, seed: int) -> torch.Tensor:
    """In-place truncated-normal fill (cut at 2 sigma), seed-controlled."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        nn.init.trunc_normal_(tensor, mean=0.0, std=std, a=-2.0 * std, b=2.0 * std)
    return tensor


def _init_module(module: nn.Module, seed: int, std: float = 0.02) -> None:
    # Weight matrices and embeddings get trunc-normal(std); biases are
    # zeroed and LayerNorm keeps its multiplicative identity, so the final
    # state never depends on torch's global RNG at construction time.
    offset = 0
    for name, param in sorted(module.named_parameters()):
        if "bias" in name:
            nn.init.zeros_(param.data)
        elif param.dim() == 1:
            nn.init.ones_(param.data)
        else:
            seeded_trunc_normal_(param.data, std=std, seed=seed * 100003 + offset)
            offset += 1


class TransformerBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, width * 4),
            nn.GELU(),
            nn.Linear(width * 4, width),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.ln2(x))
        return x


class ImageEncoder(nn.Module):
    """Patch transformer with class-token readout and a final linear projection.

    forward() returns (pre_feature, feature): the class token after the final
    LayerNorm, and that same vector passed through the projection. No
    normalization is applied here.
    """

    def __init__(
        self,
        image_height: int = 64,
        image_width: int = 32,
        patch_size: int = 4,
        pre_dim: int = 48,
        embed_dim: int = 32,
        depth: int = 2,
        heads: int = 4,
        seed: int = 0,
        init_std: float = 0.02,
    ):
        super().__init__()
        if image_height % patch_size or image_width % patch_size:
            raise ShapeError("image size must be divisible by patch_size")
        self.image_height = image_height
        self.image_width = image_width
        self.pre_dim = pre_dim
        self.embed_dim = embed_dim
        num_patches = (image_height // patch_size) * (image_width // patch_size)

        self.patch_embed = nn.Conv2d(3, pre_dim, kernel_size=patch_size, stride=patch_size)
        self.class_token = nn.Parameter(torch.zeros(1, 1, pre_dim))
        self.positional = nn.Parameter(torch.zeros(1, num_patches + 1, pre_dim))
        self.blocks = nn.ModuleList(TransformerBlock(pre_dim, heads) for _ in range(depth))
        self.ln_final = nn.LayerNorm(pre_dim)
        self.projection = nn.Linear(pre_dim, embed_dim, bias=False)
        _init_module(self, seed, init_std)

    def forward(self, batch: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if batch.dim() != 4 or batch.shape[0] == 0:
            raise ShapeError(f"expected a non-empty (B, H, W, 3) batch, got {tuple(batch.shape)}")
        if batch.shape[1:] != (self.image_height, self.image_width, 3):
            raise ShapeError(
                f"expected (B, {self.image_height}, {self.image_width}, 3), "
                f"got {tuple(batch.shape)}"
            )
        x = batch.permute(0, 3, 1, 2)
        x = self.patch_embed(x)
        x = x.flatten(2).transpose(1, 2)
        cls = self.class_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional
        for block in self.blocks:
            x = block(x)
        pre_feature = self.ln_final(x[:, 0])
        return pre_feature, self.projection(pre_feature)


@dataclass
class PromptSequence:
    """Slot tensor (2M, d_tok) in X1, Y1, ..., XM, YM order; the encoder
    wraps it into the fixed template of 2M + 8 tokens."""

    slots: torch.Tensor

    @property
    def num_pairs(self) -> int:
        return self.slots.shape[0] // 2

    @property
    def length(self) -> int:
        return self.slots.shape[0] + len(_PREFIX) + len(_SUFFIX)


class TextEncoder(nn.Module):
    """Transformer over the fixed template with externally supplied slots.

    The output embedding is read at the end-token position of the last layer
    and projected to embed_dim.
    """

    def __init__(
        self,
        num_pairs: int = 16,
        token_width: int = 32,
        embed_dim: int = 32,
        depth: int = 2,
        heads: int = 4,
        seed: int = 1,
        init_std: float = 0.02,
    ):
        super().__init__()
        self.num_pairs = num_pairs
        self.token_width = token_width
        self.embed_dim = embed_dim
        self.context_length = 2 * num_pairs + len(_PREFIX) + len(_SUFFIX)

        self.token_embedding = nn.Parameter(torch.zeros(len(VOCAB), token_width))
        self.positional = nn.Parameter(torch.zeros(self.context_length, token_width))
        self.blocks = nn.ModuleList(TransformerBlock(token_width, heads) for _ in range(depth))
        self.ln_final = nn.LayerNorm(token_width)
        self.projection = nn.Linear(token_width, embed_dim, bias=False)
        _init_module(self, seed, init_std)

    def _assemble(self, slots: torch.Tensor) -> torch.Tensor:
        if slots.dim() != 3:
            raise ShapeError(f"expected (B, 2M, d_tok) slots, got {tuple(slots.shape)}")
        if slots.shape[1] != 2 * self.num_pairs or slots.shape[2] != self.token_width:
            raise ShapeError(
                f"expected slots of shape (B, {2 * self.num_pairs}, {self.token_width}), "
                f"got {tuple(slots.shape)}"
            )
        batch = slots.shape[0]
        prefix = self.token_embedding[list(_PREFIX)].expand(batch, -1, -1)
        suffix = self.token_embedding[list(_SUFFIX)].expand(batch, -1, -1)
        return torch.cat([prefix, slots, suffix], dim=1)

    def encode_slots(self, slots: torch.Tensor) -> torch.Tensor:
        """Encode a batch of slot tensors into (B, embed_dim) text embeddings."""
        x = self._assemble(slots) + self.positional
        for block in self.blocks:
            x = block(x)
        # End token sits at the last position of the fixed-length template.
        return self.projection(self.ln_final(x[:, -1]))


def encode_images(encoder: ImageEncoder, batch: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return encoder(batch)


def encode_prompt(encoder: TextEncoder, seq: PromptSequence) -> torch.Tensor:
    if seq.slots.dim() != 2:
        raise ShapeError(f"expected (2M, d_tok) slots, got {tuple(seq.slots.shape)}")
    return encoder.encode_slots(seq.slots.unsqueeze(0)).squeeze(0)


class ContrastiveTemperature(nn.Module):
    """Learnable softmax temperature in exponent form, clamped to [0.01, 1]."""

    MIN_T = 0.01
    MAX_T = 1.0

    def __init__(self, initial: float = 0.07):
        super().__init__()
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1.0 / initial)))

    def temperature(self) -> torch.Tensor:
        clamped = self.logit_scale.clamp(math.log(1.0 / self.MAX_T), math.log(1.0 / self.MIN_T))
        return 1.0 / clamped.exp()


# ---------------------------------------------------------------------------
# Trainability control and parameter fingerprinting
# ---------------------------------------------------------------------------

def freeze(module: nn.Module) -> dict[str, bool]:
    for param in module.parameters():
        param.requires_grad_(False)
    return trainable_mask(module)


def unfreeze(module: nn.Module) -> dict[str, bool]:
    for param in module.parameters():
        param.requires_grad_(True)
    return trainable_mask(module)


def trainable_mask(module: nn.Module) -> dict[str, bool]:
    return {name: p.requires_grad for name, p in module.named_parameters()}


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over all parameters' raw bytes; bitwise change detector."""
    digest = hashlib.sha256()
    for name, param in sorted(module.named_parameters()):
        digest.update(name.encode())
        digest.update(param.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
