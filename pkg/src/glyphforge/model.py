"""Dual-manifold generative network.

A character encoder infers a Gaussian posterior over the shape variable of a
row of glyphs; a font encoder, conditioned on those character embeddings,
infers the style variable of a column. The decoder upsamples the character
embedding from an 8x8 grid back to the image, with the weights of its last
two upsampling layers produced by MLPs from the font embedding (a
hypernetwork), so style modulates how shapes are drawn.

Encoders pool convolutional features across the glyph set (max by default,
min configurable), making them permutation invariant and size agnostic.
Downsampling uses 2x2 blur pooling; decoder convolutions are followed by
instance normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .adaptive import AdaptiveLossParams, PartitionTable, glyph_log_likelihood
from .corpus import Batch
from .wavelet import max_levels

HYPER_HIDDEN = 256  # hidden width of the weight-producing MLPs


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``base_width`` scales every channel count (64 reproduces the reference
    layer sizes); ``wavelet_levels`` of None means full dyadic depth.
    """

    side: int = 64
    k: int = 256
    base_width: int = 64
    pooling: str = "max"
    wavelet_levels: int | None = None
    y_channels: int = 8
    eps: float = 1e-5

    def __post_init__(self):
        if self.side < 32 or (self.side & (self.side - 1)) != 0:
            raise ValueError(f"side must be a power of two >= 32, got {self.side}")
        if self.pooling not in ("max", "min"):
            raise ValueError(f"pooling must be 'max' or 'min', got {self.pooling!r}")
        if self.wavelet_levels is None:
            self.wavelet_levels = max_levels(self.side)

    def to_dict(self) -> dict:
        return {
            "side": self.side,
            "k": self.k,
            "base_width": self.base_width,
            "pooling": self.pooling,
            "wavelet_levels": self.wavelet_levels,
            "y_channels": self.y_channels,
            "eps": self.eps,
        }


@dataclass
class LatentPosterior:
    """Diagonal-Gaussian posterior parameters; shapes ``(..., k)``."""

    mean: Tensor
    logvar: Tensor


def reparameterize(post: LatentPosterior, generator: torch.Generator | None = None) -> Tensor:
    """mu + exp(logvar/2) * eta with standard-normal eta; differentiable."""
    eta = torch.randn(
        post.mean.shape,
        generator=generator,
        dtype=post.mean.dtype,
        device=post.mean.device,
    )
    return post.mean + torch.exp(0.5 * post.logvar) * eta


def kl_to_prior(post: LatentPosterior) -> Tensor:
    """Closed-form KL(q || N(0, I)) per posterior; shape ``(...)``, >= 0."""
    return 0.5 * torch.sum(
        post.mean**2 + torch.exp(post.logvar) - 1.0 - post.logvar, dim=-1
    )


class BlurPool2d(nn.Module):
    """Anti-aliased 2x downsampling: fixed 2x2 binomial blur, stride 2."""

    def __init__(self, channels: int):
        super().__init__()
        kernel = torch.full((channels, 1, 2, 2), 0.25)
        self.register_buffer("kernel", kernel)
        self.channels = channels

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.kernel.to(x.dtype), stride=2, groups=self.channels)


class GlyphSetEncoder(nn.Module):
    """Permutation-invariant set encoder producing posterior (mu, logvar).

    Convolutional trunk applied per glyph, features pooled elementwise across
    each set, flattened and sent through one fully connected head.
    """

    def __init__(self, in_channels: int, side: int, k: int, base_width: int, pooling: str):
        super().__init__()
        w = base_width
        self.pooling = pooling
        self.trunk = nn.Sequential(
            nn.Conv2d(in_channels, w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.ReLU(),
            BlurPool2d(w),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.ReLU(),
            BlurPool2d(2 * w),
            nn.Conv2d(2 * w, 4 * w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(4 * w, 4 * w, 3, padding=1), nn.ReLU(),
            BlurPool2d(4 * w),
            nn.Conv2d(4 * w, 8 * w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(8 * w, 8 * w, 3, padding=1), nn.ReLU(),
            BlurPool2d(8 * w),
        )
        feat_side = side // 16
        self.feat_dim = 8 * w * feat_side * feat_side
        self.head = nn.Linear(self.feat_dim, 2 * k)

    def pooled(self, x: Tensor, segments: Tensor, n_segments: int) -> Tensor:
        """Pooled flat features per set, pre-head; ``segments`` maps glyph->set."""
        feats = self.trunk(x)
        out = feats.new_empty((n_segments,) + feats.shape[1:])
        for s in range(n_segments):
            members = feats[segments == s]
            if members.shape[0] == 0:
                raise ValueError(f"empty glyph set for segment {s}")
            out[s] = members.amax(0) if self.pooling == "max" else members.amin(0)
        return out.reshape(n_segments, self.feat_dim)

    def forward(self, x: Tensor, segments: Tensor, n_segments: int) -> LatentPosterior:
        mu, logvar = self.head(self.pooled(x, segments, n_segments)).chunk(2, dim=-1)
        return LatentPosterior(mu, logvar)


class HyperMLP(nn.Module):
    """MLP mapping a font embedding to one transposed-conv kernel and bias."""

    def __init__(self, k: int, in_channels: int, out_channels: int):
        super().__init__()
        self.weight_shape = (in_channels, out_channels, 2, 2)
        self.bias_shape = (out_channels,)
        n_out = in_channels * out_channels * 4 + out_channels
        self.fc1 = nn.Linear(k, HYPER_HIDDEN)
        self.fc2 = nn.Linear(HYPER_HIDDEN, n_out)
        # Keep generated kernels at the init scale of an ordinary transposed
        # conv: tiny weight matrix, kaiming-style bound on the bias (which is
        # the z-independent base kernel).
        bound = 1.0 / math.sqrt(out_channels * 4)
        nn.init.normal_(self.fc2.weight, std=bound / math.sqrt(HYPER_HIDDEN))
        nn.init.uniform_(self.fc2.bias, -bound, bound)

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        flat = self.fc2(F.relu(self.fc1(z)))
        n_w = int(np.prod(self.weight_shape))
        return flat[:n_w].reshape(self.weight_shape), flat[n_w:].reshape(self.bias_shape)


def _conv_block(in_c: int, out_c: int) -> list[nn.Module]:
    return [
        nn.Conv2d(in_c, out_c, 3, padding=1),
        nn.InstanceNorm2d(out_c, affine=True),
        nn.ReLU(),
        nn.Conv2d(out_c, out_c, 3, padding=1),
        nn.InstanceNorm2d(out_c, affine=True),
        nn.ReLU(),
    ]


class HyperDecoder(nn.Module):
    """Coarse-to-fine decoder whose last two upsamplers are hyper layers.

    The character embedding is projected to a 16w x 8 x 8 grid and upsampled
    by 2x2 stride-2 transposed convolutions, each followed by a pair of
    convolutions with instance norm. For side 128 there are four upsampling
    stages; smaller sides drop leading stages so that exactly the final two
    stay hypernetwork-generated.
    """

    def __init__(self, side: int, k: int, base_width: int):
        super().__init__()
        n_up = int(math.log2(side)) - 3
        if n_up < 2:
            raise ValueError(f"side {side} leaves no room for the two hyper layers")
        w16 = 16 * base_width
        offset = 4 - n_up
        self.side = side
        self.initial_channels = w16
        self.fc = nn.Linear(k, w16 * 8 * 8)

        up_out = [w16 >> (offset + i) for i in range(n_up)]
        block_out = [c // 2 for c in up_out]
        self.plain_ups = nn.ModuleList()
        self.hyper_mlps = nn.ModuleList()
        self.hyper_shapes: list[tuple[int, int]] = []
        self.blocks = nn.ModuleList()
        in_c = w16
        for i in range(n_up):
            if i < n_up - 2:
                self.plain_ups.append(nn.ConvTranspose2d(in_c, up_out[i], 2, stride=2))
            else:
                self.hyper_mlps.append(HyperMLP(k, in_c, up_out[i]))
                self.hyper_shapes.append((in_c, up_out[i]))
            self.blocks.append(nn.Sequential(*_conv_block(up_out[i], block_out[i])))
            in_c = block_out[i]
        self.final = nn.Conv2d(in_c, 1, 3, padding=1)
        # glyph canvases are mostly background; start the sigmoid output dark
        nn.init.constant_(self.final.bias, -2.0)

    def hyper_weights(self, z: Tensor) -> list[tuple[Tensor, Tensor]]:
        """Kernel and bias for each hyper layer, generated from ``z``."""
        return [mlp(z) for mlp in self.hyper_mlps]

    def forward(self, y: Tensor, hyper: list[tuple[Tensor, Tensor]]) -> Tensor:
        x = self.fc(y).reshape(-1, self.initial_channels, 8, 8)
        n_plain = len(self.plain_ups)
        for i, block in enumerate(self.blocks):
            if i < n_plain:
                x = self.plain_ups[i](x)
            else:
                weight, bias = hyper[i - n_plain]
                x = F.conv_transpose2d(x, weight, bias, stride=2)
            x = block(x)
        return torch.sigmoid(self.final(x))


@dataclass
class BatchTensors:
    """A Batch flattened for the network: one glyph stack plus row/col ids."""

    images: Tensor  # (N, 1, S, S)
    row_ids: Tensor  # (N,) -> index into row_chars
    col_ids: Tensor  # (N,) -> index into col_fonts
    row_chars: list[int]
    col_fonts: list[str]

    @property
    def n_rows(self) -> int:
        return len(self.row_chars)

    @property
    def n_cols(self) -> int:
        return len(self.col_fonts)


def batch_to_tensors(
    batch: Batch, dtype: torch.dtype = torch.float32, device: str | torch.device = "cpu"
) -> BatchTensors:
    """Stack a corpus Batch into tensors; rows sorted by codepoint."""
    row_chars = sorted({c for chars in batch.char_ids for c in chars})
    row_pos = {c: i for i, c in enumerate(row_chars)}
    stacks, rows, cols = [], [], []
    for j, (font, chars, glyphs) in enumerate(
        zip(batch.font_ids, batch.char_ids, batch.images)
    ):
        for c, g in zip(chars, glyphs):
            stacks.append(torch.as_tensor(g.pixels, dtype=dtype))
            rows.append(row_pos[c])
            cols.append(j)
    images = torch.stack(stacks).unsqueeze(1).to(device)
    return BatchTensors(
        images=images,
        row_ids=torch.tensor(rows, dtype=torch.long, device=device),
        col_ids=torch.tensor(cols, dtype=torch.long, device=device),
        row_chars=row_chars,
        col_fonts=list(batch.font_ids),
    )


class GlyphModel(nn.Module):
    """Complete dual-manifold model: encoders, decoder and loss parameters."""

    def __init__(self, config: ModelConfig, table: PartitionTable | None = None):
        super().__init__()
        self.config = config
        c = config
        self.char_encoder = GlyphSetEncoder(1, c.side, c.k, c.base_width, c.pooling)
        self.y_proj = nn.Linear(c.k, c.y_channels)
        self.font_encoder = GlyphSetEncoder(
            1 + c.y_channels, c.side, c.k, c.base_width, c.pooling
        )
        self.decoder = HyperDecoder(c.side, c.k, c.base_width)
        self.loss_params = AdaptiveLossParams(
            c.side, c.wavelet_levels, eps=c.eps, table=table
        )

    # -- inference ---------------------------------------------------------

    def encode_characters(self, glyphs: Tensor) -> LatentPosterior:
        """Posterior over the shape variable of one glyph set ``(N, S, S)``."""
        if glyphs.ndim == 3:
            glyphs = glyphs.unsqueeze(1)
        if glyphs.shape[0] == 0:
            raise ValueError("cannot encode an empty glyph set")
        seg = torch.zeros(glyphs.shape[0], dtype=torch.long, device=glyphs.device)
        post = self.char_encoder(glyphs, seg, 1)
        return LatentPosterior(post.mean[0], post.logvar[0])

    def _font_inputs(self, glyphs: Tensor, y: Tensor) -> Tensor:
        side = glyphs.shape[-1]
        cond = self.y_proj(y)[:, :, None, None].expand(-1, -1, side, side)
        return torch.cat([glyphs, cond], dim=1)

    def encode_font(self, glyphs: Tensor, y: Tensor) -> LatentPosterior:
        """Posterior over the style variable of one column.

        ``glyphs``: (N, S, S) or (N, 1, S, S); ``y``: (N, k), the character
        embedding paired with each glyph.
        """
        if glyphs.ndim == 3:
            glyphs = glyphs.unsqueeze(1)
        if glyphs.shape[0] == 0:
            raise ValueError("cannot encode an empty glyph set")
        if y.shape[0] != glyphs.shape[0]:
            raise ValueError(
                f"every glyph needs a character embedding: {glyphs.shape[0]} glyphs, "
                f"{y.shape[0]} embeddings"
            )
        seg = torch.zeros(glyphs.shape[0], dtype=torch.long, device=glyphs.device)
        post = self.font_encoder(self._font_inputs(glyphs, y), seg, 1)
        return LatentPosterior(post.mean[0], post.logvar[0])

    # -- generation --------------------------------------------------------

    def hyper_weights(self, z: Tensor) -> list[tuple[Tensor, Tensor]]:
        return self.decoder.hyper_weights(z)

    def decode(self, y: Tensor, z: Tensor) -> Tensor:
        """Mean glyph image for (y, z); (k,) inputs give (S, S) output and
        a batched y (B, k) with a single z gives (B, S, S)."""
        single = y.ndim == 1
        y2 = y.unsqueeze(0) if single else y
        out = self.decoder(y2, self.decoder.hyper_weights(z))[:, 0]
        return out[0] if single else out

    # -- training objective --------------------------------------------------

    def elbo(
        self, bt: BatchTensors, generator: torch.Generator | None = None
    ) -> tuple[Tensor, dict]:
        """Evidence lower bound of one batch plus term diagnostics.

        Inference order: character posteriors from the batch-visible rows,
        one reparameterized draw per row (single randn call), then font
        posteriors conditioned on those draws, one draw per column (second
        randn call), then the decoder scores every observed cell.
        """
        post_y = self.char_encoder(bt.images, bt.row_ids, bt.n_rows)
        y = reparameterize(post_y, generator)
        y_per_glyph = y[bt.row_ids]

        post_z = self.font_encoder(
            self._font_inputs(bt.images, y_per_glyph), bt.col_ids, bt.n_cols
        )
        z = reparameterize(post_z, generator)

        recon = bt.images.new_zeros(())
        for j in range(bt.n_cols):
            sel = bt.col_ids == j
            hyper = self.decoder.hyper_weights(z[j])
            decoded = self.decoder(y_per_glyph[sel], hyper)[:, 0]
            recon = recon + glyph_log_likelihood(
                bt.images[sel, 0], decoded, self.loss_params
            ).sum()

        kl_y = kl_to_prior(post_y).sum()
        kl_z = kl_to_prior(post_z).sum()
        elbo = recon - kl_y - kl_z
        diag = {
            "recon": float(recon.detach()),
            "kl_y": float(kl_y.detach()),
            "kl_z": float(kl_z.detach()),
            "kl": float((kl_y + kl_z).detach()),
        }
        return elbo, diag
