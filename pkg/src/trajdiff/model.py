"""Conditional denoising transformer over concatenated latents.

The latent sequence stacks n_max history slots and k trajectory slots along
one axis. Each block runs masked self-attention over that sequence, then
cross-attention against the clean (un-noised) history embeddings, then a
position-wise feed-forward. A sinusoidal embedding of the diffusion step is
added to every token before the first block.

mask_mode picks the self-attention structure: "causal" is strictly
lower-triangular, "prefix" lets history slots see each other freely while
trajectory slots stay causal, "bidirectional" drops the constraint. Padding
slots are never visible as keys in any mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .exceptions import ConfigError, NumericsError, VocabularyError
from .validation import check_choice, check_positive_int, check_unit_interval

MASK_MODES = ("causal", "prefix", "bidirectional")

# large negative logit: exp() underflows to exactly 0 whenever any visible
# key remains, and a fully masked row degrades to a harmless uniform
_MASK_FILL = -1e9


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture hyperparameters of the denoiser."""

    n_max: int = 50
    k: int = 5
    embed_dim: int = 128
    n_blocks: int = 4
    n_heads: int = 4
    dropout: float = 0.1
    mask_mode: str = "causal"
    cosine_scores: bool = False

    def __post_init__(self):
        check_positive_int(self.n_max, "n_max")
        check_positive_int(self.k, "k")
        check_positive_int(self.embed_dim, "embed_dim")
        check_positive_int(self.n_blocks, "n_blocks")
        check_positive_int(self.n_heads, "n_heads")
        check_unit_interval(self.dropout, "dropout")
        check_choice(self.mask_mode, "mask_mode", MASK_MODES)
        if self.embed_dim % self.n_heads:
            raise ConfigError(
                f"embed_dim ({self.embed_dim}) must divide evenly into "
                f"n_heads ({self.n_heads})"
            )

    @property
    def seq_len(self) -> int:
        return self.n_max + self.k


def sinusoidal_time_embedding(t, dim: int) -> torch.Tensor:
    """Interleaved sin/cos features of the diffusion step.

    Component 2i is sin(t * w_i), component 2i + 1 is cos(t * w_i) with
    geometrically spaced frequencies, so t = 0 maps to (0, 1, 0, 1, ...).
    """
    check_positive_int(dim, "dim")
    if not isinstance(t, torch.Tensor):
        t = torch.tensor([t], dtype=torch.float64).squeeze(0)
    t = t.double()
    half = (dim + 1) // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1)
    )
    angles = t.unsqueeze(-1) * freqs  # [..., half]
    out = torch.zeros(*t.shape, 2 * half, dtype=torch.float64)
    out[..., 0::2] = torch.sin(angles)
    out[..., 1::2] = torch.cos(angles)
    return out[..., :dim]


def build_attention_mask(
    mask_mode: str,
    n_max: int,
    k: int,
    history_mask: torch.Tensor,
) -> torch.Tensor:
    """Boolean visibility [B, L, L] over the concatenated sequence.

    True means the query row may attend to the key column. The diagonal is
    always visible so even all-padding rows keep a well-defined softmax.
    """
    check_choice(mask_mode, "mask_mode", MASK_MODES)
    total = n_max + k
    device = history_mask.device
    if mask_mode == "causal":
        base = torch.ones(total, total, dtype=torch.bool, device=device).tril()
    elif mask_mode == "bidirectional":
        base = torch.ones(total, total, dtype=torch.bool, device=device)
    else:  # prefix: history block is bidirectional, trajectory stays causal
        base = torch.ones(total, total, dtype=torch.bool, device=device).tril()
        base[:, :n_max] = True
        base[:n_max, n_max:] = False
    batch = history_mask.shape[0]
    key_real = torch.cat(
        [history_mask, torch.ones(batch, k, dtype=torch.bool, device=device)], dim=1
    )
    visible = base.unsqueeze(0) & key_real.unsqueeze(1)
    eye = torch.eye(total, dtype=torch.bool, device=device)
    return visible | eye


def _masked_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    visible: torch.Tensor,
    dropout: nn.Dropout,
) -> torch.Tensor:
    """Multi-head scaled dot-product with a boolean visibility mask.

    q, k, v: [B, H, L, dh]; visible: [B, Lq, Lk] or [B, 1, Lq, Lk].
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = torch.matmul(q, k.transpose(-2, -1)) * scale  # [B, H, Lq, Lk]
    if visible.ndim == 3:
        visible = visible.unsqueeze(1)
    logits = logits.masked_fill(~visible, _MASK_FILL)
    weights = dropout(torch.softmax(logits, dim=-1))
    return torch.matmul(weights, v)


def _split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    batch, length, dim = x.shape
    return x.view(batch, length, n_heads, dim // n_heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    batch, heads, length, dh = x.shape
    return x.transpose(1, 2).reshape(batch, length, heads * dh)


class DenoiseBlock(nn.Module):
    """Pre-norm block: masked self-attention, cross-attention over the clean
    history, feed-forward; all three with residual connections."""

    def __init__(self, dim: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.self_norm = nn.LayerNorm(dim)
        self.self_qkv = nn.Linear(dim, 3 * dim)
        self.self_out = nn.Linear(dim, dim)
        self.cross_norm = nn.LayerNorm(dim)
        self.cross_q = nn.Linear(dim, dim)
        self.cross_kv = nn.Linear(dim, 2 * dim)
        self.cross_out = nn.Linear(dim, dim)
        self.ff_norm = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )
        self.attn_drop = nn.Dropout(dropout)
        self.resid_drop = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        self_visible: torch.Tensor,
        memory_visible: torch.Tensor,
    ) -> torch.Tensor:
        h = self.self_norm(x)
        q, k, v = self.self_qkv(h).chunk(3, dim=-1)
        attended = _masked_attention(
            _split_heads(q, self.n_heads),
            _split_heads(k, self.n_heads),
            _split_heads(v, self.n_heads),
            self_visible,
            self.attn_drop,
        )
        x = x + self.resid_drop(self.self_out(_merge_heads(attended)))

        h = self.cross_norm(x)
        q = self.cross_q(h)
        k, v = self.cross_kv(memory).chunk(2, dim=-1)
        attended = _masked_attention(
            _split_heads(q, self.n_heads),
            _split_heads(k, self.n_heads),
            _split_heads(v, self.n_heads),
            memory_visible,
            self.attn_drop,
        )
        x = x + self.resid_drop(self.cross_out(_merge_heads(attended)))

        x = x + self.resid_drop(self.ff(self.ff_norm(x)))
        return x


class PreferenceDenoiser(nn.Module):
    """Predicts the clean concatenated latent from its noised version.

    Owns the shared item-embedding table (row 0 is the frozen zero padding
    row) and the scoring head that ranks items against trajectory latents.
    """

    def __init__(self, n_items: int, config: DenoiserConfig):
        super().__init__()
        check_positive_int(n_items, "n_items")
        self.n_items = n_items
        self.config = config
        dim = config.embed_dim
        self.item_emb = nn.Embedding(n_items + 1, dim, padding_idx=0)
        with torch.no_grad():
            self.item_emb.weight[0].zero_()
        self.pos_emb = nn.Embedding(config.seq_len, dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim)
        )
        self.in_drop = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(
            DenoiseBlock(dim, config.n_heads, config.dropout)
            for _ in range(config.n_blocks)
        )
        self.out_norm = nn.LayerNorm(dim)
        self.out_proj = nn.Linear(dim, dim)

    # ------------------------------------------------------------ embeddings

    def _check_ids(self, ids: torch.Tensor, name: str, allow_padding: bool) -> None:
        if ids.numel() == 0:
            return
        low = 0 if allow_padding else 1
        lo, hi = int(ids.min()), int(ids.max())
        if lo < low or hi > self.n_items:
            raise VocabularyError(
                f"{name} holds id outside [{low}, {self.n_items}]: "
                f"range [{lo}, {hi}]"
            )

    def embed_history(self, history: torch.Tensor) -> torch.Tensor:
        """[B, n_max] ids -> [B, n_max, d]; padding id 0 hits the zero row."""
        self._check_ids(history, "history", allow_padding=True)
        return self.item_emb(history.long())

    def embed_targets(self, targets: torch.Tensor) -> torch.Tensor:
        """[B, k] ids -> [B, k, d]; padding is not a legal target."""
        self._check_ids(targets, "targets", allow_padding=False)
        return self.item_emb(targets.long())

    def embed_examples(self, history: torch.Tensor, targets: torch.Tensor):
        """Clean latents for one batch: history block and trajectory block."""
        return self.embed_history(history), self.embed_targets(targets)

    # --------------------------------------------------------------- denoise

    def denoise(
        self,
        x_t: torch.Tensor,
        t,
        history_latents: torch.Tensor,
        history_mask: torch.Tensor,
    ) -> torch.Tensor:
        """One denoiser evaluation: predict the clean latent from x_t at
        step t, conditioned on the clean history via cross-attention."""
        cfg = self.config
        if x_t.ndim != 3 or x_t.shape[1] != cfg.seq_len:
            raise ConfigError(
                f"x_t must be [B, {cfg.seq_len}, {cfg.embed_dim}], got "
                f"{tuple(x_t.shape)}"
            )
        if not torch.isfinite(x_t).all():
            raise NumericsError("non-finite values in the denoiser input latent")
        batch = x_t.shape[0]
        if isinstance(t, torch.Tensor):
            t = t.reshape(-1)
            if t.shape[0] not in (1, batch):
                raise ConfigError(f"t has {t.shape[0]} entries for batch {batch}")
        else:
            t = torch.tensor([t])
        t_feat = sinusoidal_time_embedding(t, cfg.embed_dim).to(x_t.dtype)
        t_feat = self.time_mlp(t_feat).unsqueeze(1)  # [B or 1, 1, d]

        positions = torch.arange(cfg.seq_len, device=x_t.device)
        h = x_t + t_feat + self.pos_emb(positions).to(x_t.dtype)
        h = self.in_drop(h)

        self_visible = build_attention_mask(cfg.mask_mode, cfg.n_max, cfg.k, history_mask)
        memory_visible = history_mask.unsqueeze(1).expand(batch, cfg.seq_len, cfg.n_max)
        for block in self.blocks:
            h = block(h, history_latents, self_visible, memory_visible)
        return self.out_proj(self.out_norm(h))

    def forward(self, x_t, t, history_latents, history_mask):
        return self.denoise(x_t, t, history_latents, history_mask)

    # --------------------------------------------------------------- scoring

    def score_items(self, traj_latents: torch.Tensor) -> torch.Tensor:
        """Dot-product relevance of every real item for each trajectory
        latent: [..., d] -> [..., n_items]; column i scores item id i + 1."""
        table = self.item_emb.weight[1:]
        if traj_latents.shape[-1] != table.shape[1]:
            raise ConfigError(
                f"latent dim {traj_latents.shape[-1]} != embedding dim {table.shape[1]}"
            )
        if self.config.cosine_scores:
            traj_latents = nn.functional.normalize(traj_latents, dim=-1, eps=1e-12)
            table = nn.functional.normalize(table, dim=-1, eps=1e-12)
        return torch.matmul(traj_latents, table.to(traj_latents.dtype).T)
