"""Reference encoder-decoder transformer in torch.

This is the converter's own forward implementation, used both as the
source of exportable checkpoints and as the cross-validation oracle: its
teacher-forced logits must match the engine's within 1e-4 after export.

Architecture contract (must mirror the engine): post-layer-norm ordering,
packed QKV projection, sinusoidal positional encodings added to the
sqrt(d)-scaled embedding, erf-form GELU or ReLU in the FFN, and an output
projection tied to the token embedding unless configured otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn


@dataclass
class ConvConfig:
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    d_model: int = 32
    d_ff: int = 64
    num_heads: int = 4
    vocab_size: int = 101
    max_batch: int = 4
    max_seq_len: int = 32
    max_beam_size: int = 4
    activation: str = "relu"
    tie_output: bool = True
    ln_eps: float = 1e-5

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_table(max_len: int, d: int) -> torch.Tensor:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    idx = np.arange(0, d, 2, dtype=np.float64)[None, :]
    ang = pos / np.power(10000.0, idx / d)
    pe = np.zeros((max_len, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, : d // 2])
    return torch.from_numpy(pe.astype(np.float32))


def _act(name: str):
    if name == "relu":
        return torch.relu
    if name == "gelu":
        return lambda x: nn.functional.gelu(x, approximate="none")
    return lambda x: x


def _attend(q, k, v, mask=None):
    # q [B,h,Q,e], k/v [B,h,K,e]; mask additive, broadcastable to scores
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores + mask
    return torch.softmax(scores, dim=-1) @ v


def _heads(x, heads):
    b, s, d = x.shape
    return x.view(b, s, heads, d // heads).transpose(1, 2)


def _merge(x):
    b, h, s, e = x.shape
    return x.transpose(1, 2).reshape(b, s, h * e)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ConvConfig):
        super().__init__()
        d = cfg.d_model
        self.heads = cfg.num_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d, eps=cfg.ln_eps)
        self.ff1 = nn.Linear(d, cfg.d_ff)
        self.ff2 = nn.Linear(cfg.d_ff, d)
        self.norm2 = nn.LayerNorm(d, eps=cfg.ln_eps)
        self.act = _act(cfg.activation)

    def forward(self, x, mask=None):
        d = x.shape[-1]
        qkv = self.qkv(x)
        q, k, v = (_heads(t, self.heads) for t in qkv.split(d, dim=-1))
        attn = self.out(_merge(_attend(q, k, v, mask)))
        y = self.norm1(x + attn)
        return self.norm2(y + self.ff2(self.act(self.ff1(y))))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ConvConfig):
        super().__init__()
        d = cfg.d_model
        self.heads = cfg.num_heads
        self.self_qkv = nn.Linear(d, 3 * d)
        self.self_out = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d, eps=cfg.ln_eps)
        self.cross_q = nn.Linear(d, d)
        self.cross_k = nn.Linear(d, d)
        self.cross_v = nn.Linear(d, d)
        self.cross_out = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d, eps=cfg.ln_eps)
        self.ff1 = nn.Linear(d, cfg.d_ff)
        self.ff2 = nn.Linear(cfg.d_ff, d)
        self.norm3 = nn.LayerNorm(d, eps=cfg.ln_eps)
        self.act = _act(cfg.activation)

    def forward(self, x, memory, causal_mask, enc_mask=None):
        d = x.shape[-1]
        qkv = self.self_qkv(x)
        q, k, v = (_heads(t, self.heads) for t in qkv.split(d, dim=-1))
        attn = self.self_out(_merge(_attend(q, k, v, causal_mask)))
        y = self.norm1(x + attn)

        cq = _heads(self.cross_q(y), self.heads)
        ck = _heads(self.cross_k(memory), self.heads)
        cv = _heads(self.cross_v(memory), self.heads)
        cattn = self.cross_out(_merge(_attend(cq, ck, cv, enc_mask)))
        z = self.norm2(y + cattn)
        return self.norm3(z + self.ff2(self.act(self.ff1(z))))


class ToyTransformer(nn.Module):
    """Seeded encoder-decoder model whose state_dict is the checkpoint
    layout the converter maps from."""

    def __init__(self, cfg: ConvConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_encoder_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.num_decoder_layers))
        if not cfg.tie_output:
            self.output = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.register_buffer("positions", sinusoidal_table(cfg.max_seq_len, cfg.d_model),
                             persistent=False)

    def _embed(self, tokens):
        x = self.embed(tokens) * math.sqrt(self.cfg.d_model)
        return x + self.positions[: tokens.shape[1]]

    def encode(self, src):
        x = self._embed(src)
        for layer in self.encoder:
            x = layer(x)
        return x

    @torch.no_grad()
    def forced_logits(self, src, tgt):
        """Teacher-forced per-position logits, [batch, tgt_len, vocab]."""
        memory = self.encode(src)
        T = tgt.shape[1]
        causal = torch.triu(torch.full((T, T), float("-inf")), diagonal=1)
        x = self._embed(tgt)
        for layer in self.decoder:
            x = layer(x, memory, causal)
        if self.cfg.tie_output:
            return x @ self.embed.weight.T
        return self.output(x)


def make_seeded_model(cfg: ConvConfig, seed: int) -> ToyTransformer:
    torch.manual_seed(seed)
    model = ToyTransformer(cfg)
    # init scales chosen so random logits are well-spread but finite
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.dim() == 2:
                std = math.sqrt(2.0 / sum(p.shape))
                p.normal_(0.0, std)
            elif "norm" in name and name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.normal_(0.0, 0.02)
        model.embed.weight.normal_(0.0, 1.0 / math.sqrt(cfg.d_model))
        if not cfg.tie_output:
            model.output.weight.normal_(0.0, 1.0 / math.sqrt(cfg.d_model))
    model.eval()
    return model
