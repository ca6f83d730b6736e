"""Pre-norm encoder-decoder transformer written as pure functions of a
named parameter store.

Keeping the forward pass functional means a masked view of the weights is
just another dict passed to :func:`forward`.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

PAD, BOS, EOS = 0, 1, 2


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 80
    num_heads: int = 4
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    embed_dim: int = 64
    ffn_dim: int = 128
    dropout: float = 0.1
    max_seq_len: int = 40

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim={self.embed_dim} is not divisible by num_heads={self.num_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("vocab_size", "num_heads", "embed_dim", "ffn_dim", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_encoder_layers < 0 or self.num_decoder_layers < 0:
            raise ValueError("layer counts must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "desk": ModelConfig(),
    # 8 heads, 6+6 layers, d=512, ffn=2048, dropout 0.3; vocab left small
    # because subword learning is not part of this engine.
    "paper": ModelConfig(
        vocab_size=80,
        num_heads=8,
        num_encoder_layers=6,
        num_decoder_layers=6,
        embed_dim=512,
        ffn_dim=2048,
        dropout=0.3,
        max_seq_len=256,
    ),
}


@dataclass
class Param:
    tensor: torch.Tensor
    prunable: bool


class ParamStore(OrderedDict):
    """Ordered ``name -> Param``.

    Prunable exactly for attention, feed-forward and output projection
    weight matrices; biases, layer-norm parameters and the embedding table
    are not.
    """

    def tensors(self) -> dict[str, torch.Tensor]:
        return {n: p.tensor for n, p in self.items()}

    def prunable_names(self) -> list[str]:
        return [n for n, p in self.items() if p.prunable]

    def clone(self) -> "ParamStore":
        return ParamStore((n, Param(p.tensor.detach().clone(), p.prunable)) for n, p in self.items())

    def to(self, dtype: torch.dtype) -> "ParamStore":
        return ParamStore((n, Param(p.tensor.detach().to(dtype), p.prunable)) for n, p in self.items())


def is_prunable_name(name: str) -> bool:
    return name.endswith(".weight") and not name.startswith("emb.") and ".ln" not in name


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f, V = cfg.embed_dim, cfg.ffn_dim, cfg.vocab_size
    shapes: list[tuple[str, tuple[int, ...]]] = [("emb.weight", (V, d))]

    def attn(prefix):
        for proj in ("q", "k", "v", "o"):
            shapes.append((f"{prefix}.{proj}.weight", (d, d)))
            shapes.append((f"{prefix}.{proj}.bias", (d,)))

    def ln(prefix):
        shapes.append((f"{prefix}.gain", (d,)))
        shapes.append((f"{prefix}.bias", (d,)))

    def ffn(prefix):
        shapes.extend(
            [
                (f"{prefix}.fc1.weight", (f, d)),
                (f"{prefix}.fc1.bias", (f,)),
                (f"{prefix}.fc2.weight", (d, f)),
                (f"{prefix}.fc2.bias", (d,)),
            ]
        )

    for i in range(cfg.num_encoder_layers):
        ln(f"enc.{i}.ln1")
        attn(f"enc.{i}.self_attn")
        ln(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ffn")
    ln("enc.ln")
    for i in range(cfg.num_decoder_layers):
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.self_attn")
        ln(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross_attn")
        ln(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ffn")
    ln("dec.ln")
    shapes.append(("out.weight", (V, d)))
    shapes.append(("out.bias", (V,)))
    return shapes


def init_params(cfg: ModelConfig, generator: torch.Generator, dtype=torch.float32) -> ParamStore:
    """Xavier-uniform matrices, N(0, d^-1/2) embeddings, zero biases, unit gains."""
    store = ParamStore()
    for name, shape in _param_shapes(cfg):
        if name == "emb.weight":
            t = torch.randn(shape, generator=generator, dtype=dtype) * cfg.embed_dim**-0.5
        elif name.endswith(".gain"):
            t = torch.ones(shape, dtype=dtype)
        elif name.endswith(".bias"):
            t = torch.zeros(shape, dtype=dtype)
        else:
            t = xavier_uniform(shape, generator, dtype)
        store[name] = Param(t, is_prunable_name(name))
    return store


def xavier_uniform(shape, generator, dtype=torch.float32) -> torch.Tensor:
    fan_out, fan_in = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1) * bound


def param_census(params: ParamStore) -> tuple[int, int, list[tuple[str, tuple[int, ...], int, bool]]]:
    table = [(n, tuple(p.tensor.shape), p.tensor.numel(), p.prunable) for n, p in params.items()]
    total = sum(row[2] for row in table)
    prunable = sum(row[2] for row in table if row[3])
    return total, prunable, table


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / (10000.0 ** (i / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


class Dropout:
    """Seeded dropout; masks come from an explicit generator so runs replay exactly.

    Applied to embeddings and sublayer outputs only (attention and
    activation dropout stay at zero, as in the fairseq defaults).
    """

    def __init__(self, p: float, generator: torch.Generator | None):
        self.p = p
        self.generator = generator

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if self.generator is None or self.p == 0.0:
            return x
        keep = torch.rand(x.shape, generator=self.generator, dtype=x.dtype) >= self.p
        return x * keep / (1.0 - self.p)


def _layer_norm(x, w, prefix, eps=1e-5):
    return F.layer_norm(x, x.shape[-1:], w[f"{prefix}.gain"], w[f"{prefix}.bias"], eps)


def _linear(x, w, prefix):
    return x @ w[f"{prefix}.weight"].T + w[f"{prefix}.bias"]


def _attention(q_in, kv_in, w, prefix, heads, key_pad, causal):
    B, Tq, d = q_in.shape
    Tk = kv_in.shape[1]
    hd = d // heads

    def split(x, T):
        return x.view(B, T, heads, hd).transpose(1, 2)

    q = split(_linear(q_in, w, f"{prefix}.q"), Tq)
    k = split(_linear(kv_in, w, f"{prefix}.k"), Tk)
    v = split(_linear(kv_in, w, f"{prefix}.v"), Tk)
    scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
    blocked = key_pad[:, None, None, :]
    if causal:
        future = torch.ones(Tq, Tk, dtype=torch.bool).triu(1)
        blocked = blocked | future
    scores = scores.masked_fill(blocked, float("-inf"))
    attn = torch.softmax(scores, dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(B, Tq, d)
    return _linear(out, w, f"{prefix}.o")


def _ffn(x, w, prefix):
    h = torch.relu(_linear(x, w, f"{prefix}.fc1"))
    return _linear(h, w, f"{prefix}.fc2")


def _check_tokens(cfg: ModelConfig, *seqs: torch.Tensor):
    for s in seqs:
        if s.numel() and (int(s.max()) >= cfg.vocab_size or int(s.min()) < 0):
            raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
        if s.shape[-1] > cfg.max_seq_len:
            raise ValueError(f"sequence length {s.shape[-1]} exceeds max_seq_len={cfg.max_seq_len}")


def encode(w, cfg: ModelConfig, src: torch.Tensor, drop: Dropout):
    emb = w["emb.weight"]
    d = cfg.embed_dim
    src_pad = src == PAD
    x = emb[src] * math.sqrt(d) + sinusoidal_positions(src.shape[1], d, emb.dtype)
    x = drop(x)
    for i in range(cfg.num_encoder_layers):
        p = f"enc.{i}"
        h = _layer_norm(x, w, f"{p}.ln1")
        x = x + drop(_attention(h, h, w, f"{p}.self_attn", cfg.num_heads, src_pad, False))
        h = _layer_norm(x, w, f"{p}.ln2")
        x = x + drop(_ffn(h, w, f"{p}.ffn"))
    return _layer_norm(x, w, "enc.ln"), src_pad


def decode_step(w, cfg: ModelConfig, memory, src_pad, tgt_in: torch.Tensor, drop: Dropout):
    emb = w["emb.weight"]
    d = cfg.embed_dim
    tgt_pad = tgt_in == PAD
    y = emb[tgt_in] * math.sqrt(d) + sinusoidal_positions(tgt_in.shape[1], d, emb.dtype)
    y = drop(y)
    for i in range(cfg.num_decoder_layers):
        p = f"dec.{i}"
        h = _layer_norm(y, w, f"{p}.ln1")
        y = y + drop(_attention(h, h, w, f"{p}.self_attn", cfg.num_heads, tgt_pad, True))
        h = _layer_norm(y, w, f"{p}.ln2")
        y = y + drop(_attention(h, memory, w, f"{p}.cross_attn", cfg.num_heads, src_pad, False))
        h = _layer_norm(y, w, f"{p}.ln3")
        y = y + drop(_ffn(h, w, f"{p}.ffn"))
    y = _layer_norm(y, w, "dec.ln")
    return _linear(y, w, "out")


def forward(
    w: dict[str, torch.Tensor],
    cfg: ModelConfig,
    src: torch.Tensor,
    tgt_in: torch.Tensor,
    train_mode: bool = False,
    dropout_generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Logits of shape [batch, tgt_len, vocab].

    ``w`` maps parameter names to tensors (a ParamStore's ``tensors()`` or a
    masked view). Dropout is active only in train mode with a generator.
    """
    _check_tokens(cfg, src, tgt_in)
    drop = Dropout(cfg.dropout, dropout_generator if train_mode else None)
    memory, src_pad = encode(w, cfg, src, drop)
    return decode_step(w, cfg, memory, src_pad, tgt_in, drop)


@torch.no_grad()
def greedy_decode(w, cfg: ModelConfig, src: torch.Tensor, max_len: int) -> list[list[int]]:
    """Batched greedy decoding; returns token lists without BOS/EOS.

    ``torch.argmax`` returns the first maximal index, so ties go to the
    lowest token id.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if src.dim() == 1:
        src = src.unsqueeze(0)
    _check_tokens(cfg, src)
    drop = Dropout(0.0, None)
    memory, src_pad = encode(w, cfg, src, drop)
    B = src.shape[0]
    ys = torch.full((B, 1), BOS, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    max_len = min(max_len, cfg.max_seq_len - 1)
    for _ in range(max_len):
        logits = decode_step(w, cfg, memory, src_pad, ys, drop)[:, -1]
        nxt = logits.argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
        ys = torch.cat([ys, nxt[:, None]], dim=1)
        done |= nxt == EOS
        if bool(done.all()):
            break
    out = []
    for row in ys[:, 1:].tolist():
        seq = []
        for t in row:
            if t in (EOS, PAD):
                break
            seq.append(t)
        out.append(seq)
    return out
