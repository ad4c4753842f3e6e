"""A tiny decoder-only transformer with full, prompt and prefix tuning modes.

The same architecture serves as the victim language model and as the
embedding-inversion attacker. All training math is in natural log; the
reporting helpers (`log_perplexity`) convert to bits by dividing by ln 2.

Scoring convention: a sequence ``x_1..x_n`` is fed as ``[<bos>, x_1..x_{n-1}]``
so that row ``i`` of the log-probability table is ``log P(x_i | x_<i)``. The
start token is ``<eos>``, the usual decoder-only convention.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from privbench.errors import (
    ConfigError,
    DomainError,
    SequenceLengthError,
    ShapeError,
    VocabularyError,
)

LN2 = math.log(2.0)
TUNING_MODES = ("full", "prompt", "prefix")

CHECKPOINT_MAGIC = b"TLMCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embedding_dim: int = 32
    num_layers: int = 1
    context_length: int = 64
    hidden_width: int = 128
    tuning_mode: str = "full"
    num_virtual_tokens: int = 15
    pad_id: int = 0
    eos_id: int = 1
    init_std: float = 0.02
    prefix_init_std: float = 0.02

    def __post_init__(self):
        if self.tuning_mode not in TUNING_MODES:
            raise ConfigError(f"tuning_mode must be one of {TUNING_MODES}")
        if self.num_virtual_tokens < 0:
            raise ConfigError("num_virtual_tokens must be >= 0")
        if min(self.vocab_size, self.embedding_dim, self.num_layers,
               self.context_length, self.hidden_width) < 1:
            raise ConfigError("model dimensions must be positive")
        if not (0 <= self.pad_id < self.vocab_size and 0 <= self.eos_id < self.vocab_size):
            raise ConfigError("pad_id and eos_id must be valid token ids")

    @property
    def virtual_tokens(self) -> int:
        """Virtual tokens actually in use (zero in full mode)."""
        return 0 if self.tuning_mode == "full" else self.num_virtual_tokens

    @property
    def max_tokens(self) -> int:
        """Longest token sequence a forward pass accepts."""
        if self.tuning_mode == "prompt":
            return self.context_length - self.num_virtual_tokens
        return self.context_length

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})


def _layer_norm(x, weight, bias, eps=1e-5):
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


class Block(nn.Module):
    """Pre-norm block: single-head causal attention followed by a GELU MLP."""

    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.ln1_w = nn.Parameter(torch.ones(d))
        self.ln1_b = nn.Parameter(torch.zeros(d))
        self.w_q = nn.Parameter(torch.empty(d, d))
        self.b_q = nn.Parameter(torch.zeros(d))
        self.w_k = nn.Parameter(torch.empty(d, d))
        self.b_k = nn.Parameter(torch.zeros(d))
        self.w_v = nn.Parameter(torch.empty(d, d))
        self.b_v = nn.Parameter(torch.zeros(d))
        self.w_o = nn.Parameter(torch.empty(d, d))
        self.b_o = nn.Parameter(torch.zeros(d))
        self.ln2_w = nn.Parameter(torch.ones(d))
        self.ln2_b = nn.Parameter(torch.zeros(d))
        self.w_fc = nn.Parameter(torch.empty(hidden, d))
        self.b_fc = nn.Parameter(torch.zeros(hidden))
        self.w_proj = nn.Parameter(torch.empty(d, hidden))
        self.b_proj = nn.Parameter(torch.zeros(d))

    def forward(self, x, prefix_k=None, prefix_v=None):
        n, d = x.shape[-2], x.shape[-1]
        h = _layer_norm(x, self.ln1_w, self.ln1_b)
        q = F.linear(h, self.w_q, self.b_q)
        k = F.linear(h, self.w_k, self.b_k)
        v = F.linear(h, self.w_v, self.b_v)
        causal = torch.ones(n, n, dtype=torch.bool, device=x.device).triu(1)
        if prefix_k is not None and prefix_k.shape[0] > 0:
            m = prefix_k.shape[0]
            k = torch.cat([prefix_k.expand(*x.shape[:-2], m, d), k], dim=-2)
            v = torch.cat([prefix_v.expand(*x.shape[:-2], m, d), v], dim=-2)
            causal = torch.cat([causal.new_zeros(n, m), causal], dim=-1)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(d)
        att = att.masked_fill(causal, float("-inf")).softmax(dim=-1)
        x = x + F.linear(att @ v, self.w_o, self.b_o)
        h = _layer_norm(x, self.ln2_w, self.ln2_b)
        return x + F.linear(F.gelu(F.linear(h, self.w_fc, self.b_fc)), self.w_proj, self.b_proj)


class TinyLM(nn.Module):
    """Decoder-only language model.

    Base parameters are the embeddings, blocks, final norm and LM head. Prompt
    mode adds ``prompt`` (virtual-token embeddings prepended to the input);
    prefix mode adds per-layer ``prefix_k.<l>``/``prefix_v.<l>`` attention
    prefixes. In those two modes the base parameters never receive gradients.
    """

    def __init__(self, config: ModelConfig, generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        V, d, c = config.vocab_size, config.embedding_dim, config
        self.tok_emb = nn.Parameter(torch.empty(V, d))
        self.pos_emb = nn.Parameter(torch.empty(c.context_length, d))
        self.blocks = nn.ModuleList(Block(d, c.hidden_width) for _ in range(c.num_layers))
        self.lnf_w = nn.Parameter(torch.ones(d))
        self.lnf_b = nn.Parameter(torch.zeros(d))
        self.head_w = nn.Parameter(torch.empty(V, d))
        self.head_b = nn.Parameter(torch.zeros(V))
        m = c.num_virtual_tokens
        if c.tuning_mode == "prompt":
            self.prompt = nn.Parameter(torch.empty(m, d))
        elif c.tuning_mode == "prefix":
            self.prefix_k = nn.ParameterList(nn.Parameter(torch.empty(m, d)) for _ in range(c.num_layers))
            self.prefix_v = nn.ParameterList(nn.Parameter(torch.empty(m, d)) for _ in range(c.num_layers))
        self._init_parameters(generator)
        self.to(dtype)
        tuning = set(self.tuning_parameter_names())
        for name, p in self.named_parameters():
            p.requires_grad_(c.tuning_mode == "full" or name in tuning)

    def _init_parameters(self, generator):
        std = self.config.init_std
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith(("tok_emb", "pos_emb", "head_w")) or ".w_" in name:
                    p.normal_(0.0, std, generator=generator)
            if self.config.tuning_mode == "prompt" and self.config.num_virtual_tokens:
                rows = torch.randint(0, self.config.vocab_size, (self.config.num_virtual_tokens,),
                                     generator=generator)
                self.prompt.copy_(self.tok_emb[rows])
            elif self.config.tuning_mode == "prefix":
                for p in list(self.prefix_k) + list(self.prefix_v):
                    p.normal_(0.0, self.config.prefix_init_std, generator=generator)

    # -- parameter bookkeeping -------------------------------------------------

    def tuning_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith(("prompt", "prefix_"))]

    def base_parameter_names(self) -> list[str]:
        tuning = set(self.tuning_parameter_names())
        return [n for n, _ in self.named_parameters() if n not in tuning]

    def trainable_parameter_names(self) -> list[str]:
        if self.config.tuning_mode == "full":
            return self.base_parameter_names()
        return self.tuning_parameter_names()

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        params = dict(self.named_parameters())
        return {n: params[n] for n in self.trainable_parameter_names()}

    @classmethod
    def from_base(cls, base: "TinyLM", tuning_mode: str, num_virtual_tokens: int | None = None,
                  generator: torch.Generator | None = None) -> "TinyLM":
        """New model in `tuning_mode` whose base parameters are copied from `base`."""
        changes = {"tuning_mode": tuning_mode}
        if num_virtual_tokens is not None:
            changes["num_virtual_tokens"] = num_virtual_tokens
        model = cls(base.config.replace(**changes), generator, dtype=base.dtype)
        base_params = dict(base.named_parameters())
        with torch.no_grad():
            for name in model.base_parameter_names():
                dict(model.named_parameters())[name].copy_(base_params[name])
            if tuning_mode == "prompt" and model.config.num_virtual_tokens:
                # virtual tokens start from rows of the copied embedding table
                rows = torch.randint(0, model.config.vocab_size,
                                     (model.config.num_virtual_tokens,), generator=generator)
                model.prompt.copy_(model.tok_emb[rows])
        return model

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.dtype

    # -- forward ---------------------------------------------------------------

    def hidden_states(self, input_ids: torch.Tensor, first_embedding: torch.Tensor | None = None):
        """Final-layer (post-norm) hidden states for each real input position.

        `input_ids` is ``(..., n)``. If `first_embedding` ``(..., d)`` is given it
        replaces the token embedding at position 0.
        """
        c = self.config
        n = input_ids.shape[-1]
        x = self.tok_emb[input_ids]
        if first_embedding is not None:
            x = torch.cat([first_embedding.unsqueeze(-2).to(x.dtype), x[..., 1:, :]], dim=-2)
        offset = 0
        if c.tuning_mode == "prompt" and c.num_virtual_tokens:
            offset = c.num_virtual_tokens
            prompt = (self.prompt + self.pos_emb[:offset]).expand(*x.shape[:-2], offset, x.shape[-1])
            x = torch.cat([prompt, x + self.pos_emb[offset:offset + n]], dim=-2)
        else:
            x = x + self.pos_emb[:n]
        for layer, block in enumerate(self.blocks):
            if c.tuning_mode == "prefix":
                x = block(x, self.prefix_k[layer], self.prefix_v[layer])
            else:
                x = block(x)
        x = _layer_norm(x, self.lnf_w, self.lnf_b)
        return x[..., offset:, :]

    def forward(self, input_ids: torch.Tensor, first_embedding: torch.Tensor | None = None):
        """Next-token log-probabilities ``(..., n, V)`` after each input position."""
        h = self.hidden_states(input_ids, first_embedding)
        return F.log_softmax(F.linear(h, self.head_w, self.head_b), dim=-1)


# -- validation and batching helpers ---------------------------------------------


def _check_tokens(model: TinyLM, tokens: Sequence[int], reserve: int = 0) -> list[int]:
    tokens = [int(t) for t in tokens]
    limit = model.config.max_tokens - reserve
    if len(tokens) > limit:
        raise SequenceLengthError(f"sequence of length {len(tokens)} exceeds limit {limit}")
    V = model.config.vocab_size
    for t in tokens:
        if not 0 <= t < V:
            raise VocabularyError(f"token id {t} out of range [0, {V})")
    return tokens


def scoring_batch(model: TinyLM, seqs: Sequence[Sequence[int]]):
    """Pad scoring inputs. Returns ``(inputs, targets, mask)`` tensors of shape (B, n)."""
    c = model.config
    seqs = [_check_tokens(model, s) for s in seqs]
    n = max(len(s) for s in seqs)
    inputs = torch.full((len(seqs), n), c.pad_id, dtype=torch.long)
    targets = torch.full((len(seqs), n), c.pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), n), dtype=model.dtype)
    for i, s in enumerate(seqs):
        if not s:
            continue
        inputs[i, 0] = c.eos_id
        inputs[i, 1:len(s)] = torch.tensor(s[:-1], dtype=torch.long)
        targets[i, :len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, :len(s)] = 1
    return inputs, targets, mask


def token_log_likelihoods(model: TinyLM, inputs, targets, mask, first_embedding=None):
    """Per-position ``log P(target)`` (natural log), zeroed on padding."""
    logp = model(inputs, first_embedding)
    return logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1) * mask


def sequence_loss(model: TinyLM, inputs, targets, mask, first_embedding=None):
    """Per-example mean token cross-entropy, shape (B,)."""
    ll = token_log_likelihoods(model, inputs, targets, mask, first_embedding)
    return -ll.sum(-1) / mask.sum(-1).clamp_min(1)


# -- public inference API --------------------------------------------------------


@torch.no_grad()
def forward(model: TinyLM, tokens: Sequence[int]) -> np.ndarray:
    """Scoring table: row i is ``log P(. | tokens[:i])`` over the vocabulary."""
    tokens = _check_tokens(model, tokens)
    if not tokens:
        return np.zeros((0, model.config.vocab_size))
    inputs, _, _ = scoring_batch(model, [tokens])
    return model(inputs)[0].double().numpy()


@torch.no_grad()
def sequence_log_likelihoods(model: TinyLM, seqs: Sequence[Sequence[int]],
                             batch_size: int = 256) -> np.ndarray:
    """Total natural-log likelihood of each sequence."""
    out = []
    for start in range(0, len(seqs), batch_size):
        batch = scoring_batch(model, seqs[start:start + batch_size])
        out.append(token_log_likelihoods(model, *batch).sum(-1).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def log_perplexity(model: TinyLM, tokens: Sequence[int]) -> float:
    """``-log2 P(tokens)`` in bits."""
    if len(tokens) == 0:
        raise DomainError("log-perplexity of an empty sequence is undefined")
    return float(-sequence_log_likelihoods(model, [tokens])[0] / LN2)


def log_perplexities(model: TinyLM, seqs: Sequence[Sequence[int]], batch_size: int = 256) -> np.ndarray:
    if any(len(s) == 0 for s in seqs):
        raise DomainError("log-perplexity of an empty sequence is undefined")
    return -sequence_log_likelihoods(model, seqs, batch_size) / LN2


@torch.no_grad()
def embed_batch(model: TinyLM, seqs: Sequence[Sequence[int]], batch_size: int = 256) -> np.ndarray:
    """Mean-pooled final hidden states over non-pad positions, shape (B, d)."""
    c = model.config
    out = []
    for start in range(0, len(seqs), batch_size):
        chunk = [_check_tokens(model, s) for s in seqs[start:start + batch_size]]
        n = max(len(s) for s in chunk)
        ids = torch.full((len(chunk), n), c.pad_id, dtype=torch.long)
        for i, s in enumerate(chunk):
            ids[i, :len(s)] = torch.tensor(s, dtype=torch.long)
        mask = (ids != c.pad_id).to(model.dtype).unsqueeze(-1)
        h = model.hidden_states(ids)
        pooled = (h * mask).sum(-2) / mask.sum(-2).clamp_min(1)
        out.append(pooled.double().numpy())
    return np.concatenate(out) if out else np.zeros((0, c.embedding_dim))


def embed(model: TinyLM, tokens: Sequence[int]) -> np.ndarray:
    return embed_batch(model, [tokens])[0]


@torch.no_grad()
def _greedy(model: TinyLM, context: list[int], max_len: int, first_embedding=None) -> list[int]:
    c = model.config
    out: list[int] = []
    first = None if first_embedding is None else first_embedding.unsqueeze(0)
    while len(out) < max_len and len(context) + len(out) <= c.max_tokens:
        ids = torch.tensor([context + out], dtype=torch.long)
        nxt = int(model(ids, first)[0, -1].argmax())
        out.append(nxt)
        if nxt == c.eos_id:
            break
    return out


def greedy_decode(model: TinyLM, prefix: Sequence[int], max_len: int) -> list[int]:
    """Append argmax tokens after `prefix` until ``<eos>`` (kept) or `max_len`."""
    prefix = _check_tokens(model, prefix, reserve=1)
    return _greedy(model, [model.config.eos_id] + prefix, max_len)


def decode_with_embedding_prefix(model: TinyLM, aligned_embedding, max_len: int) -> list[int]:
    """Greedy decoding where position 0 holds `aligned_embedding` instead of a token."""
    vec = torch.as_tensor(np.asarray(aligned_embedding), dtype=model.dtype)
    if vec.shape != (model.config.embedding_dim,):
        raise ShapeError(f"embedding shape {tuple(vec.shape)} != ({model.config.embedding_dim},)")
    # the placeholder id at position 0 is overwritten by the embedding
    return _greedy(model, [model.config.eos_id], max_len, first_embedding=vec)


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(model: TinyLM, path: str | Path) -> None:
    """Binary container: magic, version, JSON config, then float32 LE tensors in order."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    header = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    params = list(model.named_parameters())
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<HB", len(raw), p.dim()) + raw)
        buf.write(struct.pack(f"<{p.dim()}I", *p.shape))
        buf.write(p.detach().cpu().numpy().astype("<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> TinyLM:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ConfigError(f"{path}: not a TinyLM checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", data, pos)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    config = ModelConfig(**json.loads(data[pos:pos + hlen].decode("utf-8")))
    pos += hlen
    model = TinyLM(config, dtype=dtype)
    params = dict(model.named_parameters())
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if count != len(params):
        raise ConfigError(f"{path}: expected {len(params)} tensors, found {count}")
    with torch.no_grad():
        for _ in range(count):
            nlen, ndim = struct.unpack_from("<HB", data, pos)
            pos += 3
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            if name not in params or tuple(params[name].shape) != tuple(shape):
                raise ConfigError(f"{path}: unexpected tensor {name} {shape}")
            params[name].copy_(torch.from_numpy(arr.copy()))
    return model


def parameter_digest(model: TinyLM, names: Sequence[str] | None = None) -> str:
    """SHA-256 over the raw bytes of the named parameters (all by default)."""
    h = hashlib.sha256()
    params = dict(model.named_parameters())
    for name in names if names is not None else params:
        h.update(name.encode())
        h.update(params[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()
