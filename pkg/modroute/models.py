"""
Neural building blocks for the brain decoder.

This module contains the trainable components:
- CrossAttentionPooler: learnable queries summarising a variable-length sequence
- AuxiliaryEncoder: per-modality encoder producing the auxiliary embeddings z_m
- ProjectorEncoder: brain vector -> modality-specific brain embedding z_b
- ToyCausalDecoder: small causal transformer language model
- SoftPrompt: learnable prefix initialised from instruction text

All of them are built on the graph-recording tensors of ``modroute.tensor``.
"""

import logging
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .exceptions import IndexRangeError, ShapeError
from .tensor import Tensor
from .vocab import EOS_ID, INSTRUCTION_TEXT, Vocabulary

logger = logging.getLogger(__name__)

MASK_VALUE = -1e9


class Module:
    """Parameter container; attributes holding Tensors with requires_grad are parameters."""

    def named_parameters(self, prefix="") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict=True):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in params.items():
            if name in state:
                p.assign(state[name])

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _param(values, name=None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def init_normal(rng: np.random.Generator, shape, std=0.02) -> Tensor:
    return _param(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, rng, d_in, d_out, std=None, bias=True):
        std = std if std is not None else 1.0 / np.sqrt(d_in)
        self.weight = init_normal(rng, (d_in, d_out), std)
        self.bias = _param(np.zeros(d_out)) if bias else None
        self.d_in = d_in
        self.d_out = d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"linear: expected last dim {self.d_in}, got {x.shape}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d):
        self.gain = _param(np.ones(d))
        self.shift = _param(np.zeros(d))

    def __call__(self, x):
        return T.layer_norm(x) * self.gain + self.shift


class FeedForward(Module):
    def __init__(self, rng, d, mult=4):
        self.up = Linear(rng, d, mult * d)
        self.down = Linear(rng, mult * d, d)

    def __call__(self, x):
        return self.down(T.gelu(self.up(x)))


class MultiHeadAttention(Module):
    def __init__(self, rng, d, num_heads):
        if d % num_heads:
            raise ShapeError(f"d_model {d} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = d // num_heads
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.out = Linear(rng, d, d)

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x, mask: Optional[np.ndarray] = None):
        b, n, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.head_dim))
        if mask is not None:
            scores = scores + T.Tensor(mask)
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.out(ctx)


class TransformerBlock(Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, rng, d, num_heads):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, num_heads)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(rng, d)

    def __call__(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask)
        return x + self.ff(self.ln2(x))


def causal_mask(n: int) -> np.ndarray:
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    return np.where(upper, MASK_VALUE, 0.0)


class CrossAttentionPooler(Module):
    """
    Learnable queries attending over a sequence.

    softmax(queries K^T / sqrt(d)) V with K = X W_k, V = X W_v, followed by the
    output projection W_o. The output has Q rows whatever the sequence length.
    """

    def __init__(self, rng, d, num_queries=16):
        self.d = d
        self.num_queries = num_queries
        self.queries = init_normal(rng, (num_queries, d), 1.0 / np.sqrt(d))
        self.key = _param(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)))
        self.value = _param(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)))
        self.output = _param(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)))

    def pool(self, sequence: Tensor, key_mask: Optional[np.ndarray] = None) -> Tensor:
        """[n, d] -> [Q, d], or [B, n, d] -> [B, Q, d] with an optional [B, n] validity mask."""
        sequence = T.as_tensor(sequence)
        single = sequence.ndim == 2
        if single:
            sequence = sequence.reshape(1, *sequence.shape)
        if sequence.ndim != 3 or sequence.shape[-1] != self.d:
            raise ShapeError(f"pool: expected [n, {self.d}] or [B, n, {self.d}], got {sequence.shape}")
        if sequence.shape[1] == 0:
            raise ShapeError("pool: empty sequence")

        keys = T.matmul(sequence, self.key)
        values = T.matmul(sequence, self.value)
        scores = T.matmul(self.queries, keys.transpose(0, 2, 1)) * (1.0 / np.sqrt(self.d))
        if key_mask is not None:
            key_mask = np.asarray(key_mask, dtype=bool)
            if not key_mask.any(axis=1).all():
                raise ShapeError("pool: empty sequence")
            scores = scores + T.Tensor(np.where(key_mask, 0.0, MASK_VALUE)[:, None, :])
        attn = T.softmax(scores, axis=-1)
        pooled = T.matmul(T.matmul(attn, values), self.output)
        return pooled.reshape(self.num_queries, self.d) if single else pooled


def pad_sequences(sequences: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad variable-length [n_i, d] arrays to [B, n_max, d] plus a validity mask."""
    lengths = [len(s) for s in sequences]
    if min(lengths) == 0:
        raise ShapeError("pool: empty sequence")
    n_max, d = max(lengths), sequences[0].shape[1]
    batch = np.zeros((len(sequences), n_max, d))
    mask = np.zeros((len(sequences), n_max), dtype=bool)
    for i, s in enumerate(sequences):
        batch[i, : len(s)] = s
        mask[i, : len(s)] = True
    return batch, mask


class AuxiliaryEncoder(Module):
    """Raw auxiliary sequence [n, d_raw] -> fixed-length embedding [Q, d]."""

    def __init__(self, rng, d_raw, d, num_queries=16):
        self.embed = Linear(rng, d_raw, d)
        self.pooler = CrossAttentionPooler(rng, d, num_queries)

    def encode(self, sequences: Sequence[np.ndarray]) -> Tensor:
        batch, mask = pad_sequences(sequences)
        return self.pooler.pool(self.embed(Tensor(batch)), key_mask=mask)


class ProjectorEncoder(Module):
    """
    Brain projector P_i.

    The brain vector is reshaped into a grid of ``grid_tokens`` tokens, embedded,
    passed through transformer blocks, mean-pooled over positions, and mapped
    linearly to Q x d (a length-Q embedding sequence; Q = 1 gives a single [d]).
    """

    def __init__(self, rng, d_brain, d, num_layers=2, num_heads=4, num_queries=16, grid_tokens=16):
        if d_brain % grid_tokens:
            raise ShapeError(f"d_brain {d_brain} not divisible into {grid_tokens} grid tokens")
        self.d_brain = d_brain
        self.d = d
        self.grid_tokens = grid_tokens
        self.num_queries = num_queries
        self.embed = Linear(rng, d_brain // grid_tokens, d)
        self.position = init_normal(rng, (grid_tokens, d))
        self.blocks = [TransformerBlock(rng, d, num_heads) for _ in range(num_layers)]
        self.norm = LayerNorm(d)
        self.head = Linear(rng, d, num_queries * d)

    def project(self, b) -> Tensor:
        b = T.as_tensor(b)
        single = b.ndim == 1
        if single:
            b = b.reshape(1, b.shape[0])
        if b.ndim != 2 or b.shape[1] != self.d_brain:
            raise ShapeError(f"project: expected brain dimension {self.d_brain}, got {b.shape}")
        n = b.shape[0]
        x = self.embed(b.reshape(n, self.grid_tokens, self.d_brain // self.grid_tokens)) + self.position
        for block in self.blocks:
            x = block(x)
        pooled = self.norm(x).mean(axis=1)
        z = self.head(pooled).reshape(n, self.num_queries, self.d)
        return z.reshape(self.num_queries, self.d) if single else z


class ToyCausalDecoder(Module):
    """Causal transformer LM conditioned on a prefix of embeddings."""

    def __init__(self, rng, vocab_size, d, num_layers=2, num_heads=4, max_positions=64):
        self.vocab_size = vocab_size
        self.d = d
        self.max_positions = max_positions
        self.token_embedding = init_normal(rng, (vocab_size, d))
        self.position = init_normal(rng, (max_positions, d))
        self.blocks = [TransformerBlock(rng, d, num_heads) for _ in range(num_layers)]
        self.norm = LayerNorm(d)
        self.head = Linear(rng, d, vocab_size)

    def embed_tokens(self, tokens) -> Tensor:
        return T.embedding(self.token_embedding, tokens)

    def forward_embeddings(self, x: Tensor) -> Tensor:
        """[B, n, d] input embeddings -> [B, n, V] logits under causal masking."""
        n = x.shape[1]
        if n > self.max_positions:
            raise ShapeError(f"decoder: sequence length {n} exceeds {self.max_positions} positions")
        x = x + T.slice_(self.position, (slice(0, n),))
        mask = causal_mask(n)
        for block in self.blocks:
            x = block(x, mask)
        return self.head(self.norm(x))

    def decoder_logits(self, prefix_embeddings, tokens) -> Tensor:
        """
        Logits for every target position.

        Row k is the next-token distribution for ``tokens[k]`` given the prefix
        and ``tokens[:k]``. Accepts [p, d] + [T] or batched [B, p, d] + [B, T].
        """
        prefix = T.as_tensor(prefix_embeddings)
        ids = np.asarray(tokens, dtype=np.int64)
        single = prefix.ndim == 2
        if single:
            prefix = prefix.reshape(1, *prefix.shape)
            ids = ids.reshape(1, -1)
        if prefix.shape[1] < 1:
            raise ShapeError("decoder_logits: prefix must hold at least one embedding")
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise ShapeError("decoder_logits: expected at least one token")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise IndexRangeError(f"decoder_logits: token id out of range [0, {self.vocab_size})")
        p, t = prefix.shape[1], ids.shape[1]
        parts = [prefix]
        if t > 1:
            parts.append(self.embed_tokens(ids[:, :-1]))
        x = T.concat(parts, axis=1) if len(parts) > 1 else prefix
        logits = self.forward_embeddings(x)
        logits = T.slice_(logits, (slice(None), slice(p - 1, p - 1 + t)))
        return logits.reshape(t, self.vocab_size) if single else logits

    def decode_greedy(self, prefix_embeddings, max_len: int) -> List[int]:
        prefix = T.as_tensor(prefix_embeddings)
        return self.decode_greedy_batch(prefix.reshape(1, *prefix.shape), max_len)[0]

    def decode_greedy_batch(self, prefix_embeddings, max_len: int) -> List[List[int]]:
        """Argmax decoding; each sequence stops at <eos> (included) or after max_len tokens."""
        if max_len < 1:
            raise ShapeError("decode_greedy: max_len must be >= 1")
        prefix = T.as_tensor(prefix_embeddings)
        batch = prefix.shape[0]
        outputs: List[List[int]] = [[] for _ in range(batch)]
        done = np.zeros(batch, dtype=bool)
        with T.no_grad():
            generated = np.zeros((batch, 0), dtype=np.int64)
            for _ in range(max_len):
                parts = [prefix]
                if generated.shape[1]:
                    parts.append(self.embed_tokens(generated))
                x = T.concat(parts, axis=1) if len(parts) > 1 else prefix
                logits = self.forward_embeddings(x).data[:, -1, :]
                nxt = np.argmax(logits, axis=-1)
                for i in np.flatnonzero(~done):
                    outputs[i].append(int(nxt[i]))
                done |= nxt == EOS_ID
                if done.all():
                    break
                generated = np.concatenate([generated, nxt[:, None]], axis=1)
        return outputs


class SoftPrompt(Module):
    """Learnable [S_len, d] prefix shared by every sample of a batch."""

    def __init__(self, prompt: np.ndarray):
        self.prompt = _param(prompt)

    @classmethod
    def from_instruction(cls, token_embedding: Tensor, vocab: Vocabulary, length=10, text=INSTRUCTION_TEXT):
        ids = vocab.encode(text)
        reps = int(np.ceil(length / len(ids)))
        ids = (ids * reps)[:length]
        return cls(token_embedding.data[ids].copy())

    @classmethod
    def random(cls, rng, length, d, std=0.02):
        return cls(rng.normal(0.0, std, size=(length, d)))

    def __len__(self):
        return self.prompt.shape[0]

    def expand(self, batch: int) -> Tensor:
        return T.broadcast(self.prompt, (batch, *self.prompt.shape))
