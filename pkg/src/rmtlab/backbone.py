"""Transformer backbone: embeddings, pre-norm attention/FFN blocks, heads.

The backbone is recurrence-agnostic: it maps a composed embedding block of
length L <= segment_window to hidden states of the same length. Memory
composition and carry-over live in `recurrence`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T

# reserved token ids, shared with the task suite
CLS_ID, SEP_ID, PAD_ID, UNK_ID = 0, 1, 2, 3

INIT_STD = 0.02
LN_EPS = 1e-5


@dataclass
class ModelConfig:
    """Architecture hyperparameters; validated on construction."""

    n_layers: int
    d_model: int
    n_heads: int
    vocab_size: int
    segment_window: int
    memory_tokens: int = 0
    mode: str = "encoder"
    d_ffn: int = 0          # 0 means the 4*d_model default
    n_classes: int = 6
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_ffn == 0:
            self.d_ffn = 4 * self.d_model
        if self.mode not in ("encoder", "decoder"):
            raise ValueError(f"mode must be encoder or decoder, got {self.mode!r}")
        for name in ("d_model", "n_heads", "vocab_size", "segment_window", "d_ffn", "n_classes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_layers < 0 or self.memory_tokens < 0:
            raise ValueError("n_layers and memory_tokens must be >= 0")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.segment_window <= self.memory_overhead + self.n_specials:
            raise ValueError(
                f"segment_window {self.segment_window} leaves no payload after "
                f"{self.memory_overhead} memory slots and {self.n_specials} specials"
            )

    @property
    def memory_overhead(self) -> int:
        # decoder composes [read mem | tokens | write mem]
        return self.memory_tokens * (2 if self.mode == "decoder" else 1)

    @property
    def n_specials(self) -> int:
        return 3 if self.mode == "encoder" else 1

    @property
    def max_tokens(self) -> int:
        """Token slots available in a segment once memory is composed in."""
        return self.segment_window - self.memory_overhead

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_count(cfg: ModelConfig, include_memory: bool = True) -> int:
    """Closed-form parameter count; cross-checks the cost model's dims."""
    d, f = cfg.d_model, cfg.d_ffn
    n = cfg.vocab_size * d                      # token embedding
    n += cfg.max_tokens * d                     # learned positions
    per_layer = 4 * (d * d + d)                 # q,k,v,o projections
    per_layer += d * f + f + f * d + d          # ffn
    per_layer += 4 * d                          # two layer norms
    n += cfg.n_layers * per_layer
    n += 2 * d                                  # final norm
    if cfg.mode == "encoder":
        n += d * cfg.n_classes + cfg.n_classes  # classification head
    if include_memory:
        n += cfg.memory_tokens * d              # lm head is tied, memory is not
    return n


def attention_mask(length: int, kind: str, dtype=np.float32) -> np.ndarray | None:
    """Additive mask: 0 where key j is visible to query i, -inf elsewhere."""
    if kind == "bidirectional":
        return None
    if kind == "causal":
        m = np.zeros((length, length), dtype=dtype)
        m[np.triu_indices(length, k=1)] = -np.inf
        return m
    raise ValueError(f"unknown mask kind {kind!r}")


def linear(x: T.Tensor, w: T.Tensor, b: T.Tensor | None = None) -> T.Tensor:
    out = T.matmul(x, w)
    if b is not None:
        out = T.add_bias(out, b)
    return out


def split_heads(x: T.Tensor, n_heads: int) -> T.Tensor:
    """(..., T, d) -> (..., h, T, d/h)"""
    *lead, t, d = x.shape
    x = T.reshape(x, (*lead, t, n_heads, d // n_heads))
    perm = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return T.transpose(x, perm)


def merge_heads(x: T.Tensor) -> T.Tensor:
    """(..., h, T, d/h) -> (..., T, d)"""
    *lead, h, t, dh = x.shape
    perm = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return T.reshape(T.transpose(x, perm), (*lead, t, h * dh))


def attention(
    q: T.Tensor,
    k: T.Tensor,
    v: T.Tensor,
    mask: str,
    n_heads: int,
    w_out: T.Tensor,
    b_out: T.Tensor,
    capture: list | None = None,
) -> T.Tensor:
    """Scaled dot-product attention over already-projected q/k/v.

    Under a causal mask the output at position i is an exact function of
    positions <= i: masked scores hit -inf before the softmax, so their
    probability is exactly zero regardless of the key contents.
    """
    if not (q.shape == k.shape == v.shape):
        raise T.ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    d = q.shape[-1]
    if d % n_heads != 0:
        raise T.ShapeError(f"width {d} not divisible by {n_heads} heads")
    t = q.shape[-2]
    dh = d // n_heads

    qh = split_heads(q, n_heads)
    kh = split_heads(k, n_heads)
    vh = split_heads(v, n_heads)

    ndim = qh.ndim
    kt = T.transpose(kh, list(range(ndim - 2)) + [ndim - 1, ndim - 2])
    scores = T.scale(T.matmul(qh, kt), 1.0 / math.sqrt(dh))
    m = attention_mask(t, mask, dtype=q.data.dtype)
    if m is not None:
        scores = T.add_bias(scores, T.Tensor(m))
    probs = T.softmax_rows(scores)
    if capture is not None:
        capture.append(np.array(probs.data, copy=True))
    mixed = merge_heads(T.matmul(probs, vh))
    return linear(mixed, w_out, b_out)


class Backbone:
    """N pre-norm blocks with GELU FFNs, learned absolute positions per segment."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        d, f = cfg.d_model, cfg.d_ffn

        def w(*shape):
            return T.param(rng.normal(0.0, INIT_STD, size=shape).astype(dtype))

        def zeros_p(*shape):
            return T.param(np.zeros(shape, dtype=dtype))

        def ones_p(*shape):
            return T.param(np.ones(shape, dtype=dtype))

        p = {"tok_emb": w(cfg.vocab_size, d), "pos_emb": w(cfg.max_tokens, d)}
        for i in range(cfg.n_layers):
            p[f"layers.{i}.ln1_g"] = ones_p(d)
            p[f"layers.{i}.ln1_b"] = zeros_p(d)
            for nm in ("wq", "wk", "wv", "wo"):
                p[f"layers.{i}.{nm}"] = w(d, d)
            for nm in ("bq", "bk", "bv", "bo"):
                p[f"layers.{i}.{nm}"] = zeros_p(d)
            p[f"layers.{i}.ln2_g"] = ones_p(d)
            p[f"layers.{i}.ln2_b"] = zeros_p(d)
            p[f"layers.{i}.w1"] = w(d, f)
            p[f"layers.{i}.b1"] = zeros_p(f)
            p[f"layers.{i}.w2"] = w(f, d)
            p[f"layers.{i}.b2"] = zeros_p(d)
        p["lnf_g"] = ones_p(d)
        p["lnf_b"] = zeros_p(d)
        if cfg.mode == "encoder":
            p["cls_w"] = w(d, cfg.n_classes)
            p["cls_b"] = zeros_p(cfg.n_classes)
        self.params = p
        for name, t in p.items():
            t.name = name
        self._dropout_rng = np.random.default_rng(rng.integers(2**63))

    def named_parameters(self):
        return list(self.params.items())

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def embed(self, token_ids, position_base: int = 0) -> T.Tensor:
        """Token plus learned positional embedding, positions restart per segment."""
        ids = np.asarray(token_ids, dtype=np.int64)
        t = ids.shape[-1] if ids.ndim else 0
        if t == 0:
            lead = ids.shape[:-1] if ids.ndim else ()
            return T.Tensor(np.zeros(lead + (0, self.cfg.d_model), dtype=self.dtype))
        if position_base < 0 or position_base + t > self.cfg.max_tokens:
            raise ValueError(
                f"positions [{position_base}, {position_base + t}) exceed "
                f"table of {self.cfg.max_tokens}"
            )
        x = T.embedding(self.params["tok_emb"], ids)
        pos = T.slice_axis(self.params["pos_emb"], 0, position_base, position_base + t)
        return T.add_bias(x, pos)

    def forward(
        self,
        x: T.Tensor,
        mask: str | None = None,
        train: bool = False,
        capture: list | None = None,
    ) -> T.Tensor:
        cfg = self.cfg
        L = x.shape[-2]
        if L > cfg.segment_window:
            raise T.ShapeError(f"input length {L} exceeds window {cfg.segment_window}")
        if mask is None:
            mask = "causal" if cfg.mode == "decoder" else "bidirectional"
        p = self.params
        drop = cfg.dropout if train else 0.0
        for i in range(cfg.n_layers):
            h = T.layer_norm(x, p[f"layers.{i}.ln1_g"], p[f"layers.{i}.ln1_b"], LN_EPS)
            q = linear(h, p[f"layers.{i}.wq"], p[f"layers.{i}.bq"])
            k = linear(h, p[f"layers.{i}.wk"], p[f"layers.{i}.bk"])
            v = linear(h, p[f"layers.{i}.wv"], p[f"layers.{i}.bv"])
            a = attention(q, k, v, mask, cfg.n_heads,
                          p[f"layers.{i}.wo"], p[f"layers.{i}.bo"], capture)
            if drop > 0:
                a = T.dropout(a, drop, self._dropout_rng)
            x = T.add(x, a)
            h = T.layer_norm(x, p[f"layers.{i}.ln2_g"], p[f"layers.{i}.ln2_b"], LN_EPS)
            h = linear(T.gelu(linear(h, p[f"layers.{i}.w1"], p[f"layers.{i}.b1"])),
                       p[f"layers.{i}.w2"], p[f"layers.{i}.b2"])
            if drop > 0:
                h = T.dropout(h, drop, self._dropout_rng)
            x = T.add(x, h)
        return T.layer_norm(x, p["lnf_g"], p["lnf_b"], LN_EPS)

    def cls_logits(self, hidden: T.Tensor, cls_index: int = 0) -> T.Tensor:
        """Classification head over the hidden state at the CLS position."""
        if self.cfg.mode != "encoder":
            raise ValueError("cls_logits requires encoder mode")
        if hidden.shape[-2] <= cls_index:
            raise T.ShapeError(f"no CLS position {cls_index} in length {hidden.shape[-2]}")
        h = T.slice_axis(hidden, hidden.ndim - 2, cls_index, cls_index + 1)
        logits = linear(h, self.params["cls_w"], self.params["cls_b"])
        return T.reshape(logits, logits.shape[:-2] + (logits.shape[-1],))

    def lm_logits(self, hidden: T.Tensor) -> T.Tensor:
        """Tied LM head: project onto the token embedding."""
        emb_t = T.transpose(self.params["tok_emb"], (1, 0))
        return T.matmul(hidden, emb_t)

    def cast(self, dtype) -> "Backbone":
        """Clone with parameters cast to `dtype` (float64 for grad checks)."""
        other = Backbone.__new__(Backbone)
        other.cfg = self.cfg
        other.dtype = dtype
        other.params = {
            name: T.param(t.data.astype(dtype), name=name)
            for name, t in self.params.items()
        }
        other._dropout_rng = np.random.default_rng(0)
        return other
