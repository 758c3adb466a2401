"""Segment-level recurrence through trainable memory tokens.

A long input is cut into segments. Each segment is embedded, composed with
the current memory block, pushed through the backbone, and the updated
memory rows are split back out and handed to the next segment. Gradient
reach across segments is controlled by truncation: memory entering old
segments is detached, so backprop unrolls at most `bptt_unroll` hops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, ModelConfig, INIT_STD


@dataclass
class MemoryState:
    """The m x d memory block carried between segments."""

    vectors: T.Tensor
    origin: str = "initial"
    detached: bool = False

    @property
    def m(self) -> int:
        return self.vectors.shape[-2]


@dataclass
class RolloutPlan:
    """Ordered segments plus loss placement and truncation policy.

    `segments` is an int array of shape (n_segments, seg_len) or batched
    (batch, n_segments, seg_len). `bptt_unroll` None means unlimited.
    """

    segments: np.ndarray
    loss_positions: list[int] = field(default_factory=list)
    bptt_unroll: int | None = None
    labels: np.ndarray | None = None        # (batch,) class ids, encoder tasks
    lm_targets: np.ndarray | None = None    # like segments, next-token ids
    lm_loss_mask: np.ndarray | None = None  # like segments, bool

    def __post_init__(self):
        self.segments = np.asarray(self.segments, dtype=np.int64)
        if self.segments.ndim == 2:
            self.segments = self.segments[None, :, :]
        if self.segments.ndim != 3:
            raise ValueError(f"segments must be 2-d or 3-d, got {self.segments.shape}")
        n = self.segments.shape[1]
        if not self.loss_positions:
            self.loss_positions = [n - 1]
        if any(p < 0 or p >= n for p in self.loss_positions):
            raise ValueError(f"loss positions {self.loss_positions} outside 0..{n - 1}")
        if self.bptt_unroll is not None and self.bptt_unroll < 0:
            raise ValueError("bptt_unroll must be >= 0 or None")

    @property
    def n_segments(self) -> int:
        return self.segments.shape[1]

    @property
    def batch(self) -> int:
        return self.segments.shape[0]


class RmtModel:
    """Backbone plus the trainable initial memory block."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.backbone = Backbone(cfg, seed=seed, dtype=dtype)
        rng = np.random.default_rng(seed + 1)
        self.mem_init = T.param(
            rng.normal(0.0, INIT_STD, size=(cfg.memory_tokens, cfg.d_model)).astype(dtype),
            name="mem_init",
        )

    def named_parameters(self):
        named = self.backbone.named_parameters()
        if self.cfg.memory_tokens > 0:
            named = named + [("mem_init", self.mem_init)]
        return named

    def n_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def initial_memory(self, batch: int | None = None) -> MemoryState:
        vec = self.mem_init
        if batch is not None:
            vec = T.broadcast_batch(vec, batch)
        return MemoryState(vectors=vec, origin="initial")

    def cast(self, dtype) -> "RmtModel":
        other = RmtModel.__new__(RmtModel)
        other.cfg = self.cfg
        other.backbone = self.backbone.cast(dtype)
        other.mem_init = T.param(self.mem_init.data.astype(dtype), name="mem_init")
        return other


def compose_segment(mem: MemoryState, seg_emb: T.Tensor, mode: str) -> T.Tensor:
    """[mem ∘ segment] for encoders; [read mem ∘ segment ∘ write mem] for decoders.

    The write block reuses the same memory vectors: appended last, the causal
    mask lets those rows read the entire segment before being carried on.
    """
    vec = mem.vectors
    if vec.shape[-1] != seg_emb.shape[-1]:
        raise T.ShapeError(
            f"memory width {vec.shape[-1]} != segment width {seg_emb.shape[-1]}"
        )
    if vec.shape[-2] == 0:
        return seg_emb
    axis = seg_emb.ndim - 2
    if mode == "encoder":
        return T.concat([vec, seg_emb], axis=axis)
    return T.concat([vec, seg_emb, vec], axis=axis)


def split_output(out: T.Tensor, m: int, mode: str) -> tuple[T.Tensor, T.Tensor]:
    """Invert the composition: (updated memory, segment hidden states)."""
    axis = out.ndim - 2
    total = out.shape[axis]
    if m == 0:
        return T.slice_axis(out, axis, 0, 0), out
    if mode == "encoder":
        if total <= m:
            raise T.ShapeError(f"output length {total} too short for {m} memory rows")
        return T.slice_axis(out, axis, 0, m), T.slice_axis(out, axis, m, total)
    if total <= 2 * m:
        raise T.ShapeError(f"output length {total} too short for 2x{m} memory rows")
    # decoder: trailing write block becomes next memory, read block is dropped
    return T.slice_axis(out, axis, total - m, total), T.slice_axis(out, axis, m, total - m)


def _segment_loss(model: RmtModel, seg_out: T.Tensor, plan: RolloutPlan, tau: int) -> T.Tensor:
    cfg = model.cfg
    if cfg.mode == "encoder":
        if plan.labels is None:
            raise ValueError("encoder rollout needs labels")
        logits = model.backbone.cls_logits(seg_out)
        return T.cross_entropy(logits, plan.labels), logits
    if plan.lm_targets is None or plan.lm_loss_mask is None:
        raise ValueError("decoder rollout needs lm_targets and lm_loss_mask")
    logits = model.backbone.lm_logits(seg_out)
    b, t, v = logits.shape
    flat = T.reshape(logits, (b * t, v))
    targets = plan.lm_targets[:, tau, :].reshape(-1)
    mask = plan.lm_loss_mask[:, tau, :].reshape(-1)
    return T.cross_entropy(flat, targets, mask), logits


def recurrent_rollout(model: RmtModel, plan: RolloutPlan, train: bool = False,
                      memory_trace: list | None = None):
    """Run all segments in order, carrying memory, and aggregate the loss.

    Returns (per-segment outputs, final MemoryState, loss Tensor). Memory
    entering segment tau is detached when tau <= last - bptt_unroll, which
    zeroes gradients into anything more than `bptt_unroll` hops back.
    `memory_trace`, when given, receives an (entering, leaving) array pair
    per segment.
    """
    cfg = model.cfg
    n = plan.n_segments
    k = plan.bptt_unroll
    mem = model.initial_memory(batch=plan.batch)
    seg_outputs = []
    losses = []
    for tau in range(n):
        if cfg.memory_tokens > 0 and k is not None and tau <= n - 1 - k:
            if not mem.detached:
                mem = MemoryState(T.detach(mem.vectors), origin=mem.origin, detached=True)
        tokens = plan.segments[:, tau, :]
        emb = model.backbone.embed(tokens)
        composed = compose_segment(mem, emb, cfg.mode)
        if composed.shape[-2] > cfg.segment_window:
            raise T.ShapeError(
                f"segment {tau}: composed length {composed.shape[-2]} "
                f"exceeds window {cfg.segment_window}"
            )
        hidden = model.backbone.forward(composed, train=train)
        mem_in = mem
        mem_vec, seg_out = split_output(hidden, cfg.memory_tokens, cfg.mode)
        mem = MemoryState(mem_vec, origin=f"carried:{tau}")
        if memory_trace is not None:
            memory_trace.append((mem_in.vectors.data.copy(), mem.vectors.data.copy()))
        seg_outputs.append(seg_out)
        if tau in plan.loss_positions:
            loss_tau, _ = _segment_loss(model, seg_out, plan, tau)
            losses.append(loss_tau)
    loss = losses[0]
    for extra in losses[1:]:
        loss = T.add(loss, extra)
    if len(losses) > 1:
        loss = T.scale(loss, 1.0 / len(losses))
    return seg_outputs, mem, loss


def stream_inference(model: RmtModel, segment_source, max_segments: int | None = None):
    """Constant-memory evaluation over an unbounded segment stream.

    Holds only the parameters, the current segment, and the memory block.
    Yields one prediction per segment: the predicted class id for encoders,
    the predicted next token id at the final position for decoders.
    """
    cfg = model.cfg
    mem_data = model.mem_init.data
    count = 0
    with T.no_grad():
        for tokens in segment_source:
            if max_segments is not None and count >= max_segments:
                break
            try:
                tokens = np.asarray(tokens, dtype=np.int64)
                emb = model.backbone.embed(tokens)
                mem = MemoryState(T.Tensor(mem_data))
                composed = compose_segment(mem, emb, cfg.mode)
                hidden = model.backbone.forward(composed)
                mem_vec, seg_out = split_output(hidden, cfg.memory_tokens, cfg.mode)
            except Exception as exc:
                raise RuntimeError(f"stream failed at segment {count}: {exc}") from exc
            mem_data = mem_vec.data
            if cfg.mode == "encoder":
                logits = model.backbone.cls_logits(seg_out)
                yield int(np.argmax(logits.data))
            else:
                logits = model.backbone.lm_logits(
                    T.slice_axis(seg_out, seg_out.ndim - 2, seg_out.shape[-2] - 1, seg_out.shape[-2])
                )
                yield int(np.argmax(logits.data))
            count += 1
