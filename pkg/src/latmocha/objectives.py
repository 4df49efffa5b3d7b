"""Training objectives and the teacher-forced forward pass.

Composes the sequence loss with the four latency-reduction strategies:
framewise-CE multi-task learning, framewise-CE pre-training (two
stages), delay-constrained alignment masking with a quantity
regularizer, and minimum-latency training against gold boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .model import EOS, PAD, decode_step, encode, init_decoder_state, label_smoothed_ce
from .mocha import (
    alignment_step,
    chunkwise_attention,
    context_vector,
    energy_from_keys,
    initial_alignment,
    project_keys,
    selection_probs,
)
from .tensor import Tensor

MODES = ("baseline", "mtl-ce", "pt-ce-stage1", "pt-ce-stage2", "decot", "minlt", "decot+minlt")


@dataclass
class ObjectiveConfig:
    mode: str = "baseline"
    lambda_ce: float = 0.5
    lambda_qua: float = 1.0
    lambda_minlt: float = 1.0
    delta: int = 8  # acceptable extra delay, post-stacking frames
    quantity: bool | None = None  # None -> on exactly for the decot modes
    minlt_zero_target: bool = False  # ablation: replace gold boundaries with 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.lambda_ce <= 1.0:
            raise ValueError("lambda_ce must be in [0, 1]")
        if self.lambda_qua < 0 or self.lambda_minlt < 0 or self.delta < 0:
            raise ValueError("loss weights and delta must be non-negative")

    @property
    def uses_decot(self):
        return self.mode in ("decot", "decot+minlt")

    @property
    def uses_minlt(self):
        return self.mode in ("minlt", "decot+minlt")

    @property
    def needs_boundaries(self):
        return self.uses_decot or (self.uses_minlt and not self.minlt_zero_target)

    @property
    def needs_align(self):
        return self.mode in ("mtl-ce", "pt-ce-stage1")

    @property
    def quantity_on(self):
        return self.uses_decot if self.quantity is None else self.quantity


def mtl_loss(l_s2s, ce_logits, align, lambda_ce, mask=None):
    """(1 - lambda) * sequence loss + lambda * framewise CE.

    The endpoints return the respective term untouched, so lambda 0/1
    are exact. Framewise CE is a per-frame mean (unsmoothed).
    """
    if not 0.0 <= lambda_ce <= 1.0:
        raise ValueError("lambda_ce must be in [0, 1]")
    if lambda_ce == 0.0:
        return l_s2s
    l_ce = label_smoothed_ce(ce_logits, align, smoothing=0.0, mask=mask)
    if lambda_ce == 1.0:
        return l_ce
    return (1.0 - lambda_ce) * l_s2s + lambda_ce * l_ce


def _delay_mask(T, limits):
    """Boolean mask, true beyond each row's 1-based frame limit."""
    cols = np.arange(1, T + 1)
    limits = np.asarray(limits)
    return cols > limits[..., None] if limits.ndim else cols > limits


def decot_alignment(p, boundaries, delta, clip_eps=1e-6):
    """Alignment recursion with mass beyond b_i + delta forced to exact zero.

    The mask is applied to each row before the next row consumes it, so
    removed mass never propagates. p: (L, T) or (B, L, T); boundaries
    1-based, matching leading shape.
    """
    b = np.asarray(boundaries)
    if b.shape != p.shape[:-1]:
        raise ValueError("boundaries must match token rows")
    T = p.shape[-1]
    if np.any(b < 1) or np.any(b > T):
        raise ValueError("boundaries must lie in [1, T]")
    if np.any(np.diff(b, axis=-1) < 0):
        raise ValueError("boundaries must be non-decreasing")
    alpha_prev = initial_alignment(p.shape[:-2] + (T,))
    rows = []
    for i in range(p.shape[-2]):
        p_i = p[:, i, :] if p.ndim == 3 else p[i]
        b_i = b[..., i]
        alpha_prev = tz.masked_fill(
            alignment_step(p_i, alpha_prev, clip_eps), _delay_mask(T, b_i + delta), 0.0
        )
        rows.append(alpha_prev.reshape(p.shape[:-2] + (1, T)))
    return tz.concat(rows, axis=-2)


def quantity_loss(alpha, n_tokens, token_mask=None):
    """| L - sum of all alignment mass |, per utterance, then batch mean."""
    if alpha.ndim == 2:
        return tz.abs_(float(n_tokens) - alpha.sum())
    masked = alpha if token_mask is None else alpha * Tensor(np.asarray(token_mask, dtype=float)[:, :, None])
    per_utt = tz.abs_(Tensor(np.asarray(n_tokens, dtype=float)) - tz.sum_(masked, axis=(1, 2)))
    return per_utt.mean()


def minlt_loss(alpha, boundaries, token_mask=None):
    """Mean absolute gap between expected boundary and gold boundary.

    Expected boundary of token i is sum_j j * alpha[i, j] with 1-based j.
    """
    T = alpha.shape[-1]
    positions = Tensor(np.arange(1, T + 1, dtype=float))
    expected = alpha @ positions
    gaps = tz.abs_(expected - Tensor(np.asarray(boundaries, dtype=float)))
    if alpha.ndim == 2:
        return gaps.mean()
    m = np.asarray(token_mask, dtype=float) if token_mask is not None else np.ones(gaps.shape)
    counts = np.maximum(m.sum(axis=1), 1.0)
    return (tz.sum_(gaps * Tensor(m), axis=1) / Tensor(counts)).mean()


@dataclass
class ForwardResult:
    l_s2s: Tensor | None
    logits: Tensor | None  # (B, L, K)
    alpha: Tensor | None  # (B, L, T)
    p: Tensor | None
    ce_logits: Tensor | None  # (B, T, K_align)


def s2s_forward(model, batch, cfg: ObjectiveConfig, training=False, rng=None):
    """Teacher-forced forward pass of the whole network over a batch.

    Runs the encoder, then per decoder step: monotonic energies against
    the previous state's top layer, selection probabilities (noisy in
    training), one alignment row (delay-masked under decot), chunkwise
    softening, context, and the decoder update on the gold previous
    token. pt-ce-stage1 skips the attention/decoder side entirely (its
    weight in the total loss is zero).
    """
    mcfg = model.config
    params = model.params
    frames, frame_mask = batch.frames, batch.frame_mask
    tokens, token_mask = batch.tokens, batch.token_mask
    B, T = frames.shape[0], frames.shape[1]
    h, ce_logits, s2s = encode(
        Tensor(frames) if not isinstance(frames, Tensor) else frames,
        mcfg.encoder, params, mask=frame_mask, training=training, rng=rng,
    )
    if cfg.mode == "pt-ce-stage1":
        return ForwardResult(None, None, None, None, ce_logits)

    mono_keys = project_keys(s2s, params, "att.mono")
    chunk_keys = project_keys(s2s, params, "att.chunk")
    state = init_decoder_state(mcfg.decoder, batch=B)
    alpha_prev = initial_alignment((B, T))
    y_prev = np.full(B, EOS, dtype=np.int64)
    L = tokens.shape[1]
    limits = None
    if cfg.uses_decot:
        if batch.boundaries is None:
            raise ValueError("decot requires gold boundaries")
        limits = batch.boundaries + cfg.delta

    alpha_rows, p_rows, logits_steps = [], [], []
    for i in range(L):
        query = state[-1]
        e_mono = energy_from_keys(mono_keys, query, params, "att.mono", mask=frame_mask)
        p_i = selection_probs(e_mono, training=training, noise_std=mcfg.noise_std, rng=rng)
        alpha_i = alignment_step(p_i, alpha_prev, clip_eps=mcfg.clip_eps)
        if limits is not None:
            alpha_i = tz.masked_fill(alpha_i, _delay_mask(T, limits[:, i]), 0.0)
        e_chunk = energy_from_keys(chunk_keys, query, params, "att.chunk", mask=frame_mask)
        beta_i = chunkwise_attention(alpha_i, e_chunk, mcfg.chunk_width)
        c_i = context_vector(beta_i, s2s)
        state, logits_i = decode_step(y_prev, state, c_i, mcfg.decoder, params, training=training, rng=rng)
        alpha_rows.append(alpha_i.reshape((B, 1, T)))
        p_rows.append(p_i.reshape((B, 1, T)))
        logits_steps.append(logits_i.reshape((B, 1, logits_i.shape[-1])))
        alpha_prev = alpha_i
        y_prev = tokens[:, i]
    logits = tz.concat(logits_steps, axis=1)
    alpha = tz.concat(alpha_rows, axis=1)
    p = tz.concat(p_rows, axis=1)
    l_s2s = label_smoothed_ce(logits, tokens, smoothing=mcfg.decoder.label_smoothing, mask=token_mask)
    return ForwardResult(l_s2s, logits, alpha, p, ce_logits)


def total_loss(model, batch, cfg: ObjectiveConfig, training=False, rng=None):
    """Compose the mode's loss. Returns (loss Tensor, parts dict, ForwardResult)."""
    if cfg.needs_boundaries and batch.boundaries is None:
        raise ValueError(f"mode {cfg.mode} requires gold boundaries in the data")
    if cfg.needs_align and batch.align is None:
        raise ValueError(f"mode {cfg.mode} requires framewise alignment labels")
    out = s2s_forward(model, batch, cfg, training=training, rng=rng)
    parts = {}
    if cfg.mode == "pt-ce-stage1":
        loss = mtl_loss(Tensor(0.0), out.ce_logits, batch.align, 1.0, mask=batch.frame_mask)
        parts["l_ce"] = loss.item()
        return loss, parts, out
    loss = out.l_s2s
    parts["l_s2s"] = loss.item()
    if cfg.mode == "mtl-ce":
        loss = mtl_loss(loss, out.ce_logits, batch.align, cfg.lambda_ce, mask=batch.frame_mask)
        parts["l_total_mtl"] = loss.item()
    if cfg.uses_decot and cfg.quantity_on:
        qua = quantity_loss(out.alpha, batch.n_tokens, token_mask=batch.token_mask)
        parts["quantity"] = qua.item()
        loss = loss + cfg.lambda_qua * qua
    if cfg.uses_minlt:
        b = np.zeros(batch.tokens.shape, dtype=np.int64) if cfg.minlt_zero_target else batch.boundaries
        ml = minlt_loss(out.alpha, b, token_mask=batch.token_mask)
        parts["minlt"] = ml.item()
        loss = loss + cfg.lambda_minlt * ml
    return loss, parts, out
