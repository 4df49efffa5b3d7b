"""Latency measurement and token error rate.

Latency is the signed difference between where the model fires a token
boundary and the gold segment end, in post-stacking encoder frames.
Boundaries are extracted under teacher forcing so predicted and gold
sequences always have equal length; a step whose threshold never fires
is scored at the last frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .data import stack_frames
from .mocha import (
    energy_from_keys,
    hard_alignment_step,
    hard_context,
    project_keys,
    selection_probs,
)
from .model import EOS, decode_step, encode, init_decoder_state
from .tensor import Tensor, no_grad


def extract_boundaries_teacher_forced(model, utterance, return_alpha=False):
    """Predicted boundary per gold token (1-based, post-stacking).

    Runs the encoder, then the decoder on gold previous tokens; each step
    scans for the first frame at or after the previous boundary whose
    selection probability crosses 0.5. A step that never fires gets
    boundary T' and keeps scanning from there.

    With return_alpha=True also returns the (L, T') matrix of hard
    alignment weights (one-hot rows at the fired boundaries) for plotting.
    """
    cfg = model.config
    params = model.params
    with no_grad():
        stacked = stack_frames(utterance.frames, cfg.encoder.stack_factor)
        T = stacked.shape[0]
        _, _, s2s = encode(Tensor(stacked), cfg.encoder, params)
        mono_keys = project_keys(s2s, params, "att.mono")
        chunk_keys = project_keys(s2s, params, "att.chunk")
        state = init_decoder_state(cfg.decoder)
        tokens = utterance.tokens
        j = 1
        boundaries = []
        alpha = np.zeros((len(tokens), T))
        y_prev = EOS
        for i in range(len(tokens)):
            query = state[-1]
            p = selection_probs(energy_from_keys(mono_keys, query, params, "att.mono"))
            fired = hard_alignment_step(p, j)
            b = T if fired is None else fired
            boundaries.append(b)
            alpha[i, b - 1] = 1.0
            e_chunk = energy_from_keys(chunk_keys, query, params, "att.chunk")
            c = hard_context(s2s, e_chunk, b, cfg.chunk_width)
            state, _ = decode_step(y_prev, state, c, cfg.decoder, params)
            j = b
            y_prev = tokens[i]
    out = np.array(boundaries, dtype=np.int64)
    return (out, alpha) if return_alpha else out


def corpus_latency(deltas_by_utterance):
    """Token-pooled mean of signed deltas: sum over all tokens / token count."""
    pooled = np.concatenate([np.asarray(d, dtype=np.float64) for d in deltas_by_utterance])
    if pooled.size == 0:
        raise ValueError("no tokens to average")
    return float(pooled.mean())


def utterance_latency(deltas_by_utterance):
    """Mean of per-utterance mean deltas."""
    if not deltas_by_utterance:
        raise ValueError("no utterances to average")
    return float(np.mean([np.mean(np.asarray(d, dtype=np.float64)) for d in deltas_by_utterance]))


def nearest_rank(sorted_values, pct):
    """Nearest-rank percentile: value at 1-based index ceil(pct/100 * N)."""
    n = len(sorted_values)
    idx = max(1, int(np.ceil(pct / 100.0 * n)))
    return float(sorted_values[idx - 1])


def latency_percentiles(pooled_deltas):
    """(average, median, p90, p99) over the pooled token deltas."""
    pooled = np.asarray(pooled_deltas, dtype=np.float64)
    if pooled.size == 0:
        raise ValueError("no tokens")
    s = np.sort(pooled)
    return float(pooled.mean()), nearest_rank(s, 50), nearest_rank(s, 90), nearest_rank(s, 99)


@dataclass
class LatencyReport:
    deltas_by_utterance: list
    avg: float  # token-pooled corpus latency
    utterance_avg: float
    median: float
    p90: float
    p99: float
    n_tokens: int
    n_utterances: int
    frame_ms: float = 30.0

    @property
    def pooled(self):
        return np.concatenate([np.asarray(d, dtype=np.float64) for d in self.deltas_by_utterance])

    def to_text(self):
        lines = [
            f"avg: {self.avg:.4f}",
            f"median: {self.median:.4f}",
            f"p90: {self.p90:.4f}",
            f"p99: {self.p99:.4f}",
            f"n_tokens: {self.n_tokens}",
            f"n_utterances: {self.n_utterances}",
            f"frame_ms: {self.frame_ms:g}",
            "deltas: " + ";".join(",".join(f"{x:g}" for x in d) for d in self.deltas_by_utterance),
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        fields = {}
        for line in text.strip().splitlines():
            key, _, value = line.partition(":")
            fields[key.strip()] = value.strip()
        deltas = []
        if fields.get("deltas"):
            for chunk in fields["deltas"].split(";"):
                deltas.append([float(x) for x in chunk.split(",") if x])
        report = build_latency_report(deltas, frame_ms=float(fields["frame_ms"]))
        return report


def build_latency_report(deltas_by_utterance, frame_ms=30.0):
    pooled = np.concatenate([np.asarray(d, dtype=np.float64) for d in deltas_by_utterance])
    avg, median, p90, p99 = latency_percentiles(pooled)
    return LatencyReport(
        deltas_by_utterance=[list(map(float, d)) for d in deltas_by_utterance],
        avg=avg,
        utterance_avg=utterance_latency(deltas_by_utterance),
        median=median,
        p90=p90,
        p99=p99,
        n_tokens=int(pooled.size),
        n_utterances=len(deltas_by_utterance),
        frame_ms=frame_ms,
    )


def measure_latency(model, corpus, frame_ms=30.0, include_eos=True):
    """Teacher-forced LatencyReport over a corpus."""
    deltas = []
    for u in corpus:
        pred = extract_boundaries_teacher_forced(model, u)
        gold = u.boundaries
        if not include_eos:
            pred, gold = pred[:-1], gold[:-1]
        if len(gold) == 0:
            continue
        deltas.append((pred - gold).astype(float).tolist())
    return build_latency_report(deltas, frame_ms=frame_ms)


def token_error_rate(hyp, ref):
    """Levenshtein distance / reference length, unit costs.

    Empty reference: 0 if the hypothesis is empty too, else |hyp| (every
    hypothesis token is an insertion against nothing).
    """
    hyp, ref = list(hyp), list(ref)
    if not ref:
        return float(len(hyp))
    prev = np.arange(len(ref) + 1)
    for i, h in enumerate(hyp, start=1):
        cur = np.empty(len(ref) + 1, dtype=np.int64)
        cur[0] = i
        for j, r in enumerate(ref, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return float(prev[-1]) / len(ref)


def token_accuracy(logits, tokens, token_mask):
    """Teacher-forced argmax accuracy over unmasked positions."""
    scores = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    pred = scores.argmax(axis=-1)
    mask = np.asarray(token_mask, dtype=bool)
    total = mask.sum()
    if total == 0:
        return 0.0
    return float((pred[mask] == np.asarray(tokens)[mask]).sum() / total)
