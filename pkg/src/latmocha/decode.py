"""Streaming inference over hard monotonic decisions.

Greedy and beam decoding both alternate a threshold scan for the next
boundary with one decoder step; the context is a softmax over the
chunk-width window ending at the fired frame. Every frame consulted is
instrumented so the streaming property (reads never run ahead of the
boundary by more than the key-conv lookahead) can be checked directly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

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


@dataclass
class Hypothesis:
    """One (possibly partial) transcript with its alignment trail.

    boundaries are 1-based post-stacking frame indices, non-decreasing.
    logprob is the raw sum of token log probabilities. finished marks
    hypotheses that emitted EOS or ran out of input frames.
    """

    tokens: list
    boundaries: list
    logprob: float
    state: list | None = None
    finished: bool = False

    @property
    def transcript(self):
        """Token ids without the terminating EOS."""
        if self.tokens and self.tokens[-1] == EOS:
            return list(self.tokens[:-1])
        return list(self.tokens)

    def score(self, length_penalty=0.0):
        return self.logprob + length_penalty * len(self.tokens)


class FrameAccessLog:
    """Highest encoder frame index (1-based) consulted before each emission.

    Scanning frame j consults the key-conv receptive field, so the
    cursor advances to j + lookahead (capped at T'). Frames once read
    stay read; the per-token maximum is therefore non-decreasing.
    """

    def __init__(self, n_frames, lookahead):
        self.n_frames = n_frames
        self.lookahead = lookahead
        self.max_read = []
        self._cursor = 0

    def touch(self, j):
        self._cursor = max(self._cursor, min(j + self.lookahead, self.n_frames))

    def commit(self):
        self.max_read.append(self._cursor)


def _encode_features(model, frames):
    """Stack raw frames and run the encoder; returns (features, key projections)."""
    cfg = model.config
    stacked = stack_frames(np.asarray(frames, dtype=np.float64), cfg.encoder.stack_factor)
    _, _, feats = encode(Tensor(stacked), cfg.encoder, model.params)
    mono_keys = project_keys(feats, model.params, "att.mono")
    chunk_keys = project_keys(feats, model.params, "att.chunk")
    return stacked.shape[0], feats, mono_keys, chunk_keys


def _advance(model, hyp, T, feats, mono_keys, chunk_keys, access_log=None):
    """Scan for the next boundary and run one decoder step.

    Returns (boundary, exhausted, new_state, log_probs). exhausted means
    the threshold never fired; the step is scored at the last frame and
    the hypothesis should be finalized after this emission.
    """
    cfg = model.config
    params = model.params
    query = hyp.state[-1]
    p = selection_probs(energy_from_keys(mono_keys, query, params, "att.mono"))
    j_start = hyp.boundaries[-1] if hyp.boundaries else 1
    fired = hard_alignment_step(p, j_start)
    exhausted = fired is None
    b = T if exhausted else fired
    if access_log is not None:
        for j in range(j_start, (T if exhausted else b) + 1):
            access_log.touch(j)
    e_chunk = energy_from_keys(chunk_keys, query, params, "att.chunk")
    c = hard_context(feats, e_chunk, b, cfg.chunk_width)
    y_prev = hyp.tokens[-1] if hyp.tokens else EOS
    new_state, logits = decode_step(y_prev, hyp.state, c, cfg.decoder, params)
    return b, exhausted, new_state, tz.log_softmax(logits).data


def greedy_stream_decode(model, frames, max_len=100):
    """Argmax decoding; returns (Hypothesis, FrameAccessLog)."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    with no_grad():
        T, feats, mono_keys, chunk_keys = _encode_features(model, frames)
        log = FrameAccessLog(T, model.config.conv_lookahead)
        hyp = Hypothesis([], [], 0.0, init_decoder_state(model.config.decoder))
        for _ in range(max_len):
            b, exhausted, state, logp = _advance(
                model, hyp, T, feats, mono_keys, chunk_keys, access_log=log)
            tok = int(np.argmax(logp))
            hyp.tokens.append(tok)
            hyp.boundaries.append(b)
            hyp.logprob += float(logp[tok])
            hyp.state = state
            log.commit()
            if tok == EOS or exhausted:
                hyp.finished = True
                break
    return hyp, log


def beam_stream_decode(model, frames, beam=8, max_len=100, length_penalty=0.0):
    """Token-synchronous beam search; returns hypotheses ranked by score.

    Each hypothesis carries its own boundary pointer and decoder state.
    Finished hypotheses (EOS or exhausted input) leave the beam and
    compete by score at the end; survivors at max_len compete as-is.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    with no_grad():
        T, feats, mono_keys, chunk_keys = _encode_features(model, frames)
        live = [Hypothesis([], [], 0.0, init_decoder_state(model.config.decoder))]
        done = []
        for _ in range(max_len):
            if not live:
                break
            children = []
            for hyp in live:
                b, exhausted, state, logp = _advance(
                    model, hyp, T, feats, mono_keys, chunk_keys)
                for tok in np.argsort(-logp, kind="stable")[:beam]:
                    tok = int(tok)
                    children.append(Hypothesis(
                        hyp.tokens + [tok], hyp.boundaries + [b],
                        hyp.logprob + float(logp[tok]), state,
                        finished=(tok == EOS or exhausted)))
            children.sort(key=lambda h: -h.score(length_penalty))
            live = []
            for child in children:
                if child.finished:
                    done.append(child)
                elif len(live) < beam:
                    live.append(child)
        done.extend(live)
        done.sort(key=lambda h: -h.score(length_penalty))
        return done


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.fonttype"] = "none"
    return plt


def export_attention_trace(model, utterance, path):
    """Write the teacher-forced soft alignment as <path>.csv and <path>.svg.

    The CSV holds the L x T' matrix of alignment weights under a header
    row of frame indices. The SVG is a heatmap with the fired boundaries
    and the gold segment ends overlaid.
    """
    from .metrics import extract_boundaries_teacher_forced
    from .objectives import ObjectiveConfig, s2s_forward
    from .data import batch_pad

    base = Path(path)
    predicted = extract_boundaries_teacher_forced(model, utterance)
    batch = batch_pad([utterance], stack_factor=model.config.encoder.stack_factor)
    with no_grad():
        out = s2s_forward(model, batch, ObjectiveConfig(mode="baseline"))
    alpha = out.alpha.data[0]
    L, T = alpha.shape

    with open(base.with_suffix(".csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(range(1, T + 1))
        writer.writerows(alpha.tolist())

    export_alpha_heatmap(alpha, base.with_suffix(".svg"), predicted=predicted,
                         gold=np.asarray(utterance.boundaries),
                         title=f"alignment: {utterance.id}")


def export_alpha_heatmap(alpha, path, predicted=None, gold=None, title="alignment"):
    """SVG heatmap of an (L, T') alignment matrix with optional boundary dots."""
    alpha = np.asarray(alpha, dtype=np.float64)
    L, T = alpha.shape
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(max(4.0, T * 0.25), max(2.5, L * 0.35)))
    im = ax.imshow(alpha, aspect="auto", origin="upper",
                   cmap="viridis", interpolation="nearest")
    steps = np.arange(L)
    if predicted is not None:
        ax.scatter(np.asarray(predicted) - 1, steps, c="yellow", s=36,
                   label="predicted boundary")
    if gold is not None:
        ax.scatter(np.asarray(gold) - 1, steps, marker="x", c="white", s=36,
                   label="gold boundary")
    ax.set_xlabel("encoder frame")
    ax.set_ylabel("output step")
    ax.set_title(title)
    if predicted is not None or gold is not None:
        ax.legend(loc="lower right", fontsize="small")
    fig.colorbar(im, ax=ax, label="alignment weight")
    fig.tight_layout()
    fig.savefig(Path(path), format="svg")
    plt.close(fig)


def export_latency_histogram(report, path):
    """Two stacked panels: token-pooled deltas on top, per-utterance means below."""
    plt = _pyplot()
    pooled_ms = report.pooled * report.frame_ms
    per_utt_ms = np.array([float(np.mean(d)) for d in report.deltas_by_utterance])
    per_utt_ms *= report.frame_ms

    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6.0, 6.0))
    top.hist(pooled_ms, bins=30, color="tab:blue")
    top.set_title("corpus-level latency")
    top.set_xlabel("delta [ms]")
    top.set_ylabel("tokens")
    bottom.hist(per_utt_ms, bins=30, color="tab:orange")
    bottom.set_title("utterance-level latency")
    bottom.set_xlabel("delta [ms]")
    bottom.set_ylabel("utterances")
    fig.tight_layout()
    fig.savefig(Path(path), format="svg")
    plt.close(fig)
