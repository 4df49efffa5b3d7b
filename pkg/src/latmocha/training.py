"""Optimization loop, checkpointing, and experiment configuration.

Adam with global-norm gradient clipping over shuffled mini-batches.
Supports warm starting from a saved checkpoint (partial loads reported,
never silent), name-prefix parameter freezing for the staged CE
pre-training recipe, and a convergence stop for its first stage.

Checkpoints are a single JSON document: float32 little-endian base64
parameter payloads, optimizer moments, step counter, config snapshot,
and a sha256 checksum over the canonical serialization. Writes are
atomic (temp file + rename), and save -> load -> save is byte-identical.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tz
from .data import batch_pad
from .metrics import measure_latency, token_accuracy
from .model import DecoderConfig, EncoderConfig, Model, ModelConfig, init_model, label_smoothed_ce
from .objectives import ObjectiveConfig, s2s_forward, total_loss
from .tensor import Tensor, backward, no_grad

FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Unreadable, corrupt, version-mismatched, or incomplete checkpoint."""


class NumericalError(Exception):
    """Training hit a non-finite loss."""


@dataclass
class TrainConfig:
    model: ModelConfig
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    lr: float = 2e-3
    batch_size: int = 32
    epochs: int = 15
    grad_clip: float = 5.0
    seed: int = 0
    warm_start: str | None = None
    freeze: tuple = ()  # name prefixes; () derives from the objective mode
    holdout_fraction: float = 0.1
    eval_latency: bool = True
    stage1_patience: int = 3
    stage1_rel_improvement: float = 1e-3

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.grad_clip <= 0:
            raise ValueError("grad clip must be positive")


def freeze_prefixes(cfg: TrainConfig):
    if cfg.freeze:
        return tuple(cfg.freeze)
    if cfg.objective.mode == "pt-ce-stage1":
        return ("dec.", "att.")  # encoder and its CE head only
    if cfg.objective.mode == "pt-ce-stage2":
        return ("enc.ce_head.",)
    return ()


def is_frozen(name, prefixes):
    return any(name.startswith(p) for p in prefixes)


def clip_gradients(grads, max_norm):
    """Scale the gradient dict in place to global norm <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def init_moments(params):
    return {name: (np.zeros_like(t.data), np.zeros_like(t.data)) for name, t in params.items()}


def adam_step(params, grads, moments, lr, beta1=0.9, beta2=0.999, eps=1e-8, step=1):
    """Bias-corrected Adam over name-matched dicts.

    A non-finite gradient anywhere skips the whole update and returns
    False; moments and parameters are left untouched.
    """
    if step < 1:
        raise ValueError("step is 1-based")
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            return False
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    for name, g in grads.items():
        m, v = moments[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[name].data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return True


@dataclass
class TrainResult:
    model: Model
    history: list
    moments: dict
    steps: int
    skipped_steps: int
    warm_start_report: dict | None = None


def split_holdout(corpus, fraction, rng):
    """Deterministic shuffled split; at least one utterance held out."""
    idx = rng.permutation(len(corpus))
    n_eval = max(1, int(round(len(corpus) * fraction))) if fraction > 0 else 0
    eval_set = [corpus[i] for i in idx[:n_eval]]
    train_set = [corpus[i] for i in idx[n_eval:]]
    return train_set, eval_set


def train(cfg: TrainConfig, corpus, model=None, log_path=None):
    """Run the configured optimization; returns model, per-epoch history.

    The history record per epoch: epoch, loss (mean batch loss),
    token_acc, latency_avg, latency_median (None where not applicable),
    skipped (non-finite-gradient steps).
    """
    obj = cfg.objective
    needs = []
    if obj.needs_boundaries:
        needs.append("boundaries")
    if obj.needs_align:
        needs.append("align")
    for u in corpus[:1]:
        for field_name in needs:
            if getattr(u, field_name) is None or len(getattr(u, field_name)) == 0:
                raise ValueError(f"mode {obj.mode} requires {field_name} in the corpus")
    if obj.needs_align and not (cfg.model.encoder.mtl_branch or cfg.model.encoder.ce_head):
        raise ValueError(f"mode {obj.mode} requires a CE branch in the encoder config")

    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = init_model(cfg.model, seed=cfg.seed)
    warm_report = None
    if cfg.warm_start:
        state = load_checkpoint(cfg.warm_start)
        warm_report = apply_checkpoint_params(model, state, partial=True)

    frozen = freeze_prefixes(cfg)
    trainable = {n: t for n, t in model.params.items() if not is_frozen(n, frozen)}
    moments = init_moments(trainable)
    train_set, eval_set = split_holdout(corpus, cfg.holdout_fraction, rng)
    stack = cfg.model.encoder.stack_factor

    history = []
    step = 0
    skipped_total = 0
    best_eval_ce = None
    stall = 0
    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_set))
            losses = []
            skipped = 0
            for start in range(0, len(order), cfg.batch_size):
                chunk = [train_set[i] for i in order[start : start + cfg.batch_size]]
                batch = batch_pad(chunk, stack_factor=stack)
                loss, _, _ = total_loss(model, batch, obj, training=True, rng=rng)
                if not np.isfinite(loss.item()):
                    raise NumericalError(f"non-finite loss at epoch {epoch}")
                backward(loss)
                grads = {}
                for name, t in trainable.items():
                    grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
                clip_gradients(grads, cfg.grad_clip)
                step += 1
                if not adam_step(model.params, grads, moments, cfg.lr, step=step):
                    skipped += 1
                tz.zero_grads(model.params)
                losses.append(loss.item())
            skipped_total += skipped
            record = evaluate_epoch(model, obj, eval_set, stack, epoch, float(np.mean(losses)),
                                    skipped, cfg.eval_latency)
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if obj.mode == "pt-ce-stage1":
                ce = record["eval_ce"]
                if best_eval_ce is not None and ce > best_eval_ce * (1.0 - cfg.stage1_rel_improvement):
                    stall += 1
                else:
                    stall = 0
                if best_eval_ce is None or ce < best_eval_ce:
                    best_eval_ce = ce
                if stall >= cfg.stage1_patience:
                    break
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(model, history, moments, step, skipped_total, warm_report)


def evaluate_epoch(model, obj, eval_set, stack, epoch, train_loss, skipped, eval_latency):
    record = {"epoch": epoch, "loss": train_loss, "token_acc": None,
              "latency_avg": None, "latency_median": None, "skipped": skipped}
    if not eval_set:
        return record
    with no_grad():
        batch = batch_pad(eval_set, stack_factor=stack)
        if obj.mode == "pt-ce-stage1":
            out = s2s_forward(model, batch, obj)
            record["eval_ce"] = label_smoothed_ce(
                out.ce_logits, batch.align, mask=batch.frame_mask).item()
            return record
        out = s2s_forward(model, batch, ObjectiveConfig(mode="baseline"))
        record["token_acc"] = token_accuracy(out.logits.data, batch.tokens, batch.token_mask)
    if eval_latency:
        report = measure_latency(model, eval_set)
        record["latency_avg"] = report.avg
        record["latency_median"] = report.median
    return record


# --- checkpoint I/O ---


def _encode_array(arr):
    a = np.asarray(arr, dtype=np.float64).astype("<f4")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(rec):
    a = np.frombuffer(base64.b64decode(rec["data"]), dtype="<f4").reshape(rec["shape"])
    return a.astype(np.float64)


def _canonical(body):
    return json.dumps(body, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, model, moments=None, step=0, objective=None):
    body = {
        "format_version": FORMAT_VERSION,
        "config": model_config_to_dict(model.config),
        "objective": asdict(objective) if objective else None,
        "step": int(step),
        "params": {name: _encode_array(t.data) for name, t in sorted(model.params.items())},
        "moments": {
            name: {"m": _encode_array(m), "v": _encode_array(v)}
            for name, (m, v) in sorted((moments or {}).items())
        },
    }
    body["checksum"] = hashlib.sha256(_canonical(body).encode()).hexdigest()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(_canonical(body))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Parse and checksum-verify; returns the raw state dict."""
    try:
        with open(path) as fh:
            body = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint: {e}") from e
    version = body.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    claimed = body.pop("checksum", None)
    actual = hashlib.sha256(_canonical(body).encode()).hexdigest()
    if claimed != actual:
        raise CheckpointError(f"{path}: checksum mismatch, refusing partial state")
    body["checksum"] = claimed
    return body


def apply_checkpoint_params(model, state, partial=False):
    """Copy checkpoint arrays into the model; report name mismatches.

    Returns {"loaded": [...], "missing": [...], "unexpected": [...]}.
    missing = in the model but not the file; unexpected = the reverse.
    Without partial=True any mismatch aborts.
    """
    ckpt = state["params"]
    loaded, missing, unexpected = [], [], []
    for name in model.params:
        if name in ckpt:
            arr = _decode_array(ckpt[name])
            if list(arr.shape) != list(model.params[name].data.shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: {arr.shape} vs {model.params[name].data.shape}")
            model.params[name].data = arr
            loaded.append(name)
        else:
            missing.append(name)
    unexpected = [n for n in ckpt if n not in model.params]
    if (missing or unexpected) and not partial:
        raise CheckpointError(
            f"parameter name mismatch; missing from file: {missing}, not in model: {unexpected}")
    return {"loaded": loaded, "missing": missing, "unexpected": unexpected}


def model_config_to_dict(cfg: ModelConfig):
    return {
        "encoder": asdict(cfg.encoder),
        "decoder": asdict(cfg.decoder),
        "attention_dim": cfg.attention_dim,
        "chunk_width": cfg.chunk_width,
        "conv_kernel": cfg.conv_kernel,
        "noise_std": cfg.noise_std,
        "clip_eps": cfg.clip_eps,
        "fire_bias_init": cfg.fire_bias_init,
    }


def model_config_from_dict(d):
    return ModelConfig(
        encoder=EncoderConfig(**d["encoder"]),
        decoder=DecoderConfig(**d["decoder"]),
        attention_dim=d["attention_dim"],
        chunk_width=d["chunk_width"],
        conv_kernel=d["conv_kernel"],
        noise_std=d["noise_std"],
        clip_eps=d["clip_eps"],
        fire_bias_init=d.get("fire_bias_init", -4.0),
    )


def model_from_checkpoint(state):
    """Rebuild a Model (config + parameters) from a loaded state dict."""
    cfg = model_config_from_dict(state["config"])
    model = init_model(cfg, seed=0)
    report = apply_checkpoint_params(model, state, partial=False)
    assert not report["missing"] and not report["unexpected"]
    return model


def load_moments(state):
    return {
        name: (_decode_array(rec["m"]), _decode_array(rec["v"]))
        for name, rec in state.get("moments", {}).items()
    }
