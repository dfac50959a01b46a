"""Desk-scale training loops.

Two phases: masked-frame regression pretraining (predict the original
features at masked positions from everything else) and CTC fine-tuning
with a fresh linear head. Both run either stochastically, sampling a new
compression configuration per batch, or deterministically at one fixed
configuration.

All randomness is drawn from per-purpose, per-step forks of a single
counter-based stream, so a run is a pure function of (plan, dataset) and
resuming from a checkpoint is bit-reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .ctc import ctc_loss, edit_distance, greedy_decode
from .encoder import EncoderModel
from .errors import ConfigError, DivergenceError, InfeasibleLabelError, InputError
from .stochastic import CompressionConfig, FactorSets, Rng, fixed_config, sample_config
from .tensor import GradientMap, Tape, Tensor, add, backward, matmul, mul, scale, sub, sum_all

MASK_FRACTION = 0.3
MASK_SPAN = 3
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 50


@dataclass
class TrainPlan:
    """Everything that determines a training run besides the data."""

    mode: str  # "stochastic" | "deterministic"
    steps: int
    batch_size: int
    learning_rate: float
    seed: int
    loss: str  # "masked_regression" | "ctc"
    sets: FactorSets | None = None
    fixed: CompressionConfig | None = None
    warmup_frac: float = 0.1
    eval_interval: int = 0  # 0 -> no validation-based selection
    randomize_validation: bool = False
    freeze_extractor: bool = False

    def __post_init__(self):
        if self.mode not in ("stochastic", "deterministic"):
            raise ConfigError(f"mode must be stochastic or deterministic, got {self.mode!r}")
        if self.loss not in ("masked_regression", "ctc"):
            raise ConfigError(f"loss must be masked_regression or ctc, got {self.loss!r}")
        if self.mode == "deterministic" and self.fixed is None:
            raise ConfigError("deterministic mode requires a fixed CompressionConfig")
        if self.mode == "stochastic" and self.sets is None:
            raise ConfigError("stochastic mode requires FactorSets to sample from")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")


@dataclass
class TrainLogRecord:
    step: int
    config: str
    loss: float
    grad_norm: float
    wall_ms: float

    def to_dict(self) -> dict:
        return {"step": self.step, "config": self.config, "loss": self.loss,
                "grad_norm": self.grad_norm, "wall_ms": self.wall_ms}


@dataclass
class TrainResult:
    params: dict  # name -> Tensor, encoder plus auxiliary groups
    log: list
    initial_loss: float
    final_loss: float
    best_val_loss: float | None = None
    infeasible_skipped: int = 0


@dataclass
class EvalResult:
    loss: float
    symbol_error: float
    wall_ms: float
    utterances: int


def write_train_log(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


class Adam:
    """Adam with linear warmup to a constant learning rate."""

    def __init__(self, params: dict, lr: float, warmup_steps: int = 0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def lr_at(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        return self.lr

    def step(self, grads: dict):
        lr = self.lr_at(self.t)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, param in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self._m[name] = self.beta1 * self._m[name] + (1 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1 - self.beta2) * g * g
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            param.data = param.data - update


def _config_for_step(plan: TrainPlan, depth: int, config_rng: Rng, step: int) -> CompressionConfig:
    if plan.mode == "deterministic":
        return plan.fixed
    return sample_config(plan.sets, depth, config_rng.fork(f"step{step}"))


def _batch_indices(rng: Rng, step: int, n: int, batch_size: int) -> list:
    step_rng = rng.fork(f"step{step}")
    return [step_rng.integer(n) for _ in range(batch_size)]


def _utterance_features(model: EncoderModel, utt, freeze_extractor: bool):
    if utt.features is not None:
        return Tensor(utt.features, dtype=model.dtype)
    if freeze_extractor:
        with _no_tape():
            return Tensor(model.extract_features(utt.audio).data)
    return model.extract_features(utt.audio)


class _no_tape:
    """Temporarily deactivate the ambient tape (frozen-extractor path)."""

    def __enter__(self):
        from . import tensor as _t
        self._saved = _t._active_tape()
        _t._state.tape = None
        return self

    def __exit__(self, *exc):
        from . import tensor as _t
        _t._state.tape = self._saved
        return False


def _mask_plan(rng: Rng, frames: int) -> np.ndarray:
    """Boolean mask covering ~MASK_FRACTION of frames in MASK_SPAN runs."""
    target = max(1, int(round(MASK_FRACTION * frames)))
    mask = np.zeros(frames, dtype=bool)
    guard = 0
    while mask.sum() < target and guard < 8 * frames:
        start = rng.integer(frames)
        mask[start:start + MASK_SPAN] = True
        guard += 1
    return mask


def _masked_regression_loss(model: EncoderModel, mask_embedding: Tensor,
                            features: Tensor, mask: np.ndarray,
                            config: CompressionConfig):
    frames, dim = features.shape
    keep = Tensor((~mask)[:, None].astype(features.dtype) * np.ones((1, dim), features.dtype))
    column = Tensor(mask[:, None].astype(features.dtype))
    masked_input = add(mul(features, keep), matmul(column, mask_embedding))
    predicted = model.forward(masked_input, config)
    diff = sub(predicted, Tensor(features.data))
    masked_sq = mul(mul(diff, diff), Tensor(mask[:, None].astype(features.dtype)
                                            * np.ones((1, dim), features.dtype)))
    count = max(1, int(mask.sum()))
    return scale(sum_all(masked_sq), 1.0 / (count * dim))


def _accumulate(total: dict, params: dict, grads: GradientMap):
    for name, param in params.items():
        g = grads.get(param)
        if g is None:
            continue
        if name in total:
            total[name] = total[name] + g
        else:
            total[name] = g


def _grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    return float(np.sqrt(total))


def _run_loop(model, aux_params, plan, dataset, loss_fn, phase, val_fn=None):
    """Shared optimizer loop; loss_fn(utt, config) -> (scalar Tensor | None)."""
    if len(dataset) < 1:
        raise InputError("dataset is empty")
    trainable = dict(model.params)
    trainable.update(aux_params)
    root = Rng(plan.seed).fork(phase)
    config_rng = root.fork("configs")
    data_rng = root.fork("data")
    warmup = max(1, int(round(plan.warmup_frac * plan.steps))) if plan.steps else 0
    optimizer = Adam(trainable, plan.learning_rate, warmup_steps=warmup)
    log = []
    initial_loss = None
    final_loss = None
    best_val = None
    best_snapshot = None
    skipped = 0
    runaway = 0

    for step in range(plan.steps):
        started = time.perf_counter()
        config = _config_for_step(plan, model.config.depth, config_rng, step)
        indices = _batch_indices(data_rng, step, len(dataset), plan.batch_size)
        grad_total: dict = {}
        loss_total = 0.0
        used = 0
        for pos, index in enumerate(indices):
            utt = dataset[index]
            with Tape():
                item_loss = loss_fn(utt, config, step=step, slot=pos)
            if item_loss is None:
                skipped += 1
                continue
            loss_value = item_loss.item()
            grads = backward(item_loss)
            _accumulate(grad_total, trainable, grads)
            loss_total += loss_value
            used += 1
        if used == 0:
            raise InputError(f"step {step}: every utterance in the batch was skipped")
        mean_loss = loss_total / used
        grad_total = {name: g / used for name, g in grad_total.items()}
        if not np.isfinite(mean_loss):
            record = TrainLogRecord(step, config.describe(), float(mean_loss),
                                    _grad_norm(grad_total),
                                    1000.0 * (time.perf_counter() - started))
            log.append(record)
            raise DivergenceError(f"non-finite loss {mean_loss} at step {step}", log=log)
        optimizer.step(grad_total)
        log.append(TrainLogRecord(step, config.describe(), float(mean_loss),
                                  _grad_norm(grad_total),
                                  1000.0 * (time.perf_counter() - started)))
        if initial_loss is None:
            initial_loss = mean_loss
        final_loss = mean_loss
        if mean_loss > DIVERGENCE_FACTOR * initial_loss:
            runaway += 1
            if runaway >= DIVERGENCE_PATIENCE:
                raise DivergenceError(
                    f"loss exceeded {DIVERGENCE_FACTOR}x its initial value for "
                    f"{DIVERGENCE_PATIENCE} consecutive steps", log=log)
        else:
            runaway = 0
        if val_fn is not None and plan.eval_interval > 0 and (
                (step + 1) % plan.eval_interval == 0 or step + 1 == plan.steps):
            val_loss = val_fn(step)
            if best_val is None or val_loss < best_val:
                best_val = val_loss
                best_snapshot = {name: p.data.copy() for name, p in trainable.items()}

    if best_snapshot is not None:
        for name, param in trainable.items():
            param.data = best_snapshot[name]
    return TrainResult(params=trainable, log=log,
                       initial_loss=initial_loss if initial_loss is not None else float("nan"),
                       final_loss=final_loss if final_loss is not None else float("nan"),
                       best_val_loss=best_val, infeasible_skipped=skipped)


def pretrain_toy(model: EncoderModel, plan: TrainPlan, dataset,
                 mask_embedding: Tensor | None = None) -> TrainResult:
    """Masked-frame regression pretraining over feature (or audio) data."""
    if plan.loss != "masked_regression":
        raise ConfigError("pretrain_toy requires plan.loss == 'masked_regression'")
    if mask_embedding is None:
        emb = Rng(plan.seed).fork("mask-embedding").normal_matrix(
            (1, model.config.model_dim), scale=0.02)
        mask_embedding = Tensor(emb, dtype=model.dtype)
    aux = {"pretrain.mask_embedding": mask_embedding}
    mask_rng = Rng(plan.seed).fork("pretrain").fork("masks")

    def loss_fn(utt, config, step, slot):
        features = _utterance_features(model, utt, plan.freeze_extractor)
        mask = _mask_plan(mask_rng.fork(f"step{step}/slot{slot}"), features.shape[0])
        return _masked_regression_loss(model, mask_embedding, features, mask, config)

    return _run_loop(model, aux, plan, dataset, loss_fn, phase="pretrain")


def make_head(model_dim: int, vocab: int, seed: int, dtype=np.float64) -> dict:
    """Fresh linear output layer mapping model width to V labels plus blank."""
    rng = Rng(seed).fork("head")
    weight = rng.normal_matrix((model_dim, vocab + 1), scale=1.0 / np.sqrt(model_dim))
    return {"head.weight": Tensor(weight, dtype=dtype),
            "head.bias": Tensor(np.zeros(vocab + 1), dtype=dtype)}


def finetune(model: EncoderModel, plan: TrainPlan, dataset, vocab: int,
             val_dataset=None, head: dict | None = None) -> TrainResult:
    """CTC fine-tuning with a linear head on top of the encoder.

    Infeasible utterances (labels longer than their frame budget allows)
    are skipped and counted in the result. Model selection, when
    ``plan.eval_interval > 0`` and a validation set is given, tracks the
    best validation loss at the (1,1,1) configuration unless
    ``plan.randomize_validation`` asks for sampled validation configs.
    """
    if plan.loss != "ctc":
        raise ConfigError("finetune requires plan.loss == 'ctc'")
    if head is None:
        head = make_head(model.config.model_dim, vocab, plan.seed, dtype=model.dtype)
    val_rng = Rng(plan.seed).fork("finetune").fork("validation")

    def logits_for(utt, config):
        features = _utterance_features(model, utt, plan.freeze_extractor)
        encoded = model.forward(features, config)
        return add(matmul(encoded, head["head.weight"]), head["head.bias"])

    def loss_fn(utt, config, step, slot):
        if utt.labels is None:
            raise InputError("finetune requires labeled utterances")
        try:
            return ctc_loss(logits_for(utt, config), utt.labels)
        except InfeasibleLabelError:
            return None

    def val_fn(step):
        if plan.randomize_validation:
            config = sample_config(plan.sets, model.config.depth,
                                   val_rng.fork(f"step{step}"))
        else:
            config = fixed_config(1, 1, 1, model.config.depth)
        total, count = 0.0, 0
        for i in range(len(val_dataset)):
            utt = val_dataset[i]
            try:
                total += ctc_loss(logits_for(utt, config), utt.labels).item()
                count += 1
            except InfeasibleLabelError:
                continue
        if count == 0:
            raise InputError("validation set has no feasible utterances")
        return total / count

    return _run_loop(model, head, plan, dataset, loss_fn, phase="finetune",
                     val_fn=val_fn if val_dataset is not None else None)


def evaluate(model: EncoderModel, head: dict, config: CompressionConfig,
             dataset) -> EvalResult:
    """Fixed-configuration inference with greedy decoding.

    Symbol error is corpus-level: total edit distance over total reference
    length. Wall time covers encoding plus decoding, summed per utterance.
    """
    if len(dataset) < 1:
        raise InputError("evaluate requires a non-empty dataset")
    total_loss = 0.0
    loss_count = 0
    total_edit = 0
    total_ref = 0
    wall = 0.0
    for i in range(len(dataset)):
        utt = dataset[i]
        if utt.labels is None:
            raise InputError("evaluate requires labeled utterances")
        started = time.perf_counter()
        features = _utterance_features(model, utt, freeze_extractor=False)
        encoded = model.forward(features, config)
        logits = add(matmul(encoded, head["head.weight"]), head["head.bias"])
        hyp = greedy_decode(logits)
        wall += 1000.0 * (time.perf_counter() - started)
        try:
            total_loss += ctc_loss(logits, utt.labels).item()
            loss_count += 1
        except InfeasibleLabelError:
            pass
        total_edit += edit_distance(hyp, utt.labels)
        total_ref += len(utt.labels)
    symbol_error = total_edit / total_ref if total_ref else 0.0
    mean_loss = total_loss / loss_count if loss_count else float("inf")
    return EvalResult(loss=mean_loss, symbol_error=symbol_error,
                      wall_ms=wall, utterances=len(dataset))
