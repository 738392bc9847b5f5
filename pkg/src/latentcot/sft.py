"""Three-stage supervised fine-tuning pipeline.

Stage 1 (warm-up): next-token prediction on the raw interleaved CoTs with
auxiliary images visible under a causal mask.

Stage 2: a frozen copy of the warm-up model (the teacher) reads the CoT with
real auxiliary images; the student replaces downstream visibility of those
images with autoregressively generated latent slots under the aux-gated mask.
The training signal is NTP plus a cosine alignment of observation-token
hidden states against the teacher, with the alignment term routed to the
parameters exclusively through the generated latent vectors (a surrogate dot
product against stop-gradient adjoints). The trained student then emits
per-layer target latent states for stage 3.

Stage 3: reinitialize from the warm-up model, drop the auxiliary images, and
align the latent states produced without them to the stage-2 targets, again
through the latent-only surrogate, plus NTP.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .layouts import BuiltLayout, build_interleaved, build_student, build_teacher
from .model import (MaskMode, ModelConfig, SequenceLayout, build_attention_mask,
                    bind_use_sites, copy_params, fill_latents, forward)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossWeights:
    alpha: float = 2.0        # stage-2 observation-alignment weight
    beta_stage3: float = 2.0  # stage-3 latent-alignment weight

    def __post_init__(self):
        if self.alpha < 0 or self.beta_stage3 < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class StageConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    epochs: int = 1
    max_steps: int | None = None
    grad_accum: int = 1
    k_train: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_interval: int = 250
    eval_samples: int = 48


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: dict, lr: float, weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, tensor in self.params.items():
            g = grads[name]
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            tensor.data -= self.lr * (update + self.wd * tensor.data)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def ntp_loss(logits: ad.Tensor, layout: SequenceLayout, label_mask: np.ndarray) -> ad.Tensor:
    """Mean negative log-likelihood over labeled positions.

    Position t contributes -log p(token_t | prefix) read from the logits row
    at t-1.
    """
    if label_mask.shape != (layout.length,):
        raise ValueError("label mask length does not match layout")
    if not label_mask.any():
        raise ValueError("label mask selects no positions")
    if label_mask[0]:
        raise ValueError("position 0 cannot be a prediction target")
    targets = np.zeros(layout.length, dtype=np.int64)
    shifted = np.zeros(layout.length, dtype=bool)
    targets[:-1] = layout.token_at[1:]
    shifted[:-1] = label_mask[1:]
    return ad.masked_mean_nll(logits, targets, shifted)


def _per_layer_alignment(target_rows: list, student_rows: list) -> ad.Tensor:
    terms = [ad.sub(1.0, ad.cosine_rows(ad.stop_gradient(t), s))
             for t, s in zip(target_rows, student_rows)]
    return ad.mean_all(ad.concat_rows([ad.reshape(t, (-1, 1)) for t in terms]))


def align_obs_loss(teacher_stack, student_stack, teacher_positions, student_positions) -> ad.Tensor:
    """Mean over layers 1..L and observation positions of
    1 - cos(stop_grad(teacher state), student state)."""
    if len(teacher_positions) != len(student_positions):
        raise ValueError(
            f"observation position sets differ: {len(teacher_positions)} vs {len(student_positions)}")
    if not teacher_positions:
        raise ValueError("no observation positions to align")
    t_rows = [ad.gather_rows(layer, teacher_positions) for layer in teacher_stack[1:]]
    s_rows = [ad.gather_rows(layer, student_positions) for layer in student_stack[1:]]
    return _per_layer_alignment(t_rows, s_rows)


def align_latent_loss(target: np.ndarray, student_stack, slot_positions) -> ad.Tensor:
    """Mean over layers 1..L and latent slots of
    1 - cos(stop_grad(stored target), student latent state)."""
    L = len(student_stack) - 1
    if target.shape[0] != L or target.shape[1] != len(slot_positions):
        raise ValueError(
            f"target store entry {target.shape} does not match {L} layers x "
            f"{len(slot_positions)} slots")
    t_rows = [ad.constant(target[l]) for l in range(L)]
    s_rows = [ad.gather_rows(layer, slot_positions) for layer in student_stack[1:]]
    return _per_layer_alignment(t_rows, s_rows)


def latent_only_surrogate(loss_grads: list, latent_nodes: list) -> ad.Tensor:
    """Dot the stop-gradient adjoints against the produced latent vectors.

    Backward then reaches the parameters only through the latent production
    paths; its gradient equals d(loss)/d(latents) . d(latents)/d(params).
    """
    if len(loss_grads) != len(latent_nodes):
        raise ValueError("one adjoint per latent vector required")
    total = None
    for g, v in zip(loss_grads, latent_nodes):
        if np.asarray(g).shape != v.shape:
            raise ValueError(f"adjoint shape {np.asarray(g).shape} != latent shape {v.shape}")
        term = ad.dot(ad.constant(g), v)
        total = term if total is None else ad.add(total, term)
    return total if total is not None else ad.constant(0.0)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def measure_obs_accuracy(params: dict, config: ModelConfig, samples) -> tuple:
    """Teacher-forced next-token accuracy restricted to observation positions,
    with auxiliary images present vs removed from the layout."""
    hits = {True: 0, False: 0}
    totals = {True: 0, False: 0}
    with ad.no_grad():
        for sample in samples:
            for with_aux in (True, False):
                built = build_interleaved(sample, include_aux=with_aux)
                mask = build_attention_mask(built.layout, MaskMode.CAUSAL)
                logits, _ = forward(built.layout, mask, params, config)
                for pos in built.obs_positions:
                    pred = int(np.argmax(logits.data[pos - 1]))
                    hits[with_aux] += pred == int(built.layout.token_at[pos])
                    totals[with_aux] += 1
    if totals[True] == 0:
        raise ValueError("eval set has no observation positions")
    return hits[True] / totals[True], hits[False] / totals[False]


# ---------------------------------------------------------------------------
# target latent store
# ---------------------------------------------------------------------------

class TargetLatentStore:
    """Per-sample (layers, slots, hidden) target latent states."""

    def __init__(self, entries: dict | None = None):
        self.entries = dict(entries or {})

    def __contains__(self, sample_id):
        return int(sample_id) in self.entries

    def get(self, sample_id) -> np.ndarray:
        return self.entries[int(sample_id)]

    def put(self, sample_id, arr: np.ndarray):
        self.entries[int(sample_id)] = np.asarray(arr, dtype=np.float64)

    def require(self, sample_ids):
        missing = [int(i) for i in sample_ids if int(i) not in self.entries]
        if missing:
            raise KeyError(f"target latent store is missing sample ids {missing}")

    def save(self, path):
        np.savez(path, **{str(k): v for k, v in self.entries.items()})

    @staticmethod
    def load(path) -> "TargetLatentStore":
        with np.load(path) as data:
            return TargetLatentStore({int(k): data[k] for k in data.files})


# ---------------------------------------------------------------------------
# shared training plumbing
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    log: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    store: TargetLatentStore | None = None


def _check_finite(value: float, step: int, stage: str):
    if not np.isfinite(value):
        raise TrainingDiverged(f"{stage}: loss became non-finite at step {step}")


def _epoch_order(n: int, epochs: int, max_steps, rng: np.random.Generator):
    count = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            if max_steps is not None and count >= max_steps:
                return
            count += 1
            yield int(i)


def _accumulate(acc: dict | None, grads: dict) -> dict:
    if acc is None:
        return {k: v.copy() for k, v in grads.items()}
    for k, v in grads.items():
        acc[k] += v
    return acc


def _student_pass(sample, k_train, with_aux, params, config):
    """Fill latent slots autoregressively, then run the final pass with
    identity-wrapped slot inputs. Returns (built, produced, sites, logits, stack)."""
    built = build_student(sample, k_train, with_aux=with_aux)
    mask = build_attention_mask(built.layout, built.mask_mode)
    produced = fill_latents(built.layout, mask, params, config)
    sites = bind_use_sites(built.layout, produced)
    logits, stack = forward(built.layout, mask, params, config)
    return built, mask, produced, sites, logits, stack


# ---------------------------------------------------------------------------
# stage trainers
# ---------------------------------------------------------------------------

def train_stage1(base_params: dict, records, config: ModelConfig, stage: StageConfig,
                 seed: int, diag_samples=None) -> TrainResult:
    """Warm-up: NTP on interleaved layouts, causal mask, aux images visible.

    Logs (step, loss); every eval_interval steps also logs the observation
    accuracy diagnostic (with aux, without aux) on `diag_samples`.
    """
    params = copy_params(base_params)
    opt = AdamW(params, stage.learning_rate, stage.weight_decay,
                stage.adam_beta1, stage.adam_beta2, stage.adam_eps)
    rng = np.random.default_rng(seed)
    result = TrainResult(params)
    acc, in_acc = None, 0
    step = 0
    for idx in _epoch_order(len(records), stage.epochs, stage.max_steps, rng):
        sample = records[idx].sample
        built = build_interleaved(sample)
        mask = build_attention_mask(built.layout, MaskMode.CAUSAL)
        logits, _ = forward(built.layout, mask, params, config)
        loss = ntp_loss(logits, built.layout, built.label_mask)
        _check_finite(loss.item(), step, "stage1")
        acc = _accumulate(acc, ad.backward(loss, params))
        in_acc += 1
        if in_acc >= stage.grad_accum:
            opt.step({k: v / in_acc for k, v in acc.items()})
            acc, in_acc = None, 0
        result.log.append({"step": step, "loss": loss.item()})
        if diag_samples and step % stage.eval_interval == 0:
            with_aux, without_aux = measure_obs_accuracy(params, config, diag_samples)
            result.diagnostics.append({"step": step, "obs_acc_with_aux": with_aux,
                                       "obs_acc_without_aux": without_aux})
        step += 1
    if diag_samples:
        with_aux, without_aux = measure_obs_accuracy(params, config, diag_samples)
        result.diagnostics.append({"step": step, "obs_acc_with_aux": with_aux,
                                   "obs_acc_without_aux": without_aux})
    return result


def stage2_sample_losses(sample, teacher_params, student_params, config: ModelConfig,
                         k_train: int):
    """One stage-2 student pass.

    Returns (ntp loss, alignment loss, surrogate, site adjoints); the caller
    combines ntp and surrogate. Exposing the adjoints keeps the gradient-path
    oracles honest.
    """
    teacher_built = build_teacher(sample)
    with ad.no_grad():
        t_logits, t_stack = forward(teacher_built.layout,
                                    build_attention_mask(teacher_built.layout, MaskMode.CAUSAL),
                                    teacher_params, config)
    t_stack = [ad.constant(layer.data) for layer in t_stack]
    built, mask, produced, sites, logits, stack = _student_pass(
        sample, k_train, True, student_params, config)
    loss_ntp = ntp_loss(logits, built.layout, built.label_mask)
    loss_align = align_obs_loss(t_stack, stack, teacher_built.obs_positions,
                                built.obs_positions)
    site_grads = ad.backward(loss_align, wrt=sites, stop_at=sites)
    surrogate = latent_only_surrogate(site_grads, produced)
    return loss_ntp, loss_align, surrogate, site_grads


def train_stage2(warmup_params: dict, records, config: ModelConfig, stage: StageConfig,
                 weights: LossWeights, seed: int) -> TrainResult:
    """Teacher-student latent training; emits the target latent store."""
    if stage.k_train < 1:
        raise ValueError("stage 2 requires k_train >= 1")
    student = copy_params(warmup_params)
    opt = AdamW(student, stage.learning_rate, stage.weight_decay,
                stage.adam_beta1, stage.adam_beta2, stage.adam_eps)
    rng = np.random.default_rng(seed)
    result = TrainResult(student)
    acc, in_acc = None, 0
    step = 0
    for idx in _epoch_order(len(records), stage.epochs, stage.max_steps, rng):
        sample = records[idx].sample
        loss_ntp, loss_align, surrogate, _ = stage2_sample_losses(
            sample, warmup_params, student, config, stage.k_train)
        total = ad.add(loss_ntp, ad.scale(surrogate, weights.alpha))
        _check_finite(loss_ntp.item() + loss_align.item(), step, "stage2")
        acc = _accumulate(acc, ad.backward(total, student))
        in_acc += 1
        if in_acc >= stage.grad_accum:
            opt.step({k: v / in_acc for k, v in acc.items()})
            acc, in_acc = None, 0
        result.log.append({"step": step, "ntp": loss_ntp.item(),
                           "align_obs": loss_align.item(), "total": total.item()})
        step += 1
    result.store = emit_target_latents(student, records, config, stage.k_train)
    return result


def emit_target_latents(params: dict, records, config: ModelConfig,
                        k_train: int) -> TargetLatentStore:
    """Fresh pass of the trained student over the dataset; stores the
    per-layer states at every latent slot position."""
    store = TargetLatentStore()
    with ad.no_grad():
        for rec in records:
            built, mask, _, _, _, stack = _student_pass(
                rec.sample, k_train, True, params, config)
            slots = [p for _, _, p in built.layout.latent_slots]
            entry = np.stack([layer.data[slots] for layer in stack[1:]])
            store.put(rec.sample_id, entry)
    return store


def stage3_sample_losses(sample, sample_id, store: TargetLatentStore, params,
                         config: ModelConfig, k_train: int):
    built, mask, produced, sites, logits, stack = _student_pass(
        sample, k_train, False, params, config)
    loss_ntp = ntp_loss(logits, built.layout, built.label_mask)
    slots = [p for _, _, p in built.layout.latent_slots]
    loss_align = align_latent_loss(store.get(sample_id), stack, slots)
    site_grads = ad.backward(loss_align, wrt=sites, stop_at=sites)
    surrogate = latent_only_surrogate(site_grads, produced)
    return loss_ntp, loss_align, surrogate, site_grads


def train_stage3(warmup_params: dict, records, store: TargetLatentStore,
                 config: ModelConfig, stage: StageConfig, weights: LossWeights,
                 seed: int) -> TrainResult:
    """Latent generation without aux images, aligned to the stage-2 targets.

    The model restarts from the warm-up weights, not from stage 2."""
    if stage.k_train < 1:
        raise ValueError("stage 3 requires k_train >= 1")
    store.require([rec.sample_id for rec in records])
    params = copy_params(warmup_params)
    opt = AdamW(params, stage.learning_rate, stage.weight_decay,
                stage.adam_beta1, stage.adam_beta2, stage.adam_eps)
    rng = np.random.default_rng(seed)
    result = TrainResult(params)
    acc, in_acc = None, 0
    step = 0
    for idx in _epoch_order(len(records), stage.epochs, stage.max_steps, rng):
        rec = records[idx]
        loss_ntp, loss_align, surrogate, _ = stage3_sample_losses(
            rec.sample, rec.sample_id, store, params, config, stage.k_train)
        total = ad.add(loss_ntp, ad.scale(surrogate, weights.beta_stage3))
        _check_finite(loss_ntp.item() + loss_align.item(), step, "stage3")
        acc = _accumulate(acc, ad.backward(total, params))
        in_acc += 1
        if in_acc >= stage.grad_accum:
            opt.step({k: v / in_acc for k, v in acc.items()})
            acc, in_acc = None, 0
        result.log.append({"step": step, "ntp": loss_ntp.item(),
                           "align_latent": loss_align.item(), "total": total.item()})
        step += 1
    return result
