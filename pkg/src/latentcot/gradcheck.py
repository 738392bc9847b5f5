"""Finite-difference verification of every training loss.

Each check builds the loss on a small two-layer model, takes analytic
gradients with `backward`, and compares against central differences of the
matching value function on a sampled set of parameter coordinates. Losses
that contain stop-gradient barriers (the latent-only surrogates) are checked
against the function they actually differentiate: the adjoints are frozen at
the base parameters before differencing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import vocab
from .layouts import build_prompt, build_student, build_teacher
from .model import (LatentStep, MaskMode, ModelConfig, SegmentRole,
                    SequenceLayout, TextStep, Trajectory,
                    build_attention_mask, copy_params, fill_latents, forward,
                    init_params, latent_segment, text_segment)
from .rl import Algo, PolicySnapshot, RlConfig, compute_advantages, policy_objective, rollout_group
from .sft import (LossWeights, align_latent_loss, align_obs_loss,
                  latent_only_surrogate, ntp_loss, stage2_sample_losses,
                  stage3_sample_losses, emit_target_latents)
from .tasks import make_lookup_sample, stage3_tag_observations
from .layouts import build_interleaved


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _tiny_model(seed: int):
    config = ModelConfig(layer_count=2, hidden_dim=16, head_count=2, max_positions=96)
    params = init_params(config, np.random.default_rng(seed))
    return config, params


def _tiny_sample():
    grid = [
        ["a", "b", "e", "f"],
        ["c", "d", "g", "h"],
        ["e", "f", "a", "b"],
        ["g", "h", "c", "d"],
    ]
    return stage3_tag_observations(make_lookup_sample(grid, (1, 1, 2, 2), (2, 1)))


def _sample_coords(params: dict, rng: np.random.Generator, budget: int = 64) -> dict:
    """Spread at most `budget` coordinates across all parameter tensors."""
    names = list(params)
    sizes = np.array([params[n].data.size for n in names])
    flat_total = int(sizes.sum())
    picks = rng.choice(flat_total, size=min(budget, flat_total), replace=False)
    bounds = np.cumsum(sizes)
    coords: dict = {n: [] for n in names}
    for p in np.sort(picks):
        i = int(np.searchsorted(bounds, p, side="right"))
        offset = p - (bounds[i - 1] if i else 0)
        coords[names[i]].append(int(offset))
    return {n: np.array(v, dtype=np.int64) for n, v in coords.items() if v}


def _fd_check(name, loss_node, value_fn, params, coords, eps, tol) -> CheckResult:
    analytic = ad.backward(loss_node, params)
    numeric = ad.finite_difference(value_fn, {n: t.data for n, t in params.items()},
                                   eps=eps, coords=coords)
    return CheckResult(name, ad.max_rel_error(analytic, numeric, coords), tol)


def _as_live(pvals: dict) -> dict:
    return {n: ad.constant(v) for n, v in pvals.items()}


# ---------------------------------------------------------------------------
# individual checks
# ---------------------------------------------------------------------------

def check_ntp(config, params, sample, coords, eps, tol):
    built = build_interleaved(sample)
    mask = build_attention_mask(built.layout, MaskMode.CAUSAL)

    def value(pvals):
        with ad.no_grad():
            logits, _ = forward(built.layout, mask, _as_live(pvals), config)
            return ntp_loss(logits, built.layout, built.label_mask).item()

    logits, _ = forward(built.layout, mask, params, config)
    loss = ntp_loss(logits, built.layout, built.label_mask)
    return _fd_check("ntp", loss, value, params, coords, eps, tol)


def _teacher_consts(sample, teacher_params, config):
    tb = build_teacher(sample)
    with ad.no_grad():
        _, t_stack = forward(tb.layout, build_attention_mask(tb.layout, MaskMode.CAUSAL),
                             teacher_params, config)
    return tb, [ad.constant(s.data) for s in t_stack]


def _student_forward(sample, k, pdict, config):
    built = build_student(sample, k, with_aux=True)
    mask = build_attention_mask(built.layout, built.mask_mode)
    produced = fill_latents(built.layout, mask, pdict, config)
    logits, stack = forward(built.layout, mask, pdict, config)
    return built, produced, logits, stack


def check_align_obs(config, params, teacher_params, sample, k, coords, eps, tol):
    tb, t_consts = _teacher_consts(sample, teacher_params, config)

    def value(pvals):
        with ad.no_grad():
            built, _, _, stack = _student_forward(sample, k, _as_live(pvals), config)
            return align_obs_loss(t_consts, stack, tb.obs_positions,
                                  built.obs_positions).item()

    built, _, _, stack = _student_forward(sample, k, params, config)
    loss = align_obs_loss(t_consts, stack, tb.obs_positions, built.obs_positions)
    return _fd_check("align-obs", loss, value, params, coords, eps, tol)


def check_align_latent(config, params, store_entry, sample, k, coords, eps, tol):
    def run(pdict):
        built = build_student(sample, k, with_aux=False)
        mask = build_attention_mask(built.layout, built.mask_mode)
        fill_latents(built.layout, mask, pdict, config)
        _, stack = forward(built.layout, mask, pdict, config)
        slots = [p for _, _, p in built.layout.latent_slots]
        return align_latent_loss(store_entry, stack, slots)

    def value(pvals):
        with ad.no_grad():
            return run(_as_live(pvals)).item()

    return _fd_check("align-latent", run(params), value, params, coords, eps, tol)


def check_stage_total(kind, config, params, teacher_params, store, sample, k,
                      weight, coords, eps, tol):
    """Total stage loss; the surrogate's stop-gradient adjoints are frozen at
    the base parameters before differencing, matching what backward
    differentiates."""
    if kind == "stage2":
        loss_ntp, _, surrogate, adjoints = stage2_sample_losses(
            sample, teacher_params, params, config, k)
    else:
        loss_ntp, _, surrogate, adjoints = stage3_sample_losses(
            sample, 0, store, params, config, k)
    total = ad.add(loss_ntp, ad.scale(surrogate, weight))
    frozen = [np.asarray(g).copy() for g in adjoints]

    def value(pvals):
        with ad.no_grad():
            live = _as_live(pvals)
            built = build_student(sample, k, with_aux=(kind == "stage2"))
            mask = build_attention_mask(built.layout, built.mask_mode)
            produced = fill_latents(built.layout, mask, live, config)
            logits, _ = forward(built.layout, mask, live, config)
            base = ntp_loss(logits, built.layout, built.label_mask).item()
            dot = sum(float(g @ v.data) for g, v in zip(frozen, produced))
            return base + weight * dot

    return _fd_check(f"{kind}-total", total, value, params, coords, eps, tol)


def _make_groups(sample, old_params, current_params, config, rl_config, rng,
                 need_latents):
    group = rollout_group(sample, PolicySnapshot(None, old_params), rl_config,
                          config, rng)
    has_latents = any(isinstance(s, LatentStep)
                      for r in group.rollouts for s in r.trajectory.steps)
    if need_latents and not has_latents:
        _inject_latent_run(group.rollouts[0], rl_config.k_train_rl, config, old_params, rng)
    group.rollouts[0].reward, group.rollouts[0].correct = 1.1, True
    for roll in group.rollouts[1:]:
        roll.reward, roll.correct = 0.1, False
    return [compute_advantages(group)]

def _inject_latent_run(roll, k, config, old_params, rng):
    """Append a deterministic latent run to a rollout (marker, k vectors,
    forced end); the vectors play the role of recorded old-policy latents."""
    lat_start = vocab.TOKEN_TO_ID[vocab.LATENT_START]
    lat_end = vocab.TOKEN_TO_ID[vocab.LATENT_END]
    segments = list(roll.layout.segments)
    segments.append(text_segment(SegmentRole.PLAIN_TEXT, [lat_start]))
    roll.trajectory.steps.append(TextStep(lat_start, -2.0))
    for _ in range(k):
        vec = rng.normal(size=config.hidden_dim) * 0.5
        segments.append(latent_segment(1, [vec]))
        roll.trajectory.steps.append(LatentStep(vec))
    segments.append(text_segment(SegmentRole.PLAIN_TEXT, [lat_end]))
    roll.trajectory.steps.append(TextStep(lat_end, 0.0, forced=True))
    roll.layout = SequenceLayout(segments)


def check_policy(algo, config, params, old_params, sample, coords, eps, tol, seed):
    rl_config = RlConfig(group_size=2, k_train_rl=2, temperature=0.7,
                         max_response_length=20, clip_eps=0.2)
    rng = np.random.default_rng(seed)
    groups = _make_groups(sample, old_params, params, config, rl_config, rng,
                          need_latents=algo is Algo.VLPO)

    def build(pdict):
        loss, _ = policy_objective(groups, pdict, None, rl_config, algo, config)
        return loss

    def value(pvals):
        with ad.no_grad():
            return build(_as_live(pvals)).item()

    return _fd_check(algo.value, build(params), value, params, coords, eps, tol)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def run_gradcheck(seed: int = 0, eps: float = 1e-5, tol: float = 1e-4,
                  budget: int = 64) -> list:
    """All loss-level gradient checks on a 2-layer, d=16 model."""
    config, params = _tiny_model(seed)
    _, teacher_params = _tiny_model(seed + 1)
    _, old_params = _tiny_model(seed + 2)
    sample = _tiny_sample()
    k = 2
    rng = np.random.default_rng(seed + 3)
    coords = _sample_coords(params, rng, budget)
    store = emit_target_latents(params, _records_for(sample), config, k)
    weights = LossWeights()
    results = [
        check_ntp(config, params, sample, coords, eps, tol),
        check_align_obs(config, params, teacher_params, sample, k, coords, eps, tol),
        check_align_latent(config, params, store.get(0), sample, k, coords, eps, tol),
        check_stage_total("stage2", config, params, teacher_params, None, sample, k,
                          weights.alpha, coords, eps, tol),
        check_stage_total("stage3", config, params, teacher_params, store, sample, k,
                          weights.beta_stage3, coords, eps, tol),
        check_policy(Algo.GRPO, config, params, old_params, sample, coords, eps, tol, seed + 4),
        check_policy(Algo.VLPO, config, params, old_params, sample, coords, eps, tol, seed + 5),
    ]
    return results


def _records_for(sample):
    from .tasks import DatasetRecord
    return [DatasetRecord(0, sample, {})]
