"""Target construction and the training loop.

Targets come straight from the transition kernels (coordinates and
velocities from the kinetic kernel, lattice and atom types from the VP
kernel); the velocity loss is weighted by a precomputed lambda(t) that
normalizes the expected squared score magnitude across time.  Optimization
uses bias-corrected adaptive moments with decoupled weight decay.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import CrystalState
from .euclidean import (Standardizer, VpSchedule, analog_bits_encode, atom_type_loss_weight,
                        lattice_encode, one_hot_encode, vp_sample)
from .kinetic import KineticSchedule, project_mean_free, sample_transition, target_score
from .network import (LossWeights, ModelBundle, NetConfig, ScoreNet, TrainingBatch,
                      loss_gradients, save_checkpoint)
from .torus import angle_to_frac, frac_to_angle


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    n_steps: int = 3000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    lambda_v: float = 1.0
    lambda_l: float = 1.0
    lambda_a: float = 0.0          # 0 means "pick by atom-type mode" for DNG
    v0_sigma2: float = 0.0         # variance of the initial-velocity draw
    seed: int = 0
    val_size: int = 64
    eval_every: int = 250
    log_every: int = 50
    n_mc_lambda: int = 2000
    val_sampler_steps: int = 0     # 0 means n_grid // 10
    early_stop_target: float = 0.0  # val-metric threshold; 0 = untracked
    stop_at_target: bool = True     # break once the threshold is reached
    site_tol: float = 0.05

    def __post_init__(self):
        if self.batch_size < 1 or self.n_steps < 1:
            raise ValueError("batch_size and n_steps must be >= 1")
        if min(self.lambda_v, self.lambda_l) <= 0:
            raise ValueError("loss weights must be positive")
        if self.v0_sigma2 < 0:
            raise ValueError("v0_sigma2 must be nonnegative")
        if self.n_mc_lambda < 1000:
            raise ValueError("n_mc_lambda must be >= 1000")


@dataclass
class LambdaTable:
    """Per-grid-time weights 1 / E[|score|^2 per component]."""

    times: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        if np.any(~np.isfinite(self.lam)) or np.any(self.lam <= 0):
            raise ValueError("lambda table entries must be positive and finite")

    def lookup(self, t):
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float))
        idx = np.clip(idx, 0, len(self.times) - 1)
        left = np.clip(idx - 1, 0, len(self.times) - 1)
        use_left = np.abs(self.times[left] - t) < np.abs(self.times[idx] - t)
        return self.lam[np.where(use_left, left, idx)]


def precompute_lambda(sched: KineticSchedule, n_mc: int, rng: np.random.Generator,
                      k: int = 4, mean_free: bool = True, v0_sigma2: float = 0.0,
                      times=None) -> LambdaTable:
    """Monte Carlo estimate of the score-normalizing weights.

    For each eligible grid time, lambda(t) = 1 / mean(score^2 per
    component) over n_mc transition draws; deterministic given the rng.
    """
    if n_mc < 1000:
        raise ValueError("n_mc must be >= 1000")
    times = sched.train_times() if times is None else np.asarray(times, dtype=float)
    theta0 = np.zeros((n_mc, k, 1))
    lam = np.empty(times.size)
    for i, t in enumerate(times):
        if v0_sigma2 > 0:
            v0 = math.sqrt(v0_sigma2) * rng.standard_normal(theta0.shape)
            if mean_free:
                v0 = project_mean_free(v0)
        else:
            v0 = np.zeros_like(theta0)
        ns = sample_transition(theta0, v0, float(t), sched, rng, mean_free=mean_free)
        s = target_score(ns, v0, sched, mean_free=mean_free)
        m = float(np.mean(s * s))
        # a single-atom mean-free system has identically zero targets; the
        # weight then never multiplies anything nonzero
        lam[i] = 1.0 / m if m > 0 else 1.0
    return LambdaTable(times=times, lam=lam)


@dataclass
class TargetDraw:
    """Noisy inputs plus targets for a single crystal at one time."""

    t: float
    u: float
    f_t: np.ndarray
    v_t: np.ndarray
    l_t: np.ndarray
    a_t: np.ndarray
    target_v: np.ndarray
    target_l: np.ndarray
    target_a: np.ndarray | None


def make_training_targets(state: CrystalState, t: float, net_cfg: NetConfig,
                          ksched: KineticSchedule, vsched: VpSchedule,
                          rng: np.random.Generator, v0_sigma2: float = 0.0,
                          standardizer: Standardizer | None = None) -> TargetDraw:
    """Draw one (noisy input, target) tuple at torus time t.

    The Euclidean channels run on the normalized clock u = t / T.  In the
    x0 lattice mode the lattice channel diffuses the standardized encoded
    vector and the target is that clean standardized vector; otherwise the
    target is the Gaussian draw itself.
    """
    if not ksched.t_min <= t <= ksched.T:
        raise ValueError("t must lie in [t_min, T]")
    theta0 = frac_to_angle(state.f)
    if v0_sigma2 > 0:
        if net_cfg.parameterization == "simplified":
            raise ValueError("the simplified parameterization requires zero initial velocities")
        v0 = math.sqrt(v0_sigma2) * rng.standard_normal(theta0.shape)
        if net_cfg.mean_free:
            v0 = project_mean_free(v0)
    else:
        v0 = np.zeros_like(theta0)

    ns = sample_transition(theta0, v0, t, ksched, rng, mean_free=net_cfg.mean_free)
    tv = target_score(ns, v0, ksched, mean_free=net_cfg.mean_free)

    u = t / ksched.T
    l0 = lattice_encode(state.lengths, state.angles)
    if net_cfg.lattice_param == "x0":
        if standardizer is None:
            raise ValueError("x0 lattice mode requires a fitted standardizer")
        l0 = standardizer.apply(l0)
    l_t, eps_l = vp_sample(l0, u, vsched, rng)
    target_l = l0 if net_cfg.lattice_param == "x0" else eps_l

    if net_cfg.task == "dng":
        if net_cfg.atom_types == "analog-bits":
            a0 = analog_bits_encode(state.species, net_cfg.num_species)
        else:
            a0 = one_hot_encode(state.species, net_cfg.num_species)
        a_t, eps_a = vp_sample(a0, u, vsched, rng)
        target_a = eps_a
    else:
        a_t = one_hot_encode(state.species, net_cfg.num_species)
        target_a = None

    return TargetDraw(t=t, u=u, f_t=angle_to_frac(ns.theta_t), v_t=ns.v_t,
                      l_t=l_t, a_t=a_t, target_v=tv, target_l=target_l, target_a=target_a)


def _stack_batch(draws: list[TargetDraw], lam_table: LambdaTable) -> TrainingBatch:
    t = np.array([d.t for d in draws])
    has_a = draws[0].target_a is not None
    return TrainingBatch(
        t=t,
        u=np.array([d.u for d in draws]),
        f_t=np.stack([d.f_t for d in draws]),
        v_t=np.stack([d.v_t for d in draws]),
        l_t=np.stack([d.l_t for d in draws]),
        a_t=np.stack([d.a_t for d in draws]),
        target_v=np.stack([d.target_v for d in draws]),
        target_l=np.stack([d.target_l for d in draws]),
        target_a=np.stack([d.target_a for d in draws]) if has_a else None,
        lam=lam_table.lookup(t),
    )


@dataclass
class _DatasetArrays:
    """Dataset fields stacked once so batch construction is vectorized."""

    theta0: np.ndarray   # (n, K, 3)
    l0: np.ndarray       # (n, 6), standardized in x0 mode
    a_feat: np.ndarray   # (n, K, C) conditioning / clean encoding

    @classmethod
    def build(cls, states: list[CrystalState], net_cfg: NetConfig,
              standardizer: Standardizer | None):
        theta0 = np.stack([frac_to_angle(s.f) for s in states])
        l0 = np.stack([lattice_encode(s.lengths, s.angles) for s in states])
        if net_cfg.lattice_param == "x0":
            l0 = standardizer.apply(l0)
        if net_cfg.task == "dng" and net_cfg.atom_types == "analog-bits":
            a_feat = np.stack([analog_bits_encode(s.species, net_cfg.num_species)
                               for s in states])
        else:
            a_feat = np.stack([one_hot_encode(s.species, net_cfg.num_species)
                               for s in states])
        return cls(theta0=theta0, l0=l0, a_feat=a_feat)


def _batch_targets(arrays: _DatasetArrays, idx, ts, net_cfg: NetConfig,
                   ksched: KineticSchedule, vsched: VpSchedule,
                   rng: np.random.Generator, lam_table: LambdaTable,
                   v0_sigma2: float = 0.0) -> TrainingBatch:
    """Vectorized target construction for one optimization step."""
    theta0 = arrays.theta0[idx]
    t3 = ts[:, None, None]
    if v0_sigma2 > 0:
        v0 = math.sqrt(v0_sigma2) * rng.standard_normal(theta0.shape)
        if net_cfg.mean_free:
            v0 = project_mean_free(v0)
    else:
        v0 = np.zeros_like(theta0)
    ns = sample_transition(theta0, v0, t3, ksched, rng, mean_free=net_cfg.mean_free)
    tv = target_score(ns, v0, ksched, mean_free=net_cfg.mean_free)

    u = ts / ksched.T
    l0 = arrays.l0[idx]
    l_t, eps_l = vp_sample(l0, u[:, None], vsched, rng)
    target_l = l0 if net_cfg.lattice_param == "x0" else eps_l

    if net_cfg.task == "dng":
        a0 = arrays.a_feat[idx]
        a_t, eps_a = vp_sample(a0, u[:, None, None], vsched, rng)
        target_a = eps_a
    else:
        a_t = arrays.a_feat[idx]
        target_a = None

    return TrainingBatch(t=ts, u=u, f_t=angle_to_frac(ns.theta_t), v_t=ns.v_t,
                         l_t=l_t, a_t=a_t, target_v=tv, target_l=target_l,
                         target_a=target_a, lam=lam_table.lookup(ts))


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adamw_step(params, grad, state: AdamWState, cfg: TrainConfig) -> np.ndarray:
    """One decoupled-weight-decay adaptive-moment update; returns new params."""
    state.step += 1
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    mhat = state.m / (1.0 - cfg.beta1 ** state.step)
    vhat = state.v / (1.0 - cfg.beta2 ** state.step)
    return params - cfg.lr * (mhat / (np.sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * params)


@dataclass
class TrainResult:
    bundle: ModelBundle
    metrics: list[dict]
    best_val: float
    best_step: int
    steps_to_target: int | None
    aborted: bool = False


def _val_match_rate(bundle: ModelBundle, val_states: list[CrystalState],
                    n_steps: int, seed: int, site_tol: float) -> float:
    # cheap sampler for the early-stop signal, not a benchmark
    from .data import structure_match
    from .sampling import SamplerConfig, TrainedModel, sample_batch

    model = TrainedModel(bundle)
    k = val_states[0].k
    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(val_states):
        groups.setdefault(tuple(s.species.tolist()), []).append(i)
    hits = 0
    for gi, (comp, idxs) in enumerate(sorted(groups.items())):
        cfg = SamplerConfig(scheme="em", n_steps=n_steps, seed=seed + gi)
        samples, _ = sample_batch(model, len(idxs), k, np.asarray(comp), cfg)
        for i, got in zip(idxs, samples):
            ok, _ = structure_match(got, val_states[i], site_tol=site_tol)
            hits += int(ok)
    return hits / len(val_states)


def train(dataset: list[CrystalState], cfg: TrainConfig, net_cfg: NetConfig,
          ksched: KineticSchedule = KineticSchedule(), vsched: VpSchedule = VpSchedule(),
          metrics_path=None, checkpoint_path=None) -> TrainResult:
    """Optimize the score network on a toy dataset.

    Splits off a validation subset for the match-rate early-stop metric,
    fits the lattice standardizer when the x0 mode asks for one, and runs
    plain minibatch steps with per-sample diffusion times drawn uniformly
    from the discrete grid.  Deterministic: equal (seed, config, dataset)
    produce identical checkpoints and metric rows.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    k = dataset[0].k
    if any(s.k != k for s in dataset):
        raise ValueError("all crystals in a training set must share the atom count")
    if any(np.any(s.species >= net_cfg.num_species) for s in dataset):
        raise ValueError("species index out of range for the configured table")
    if cfg.v0_sigma2 > 0 and net_cfg.parameterization == "simplified":
        raise ValueError("the simplified parameterization requires zero initial velocities")

    root = np.random.SeedSequence(cfg.seed)
    ss_init, ss_lambda, ss_split, ss_data = root.spawn(4)

    rng_split = np.random.default_rng(ss_split)
    perm = rng_split.permutation(len(dataset))
    n_val = min(cfg.val_size, max(1, len(dataset) // 10))
    val_states = [dataset[i] for i in perm[:n_val]]
    train_states = [dataset[i] for i in perm[n_val:]]
    if not train_states:
        raise ValueError("dataset too small to carve out a validation split")

    standardizer = None
    if net_cfg.lattice_param == "x0":
        enc = np.stack([lattice_encode(s.lengths, s.angles) for s in train_states])
        standardizer = Standardizer.fit(enc)

    lam_table = precompute_lambda(ksched, cfg.n_mc_lambda, np.random.default_rng(ss_lambda),
                                  k=k, mean_free=net_cfg.mean_free, v0_sigma2=cfg.v0_sigma2)

    net = ScoreNet(net_cfg)
    params = net.init_params(np.random.default_rng(ss_init))
    opt = AdamWState(m=np.zeros_like(params), v=np.zeros_like(params))

    lam_a = cfg.lambda_a if cfg.lambda_a > 0 else (
        atom_type_loss_weight(net_cfg.atom_types) if net_cfg.task == "dng" else 0.0)
    weights = LossWeights(v=cfg.lambda_v, l=cfg.lambda_l, a=lam_a)

    times = ksched.train_times()
    rng_data = np.random.default_rng(ss_data)
    val_steps = cfg.val_sampler_steps or max(1, ksched.n_grid // 10)

    metrics: list[dict] = []
    best_val = -1.0
    best_step = -1
    best_params = params.copy()
    steps_to_target: int | None = None
    last_val = float("nan")
    aborted = False

    def make_bundle(p) -> ModelBundle:
        return ModelBundle(net=net, params=p.copy(), ksched=ksched, vsched=vsched,
                           standardizer=standardizer,
                           meta={"seed": cfg.seed, "k": k, "best_val": best_val,
                                 "best_step": best_step})

    arrays = _DatasetArrays.build(train_states, net_cfg, standardizer)
    for step in range(1, cfg.n_steps + 1):
        idx = rng_data.integers(0, len(train_states), size=cfg.batch_size)
        ts = times[rng_data.integers(0, times.size, size=cfg.batch_size)]
        batch = _batch_targets(arrays, idx, ts, net_cfg, ksched, vsched, rng_data,
                               lam_table, v0_sigma2=cfg.v0_sigma2)
        try:
            loss, parts, grad = loss_gradients(params, net, batch, ksched, weights)
        except FloatingPointError:
            aborted = True
            break
        params = adamw_step(params, grad, opt, cfg)

        if step % cfg.eval_every == 0 or step == cfg.n_steps:
            bundle = make_bundle(params)
            last_val = _val_match_rate(bundle, val_states, val_steps,
                                       seed=cfg.seed * 1000003 + step, site_tol=cfg.site_tol)
            if last_val > best_val:
                best_val = last_val
                best_step = step
                best_params = params.copy()
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, make_bundle(best_params))
            if steps_to_target is None and cfg.early_stop_target > 0 \
                    and last_val >= cfg.early_stop_target:
                steps_to_target = step
        if step % cfg.log_every == 0 or step == cfg.n_steps:
            metrics.append({"step": step, "t_mean": float(np.mean(ts)),
                            "loss_total": loss, "loss_v": parts["loss_v"],
                            "loss_l": parts["loss_l"], "loss_a": parts["loss_a"],
                            "val_metric": last_val})
        if steps_to_target is not None and cfg.stop_at_target:
            break

    final_params = best_params if best_val >= 0 else params
    bundle = make_bundle(final_params)
    if checkpoint_path is not None and best_val < 0:
        save_checkpoint(checkpoint_path, bundle)
    if metrics_path is not None:
        write_metrics_csv(metrics_path, metrics)
    return TrainResult(bundle=bundle, metrics=metrics, best_val=best_val,
                       best_step=best_step, steps_to_target=steps_to_target, aborted=aborted)


def write_metrics_csv(path, metrics: list[dict]) -> None:
    cols = ["step", "t_mean", "loss_total", "loss_v", "loss_l", "loss_a", "val_metric"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in metrics:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in cols])
