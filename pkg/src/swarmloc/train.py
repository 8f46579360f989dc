"""Losses, optimizer, and the two-phase training loop.

Phase 1 (pretraining) drives the match loss plus the maximum-likelihood
position/covariance loss, with priors built from ground truth one frame
back plus per-axis Gaussian noise. Phase 2 adds the pose loss evaluated
after the unrolled differentiable pose-graph solve, so localization error
reaches back into the front-end weights.

Frames where an observer has no detections or no usable range are omitted
from training, mirroring the runtime fallback that bypasses the matcher.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import matchnet as mn
from . import pgo
from . import tensor as T
from . import tgeom as tg
from .geom import Pose, relative
from .sim import SwarmFrame

QUAT_CONJ_MASK = np.array([1.0, -1.0, -1.0, -1.0])


@dataclass(frozen=True)
class LossWeights:
    lambda_ml: float = 1.0
    lambda_pose: float = 10.0
    lambda_det: float = 1.0
    lambda_q: float = 1.0

    def __post_init__(self):
        if min(self.lambda_ml, self.lambda_pose, self.lambda_det, self.lambda_q) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    epochs: int = 0  # phase-2 epochs
    batch_size: int = 8
    pretrain_epochs: int = 20  # phase 1; the protocol needs < 50
    prior_noise: float = 0.1
    # per-sample prior noise is drawn from [min_frac, 1] * prior_noise so the
    # heads see both sloppy and near-exact priors and stay calibrated in the
    # clean regime (exact priors never appear otherwise)
    prior_noise_min_frac: float = 0.2
    seed: int = 0
    samples_per_epoch: int = 400
    val_fraction: float = 0.15
    checkpoint_every: int = 5
    unroll_depth: int = 3
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0:
            raise ValueError("lr and batch_size must be positive")
        if not (0 <= self.pretrain_epochs <= 50):
            raise ValueError("pretrain_epochs must be in [0, 50]")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_match(p_log: T.Tensor, gt_pairs, gt_unmatched) -> T.Tensor:
    """Negative log-probability of true matches and true dustbin rows."""
    n_rows, n_cols = p_log.data.shape
    rows = [i for i, _ in gt_pairs] + list(gt_unmatched)
    cols = [j for _, j in gt_pairs] + [n_cols - 1] * len(gt_unmatched)
    if not rows:
        return T.constant(0.0)
    return T.neg(T.sum_(T.take_at(p_log, rows, cols)))


def loss_ml(
    t_hat: T.Tensor, logvar: T.Tensor, gt_t: np.ndarray, n_swarm: int,
    weights: LossWeights,
) -> T.Tensor:
    """Gaussian negative log-likelihood over the predicted pairs.

    Diagonal covariance: log det = sum of log-variances; the quadratic
    term is the variance-weighted squared error. Normalized by the count
    of ordered robot pairs in the swarm.
    """
    if t_hat is None or t_hat.data.shape[0] == 0:
        return T.constant(0.0)
    e = T.sub(T.constant(np.asarray(gt_t)), t_hat)
    quad = T.sum_(T.div(T.mul(e, e), T.exp(logvar)))
    logdet = T.sum_(logvar)
    scale = 1.0 / (n_swarm * (n_swarm - 1))
    return T.mul(
        T.add(T.mul(logdet, T.constant(weights.lambda_det)), quad), T.constant(scale)
    )


def _aligned_quat_const(gt_q: np.ndarray, est_q: np.ndarray) -> T.Tensor:
    """Ground-truth quaternion sign-aligned to the estimate (double cover)."""
    if float(gt_q @ est_q) < 0.0:
        gt_q = -gt_q
    return T.constant(gt_q)


def loss_pose(
    st, robot_ids_with_ref: list[int], gt_state: dict[int, Pose], weights: LossWeights
) -> T.Tensor:
    """MSE over ordered pairs of relative translation and quaternion."""
    n = len(robot_ids_with_ref)
    total = T.constant(0.0)
    for i in robot_ids_with_ref:
        qi_conj = T.mul(st.q[i], T.constant(QUAT_CONJ_MASK))
        for j in robot_ids_with_ref:
            if i == j:
                continue
            t_rel = tg.quat_rotate_inv(st.q[i], T.sub(st.t[j], st.t[i]))
            q_rel = tg.quat_mul(qi_conj, st.q[j])
            gt_rel = relative(gt_state[i], gt_state[j])
            dt = T.sub(T.constant(gt_rel.t), t_rel)
            dq = T.sub(_aligned_quat_const(gt_rel.q, q_rel.data), q_rel)
            term = T.add(
                T.sum_(T.mul(dt, dt)),
                T.mul(T.sum_(T.mul(dq, dq)), T.constant(weights.lambda_q)),
            )
            total = T.add(total, term)
    return T.mul(total, T.constant(1.0 / (n * (n - 1))))


def total_loss(l_match: T.Tensor, l_ml: T.Tensor, l_pose: T.Tensor, weights: LossWeights):
    return T.add(
        l_match,
        T.add(
            T.mul(l_ml, T.constant(weights.lambda_ml)),
            T.mul(l_pose, T.constant(weights.lambda_pose)),
        ),
    )


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, T.Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Adam with decoupled weight decay; updates parameters in place."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m += (1 - b1) * (g - m)
        v += (1 - b2) * (g * g - v)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * p.data


# ---------------------------------------------------------------------------
# training samples
# ---------------------------------------------------------------------------


@dataclass
class TrainSample:
    frame_idx: int
    observer: int
    others: np.ndarray  # robot ids aligned with prior rows
    prior_pos: np.ndarray  # (n-1, 3) noisy prior positions, observer frame
    prior_pose: list[Pose]  # full pose priors (translation part noised)
    prior_noise: float  # std of the injected prior noise (per axis)
    det: np.ndarray
    ranges: np.ndarray
    uwb: np.ndarray
    gt_pairs: list[tuple[int, int]]  # (prior row, detection index)
    gt_unmatched: list[int]
    gt_rel: list[Pose]  # current-frame ground-truth relatives, observer frame


def build_sample(
    frames: list[SwarmFrame],
    frame_idx: int,
    observer: int,
    rng: np.random.Generator,
    prior_noise: float,
) -> TrainSample | None:
    """Training instance per (frame, observer); None when it must be omitted."""
    if frame_idx < 1:
        return None
    fr = frames[frame_idx]
    prev = frames[frame_idx - 1]
    n = len(fr.gt)
    det = fr.det[observer]
    others = np.array([j for j in range(n) if j != observer])
    ranges = fr.uwb[observer, others]
    if len(det) == 0 or not np.any(np.isfinite(ranges)):
        return None

    prior_pos = np.zeros((n - 1, 3))
    prior_pose = []
    gt_rel = []
    for k, j in enumerate(others):
        rel_prev = relative(prev.gt[observer], prev.gt[j])
        noisy_t = rel_prev.t + rng.normal(0.0, prior_noise, size=3)
        prior_pos[k] = noisy_t
        prior_pose.append(Pose(q=rel_prev.q, t=noisy_t))
        gt_rel.append(relative(fr.gt[observer], fr.gt[j]))

    row_of = {j: k for k, j in enumerate(others)}
    gt_pairs = []
    seen = set()
    for det_idx, src in enumerate(fr.det_src[observer]):
        if src >= 0:
            gt_pairs.append((row_of[int(src)], det_idx))
            seen.add(row_of[int(src)])
    gt_unmatched = [k for k in range(n - 1) if k not in seen]

    return TrainSample(
        frame_idx=frame_idx,
        observer=observer,
        others=others,
        prior_pos=prior_pos,
        prior_pose=prior_pose,
        prior_noise=prior_noise,
        det=det,
        ranges=ranges,
        uwb=fr.uwb,
        gt_pairs=gt_pairs,
        gt_unmatched=gt_unmatched,
        gt_rel=gt_rel,
    )


def sample_losses(
    sample: TrainSample,
    params: dict[str, T.Tensor],
    net_cfg: mn.MatchNetConfig,
    weights: LossWeights,
    with_pose: bool,
    pgo_cfg: pgo.PgoConfig,
    lm_settings: pgo.LMSettings,
):
    """(match, ml, pose) loss tensors plus the MatchResult for one sample."""
    inp = mn.MatchInput(prior_pos=sample.prior_pos, det=sample.det, ranges=sample.ranges)
    result, art = mn.forward(inp, params, net_cfg)
    n_swarm = len(sample.others) + 1

    l_match = loss_match(art.p_log, sample.gt_pairs, sample.gt_unmatched)

    if art.t_hat is not None:
        gt_t = np.stack([sample.gt_rel[k].t for k in art.matched])
        l_ml = loss_ml(art.t_hat, art.logvar, gt_t, n_swarm, weights)
    else:
        l_ml = T.constant(0.0)

    l_pose = T.constant(0.0)
    if with_pose:
        graph = _training_graph(sample, art, pgo_cfg)
        st, _ = pgo.lm_solve_differentiable(graph, lm_settings)
        gt_state = {sample.observer: Pose(q=[1, 0, 0, 0], t=[0.0, 0.0, 0.0])}
        for k, j in enumerate(sample.others):
            gt_state[int(j)] = sample.gt_rel[k]
        ids = [sample.observer] + [int(j) for j in sample.others]
        l_pose = loss_pose(st, ids, gt_state, weights)

    return l_match, l_ml, l_pose, result


def _training_graph(sample: TrainSample, art, pgo_cfg: pgo.PgoConfig) -> pgo.FactorGraph:
    """Per-sample graph with tensor-valued measurements for matched robots.

    Prior factors carry the true injected prior noise variance; the
    network's covariance enters through the mutual factors.
    """
    priors = {int(j): sample.prior_pose[k] for k, j in enumerate(sample.others)}
    pv = np.full(3, max(sample.prior_noise**2, 1e-6))
    prior_var: dict[int, object] = {int(j): pv for j in sample.others}
    mutual = []
    for slot, k in enumerate(art.matched):
        rid = int(sample.others[k])
        t_meas = T.reshape(T.narrow(art.t_hat, (slice(slot, slot + 1), slice(None))), (3,))
        var = T.exp(
            T.reshape(T.narrow(art.logvar, (slice(slot, slot + 1), slice(None))), (3,))
        )
        mutual.append((sample.observer, rid, t_meas, var))
    return pgo.build_graph(
        ref=sample.observer,
        priors=priors,
        uwb=sample.uwb,
        cfg=pgo_cfg,
        prior_var=prior_var,
        mutual=mutual,
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


METRIC_COLUMNS = [
    "epoch", "phase", "loss_match", "loss_ml", "loss_pose", "total",
    "val_precision", "val_recall", "val_f1", "val_rpe",
]


@dataclass
class TrainOutput:
    params: dict[str, T.Tensor]
    metrics: list[dict]
    best_val_f1: float
    skipped_samples: int


def train(
    frames: list[SwarmFrame] | list[list[SwarmFrame]],
    net_cfg: mn.MatchNetConfig,
    config: TrainConfig,
    pgo_cfg: pgo.PgoConfig = pgo.PgoConfig(),
    params: dict[str, T.Tensor] | None = None,
    metrics_path=None,
    checkpoint_path=None,
) -> TrainOutput:
    """Two-phase training; deterministic given config.seed.

    Accepts a single dataset or several (e.g. scenes with different robot
    counts); samples pool across all of them.
    """
    datasets: list[list[SwarmFrame]]
    if frames and isinstance(frames[0], SwarmFrame):
        datasets = [frames]  # type: ignore[list-item]
    else:
        datasets = list(frames)  # type: ignore[arg-type]
    rng = np.random.default_rng(config.seed)
    params = params if params is not None else mn.init_params(net_cfg, seed=config.seed)

    train_ids: list[tuple[int, int, int]] = []
    val_ids: list[tuple[int, int]] = []
    for d, fs in enumerate(datasets):
        n_val = max(1, int(len(fs) * config.val_fraction))
        if len(fs) - n_val < 2:
            raise ValueError("dataset too small to split into train/val")
        n_robots = len(fs[0].gt)
        train_ids += [
            (d, f, o) for f in range(1, len(fs) - n_val) for o in range(n_robots)
        ]
        val_ids += [(d, f) for f in range(len(fs) - n_val, len(fs))]

    adam = AdamState()
    metrics: list[dict] = []
    skipped = 0
    best_f1 = -1.0
    lm_settings = pgo.LMSettings(
        unroll_depth=config.unroll_depth, max_iters=max(1, config.unroll_depth)
    )

    def run_epoch(epoch: int, phase: int) -> None:
        nonlocal skipped, best_f1
        pool = train_ids
        order = rng.permutation(len(pool))
        sums = {"loss_match": 0.0, "loss_ml": 0.0, "loss_pose": 0.0, "total": 0.0}
        n_done = 0
        batch: list[TrainSample] = []

        def flush(batch):
            nonlocal n_done
            if not batch:
                return
            with T.Tape() as tape:
                mn.watch_params(tape, params)
                acc = T.constant(0.0)
                for s in batch:
                    lm_, lml_, lp_, _ = sample_losses(
                        s, params, net_cfg, config.weights, phase == 2, pgo_cfg, lm_settings
                    )
                    acc = T.add(acc, total_loss(lm_, lml_, lp_, config.weights))
                    sums["loss_match"] += float(lm_.data)
                    sums["loss_ml"] += float(lml_.data)
                    sums["loss_pose"] += float(lp_.data)
                    sums["total"] += float(
                        total_loss(lm_, lml_, lp_, config.weights).data
                    )
                acc = T.mul(acc, T.constant(1.0 / len(batch)))
                names = sorted(params)
                grads = tape.backward(acc, [params[n] for n in names])
            adam_step(
                params, dict(zip(names, grads)), adam, config.lr, config.weight_decay
            )
            n_done += len(batch)

        for idx in order:
            if n_done + len(batch) >= config.samples_per_epoch:
                break
            d, f, o = pool[idx]
            noise = config.prior_noise * rng.uniform(config.prior_noise_min_frac, 1.0)
            s = build_sample(datasets[d], f, o, rng, noise)
            if s is None:
                skipped += 1
                continue
            batch.append(s)
            if len(batch) == config.batch_size:
                flush(batch)
                batch = []
        flush(batch)

        prec, rec, f1 = _val_matching(datasets, val_ids, params, net_cfg, rng, config)
        val_rpe = _val_rpe(datasets, val_ids, params, net_cfg, rng, config, pgo_cfg)
        denom = max(n_done, 1)
        row = {
            "epoch": epoch,
            "phase": phase,
            "loss_match": sums["loss_match"] / denom,
            "loss_ml": sums["loss_ml"] / denom,
            "loss_pose": sums["loss_pose"] / denom,
            "total": sums["total"] / denom,
            "val_precision": prec,
            "val_recall": rec,
            "val_f1": f1,
            "val_rpe": val_rpe,
        }
        metrics.append(row)
        if checkpoint_path is not None:
            if f1 > best_f1:
                mn.save_checkpoint(str(checkpoint_path) + ".best", params, net_cfg)
            if epoch % config.checkpoint_every == 0:
                mn.save_checkpoint(f"{checkpoint_path}.epoch{epoch}", params, net_cfg)
        best_f1 = max(best_f1, f1)

    epoch = 0
    for _ in range(config.pretrain_epochs):
        run_epoch(epoch, phase=1)
        epoch += 1
    for _ in range(config.epochs):
        run_epoch(epoch, phase=2)
        epoch += 1

    if metrics_path is not None:
        write_metrics_csv(metrics_path, metrics)
    if checkpoint_path is not None:
        mn.save_checkpoint(checkpoint_path, params, net_cfg)
    return TrainOutput(
        params=params, metrics=metrics, best_val_f1=best_f1, skipped_samples=skipped
    )


def _val_matching(datasets, val_ids, params, net_cfg, rng, config):
    tp = fp = fn = 0
    stride = max(1, len(val_ids) // 30)
    for d, f in val_ids[::stride]:
        for obs in range(len(datasets[d][0].gt)):
            s = build_sample(datasets[d], f, obs, rng, config.prior_noise)
            if s is None:
                continue
            inp = mn.MatchInput(prior_pos=s.prior_pos, det=s.det, ranges=s.ranges)
            result, _ = mn.forward(inp, params, net_cfg)
            predicted = {(k, int(j)) for k, j in enumerate(result.assignment) if j >= 0}
            truth = set(s.gt_pairs)
            tp += len(predicted & truth)
            fp += len(predicted - truth)
            fn += len(truth - predicted)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return prec, rec, f1


def _val_rpe(datasets, val_ids, params, net_cfg, rng, config, pgo_cfg):
    """Quick per-sample solve against ground truth on the validation frames."""
    errs = []
    settings = pgo.LMSettings(max_iters=10)
    for d, f in val_ids[:: max(1, len(val_ids) // 5)]:
        for obs in range(min(len(datasets[d][0].gt), 2)):
            s = build_sample(datasets[d], f, obs, rng, config.prior_noise)
            if s is None:
                continue
            inp = mn.MatchInput(prior_pos=s.prior_pos, det=s.det, ranges=s.ranges)
            result, art = mn.forward(inp, params, net_cfg)
            graph = _eval_graph(s, result, pgo_cfg)
            res = pgo.lm_solve(graph, settings)
            for k, j in enumerate(s.others):
                errs.append(np.linalg.norm(res.state[int(j)].t - s.gt_rel[k].t) ** 2)
    return float(np.sqrt(np.mean(errs))) if errs else float("nan")


def _eval_graph(sample: TrainSample, result: mn.MatchResult, pgo_cfg) -> pgo.FactorGraph:
    priors = {int(j): sample.prior_pose[k] for k, j in enumerate(sample.others)}
    pv = np.full(3, max(sample.prior_noise**2, 1e-6))
    prior_var = {int(j): pv for j in sample.others}
    mutual = []
    for k, j in enumerate(sample.others):
        if result.assignment[k] >= 0:
            mutual.append((sample.observer, int(j), result.t_hat[k], result.var[k]))
    return pgo.build_graph(
        ref=sample.observer,
        priors=priors,
        uwb=sample.uwb,
        cfg=pgo_cfg,
        prior_var=prior_var,
        mutual=mutual,
    )


def write_metrics_csv(path, metrics: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in metrics:
            writer.writerow({k: row[k] for k in METRIC_COLUMNS})
