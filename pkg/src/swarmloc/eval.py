"""Baselines, the sequential evaluation pipeline, and metrics.

Methods:

- ``pvo``          dead-reckoned priors only (odometry divergence baseline)
- ``simple``       nearest-bearing greedy matcher, no back-end
- ``simple+pgo``   the same front-end fused by the pose graph
- ``learned``      graph-match network front-end, no back-end
- ``learned+pgo``  the full system

Evaluation is sequential: priors propagate by odometry from the previous
frame's estimates, every robot's front-end (if any) produces measurements,
and the back-end (if any) refines them, seeding the next frame.

The +pgo methods share every observer's accepted matches (mutual position
measurements are body-frame quantities, so one measurement set serves all
anchors) and solve one graph per reference robot per frame over that
shared set plus the full range mesh and pose priors. Each robot's
local-frame row therefore benefits from the whole swarm's observations
while staying a function of physical robots only, which keeps metrics
invariant under relabeling. Front-end-only methods keep one independent
chain per reference robot (each row uses only that robot's own
measurements). All error metrics are relative positions expressed in the
observing robot's local frame.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import matchnet as mn
from . import pgo
from .geom import Pose, compose, inverse, relative
from .sim import SwarmFrame

METHODS = ("pvo", "simple", "simple+pgo", "learned", "learned+pgo")


@dataclass(frozen=True)
class SimpleMatchConfig:
    cos_threshold: float = 0.99
    var_base: float = 0.04
    kappa: float = 100.0
    injective: bool = True
    var_unmatched: float = 4.0


@dataclass(frozen=True)
class EvalConfig:
    simple: SimpleMatchConfig = field(default_factory=SimpleMatchConfig)
    pgo: pgo.PgoConfig = field(default_factory=pgo.PgoConfig)
    lm: pgo.LMSettings = field(default_factory=lambda: pgo.LMSettings(max_iters=10))
    references: tuple[int, ...] | None = None  # front-end-only rows; default all
    # prior-factor variance schedule for the global solve: grows while a
    # robot goes unobserved, resets once anyone matches it
    prior_var_init: float = 0.02
    prior_var_growth: float = 0.05
    prior_var_post: float = 0.02
    prior_var_cap: float = 4.0


@dataclass
class EvalReport:
    method: str
    n_frames: int
    n_robots: int
    rpe_rmse: float
    rpe_per_pair: np.ndarray  # (n, n) RMSE per ordered pair, nan diagonal
    frame_rpe: np.ndarray  # (F,) per-frame RMSE over pairs
    precision: float
    recall: float
    f1: float
    matches_true: int = 0
    matches_false: int = 0
    matches_missed: int = 0
    runtime_s: float = 0.0

    def to_dict(self) -> dict:
        # runtime_s stays in memory only: serialized artifacts must be
        # byte-identical across reruns
        return {
            "method": self.method,
            "n_frames": self.n_frames,
            "n_robots": self.n_robots,
            "rpe_rmse": self.rpe_rmse,
            "rpe_per_pair": [
                [None if np.isnan(v) else v for v in row] for row in self.rpe_per_pair
            ],
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "matches_true": self.matches_true,
            "matches_false": self.matches_false,
            "matches_missed": self.matches_missed,
        }

    def save(self, path_prefix) -> None:
        """Write <prefix>.json plus per-frame and per-pair CSVs."""
        with open(f"{path_prefix}.json", "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")
        with open(f"{path_prefix}.frame_rpe.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "rpe"])
            for f, v in enumerate(self.frame_rpe):
                writer.writerow([f, repr(float(v))])
        with open(f"{path_prefix}.pair_rpe.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["i", "j", "rpe"])
            n = self.rpe_per_pair.shape[0]
            for i in range(n):
                for j in range(n):
                    if i != j:
                        writer.writerow([i, j, repr(float(self.rpe_per_pair[i, j]))])


# ---------------------------------------------------------------------------
# Simple Match baseline
# ---------------------------------------------------------------------------


def simple_match(
    prior_pos: np.ndarray,
    det: np.ndarray,
    ranges: np.ndarray,
    cfg: SimpleMatchConfig,
) -> mn.MatchResult:
    """Nearest-direction assignment with a cosine-similarity cutoff.

    Greedy over pairs in descending cosine order, one detection per prior
    (set ``injective=False`` to allow the raw nearest-direction behaviour
    where one detection can claim several priors). Matched positions scale
    the detection bearing by the measured range; the covariance grows
    linearly in (1 - cos).
    """
    n = prior_pos.shape[0]
    m = det.shape[0]
    result = mn.MatchResult(
        assignment=np.full(n, -1, dtype=np.int64),
        probs=np.zeros(n),
        t_hat=np.asarray(prior_pos, dtype=np.float64).copy(),
        var=np.full((n, 3), cfg.var_unmatched),
    )
    if m == 0:
        return result
    norms = np.linalg.norm(prior_pos, axis=1)
    safe = np.where(norms < 1e-9, 1.0, norms)
    bearings = prior_pos / safe[:, None]
    cos = bearings @ det.T

    if cfg.injective:
        order = np.argsort(-cos, axis=None)
        used_rows: set[int] = set()
        used_cols: set[int] = set()
        for flat in order:
            i, j = divmod(int(flat), m)
            if cos[i, j] < cfg.cos_threshold:
                break
            if i in used_rows or j in used_cols:
                continue
            used_rows.add(i)
            used_cols.add(j)
            result.assignment[i] = j
            result.probs[i] = cos[i, j]
    else:
        best = cos.argmax(axis=1)
        for i in range(n):
            if cos[i, best[i]] >= cfg.cos_threshold:
                result.assignment[i] = best[i]
                result.probs[i] = cos[i, best[i]]

    for i in range(n):
        j = result.assignment[i]
        if j < 0:
            continue
        if not np.isfinite(ranges[i]):
            result.assignment[i] = -1
            result.probs[i] = 0.0
            continue
        result.t_hat[i] = ranges[i] * det[j]
        result.var[i] = cfg.var_base * (1.0 + cfg.kappa * (1.0 - result.probs[i]))
    return result


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def match_prf1(n_true: int, n_false: int, n_missed: int) -> tuple[float, float, float]:
    """Precision, recall, F1 from match counts (zero by convention when empty)."""
    precision = n_true / (n_true + n_false) if n_true + n_false else 0.0
    recall = n_true / (n_true + n_missed) if n_true + n_missed else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def rpe_rmse(estimates: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """RMSE of relative-position error over ordered pairs and frames.

    estimates/gt: (F, n, n, 3) with nan where unavailable (diagonal, or
    references not evaluated). Returns (total, per-pair matrix, per-frame).
    """
    diff = estimates - gt
    sq = np.sum(diff * diff, axis=-1)  # (F, n, n), nan propagates
    valid = np.isfinite(sq)
    total = float(np.sqrt(np.mean(sq[valid]))) if valid.any() else float("nan")
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-nan diagonal pairs
        per_pair = np.sqrt(np.nanmean(np.where(valid, sq, np.nan), axis=0))
        per_frame = np.array(
            [
                np.sqrt(np.mean(sq[f][valid[f]])) if valid[f].any() else np.nan
                for f in range(sq.shape[0])
            ]
        )
    return total, per_pair, per_frame


# ---------------------------------------------------------------------------
# sequential pipeline
# ---------------------------------------------------------------------------


def propagate_prior(prev: Pose, delta_obs: Pose, delta_tgt: Pose) -> Pose:
    """Advance a relative pose by both robots' body-frame odometry deltas."""
    return compose(inverse(delta_obs), compose(prev, delta_tgt))


def frontend_for_reference(
    fr: SwarmFrame,
    ref: int,
    priors: dict[int, Pose],
    method: str,
    net,
    eval_cfg: EvalConfig,
) -> mn.MatchResult | None:
    """Front-end measurements for one observer, or None on the bypass path."""
    others = [j for j in range(len(fr.gt)) if j != ref]
    det = fr.det[ref]
    ranges = fr.uwb[ref, others]
    prior_pos = np.stack([priors[j].t for j in others])
    if len(det) == 0 or not np.any(np.isfinite(ranges)):
        return None
    if method.startswith("simple"):
        return simple_match(prior_pos, det, ranges, eval_cfg.simple)
    params, net_cfg = net
    inp = mn.MatchInput(prior_pos=prior_pos, det=det, ranges=ranges)
    result, _ = mn.forward(inp, params, net_cfg)
    return result




def run_pipeline(
    frames: list[SwarmFrame],
    method: str,
    net=None,
    eval_cfg: EvalConfig = EvalConfig(),
    collect_poses: bool = False,
    capture_first_graph: list | None = None,
):
    """Evaluate one method over a dataset.

    Returns an EvalReport; with ``collect_poses`` also returns the raw
    estimated pose arrays (translations and quaternions per reference).
    When ``capture_first_graph`` is a list, the first solved factor graph
    and its result are appended to it (debug/regression dump hook).
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method.startswith("learned") and net is None:
        raise ValueError("learned methods need a trained checkpoint")
    t_start = time.perf_counter()

    n = len(frames[0].gt)
    n_frames = len(frames)
    refs = eval_cfg.references if eval_cfg.references is not None else tuple(range(n))
    use_pgo = method.endswith("+pgo")

    est_t = np.full((n_frames, n, n, 3), np.nan)
    est_q = np.full((n_frames, n, n, 4), np.nan)
    gt_t = np.full((n_frames, n, n, 3), np.nan)
    n_true = n_false = n_missed = 0

    for f in range(n_frames):
        for k in range(n):
            for j in range(n):
                if j != k:
                    gt_t[f, k, j] = relative(frames[f].gt[k], frames[f].gt[j]).t

    if use_pgo:
        # one chain per reference robot in its own frame; all chains share
        # the same per-frame measurement set (body-frame mutual positions
        # from every observer plus the range mesh)
        chains: dict[int, dict[int, Pose]] = {}
        for k in range(n):
            chains[k] = {
                j: relative(frames[0].gt[k], frames[0].gt[j])
                for j in range(n)
                if j != k
            }
        track_var = {j: eval_cfg.prior_var_init for j in range(n)}
        for f in range(1, n_frames):
            fr = frames[f]
            for k in range(n):
                inv_k = inverse(fr.pvo[k])
                chains[k] = {
                    j: compose(inv_k, compose(p, fr.pvo[j]))
                    for j, p in chains[k].items()
                }
            mutual = []
            matched_by_anyone: set[int] = set()
            for i in range(n):
                others = [j for j in range(n) if j != i]
                priors_i = chains[i]
                result = frontend_for_reference(fr, i, priors_i, method, net, eval_cfg)
                if result is None:
                    continue
                n_true, n_false, n_missed = _count_matches(
                    result, fr, i, others, n_true, n_false, n_missed
                )
                for idx, j in enumerate(others):
                    if result.assignment[idx] >= 0:
                        mutual.append((i, j, result.t_hat[idx], result.var[idx]))
                        matched_by_anyone.add(j)
                        matched_by_anyone.add(i)
            track_var = {
                j: min(v + eval_cfg.prior_var_growth, eval_cfg.prior_var_cap)
                for j, v in track_var.items()
            }
            first_solved = None
            for k in range(n):
                graph = pgo.build_graph(
                    ref=k,
                    priors=chains[k],
                    uwb=fr.uwb,
                    cfg=eval_cfg.pgo,
                    prior_var={
                        j: np.full(3, track_var[j]) for j in chains[k]
                    },
                    mutual=mutual,
                )
                solved = pgo.lm_solve(graph, eval_cfg.lm)
                if first_solved is None:
                    first_solved = (graph, solved)
                chains[k] = {j: solved.state[j] for j in chains[k]}
                for j in chains[k]:
                    est_t[f, k, j] = chains[k][j].t
                    est_q[f, k, j] = chains[k][j].q
            if capture_first_graph is not None and not capture_first_graph:
                capture_first_graph.append(first_solved)
            for j in matched_by_anyone:
                track_var[j] = eval_cfg.prior_var_post
    else:
        for ref in refs:
            others = [j for j in range(n) if j != ref]
            priors = {j: relative(frames[0].gt[ref], frames[0].gt[j]) for j in others}
            for f in range(1, n_frames):
                fr = frames[f]
                priors = {
                    j: propagate_prior(p, fr.pvo[ref], fr.pvo[j])
                    for j, p in priors.items()
                }
                result = None
                if method != "pvo":
                    result = frontend_for_reference(
                        fr, ref, priors, method, net, eval_cfg
                    )
                    if result is not None:
                        n_true, n_false, n_missed = _count_matches(
                            result, fr, ref, others, n_true, n_false, n_missed
                        )

                if result is None:
                    new_poses = dict(priors)
                else:
                    new_poses = {}
                    for idx, j in enumerate(others):
                        if result.assignment[idx] >= 0:
                            new_poses[j] = Pose(q=priors[j].q, t=result.t_hat[idx])
                        else:
                            new_poses[j] = priors[j]

                for j in others:
                    est_t[f, ref, j] = new_poses[j].t
                    est_q[f, ref, j] = new_poses[j].q
                priors = new_poses

    total, per_pair, per_frame = rpe_rmse(est_t[1:], gt_t[1:])
    per_frame = np.concatenate([[np.nan], per_frame])
    precision, recall, f1 = match_prf1(n_true, n_false, n_missed)
    report = EvalReport(
        method=method,
        n_frames=n_frames,
        n_robots=n,
        rpe_rmse=total,
        rpe_per_pair=per_pair,
        frame_rpe=per_frame,
        precision=precision,
        recall=recall,
        f1=f1,
        matches_true=n_true,
        matches_false=n_false,
        matches_missed=n_missed,
        runtime_s=time.perf_counter() - t_start,
    )
    if collect_poses:
        return report, est_t, est_q
    return report


def _count_matches(result, fr, ref, others, n_true, n_false, n_missed):
    truth = {
        (others.index(int(src)), det_idx)
        for det_idx, src in enumerate(fr.det_src[ref])
        if src >= 0
    }
    predicted = {
        (idx, int(j)) for idx, j in enumerate(result.assignment) if j >= 0
    }
    n_true += len(predicted & truth)
    n_false += len(predicted - truth)
    n_missed += len(truth - predicted)
    return n_true, n_false, n_missed


def pvo_baseline(frames: list[SwarmFrame], eval_cfg: EvalConfig = EvalConfig()):
    """Dead-reckoned relative poses; the divergence baseline."""
    return run_pipeline(frames, "pvo", eval_cfg=eval_cfg)
