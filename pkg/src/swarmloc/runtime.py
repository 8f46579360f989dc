"""Decentralized execution: one node per robot, a simulated message bus.

Each node sees only its own sensors (its detections, its range row, its
odometry increment) and whatever arrives on the bus. A node's message
payload carries exactly two things — its odometry increment and its
latest optimized relative poses — nothing else, which keeps the
communication load constant in the detection count.

Rounds are synchronous: at frame f every node first emits its message
(odometry of frame f plus the poses optimized at f-1), the bus delivers
whatever is due (latency is measured in frames, zero means same-frame
delivery), and then every node processes its view + inbox: propagate
priors, fuse received estimates into them by inverse variance, run the
matcher and the pose-graph solve in its own frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import eval as ev
from . import matchnet as mn
from . import pgo
from .geom import Pose, compose, inverse, relative
from .sim import SwarmFrame

PAYLOAD_KEYS = ("pvo", "poses")


@dataclass(frozen=True)
class BusConfig:
    latency: int = 0
    drop: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.latency < 0:
            raise ValueError("latency must be >= 0")
        if not (0.0 <= self.drop < 1.0):
            raise ValueError("drop must be in [0, 1)")


@dataclass(frozen=True)
class RuntimeConfig:
    msg_var: float = 0.09  # variance of a received pose estimate (per axis)
    post_var: float = 0.02  # prior variance right after an own matched solve
    grow_var: float = 0.02  # per-frame prior variance growth
    grow_var_stale: float = 0.08  # extra growth when the neighbour pvo is missing
    var_cap: float = 4.0
    fuse_messages: bool = True
    # fuse a received estimate into the prior only when the own prior is
    # worse than the candidate; received estimates are correlated with our
    # own broadcasts, so healthy tracks must not absorb gossip
    fuse_gate: float = 1.0
    # received optimized poses also enter the node's graph as mutual-state
    # constraint edges (observer = sender), which is what binds neighbour
    # rotations and rescues robots this node cannot see
    estimate_factors: bool = True


@dataclass
class BusMessage:
    sender: int
    frame: int
    payload: dict  # exactly {"pvo": Pose, "poses": {robot_id: Pose}}


@dataclass
class FrameView:
    """One robot's own sensor slice of a frame; carries no other robot's data."""

    frame: int
    t: float
    robot: int
    n_robots: int
    pvo: Pose
    uwb_row: np.ndarray
    det: np.ndarray


@dataclass
class NodeState:
    robot: int
    n_robots: int
    priors: dict[int, Pose]  # neighbours in own frame; own pose is identity
    prior_var: dict[int, float]
    last_opt: dict[int, Pose] = field(default_factory=dict)
    last_result: mn.MatchResult | None = None


def make_frame_view(frame: SwarmFrame, frame_idx: int, robot: int) -> FrameView:
    return FrameView(
        frame=frame_idx,
        t=frame.t,
        robot=robot,
        n_robots=len(frame.gt),
        pvo=frame.pvo[robot],
        uwb_row=frame.uwb[robot].copy(),
        det=frame.det[robot].copy(),
    )


def init_node(robot: int, n_robots: int, initial_priors: dict[int, Pose]) -> NodeState:
    return NodeState(
        robot=robot,
        n_robots=n_robots,
        priors=dict(initial_priors),
        prior_var={j: 0.01 for j in initial_priors},
        last_opt=dict(initial_priors),
    )


def emit_message(state: NodeState, view: FrameView) -> BusMessage:
    """The one message a node sends per frame, built before processing."""
    return BusMessage(
        sender=state.robot,
        frame=view.frame,
        payload={"pvo": view.pvo, "poses": dict(state.last_opt)},
    )


def message_bytes(msg: BusMessage) -> int:
    obj = {
        "pvo": {"q": msg.payload["pvo"].q.tolist(), "t": msg.payload["pvo"].t.tolist()},
        "poses": {
            str(k): {"q": p.q.tolist(), "t": p.t.tolist()}
            for k, p in sorted(msg.payload["poses"].items())
        },
    }
    return len(json.dumps(obj, sort_keys=True).encode())


class Bus:
    """Broadcast bus with per-link i.i.d. drops and frame-granular latency."""

    def __init__(self, config: BusConfig, n_robots: int):
        self.config = config
        self.n_robots = n_robots
        self.rng = np.random.default_rng((config.seed, 2))
        self._queue: dict[int, dict[int, list[BusMessage]]] = {}

    def send(self, messages: list[BusMessage]) -> None:
        for msg in sorted(messages, key=lambda m: m.sender):
            due = msg.frame + self.config.latency
            slot = self._queue.setdefault(due, {i: [] for i in range(self.n_robots)})
            for recipient in range(self.n_robots):
                if recipient == msg.sender:
                    continue
                if self.rng.uniform() < self.config.drop:
                    continue
                slot[recipient].append(msg)

    def deliver(self, frame: int) -> dict[int, list[BusMessage]]:
        slot = self._queue.pop(frame, None)
        if slot is None:
            return {i: [] for i in range(self.n_robots)}
        return {
            i: sorted(msgs, key=lambda m: (m.sender, m.frame)) for i, msgs in slot.items()
        }


def bus_deliver(
    messages: list[BusMessage],
    config: BusConfig,
    rng: np.random.Generator,
    n_robots: int | None = None,
) -> dict[int, list[BusMessage]]:
    """One-shot routing of a message batch (drops applied per link)."""
    if n_robots is None:
        n_robots = 1 + max(
            max((m.sender for m in messages), default=0),
            max((max(m.payload["poses"], default=0) for m in messages), default=0),
        )
    inboxes: dict[int, list[BusMessage]] = {i: [] for i in range(n_robots)}
    for msg in sorted(messages, key=lambda m: (m.sender, m.frame)):
        for i in range(n_robots):
            if i == msg.sender:
                continue
            if rng.uniform() < config.drop:
                continue
            inboxes[i].append(msg)
    return inboxes


# ---------------------------------------------------------------------------
# the node update
# ---------------------------------------------------------------------------


def node_step(
    state: NodeState,
    view: FrameView,
    inbox: list[BusMessage],
    net=None,
    eval_cfg: ev.EvalConfig = ev.EvalConfig(),
    rt_cfg: RuntimeConfig = RuntimeConfig(),
) -> tuple[NodeState, BusMessage]:
    """One synchronous round for one node.

    The outbox reflects the pre-step state (odometry of this frame plus the
    poses optimized last frame), matching what the lockstep runtime sends
    before any node processes.
    """
    outbox = emit_message(state, view)

    neighbour_pvo = {m.sender: m.payload["pvo"] for m in inbox}
    priors: dict[int, Pose] = {}
    prior_var: dict[int, float] = {}
    inv_own = inverse(view.pvo)
    for j, prev in state.priors.items():
        moved = compose(inv_own, prev)
        var = state.prior_var[j] + rt_cfg.grow_var
        if j in neighbour_pvo:
            moved = compose(moved, neighbour_pvo[j])
        else:
            var += rt_cfg.grow_var_stale
        priors[j] = moved
        prior_var[j] = min(var, rt_cfg.var_cap)

    if rt_cfg.fuse_messages:
        priors, prior_var = _fuse_estimates(
            state.robot, view.pvo, priors, prior_var, inbox, rt_cfg
        )

    others = sorted(priors.keys())
    ranges = view.uwb_row[others]
    result = None
    if len(view.det) > 0 and np.any(np.isfinite(ranges)):
        prior_pos = np.stack([priors[j].t for j in others])
        if net is not None:
            params, net_cfg = net
            inp = mn.MatchInput(prior_pos=prior_pos, det=view.det, ranges=ranges)
            result, _ = mn.forward(inp, params, net_cfg)
        else:
            result = ev.simple_match(prior_pos, view.det, ranges, eval_cfg.simple)

    uwb_for_node = np.full((view.n_robots, view.n_robots), np.nan)
    uwb_for_node[state.robot, :] = view.uwb_row
    uwb_for_node[:, state.robot] = view.uwb_row
    # prior factors carry the tracked propagated variance; the front-end
    # covariance weights the mutual factors
    pv = {j: np.full(3, max(prior_var[j], 1e-4)) for j in others}
    mutual = []
    if result is not None:
        for idx, j in enumerate(others):
            if result.assignment[idx] >= 0:
                mutual.append((state.robot, j, result.t_hat[idx], result.var[idx]))
    if rt_cfg.estimate_factors:
        mutual += _estimate_factors(state.robot, view.pvo, inbox, rt_cfg)
    graph = pgo.build_graph(
        ref=state.robot,
        priors=priors,
        uwb=uwb_for_node,
        cfg=eval_cfg.pgo,
        prior_var=pv,
        mutual=mutual,
    )
    solved = pgo.lm_solve(graph, eval_cfg.lm)
    new_poses = {j: solved.state[j] for j in others}

    new_var = {}
    matched = set()
    if result is not None:
        matched = {others[idx] for idx, a in enumerate(result.assignment) if a >= 0}
    for j in others:
        new_var[j] = rt_cfg.post_var if j in matched else prior_var[j]

    new_state = NodeState(
        robot=state.robot,
        n_robots=state.n_robots,
        priors=new_poses,
        prior_var=new_var,
        last_opt=dict(new_poses),
        last_result=result,
    )
    return new_state, outbox


def _estimate_factors(me, own_pvo, inbox, rt_cfg: RuntimeConfig):
    """Received optimized poses as mutual-state constraint edges.

    A sender j's estimate of robot i (one frame old, advanced by the
    carried odometry) constrains this node's variables j and i exactly like
    a position measurement taken by observer j; the i == me entries pin the
    sender itself since our own pose is the fixed reference.
    """
    pvo_of = {m.sender: m.payload["pvo"] for m in inbox}
    pvo_of[me] = own_pvo
    var = np.full(3, rt_cfg.msg_var)
    stale_var = np.full(3, rt_cfg.msg_var + rt_cfg.grow_var_stale)
    factors = []
    for msg in inbox:
        j = msg.sender
        inv_dj = inverse(pvo_of[j])
        for i, pose_i_in_j in msg.payload["poses"].items():
            if i in pvo_of:
                advanced = compose(inv_dj, compose(pose_i_in_j, pvo_of[i]))
                v = var
            else:
                advanced = compose(inv_dj, pose_i_in_j)
                v = stale_var
            factors.append((j, i, advanced.t, v))
    return factors


def _fuse_estimates(me, own_pvo, priors, prior_var, inbox, rt_cfg: RuntimeConfig):
    """Inverse-variance fusion of received pose estimates into the priors.

    Received poses were optimized one frame back; each is advanced by the
    odometry increments the bus carried (sender's always, target's when its
    own message also arrived) before fusing.
    """
    pvo_of = {m.sender: m.payload["pvo"] for m in inbox}
    pvo_of[me] = own_pvo
    candidates: dict[int, list[tuple[Pose, float]]] = {}
    for msg in inbox:
        j = msg.sender
        if j not in priors:
            continue
        inv_dj = inverse(pvo_of[j])
        sender_pose_var = prior_var[j] + rt_cfg.msg_var
        for i, pose_i_in_j in msg.payload["poses"].items():
            var = rt_cfg.msg_var if i == me else sender_pose_var
            if i in pvo_of:
                advanced = compose(inv_dj, compose(pose_i_in_j, pvo_of[i]))
            else:
                advanced = compose(inv_dj, pose_i_in_j)
                var += rt_cfg.grow_var_stale
            if i == me:
                # the sender's estimate of me, inverted, locates the sender
                candidates.setdefault(j, []).append((inverse(advanced), var))
            elif i in priors:
                candidates.setdefault(i, []).append((compose(priors[j], advanced), var))
    fused_priors = dict(priors)
    fused_var = dict(prior_var)
    for i, cands in candidates.items():
        best_var = min(v for _, v in cands)
        if fused_var[i] <= rt_cfg.fuse_gate * best_var:
            continue  # own track is at least as good; gossip adds nothing safe
        poses = [(fused_priors[i], fused_var[i])] + cands
        weights = np.array([1.0 / v for _, v in poses])
        weights /= weights.sum()
        t = sum(w * p.t for w, (p, _) in zip(weights, poses))
        q_ref = poses[0][0].q
        q_acc = np.zeros(4)
        for w, (p, _) in zip(weights, poses):
            q = p.q if float(p.q @ q_ref) >= 0 else -p.q
            q_acc += w * q
        fused_priors[i] = Pose(q=q_acc, t=t)
        # conservative (covariance-intersection-like): sources are correlated,
        # so confidence never drops below the best single one
        fused_var[i] = min(fused_var[i], best_var)
    return fused_priors, fused_var


# ---------------------------------------------------------------------------
# the lockstep runtime
# ---------------------------------------------------------------------------


@dataclass
class DecentralizedRun:
    reports: list[ev.EvalReport]  # one per node, errors in that node's frame
    combined_rpe: float
    message_log: list[dict]  # frame, robot, msgs_sent, bytes
    est_t: np.ndarray  # (F, n, n, 3); row k = node k's estimates


def run_decentralized(
    frames: list[SwarmFrame],
    net=None,
    bus_config: BusConfig = BusConfig(),
    eval_cfg: ev.EvalConfig = ev.EvalConfig(),
    rt_cfg: RuntimeConfig = RuntimeConfig(),
) -> DecentralizedRun:
    n = len(frames[0].gt)
    n_frames = len(frames)
    bus = Bus(bus_config, n)
    nodes = [
        init_node(
            k, n, {j: relative(frames[0].gt[k], frames[0].gt[j]) for j in range(n) if j != k}
        )
        for k in range(n)
    ]

    est_t = np.full((n_frames, n, n, 3), np.nan)
    gt_t = np.full((n_frames, n, n, 3), np.nan)
    message_log = []
    for f in range(n_frames):
        for k in range(n):
            for j in range(n):
                if j != k:
                    gt_t[f, k, j] = relative(frames[f].gt[k], frames[f].gt[j]).t

    for f in range(1, n_frames):
        views = [make_frame_view(frames[f], f, k) for k in range(n)]
        outgoing = [emit_message(nodes[k], views[k]) for k in range(n)]
        bus.send(outgoing)
        inboxes = bus.deliver(f)
        for k in range(n):
            nodes[k], _ = node_step(
                nodes[k], views[k], inboxes[k], net=net, eval_cfg=eval_cfg, rt_cfg=rt_cfg
            )
            message_log.append(
                {
                    "frame": f,
                    "robot": k,
                    "msgs_sent": 1,
                    "bytes": message_bytes(outgoing[k]),
                }
            )
            for j, p in nodes[k].priors.items():
                est_t[f, k, j] = p.t

    reports = []
    for k in range(n):
        mask = np.full_like(est_t, np.nan)
        mask[:, k] = est_t[:, k]
        total, per_pair, per_frame = ev.rpe_rmse(mask[1:], gt_t[1:])
        reports.append(
            ev.EvalReport(
                method=f"decentralized/node{k}",
                n_frames=n_frames,
                n_robots=n,
                rpe_rmse=total,
                rpe_per_pair=per_pair,
                frame_rpe=np.concatenate([[np.nan], per_frame]),
                precision=0.0,
                recall=0.0,
                f1=0.0,
            )
        )
    combined, _, _ = ev.rpe_rmse(est_t[1:], gt_t[1:])
    return DecentralizedRun(
        reports=reports, combined_rpe=combined, message_log=message_log, est_t=est_t
    )


def write_message_log(path, log: list[dict]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["frame", "robot", "msgs_sent", "bytes"])
        writer.writeheader()
        for row in log:
            writer.writerow(row)
