"""Graph-match front-end: data association between identity-aware priors
and anonymous detection bearings, plus relative-position / covariance heads.

Pipeline per observer and frame:

1. encode prior bearings and detection bearings with a shared MLP
2. L rounds of self-attention (within each set) and cross-attention
   (between sets), residual at every stage
3. pairwise dot-product scores, augmented with a learned dustbin row and
   column for occluded/out-of-view robots and fake detections
4. log-domain Sinkhorn normalization to fixed marginals, then
   mutual-consent match extraction with a probability threshold
5. for every matched robot with a usable range: a concatenated feature
   (range-scaled bearing, prior position, its score row, a match-variance
   scalar) feeds two MLP heads for position and log-variance

Unmatched robots keep their prior position with a large fixed covariance.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T

CHECKPOINT_META_SUFFIX = ".meta.json"


@dataclass(frozen=True)
class MatchNetConfig:
    dim: int = 64
    layers: int = 4
    max_det: int = 20
    sinkhorn_iters: int = 100
    match_threshold: float = 0.2
    var_min: float = 1e-4
    var_max: float = 25.0
    var_unmatched: float = 4.0

    @property
    def feature_dim(self) -> int:
        # range-scaled bearing (3) + prior position (3) + padded score row
        # (max_det + 1) + match variance (1)
        return self.max_det + 8


@dataclass
class MatchInput:
    """One observer's view: priors for the other robots plus raw detections.

    prior_pos: (N, 3) relative positions in the observer frame.
    det: (m, 3) unit detection bearings, m <= max_det.
    ranges: (N,) measured distances aligned with priors; nan when absent.
    """

    prior_pos: np.ndarray
    det: np.ndarray
    ranges: np.ndarray


@dataclass
class MatchResult:
    """assignment[i] is the detection index matched to prior i, or -1."""

    assignment: np.ndarray
    probs: np.ndarray
    t_hat: np.ndarray
    var: np.ndarray


@dataclass
class ForwardArtifacts:
    """Tape tensors a training step needs beyond the plain MatchResult."""

    p_log: T.Tensor | None  # (N+1, m+1) post-Sinkhorn log-probabilities
    matched: np.ndarray  # prior indices that got a usable match
    matched_det: np.ndarray  # their detection indices
    t_hat: T.Tensor | None  # (K, 3)
    logvar: T.Tensor | None  # (K, 3) clamped log-variances


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(cfg: MatchNetConfig, seed: int = 0) -> dict[str, T.Tensor]:
    rng = np.random.default_rng(seed)
    d = cfg.dim
    p: dict[str, np.ndarray] = {}

    p["enc.w0"] = _xavier(rng, 3, d)
    p["enc.b0"] = np.zeros(d)
    p["enc.w1"] = _xavier(rng, d, d)
    p["enc.b1"] = np.zeros(d)

    for layer in range(cfg.layers):
        for role in ("self", "cross"):
            base = f"gnn{layer}.{role}"
            for proj in ("q", "k", "v"):
                p[f"{base}.w{proj}"] = _xavier(rng, d, d)
                p[f"{base}.b{proj}"] = np.zeros(d)
            p[f"{base}.mlp.w0"] = _xavier(rng, 2 * d, 2 * d)
            p[f"{base}.mlp.b0"] = np.zeros(2 * d)
            p[f"{base}.mlp.w1"] = _xavier(rng, 2 * d, d)
            p[f"{base}.mlp.b1"] = np.zeros(d)

    p["dustbin.z"] = np.asarray(1.0)

    f = cfg.feature_dim
    p["pos.w0"] = _xavier(rng, f, d)
    p["pos.b0"] = np.zeros(d)
    p["pos.w1"] = _xavier(rng, d, 3)
    p["pos.b1"] = np.zeros(3)
    p["cov.w0"] = _xavier(rng, f, d)
    p["cov.b0"] = np.zeros(d)
    p["cov.w1"] = _xavier(rng, d, 3)
    p["cov.b1"] = np.zeros(3)

    return {name: T.Tensor(arr, name=name) for name, arr in p.items()}


def watch_params(tape: T.Tape, params: dict[str, T.Tensor]) -> None:
    for t in params.values():
        tape.watch(t)


def _mlp2(x, params, prefix: str):
    h = T.relu(T.add(T.matmul(x, params[f"{prefix}.w0"]), params[f"{prefix}.b0"]))
    return T.add(T.matmul(h, params[f"{prefix}.w1"]), params[f"{prefix}.b1"])


def encode(bearings, params) -> T.Tensor:
    """Shared bearing encoder: (n, 3) unit bearings -> (n, dim) embeddings."""
    return _mlp2(T.astensor(bearings), params, "enc")


def _attention(x_query: T.Tensor, x_kv: T.Tensor, params, base: str, dim: int) -> T.Tensor:
    if x_kv.data.shape[0] == 0:
        return T.constant(np.zeros((x_query.data.shape[0], dim)))
    q = T.add(T.matmul(x_query, params[f"{base}.wq"]), params[f"{base}.bq"])
    k = T.add(T.matmul(x_kv, params[f"{base}.wk"]), params[f"{base}.bk"])
    v = T.add(T.matmul(x_kv, params[f"{base}.wv"]), params[f"{base}.bv"])
    logits = T.mul(T.matmul(q, T.transpose(k)), T.constant(1.0 / np.sqrt(dim)))
    return T.matmul(T.softmax(logits, axis=1), v)


def gnn_forward(prior_emb, det_emb, params, cfg: MatchNetConfig):
    """Alternate self/cross attention rounds with residuals at each stage."""
    fp, fd = T.astensor(prior_emb), T.astensor(det_emb)
    has_det = fd.data.shape[0] > 0
    for layer in range(cfg.layers):
        base = f"gnn{layer}.self"
        mp = _attention(fp, fp, params, base, cfg.dim)
        fp = T.add(fp, _mlp2(T.concat([fp, mp], axis=1), params, f"{base}.mlp"))
        if has_det:
            md = _attention(fd, fd, params, base, cfg.dim)
            fd = T.add(fd, _mlp2(T.concat([fd, md], axis=1), params, f"{base}.mlp"))

        base = f"gnn{layer}.cross"
        mp = _attention(fp, fd, params, base, cfg.dim)
        new_fp = T.add(fp, _mlp2(T.concat([fp, mp], axis=1), params, f"{base}.mlp"))
        if has_det:
            md = _attention(fd, fp, params, base, cfg.dim)
            fd = T.add(fd, _mlp2(T.concat([fd, md], axis=1), params, f"{base}.mlp"))
        fp = new_fp
    return fp, fd


def score(prior_feat, det_feat, params, cfg: MatchNetConfig) -> T.Tensor:
    """Scaled dot-product scores augmented with the dustbin row/column."""
    n = prior_feat.data.shape[0]
    m = det_feat.data.shape[0]
    z = T.reshape(params["dustbin.z"], (1, 1))
    s = T.mul(
        T.matmul(prior_feat, T.transpose(det_feat)), T.constant(1.0 / np.sqrt(cfg.dim))
    )
    zcol = T.mul(T.constant(np.ones((n, 1))), z)
    zrow = T.mul(T.constant(np.ones((1, m + 1))), z)
    return T.concat([T.concat([s, zcol], axis=1), zrow], axis=0)


def sinkhorn_marginals(n: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column mass targets: 1 per real node, the set size per dustbin."""
    log_mu = np.concatenate([np.zeros(n), [np.log(m)]])
    log_nu = np.concatenate([np.zeros(m), [np.log(n)]])
    return log_mu, log_nu


def sinkhorn(scores_aug, iters: int) -> T.Tensor:
    """Log-domain Sinkhorn on an augmented (N+1, m+1) score matrix."""
    n = scores_aug.data.shape[0] - 1
    m = scores_aug.data.shape[1] - 1
    log_mu, log_nu = sinkhorn_marginals(n, m)
    return T.sinkhorn_log(scores_aug, log_mu, log_nu, iters)


def extract_matches(p_log: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Mutual-consent matches over the non-dustbin block.

    Pair (i, j) survives iff j is the argmax of row i, i is the argmax of
    column j (ties break to the lowest index via argmax), and the
    probability clears the threshold. The result is injective by
    construction.
    """
    probs = np.exp(p_log)
    n, m = probs.shape[0] - 1, probs.shape[1] - 1
    assignment = np.full(n, -1, dtype=np.int64)
    strength = np.zeros(n)
    if m == 0:
        return assignment, strength
    core = probs[:n, :m]
    row_best = core.argmax(axis=1)
    col_best = core.argmax(axis=0)
    for i in range(n):
        j = row_best[i]
        if col_best[j] == i and core[i, j] >= threshold:
            assignment[i] = j
            strength[i] = core[i, j]
    return assignment, strength


def forward(
    inp: MatchInput, params: dict[str, T.Tensor], cfg: MatchNetConfig
) -> tuple[MatchResult, ForwardArtifacts]:
    """Full front-end pass for one observer.

    Works identically with or without an active tape; the returned
    artifacts carry the tensors a training loss needs.
    """
    n = inp.prior_pos.shape[0]
    m = inp.det.shape[0]
    if n < 1:
        raise ValueError("need at least one prior")
    if m > cfg.max_det:
        raise ValueError(f"{m} detections exceed the configured maximum {cfg.max_det}")

    prior_pos = np.asarray(inp.prior_pos, dtype=np.float64)
    norms = np.linalg.norm(prior_pos, axis=1)
    safe = np.where(norms < 1e-9, 1.0, norms)
    prior_bearings = prior_pos / safe[:, None]

    unmatched = MatchResult(
        assignment=np.full(n, -1, dtype=np.int64),
        probs=np.zeros(n),
        t_hat=prior_pos.copy(),
        var=np.full((n, 3), cfg.var_unmatched),
    )
    if m == 0:
        return unmatched, ForwardArtifacts(
            p_log=None,
            matched=np.zeros(0, dtype=np.int64),
            matched_det=np.zeros(0, dtype=np.int64),
            t_hat=None,
            logvar=None,
        )

    f_priors = encode(T.constant(prior_bearings), params)
    f_dets = encode(T.constant(inp.det), params)
    f_priors, f_dets = gnn_forward(f_priors, f_dets, params, cfg)
    p_log = sinkhorn(score(f_priors, f_dets, params, cfg), cfg.sinkhorn_iters)

    assignment, strength = extract_matches(p_log.data, cfg.match_threshold)
    usable = assignment >= 0
    usable &= np.isfinite(inp.ranges)  # no range -> position falls back to prior
    rows = np.nonzero(usable)[0]
    cols = assignment[rows]

    result = MatchResult(
        assignment=np.where(usable, assignment, -1),
        probs=np.where(usable, strength, 0.0),
        t_hat=prior_pos.copy(),
        var=np.full((n, 3), cfg.var_unmatched),
    )
    if len(rows) == 0:
        return result, ForwardArtifacts(
            p_log=p_log,
            matched=rows,
            matched_det=np.zeros(0, dtype=np.int64),
            t_hat=None,
            logvar=None,
        )

    probs_t = T.exp(p_log)
    s_rows = T.take_rows(probs_t, rows)
    core_part = T.narrow(s_rows, (slice(None), slice(0, m)))
    bin_part = T.narrow(s_rows, (slice(None), slice(m, m + 1)))
    pad = T.constant(np.zeros((len(rows), cfg.max_det - m)))
    padded_scores = T.concat([core_part, pad, bin_part], axis=1)

    p_sel = T.take_at(probs_t, rows, cols)
    match_var = T.reshape(T.sub(T.constant(1.0), p_sel), (len(rows), 1))

    vr_pos = T.constant(inp.ranges[rows, None] * inp.det[cols])
    prior_sel = T.constant(prior_pos[rows])
    feat = T.concat([vr_pos, prior_sel, padded_scores, match_var], axis=1)

    t_hat = T.add(_mlp2(feat, params, "pos"), vr_pos)
    logvar = T.clip(
        _mlp2(feat, params, "cov"), np.log(cfg.var_min), np.log(cfg.var_max)
    )

    result.t_hat[rows] = t_hat.data
    result.var[rows] = np.exp(logvar.data)
    return result, ForwardArtifacts(
        p_log=p_log, matched=rows, matched_det=cols, t_hat=t_hat, logvar=logvar
    )


def predict_heads(feat, params, cfg: MatchNetConfig, vr_pos):
    """Position/covariance heads on an already-built feature matrix."""
    t_hat = T.add(_mlp2(feat, params, "pos"), T.astensor(vr_pos))
    logvar = T.clip(_mlp2(feat, params, "cov"), np.log(cfg.var_min), np.log(cfg.var_max))
    return t_hat, T.exp(logvar)


def save_checkpoint(path, params: dict[str, T.Tensor], cfg: MatchNetConfig) -> None:
    T.save_params(path, params)
    with open(str(path) + CHECKPOINT_META_SUFFIX, "w") as fh:
        json.dump({"format": T.CHECKPOINT_FORMAT, "net": asdict(cfg)}, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[dict[str, T.Tensor], MatchNetConfig]:
    params = T.load_params(path)
    with open(str(path) + CHECKPOINT_META_SUFFIX) as fh:
        meta = json.load(fh)
    return params, MatchNetConfig(**meta["net"])
