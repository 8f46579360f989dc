import numpy as np

from swarmloc import matchnet as mn
from swarmloc import tensor as T


def identity_matcher_params(cfg: mn.MatchNetConfig, seed: int = 0, scale: float = 40.0):
    """Parameters that make matching analytically forced.

    Encoder embeds each bearing as scale * b in the first three channels
    (split positive/negative through the ReLU so it is exact); GNN layers
    are zeroed so residual connections pass embeddings through unchanged.
    Scores become (scale^2 / sqrt(D)) * cos(angle), so an exact
    bearing-equality pair always wins by a wide margin, and the dustbin
    sits halfway down. Heads keep their random initialization.
    """
    params = mn.init_params(cfg, seed=seed)
    d = cfg.dim
    w0 = np.zeros((3, d))
    w0[:, 0:3] = scale * np.eye(3)
    w0[:, 3:6] = -scale * np.eye(3)
    w1 = np.zeros((d, d))
    w1[0:3, 0:3] = np.eye(3)
    w1[3:6, 0:3] = -np.eye(3)
    params["enc.w0"] = T.Tensor(w0, name="enc.w0")
    params["enc.b0"] = T.Tensor(np.zeros(d), name="enc.b0")
    params["enc.w1"] = T.Tensor(w1, name="enc.w1")
    params["enc.b1"] = T.Tensor(np.zeros(d), name="enc.b1")
    for name, t in list(params.items()):
        if name.startswith("gnn"):
            params[name] = T.Tensor(np.zeros_like(t.data), name=name)
    true_pair_score = scale * scale / np.sqrt(d)
    params["dustbin.z"] = T.Tensor(np.asarray(true_pair_score * 0.5), name="dustbin.z")
    return params


def exact_frontend_params(cfg: mn.MatchNetConfig, seed: int = 0):
    """Identity matcher plus zeroed heads: t_hat = range * bearing, var = 1.

    On zero-noise data this front end is analytically exact, which makes it
    a clean fixture for pipeline-level contracts.
    """
    params = identity_matcher_params(cfg, seed=seed)
    for head in ("pos", "cov"):
        for name in (f"{head}.w0", f"{head}.b0", f"{head}.w1", f"{head}.b1"):
            params[name] = T.Tensor(np.zeros_like(params[name].data), name=name)
    return params
