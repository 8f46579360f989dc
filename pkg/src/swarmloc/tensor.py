"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

A dynamic tape tailored to this package: the matching network and the
unrolled pose-graph solver run on matrices no larger than a few hundred
elements, so every value is float64 and clarity/exactness beat throughput.

Usage
-----
    with Tape() as tape:
        y = matmul(w, x)
        loss = sum_(mul(y, y))
        (gw,) = tape.backward(loss, [w])

Outside any ``with Tape()`` block the same ops run in plain numpy with no
recording, which is the inference fast path.

Gradient semantics: ``backward`` walks the tape in exact reverse execution
order; parameters that never touched the loss get zero gradients; outputs
computed after the loss (or never used by it) contribute nothing.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_FORMAT = "swarmloc-ckpt-v1"

_active_tapes: list["Tape"] = []


class Tensor:
    """A float64 array plus (when a tape is active) its backward closure."""

    __slots__ = ("data", "parents", "vjps", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = ()
        self.vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        head = f"Tensor(name={self.name!r}, " if self.name else "Tensor("
        return f"{head}shape={self.data.shape})"

    # Arithmetic sugar; every overload routes through the recorded primitives.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed primitives for one forward pass."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _active_tapes.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def watch(self, t: Tensor) -> Tensor:
        """Mark a leaf tensor (parameter or differentiable input) as tracked."""
        self._tracked.add(id(t))
        return t

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, out: Tensor) -> None:
        self._nodes.append(out)
        self._tracked.add(id(out))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(
        self, loss: Tensor, wrt: Sequence[Tensor]
    ) -> list[np.ndarray]:
        """Gradients of a scalar loss w.r.t. each tensor in ``wrt``.

        Tensors in ``wrt`` that did not influence the loss get zeros.
        """
        if loss.data.shape != ():
            raise ValueError(f"loss must be a scalar, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        seen_loss = False
        for node in reversed(self._nodes):
            if node is loss:
                seen_loss = True
            if not seen_loss:
                continue
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                if id(parent) not in self._tracked:
                    continue
                pg = vjp(g)
                acc = grads.get(id(parent))
                if acc is None:
                    # always copy: vjps may alias the upstream gradient array
                    grads[id(parent)] = np.array(pg, dtype=np.float64)
                else:
                    acc += pg
        return [
            np.asarray(grads.get(id(t), np.zeros_like(t.data)), dtype=np.float64)
            for t in wrt
        ]


def _tape() -> Tape | None:
    return _active_tapes[-1] if _active_tapes else None


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """An untracked tensor: gradients never flow into it."""
    return astensor(x)


def leaf(x, name: str | None = None) -> Tensor:
    """A tracked leaf on the active tape (parameter / differentiable input)."""
    t = Tensor(x, name=name)
    tape = _tape()
    if tape is not None:
        tape.watch(t)
    return t


def record(out_data, parents: Iterable, vjps: Iterable[Callable]) -> Tensor:
    """Create the output tensor of a primitive, recording it when required.

    A primitive is recorded only when a tape is active and at least one
    parent is tracked; otherwise the closures are dropped so inference has
    no bookkeeping cost.
    """
    out = Tensor(out_data)
    tape = _tape()
    if tape is None:
        return out
    parents = tuple(parents)
    if not any(tape.is_tracked(p) for p in parents):
        return out
    out.parents = parents
    out.vjps = tuple(vjps)
    tape._record(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient g down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / broadcast primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return record(
        a.data + b.data,
        (a, b),
        (
            lambda g, sa=a.data.shape: _unbroadcast(g, sa),
            lambda g, sb=b.data.shape: _unbroadcast(g, sb),
        ),
    )


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return record(
        a.data - b.data,
        (a, b),
        (
            lambda g, sa=a.data.shape: _unbroadcast(g, sa),
            lambda g, sb=b.data.shape: _unbroadcast(-g, sb),
        ),
    )


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return record(
        a.data * b.data,
        (a, b),
        (
            lambda g, bd=b.data, sa=a.data.shape: _unbroadcast(g * bd, sa),
            lambda g, ad=a.data, sb=b.data.shape: _unbroadcast(g * ad, sb),
        ),
    )


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return record(
        a.data / b.data,
        (a, b),
        (
            lambda g, bd=b.data, sa=a.data.shape: _unbroadcast(g / bd, sa),
            lambda g, ad=a.data, bd=b.data, sb=b.data.shape: _unbroadcast(
                -g * ad / (bd * bd), sb
            ),
        ),
    )


def neg(a) -> Tensor:
    a = astensor(a)
    return record(-a.data, (a,), (lambda g: -g,))


def exp(a) -> Tensor:
    a = astensor(a)
    out_data = np.exp(a.data)
    return record(out_data, (a,), (lambda g, o=out_data: g * o,))


def log(a) -> Tensor:
    a = astensor(a)
    return record(np.log(a.data), (a,), (lambda g, ad=a.data: g / ad,))


def sqrt(a) -> Tensor:
    a = astensor(a)
    out_data = np.sqrt(a.data)
    return record(out_data, (a,), (lambda g, o=out_data: g * 0.5 / o,))


def cos(a) -> Tensor:
    a = astensor(a)
    return record(np.cos(a.data), (a,), (lambda g, ad=a.data: -g * np.sin(ad),))


def sin(a) -> Tensor:
    a = astensor(a)
    return record(np.sin(a.data), (a,), (lambda g, ad=a.data: g * np.cos(ad),))


def relu(a) -> Tensor:
    a = astensor(a)
    mask = a.data > 0.0
    return record(np.where(mask, a.data, 0.0), (a,), (lambda g, m=mask: g * m,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient strictly inside the bounds."""
    a = astensor(a)
    mask = (a.data > lo) & (a.data < hi)
    return record(np.clip(a.data, lo, hi), (a,), (lambda g, m=mask: g * m,))


# ---------------------------------------------------------------------------
# linear algebra / structural primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product for operands of rank 1 or 2 (numpy @ semantics)."""
    a, b = astensor(a), astensor(b)
    ad, bd = a.data, b.data
    out = ad @ bd

    if ad.ndim == 2 and bd.ndim == 2:
        vjp_a = lambda g: g @ bd.T
        vjp_b = lambda g: ad.T @ g
    elif ad.ndim == 2 and bd.ndim == 1:
        vjp_a = lambda g: np.outer(g, bd)
        vjp_b = lambda g: ad.T @ g
    elif ad.ndim == 1 and bd.ndim == 2:
        vjp_a = lambda g: bd @ g
        vjp_b = lambda g: np.outer(ad, g)
    elif ad.ndim == 1 and bd.ndim == 1:
        vjp_a = lambda g: g * bd
        vjp_b = lambda g: g * ad
    else:
        raise ValueError(f"matmul supports rank 1/2 operands, got {ad.ndim} and {bd.ndim}")
    return record(out, (a, b), (vjp_a, vjp_b))


def transpose(a) -> Tensor:
    a = astensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return record(a.data.T.copy(), (a,), (lambda g: g.T,))


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    old = a.data.shape
    return record(a.data.reshape(shape), (a,), (lambda g, s=old: g.reshape(s),))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [astensor(p) for p in parts]
    datas = [p.data for p in parts]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(k: int):
        lo, hi = offsets[k], offsets[k + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return record(
        np.concatenate(datas, axis=axis),
        parts,
        tuple(make_vjp(k) for k in range(len(parts))),
    )


def narrow(a, key) -> Tensor:
    """Basic slicing; gradient scatters back into a zero array."""
    a = astensor(a)
    out = a.data[key]

    def vjp(g, shape=a.data.shape, key=key):
        full = np.zeros(shape)
        full[key] = g
        return full

    return record(out.copy(), (a,), (vjp,))


def take_rows(a, idx) -> Tensor:
    """Gather rows of a matrix by an integer index array."""
    a = astensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g, shape=a.data.shape, idx=idx):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return full

    return record(a.data[idx].copy(), (a,), (vjp,))


def take_at(a, rows, cols) -> Tensor:
    """Gather matrix entries at (rows[k], cols[k]) into a vector."""
    a = astensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def vjp(g, shape=a.data.shape, rows=rows, cols=cols):
        full = np.zeros(shape)
        np.add.at(full, (rows, cols), g)
        return full

    return record(a.data[rows, cols].copy(), (a,), (vjp,))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)

    def vjp(g, shape=a.data.shape, axis=axis, keepdims=keepdims):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return record(a.data.sum(axis=axis, keepdims=keepdims), (a,), (vjp,))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def vjp(g, shape=a.data.shape, axis=axis, keepdims=keepdims, count=count):
        if axis is None:
            return np.broadcast_to(g, shape) / count
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape) / count

    return record(a.data.mean(axis=axis, keepdims=keepdims), (a,), (vjp,))


def norm(a) -> Tensor:
    """Full-tensor L2 norm as a scalar. Undefined gradient at exactly zero."""
    a = astensor(a)
    n = float(np.linalg.norm(a.data))
    return record(np.asarray(n), (a,), (lambda g, ad=a.data, n=max(n, 1e-300): g * ad / n,))


def softmax(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, out=out, axis=axis):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return record(out, (a,), (vjp,))


def logsumexp(a, axis: int, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s

    def vjp(g, soft=soft, axis=axis, keepdims=keepdims):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return g * soft

    return record(out if keepdims else out.squeeze(axis), (a,), (vjp,))


def solve(a, b) -> Tensor:
    """x = a^-1 b for a square matrix a and vector b (LU factorization)."""
    a, b = astensor(a), astensor(b)
    x = np.linalg.solve(a.data, b.data)

    def vjp_b(g, at=a.data.T):
        return np.linalg.solve(at, g)

    def vjp_a(g, at=a.data.T, x=x):
        return -np.outer(np.linalg.solve(at, g), x)

    return record(x, (a, b), (vjp_a, vjp_b))


def sinkhorn_log(scores, log_mu: np.ndarray, log_nu: np.ndarray, iters: int) -> Tensor:
    """Log-domain Sinkhorn normalization to prescribed row/column marginals.

    One fused primitive: the forward pass stores the potential sequence and
    the backward pass replays it in reverse, which is exactly the gradient
    of the unrolled iteration without per-step tape overhead.

    Returns log-probabilities of the same shape as ``scores``; row i of
    exp(result) sums to exp(log_mu[i]) and column j to exp(log_nu[j]).
    """
    scores = astensor(scores)
    z = scores.data
    n_rows, n_cols = z.shape
    log_mu = np.asarray(log_mu, dtype=np.float64)
    log_nu = np.asarray(log_nu, dtype=np.float64)
    if log_mu.shape != (n_rows,) or log_nu.shape != (n_cols,):
        raise ValueError("marginal shapes do not match the score matrix")
    if iters < 1:
        raise ValueError("iters must be >= 1")

    us = np.zeros((iters, n_rows))
    vs = np.zeros((iters + 1, n_cols))
    v = np.zeros(n_cols)
    for it in range(iters):
        zu = z + v[None, :]
        u = log_mu - _lse(zu, axis=1)
        zv = z + u[:, None]
        v = log_nu - _lse(zv, axis=0)
        us[it] = u
        vs[it + 1] = v
    out = z + us[-1][:, None] + vs[-1][None, :]

    def vjp(g, z=z, us=us, vs=vs, iters=iters):
        gz = g.copy()
        gu = g.sum(axis=1)
        gv = g.sum(axis=0)
        for it in range(iters - 1, -1, -1):
            # col step: v_it = log_nu - lse_rows(z + u_it)
            zu = z + us[it][:, None]
            a_soft = np.exp(zu - _lse(zu, axis=0)[None, :])
            gz -= a_soft * gv[None, :]
            gu += -(a_soft * gv[None, :]).sum(axis=1)
            # row step: u_it = log_mu - lse_cols(z + v_{it-1})
            zv = z + vs[it][None, :]
            b_soft = np.exp(zv - _lse(zv, axis=1)[:, None])
            gz -= b_soft * gu[:, None]
            gv = -(b_soft * gu[:, None]).sum(axis=0)
            gu = np.zeros_like(gu)
        return gz

    return record(out, (scores,), (vjp,))


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def gradcheck(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    step: float = 1e-6,
    tol: float = 1e-4,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
):
    """Compare tape gradients of a scalar-valued f against central differences.

    Returns a report with per-element relative errors. ``max_elements``
    limits the (seeded) random subset of coordinates probed, which keeps
    checks on large parameter tensors affordable.
    """
    x = np.asarray(x, dtype=np.float64)
    with Tape() as tape:
        xt = leaf(x.copy(), name="gradcheck-x")
        y = f(xt)
        if y.data.shape != ():
            raise ValueError("gradcheck needs a scalar-valued function")
        (gx,) = tape.backward(y, [xt])

    flat = x.reshape(-1)
    indices = np.arange(flat.size)
    if max_elements is not None and flat.size > max_elements:
        rng = rng or np.random.default_rng(0)
        indices = rng.choice(flat.size, size=max_elements, replace=False)

    fd = np.zeros(flat.size)
    for i in indices:
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = float(f(constant(hi.reshape(x.shape))).data)
        f_lo = float(f(constant(lo.reshape(x.shape))).data)
        fd[i] = (f_hi - f_lo) / (2.0 * step)

    ga = gx.reshape(-1)
    errs = {}
    worst = 0.0
    for i in indices:
        denom = max(abs(fd[i]), abs(ga[i]), 1.0)
        rel = abs(fd[i] - ga[i]) / denom
        errs[int(i)] = rel
        worst = max(worst, rel)
    return GradcheckReport(passed=worst < tol, max_rel_err=worst, rel_errs=errs, tol=tol)


class GradcheckReport:
    def __init__(self, passed: bool, max_rel_err: float, rel_errs: dict, tol: float):
        self.passed = passed
        self.max_rel_err = max_rel_err
        self.rel_errs = rel_errs
        self.tol = tol

    def __bool__(self) -> bool:
        return self.passed

    def __repr__(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return f"GradcheckReport({state}, max_rel_err={self.max_rel_err:.3e}, tol={self.tol:g})"


# ---------------------------------------------------------------------------
# parameter checkpoints
# ---------------------------------------------------------------------------


def save_params(path, params: dict[str, Tensor]) -> None:
    """Write parameters as versioned JSON; float repr round-trips bit-exactly."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "params": {
            name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in sorted(params.items())
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_params(path) -> dict[str, Tensor]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {payload.get('format')!r}")
    out = {}
    for name, entry in payload["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        out[name] = Tensor(arr, name=name)
    return out
