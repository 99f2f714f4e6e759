"""Dense float64 tensors with a minimal reverse-mode tape.

Values are plain numpy arrays (row-major float64); a ``Tape`` records one
closure per primitive as it executes, and ``backward`` replays the records
once, in reverse, accumulating gradients into every :class:`Node` that
contributed. Raw ndarrays passed to an op are constants: no gradient flows
into them.

Every op validates finiteness of its result, so NaN/Inf surface at the
operation that produced them instead of three modules later.

All ops take the tape as the first argument; ``tape=None`` switches to a
plain-ndarray fast path with no recording (used for evaluation loops).
"""

import numpy as np

from . import kernels


class Node:
    """A taped value. ``grad`` is populated by ``backward``."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = None


class Tape:
    """Ordered record of primitive ops; single-owner, replayed once."""

    def __init__(self):
        self._records = []
        self.leaves = {}

    def leaf(self, value, name=None) -> Node:
        node = Node(_as_f64(value))
        if name is not None:
            if name in self.leaves:
                raise ValueError(f"duplicate leaf name {name!r}")
            self.leaves[name] = node
        return node

    def _push(self, bwd) -> None:
        self._records.append(bwd)

    def backward(self, out: Node, seed=None) -> None:
        """Accumulate d(out)/d(node) into every node's ``grad``."""
        out.grad = np.ones_like(out.value) if seed is None else _as_f64(seed)
        for bwd in reversed(self._records):
            bwd()

    def leaf_grad(self, name):
        node = self.leaves[name]
        if node.grad is None:
            return np.zeros_like(node.value)
        return node.grad


def _as_f64(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("non-finite values rejected at operation boundary")
    return arr


def _val(x):
    return x.value if isinstance(x, Node) else x


def _finite(x):
    if not np.isfinite(x).all():
        raise ValueError("non-finite values rejected at operation boundary")
    return x


def _acc(node, g):
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += g


def _emit(tape, value, bwd_builder):
    value = _finite(value)
    if tape is None:
        return value
    out = Node(value)
    tape._push(bwd_builder(out))
    return out


def matmul(tape, a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def build(out):
        def bwd():
            if out.grad is None:
                return
            if isinstance(a, Node):
                _acc(a, out.grad @ bv.T)
            if isinstance(b, Node):
                _acc(b, av.T @ out.grad)

        return bwd

    return _emit(tape, av @ bv, build)


def add(tape, a, b):
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ValueError(f"add shape mismatch: {av.shape} vs {bv.shape}")

    def build(out):
        def bwd():
            if out.grad is None:
                return
            if isinstance(a, Node):
                _acc(a, out.grad)
            if isinstance(b, Node):
                _acc(b, out.grad)

        return bwd

    return _emit(tape, av + bv, build)


def add_bias(tape, a, b):
    """(B, N) + (N,) broadcast; the bias gradient sums over the batch."""
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.shape != (av.shape[1],):
        raise ValueError(f"add_bias shape mismatch: {av.shape} + {bv.shape}")

    def build(out):
        def bwd():
            if out.grad is None:
                return
            if isinstance(a, Node):
                _acc(a, out.grad)
            if isinstance(b, Node):
                _acc(b, out.grad.sum(axis=0))

        return bwd

    return _emit(tape, av + bv, build)


def sub(tape, a, b):
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ValueError(f"sub shape mismatch: {av.shape} vs {bv.shape}")

    def build(out):
        def bwd():
            if out.grad is None:
                return
            if isinstance(a, Node):
                _acc(a, out.grad)
            if isinstance(b, Node):
                _acc(b, -out.grad)

        return bwd

    return _emit(tape, av - bv, build)


def scale(tape, a, c: float):
    av = _val(a)

    def build(out):
        def bwd():
            if out.grad is None:
                return
            if isinstance(a, Node):
                _acc(a, c * out.grad)

        return bwd

    return _emit(tape, c * av, build)


def prelu(tape, x, slopes):
    """Elementwise max(0,x) + slope*min(0,x), one slope per channel.

    d/dx is 1 for x >= 0 (the x == 0 subgradient is pinned to the positive
    branch) and slope for x < 0; d/dslope accumulates min(0, x).
    """
    xv, sv = _val(x), _val(slopes)
    if sv.shape != (xv.shape[-1],):
        raise ValueError(f"prelu slope shape {sv.shape} vs channels {xv.shape[-1]}")

    def build(out):
        def bwd():
            if out.grad is None:
                return
            gx, gs = kernels.prelu_bwd(xv, sv, out.grad)
            if isinstance(x, Node):
                _acc(x, gx)
            if isinstance(slopes, Node):
                _acc(slopes, gs)

        return bwd

    return _emit(tape, kernels.prelu_fwd(xv, sv), build)


def sq_dist(tape, f, centers):
    """Rowwise squared distance ||f_i - c_i||^2 -> (B,)."""
    fv, cv = _val(f), _val(centers)
    if fv.shape != cv.shape or fv.ndim != 2:
        raise ValueError(f"sq_dist shape mismatch: {fv.shape} vs {cv.shape}")
    diff = fv - cv

    def build(out):
        def bwd():
            if out.grad is None:
                return
            g = 2.0 * diff * out.grad[:, None]
            if isinstance(f, Node):
                _acc(f, g)
            if isinstance(centers, Node):
                _acc(centers, -g)

        return bwd

    return _emit(tape, (diff * diff).sum(axis=1), build)


def sq_dist_to_center(tape, f, w):
    """Single-vector squared distance ||f - w||^2 -> scalar."""
    fv, wv = _val(f), _val(w)
    if fv.shape != wv.shape or fv.ndim != 1:
        raise ValueError(f"sq_dist_to_center shape mismatch: {fv.shape} vs {wv.shape}")
    diff = fv - wv

    def build(out):
        def bwd():
            if out.grad is None:
                return
            g = 2.0 * diff * out.grad
            if isinstance(f, Node):
                _acc(f, g)
            if isinstance(w, Node):
                _acc(w, -g)

        return bwd

    return _emit(tape, np.asarray((diff * diff).sum()), build)


def pick(tape, m, idx):
    """Select m[i, idx[i]] -> (B,)."""
    mv = _val(m)
    idx = np.asarray(idx)
    rows = np.arange(mv.shape[0])

    def build(out):
        def bwd():
            if out.grad is None:
                return
            if isinstance(m, Node):
                g = np.zeros_like(mv)
                np.add.at(g, (rows, idx), out.grad)
                _acc(m, g)

        return bwd

    return _emit(tape, mv[rows, idx], build)


def softmax_ce(tape, logits, labels):
    """Cross-entropy with log-sum-exp stabilization.

    (B, K) logits with (B,) labels -> per-sample losses (B,);
    (K,) logits with an integer label -> scalar.
    """
    lv = _val(logits)
    single = lv.ndim == 1
    l2 = lv[None, :] if single else lv
    y = np.asarray([labels] if single else labels, dtype=np.int64)
    if y.shape != (l2.shape[0],):
        raise ValueError(f"softmax_ce labels shape {y.shape} vs batch {l2.shape[0]}")
    m = l2.max(axis=1, keepdims=True)
    z = l2 - m
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(l2.shape[0])
    losses = lse - z[rows, y]
    probs = np.exp(z - lse[:, None])

    def build(out):
        def bwd():
            if out.grad is None:
                return
            if isinstance(logits, Node):
                g = probs.copy()
                g[rows, y] -= 1.0
                g *= np.reshape(out.grad, (-1, 1))
                _acc(logits, g[0] if single else g)

        return bwd

    return _emit(tape, np.asarray(losses[0]) if single else losses, build)


def sum_(tape, v):
    vv = _val(v)

    def build(out):
        def bwd():
            if out.grad is None:
                return
            if isinstance(v, Node):
                _acc(v, np.broadcast_to(out.grad, vv.shape).copy())

        return bwd

    return _emit(tape, np.asarray(vv.sum()), build)


def mean(tape, v):
    vv = _val(v)
    n = vv.size

    def build(out):
        def bwd():
            if out.grad is None:
                return
            if isinstance(v, Node):
                _acc(v, np.broadcast_to(out.grad / n, vv.shape).copy())

        return bwd

    return _emit(tape, np.asarray(vv.mean()), build)


def backward(tape: Tape, out: Node, seed=None) -> None:
    tape.backward(out, seed)


def grad_check(fn, params, h=1e-5, n_coords=100, rng=None, floor=1e-3):
    """Central differences against the tape gradient.

    ``fn(params) -> (loss, grads)`` with grads matching ``params``. Samples
    ``n_coords`` coordinates across all parameter arrays and returns the
    max of |numeric - analytic| / max(|numeric|, |analytic|, floor). The
    floor keeps finite-difference roundoff on negligible-gradient
    coordinates from dominating the reported maximum.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    _, grads = fn(params)
    sizes = [p.size for p in params]
    total = sum(sizes)
    n = min(n_coords, total)
    flat_choice = rng.choice(total, size=n, replace=False)
    worst = 0.0
    for flat in flat_choice:
        pi = 0
        while flat >= sizes[pi]:
            flat -= sizes[pi]
            pi += 1
        idx = np.unravel_index(flat, params[pi].shape)
        orig = params[pi][idx]
        params[pi][idx] = orig + h
        lp, _ = fn(params)
        params[pi][idx] = orig - h
        lm, _ = fn(params)
        params[pi][idx] = orig
        num = (float(lp) - float(lm)) / (2.0 * h)
        ana = float(grads[pi][idx])
        err = abs(num - ana) / max(abs(num), abs(ana), floor)
        worst = max(worst, err)
    return worst


def sgd_step(params, grads, velocities, lr: float, momentum: float) -> None:
    """In-place momentum SGD over a parameter list."""
    for p, g, v in zip(params, grads, velocities):
        kernels.sgd_update(p, np.ascontiguousarray(g), v, lr, momentum)


def decayed_lr(base_lr: float, epoch: int, decay_epochs) -> float:
    """Step schedule: a factor-10 drop at each listed epoch."""
    drops = sum(1 for e in decay_epochs if epoch >= e)
    return base_lr * (0.1**drops)
