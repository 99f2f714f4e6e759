"""Fully-connected encoders and the frozen-head prediction rule.

The classifier is ``logits = f(x) @ W`` with W a fixed
:class:`~orthoclf.orthoweights.ClassifierWeights` matrix and zero bias.
Because all head columns share the same norm, argmax of the logits equals
argmin of the distances to the class centers, so prediction and the
center-based losses agree about geometry.

Encoders are affine stacks with a per-channel PReLU after every layer
(including the feature layer, so features can carry balanced signs), or a
single bare affine map for the identity-activation toy encoder.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .orthoweights import ClassifierWeights

ACT_PRELU = "prelu"
ACT_IDENTITY = "identity"

_CKPT_MAGIC = b"ORTM"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden: tuple
    activation: str
    feature_dim: int

    def __post_init__(self):
        widths = (self.input_dim,) + tuple(self.hidden) + (self.feature_dim,)
        if any(int(w) != w or w < 1 for w in widths):
            raise ValueError(f"invalid spec: zero-width layer in {widths}")
        if self.activation not in (ACT_PRELU, ACT_IDENTITY):
            raise ValueError(f"invalid spec: unknown activation {self.activation!r}")
        if self.activation == ACT_IDENTITY and self.hidden:
            raise ValueError(
                "invalid spec: identity activation is only for the single-layer encoder"
            )
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def layer_dims(self):
        dims = (self.input_dim,) + self.hidden + (self.feature_dim,)
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "feature_dim": self.feature_dim,
        }

    @staticmethod
    def from_dict(d):
        return EncoderSpec(
            int(d["input_dim"]),
            tuple(d["hidden"]),
            str(d["activation"]),
            int(d["feature_dim"]),
        )


@dataclass
class ModelParams:
    weights: list
    biases: list
    slopes: list  # empty for identity activation
    seed: int = field(default=0)

    def param_list(self):
        out = []
        for i in range(len(self.weights)):
            out.append(self.weights[i])
            out.append(self.biases[i])
            if self.slopes:
                out.append(self.slopes[i])
        return out

    def param_names(self):
        out = []
        for i in range(len(self.weights)):
            out.append(f"w{i}")
            out.append(f"b{i}")
            if self.slopes:
                out.append(f"a{i}")
        return out


def init_params(spec: EncoderSpec, seed: int) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, 0.25 PReLU slopes."""
    rng = np.random.default_rng(seed)
    weights, biases, slopes = [], [], []
    for fan_in, fan_out in spec.layer_dims:
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
        if spec.activation == ACT_PRELU:
            slopes.append(np.full(fan_out, 0.25))
    return ModelParams(weights, biases, slopes, seed=int(seed))


def encode(params: ModelParams, spec: EncoderSpec, x, tape=None, frozen=False):
    """Forward pass to P-dim features; records on the tape when given.

    With a tape, parameters register as named leaves (w0, b0, a0, ...) so the
    trainer can collect their gradients, unless frozen=True, which feeds them
    in as constants (useful when only the input gradient matters, as in the
    inner maximizer and the attacks). A plain ndarray input stays a constant;
    pass a ``tape.leaf`` Node when d/dx is needed.
    """
    if tape is None:
        h = np.ascontiguousarray(x, dtype=np.float64)
        for i in range(len(params.weights)):
            h = h @ params.weights[i] + params.biases[i]
            if spec.activation == ACT_PRELU:
                from . import kernels

                h = kernels.prelu_fwd(h, params.slopes[i])
        return h
    h = x
    for i in range(len(params.weights)):
        if frozen:
            wn, bn = params.weights[i], params.biases[i]
        else:
            wn = tape.leaves.get(f"w{i}") or tape.leaf(params.weights[i], f"w{i}")
            bn = tape.leaves.get(f"b{i}") or tape.leaf(params.biases[i], f"b{i}")
        h = gc.add_bias(tape, gc.matmul(tape, h, wn), bn)
        if spec.activation == ACT_PRELU:
            if frozen:
                an = params.slopes[i]
            else:
                an = tape.leaves.get(f"a{i}") or tape.leaf(params.slopes[i], f"a{i}")
            h = gc.prelu(tape, h, an)
    return h


def head_logits(w: ClassifierWeights, f, tape=None):
    """Scores = f @ W, one column per class, zero bias."""
    if tape is None:
        return np.asarray(f) @ w.matrix
    return gc.matmul(tape, f, w.matrix)


def predict(w: ClassifierWeights, f):
    """argmax of the head scores; ties go to the lowest class index."""
    f = np.asarray(f)
    logits = f @ w.matrix
    if f.ndim == 1:
        return int(np.argmax(logits))
    return np.argmax(logits, axis=1)


def region_check(w: ClassifierWeights, f, i: int) -> bool:
    """True iff (w_i - w_j) . f >= 0 for every j != i."""
    f = np.asarray(f)
    scores = w.matrix.T @ f
    return bool(np.all(scores[i] - np.delete(scores, i) >= 0.0))


def accuracy(params, spec, w, x, labels) -> float:
    return float(np.mean(predict(w, encode(params, spec, x)) == labels))


def dead_feature_gradient(spec, params, w: ClassifierWeights, x, labels, loss="ce"):
    """Per-feature-coordinate gradient magnitude of the batch loss.

    Aggregates sum_b |dL/df[b,p]| so exact zeros stay exactly zero. With an
    upper-triangular head and loss="ce" the gradient reaches f only through
    W, so every coordinate whose W row is zero (K-1..P-1; the last head
    column loses its diagonal pivot because K max-Mahalanobis centers span a
    (K-1)-simplex) receives bitwise-zero gradient no matter the batch. The
    center loss touches f directly and keeps all coordinates live, merely
    pulling dead ones toward zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("need a non-empty 2-D batch")
    feats = encode(params, spec, x)
    tape = gc.Tape()
    fn = tape.leaf(feats, "features")
    logits = head_logits(w, fn, tape)
    if loss == "ce":
        obj = gc.mean(tape, gc.softmax_ce(tape, logits, labels))
    elif loss == "center":
        centers = np.ascontiguousarray(w.matrix.T[labels])
        obj = gc.mean(tape, gc.sq_dist(tape, fn, centers))
    else:
        raise ValueError(f"unknown loss {loss!r}")
    tape.backward(obj)
    return np.abs(tape.leaf_grad("features")).sum(axis=0)


def _params_digest(params: ModelParams) -> str:
    h = hashlib.sha256()
    for arr in params.param_list():
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(path, spec: EncoderSpec, params: ModelParams, head_digest: str):
    """Magic + version + JSON header (spec, shapes, hashes) + f64 LE blobs."""
    names = params.param_names()
    arrays = params.param_list()
    header = {
        "spec": spec.to_dict(),
        "seed": params.seed,
        "head_digest": head_digest,
        "params": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        "params_digest": _params_digest(params),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (spec, params, header dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"bad magic: {path} is not a checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode())
    spec = EncoderSpec.from_dict(header["spec"])
    offset = 12 + hlen
    arrays = []
    for meta in header["params"]:
        n = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(raw[offset : offset + 8 * n], dtype="<f8").reshape(
            meta["shape"]
        )
        arrays.append(np.ascontiguousarray(arr))
        offset += 8 * n
    weights, biases, slopes = [], [], []
    for meta, arr in zip(header["params"], arrays):
        kind = meta["name"][0]
        {"w": weights, "b": biases, "a": slopes}[kind].append(arr)
    params = ModelParams(weights, biases, slopes, seed=int(header["seed"]))
    if _params_digest(params) != header["params_digest"]:
        raise ValueError("checkpoint parameter blob does not match its digest")
    return spec, params, header
