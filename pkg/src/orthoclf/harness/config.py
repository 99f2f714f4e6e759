"""INI run configuration with a strict schema.

Unknown sections or keys are rejected outright so a typo cannot silently
change an experiment. Attack sections are named [attack.<label>] and map to
AttackConfig; [sweep] and [redundancy] hold grids for their commands.
"""

import configparser
import hashlib
import json
import os
from dataclasses import dataclass, field

from ..attacks import AttackConfig
from ..losses import LossConfig
from ..models import EncoderSpec
from ..orthoweights import (
    KIND_DENSE,
    KIND_MAXMAHA,
    build_hadamard,
    build_max_mahalanobis,
)

_SCHEMA = {
    "dataset": {
        "kind", "train_images", "train_labels", "test_images", "test_labels",
        "cache_train", "cache_test", "resize", "take_first", "classes",
        "input_dim", "per_class", "per_class_test", "spread", "seed",
    },
    "encoder": {"hidden", "activation", "feature_dim"},
    "head": {"kind", "t", "k", "s", "p"},
    "loss": {"mode", "alpha", "epsilon", "inner_iters", "inner_step"},
    "optimizer": {"lr", "momentum", "epochs", "batch_size", "decay_epochs"},
    "run": {"seed", "out", "eval_n"},
    "attack": {
        "method", "norm", "epsilon", "iters", "rel_step", "overshoot",
        "random_start", "sparsity_q",
    },
    "sweep": {"s", "alpha"},
    "redundancy": {"t_grid", "seeds"},
}
_HEAD_KINDS = {
    "dense_orthogonal": KIND_DENSE,
    "max_mahalanobis_ut": KIND_MAXMAHA,
}


@dataclass
class RunConfig:
    dataset: dict
    spec: EncoderSpec
    head_kind: str
    head_t: int
    head_k: int
    head_s: float
    head_p: int
    loss: LossConfig
    lr: float
    momentum: float
    epochs: int
    batch_size: int
    decay_epochs: tuple
    attacks: list  # [(label, AttackConfig)]
    seed: int
    out: str
    eval_n: int  # 0 = use the whole evaluation split
    sweep: dict = field(default=None)
    redundancy: dict = field(default=None)

    def canonical(self):
        """JSON-able echo of everything that defines the run."""
        return {
            "dataset": self.dataset,
            "encoder": {
                "hidden": list(self.spec.hidden),
                "activation": self.spec.activation,
                "feature_dim": self.spec.feature_dim,
                "input_dim": self.spec.input_dim,
            },
            "head": {
                "kind": self.head_kind,
                "t": self.head_t,
                "k": self.head_k,
                "s": self.head_s,
                "p": self.head_p,
            },
            "loss": {
                "mode": self.loss.mode,
                "alpha": self.loss.alpha,
                "epsilon": self.loss.epsilon,
                "inner_iters": self.loss.inner_iters,
                "inner_step": self.loss.inner_step,
            },
            "optimizer": {
                "lr": self.lr,
                "momentum": self.momentum,
                "epochs": self.epochs,
                "batch_size": self.batch_size,
                "decay_epochs": list(self.decay_epochs),
            },
            "attacks": [
                {
                    "label": lbl,
                    "method": a.method,
                    "norm": a.norm,
                    "epsilon": a.epsilon,
                    "iters": a.iters,
                    "rel_step": a.rel_step,
                    "overshoot": a.overshoot,
                    "random_start": a.random_start,
                    "sparsity_q": a.sparsity_q,
                }
                for lbl, a in self.attacks
            ],
            "seed": self.seed,
            "eval_n": self.eval_n,
            "sweep": self.sweep,
            "redundancy": self.redundancy,
        }


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.canonical(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def build_head(cfg: RunConfig):
    if cfg.head_kind == KIND_DENSE:
        return build_hadamard(cfg.head_t, cfg.head_k, cfg.head_s)
    return build_max_mahalanobis(cfg.head_p, cfg.head_k, cfg.head_s)


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _get(sec, key, cast, default=None, required=False):
    if key not in sec:
        if required:
            raise ValueError(f"missing config key [{sec.name}] {key}")
        return default
    raw = sec[key].strip()
    if cast is bool:
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"bad boolean [{sec.name}] {key} = {raw}")
        return raw.lower() in ("true", "1", "yes")
    return cast(raw)


def _check_schema(parser):
    for name in parser.sections():
        base = "attack" if name.startswith("attack.") else name
        if base not in _SCHEMA:
            raise ValueError(f"unknown config section [{name}]")
        for key in parser[name]:
            if key not in _SCHEMA[base]:
                raise ValueError(f"unknown config key [{name}] {key}")


def _dataset_dict(sec, base_dir):
    kind = _get(sec, "kind", str, required=True)
    if kind not in ("idx", "blobs", "cache"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    d = {"kind": kind}
    paths = {
        "idx": ("train_images", "train_labels", "test_images", "test_labels"),
        "cache": ("cache_train", "cache_test"),
        "blobs": (),
    }[kind]
    for key in paths:
        val = _get(sec, key, str)
        if val is not None:
            val = os.path.join(base_dir, os.path.expanduser(val))
            if not os.path.exists(val):
                raise ValueError(f"referenced file does not exist: {val}")
            d[key] = val
        elif key in ("train_images", "train_labels", "cache_train"):
            raise ValueError(f"missing config key [dataset] {key}")
    if kind == "blobs":
        d["classes"] = _get(sec, "classes", int, required=True)
        d["input_dim"] = _get(sec, "input_dim", int, required=True)
        d["per_class"] = _get(sec, "per_class", int, required=True)
        d["per_class_test"] = _get(sec, "per_class_test", int, 0)
        d["spread"] = _get(sec, "spread", float, 0.05)
        d["seed"] = _get(sec, "seed", int, 0)
    resize = _get(sec, "resize", int)
    if resize is not None:
        d["resize"] = resize
    take = _get(sec, "take_first", int)
    if take is not None:
        d["take_first"] = take
    return d


def parse_config(path, seed=None, out=None) -> RunConfig:
    """Parse and validate an INI run config; seed/out override the file."""
    parser = configparser.ConfigParser(interpolation=None)
    with open(path) as fh:
        parser.read_file(fh)
    _check_schema(parser)
    base_dir = os.path.dirname(os.path.abspath(path))

    ds = _dataset_dict(parser["dataset"], base_dir)

    enc = parser["encoder"]
    feature_dim = _get(enc, "feature_dim", int, required=True)
    hidden = _ints(_get(enc, "hidden", str, ""))
    activation = _get(enc, "activation", str, "prelu")

    head = parser["head"]
    kind_raw = _get(head, "kind", str, required=True)
    if kind_raw not in _HEAD_KINDS:
        raise ValueError(f"unknown head kind {kind_raw!r}")
    head_kind = _HEAD_KINDS[kind_raw]
    head_k = _get(head, "k", int, required=True)
    head_s = _get(head, "s", float, 10.0)
    if head_s <= 0:
        raise ValueError("head s must be positive")
    head_t = _get(head, "t", int)
    head_p = _get(head, "p", int)
    if head_kind == KIND_DENSE:
        if head_t is None:
            raise ValueError("missing config key [head] t")
        head_p = 2 ** head_t
    else:
        if head_p is None:
            raise ValueError("missing config key [head] p")

    if feature_dim != head_p:
        raise ValueError(
            f"encoder feature_dim {feature_dim} != head dimension {head_p}"
        )

    input_dim = _infer_input_dim(ds)
    spec = EncoderSpec(input_dim, hidden, activation, feature_dim)

    lsec = parser["loss"] if parser.has_section("loss") else {}
    loss = LossConfig(
        mode=_get(lsec, "mode", str, "softmax_ce") if lsec else "softmax_ce",
        alpha=_get(lsec, "alpha", float, 1.0) if lsec else 1.0,
        epsilon=_get(lsec, "epsilon", float, 0.0) if lsec else 0.0,
        inner_iters=_get(lsec, "inner_iters", int, 10) if lsec else 10,
        inner_step=_get(lsec, "inner_step", float) if lsec else None,
    )

    osec = parser["optimizer"]
    epochs = _get(osec, "epochs", int, required=True)
    batch_size = _get(osec, "batch_size", int, required=True)
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")

    attacks = []
    for name in parser.sections():
        if not name.startswith("attack."):
            continue
        sec = parser[name]
        attacks.append(
            (
                name.split(".", 1)[1],
                AttackConfig(
                    method=_get(sec, "method", str, required=True),
                    epsilon=_get(sec, "epsilon", float, required=True),
                    norm=_get(sec, "norm", str),
                    iters=_get(sec, "iters", int),
                    rel_step=_get(sec, "rel_step", float),
                    overshoot=_get(sec, "overshoot", float, 0.02),
                    random_start=_get(sec, "random_start", bool, True),
                    sparsity_q=_get(sec, "sparsity_q", float, 0.05),
                ),
            )
        )

    rsec = parser["run"] if parser.has_section("run") else {}
    file_seed = _get(rsec, "seed", int, 0) if rsec else 0
    file_out = _get(rsec, "out", str, "run_out") if rsec else "run_out"
    eval_n = _get(rsec, "eval_n", int, 0) if rsec else 0

    sweep = None
    if parser.has_section("sweep"):
        sweep = {
            "s": list(_floats(_get(parser["sweep"], "s", str, required=True))),
            "alpha": list(
                _floats(_get(parser["sweep"], "alpha", str, required=True))
            ),
        }
    redundancy = None
    if parser.has_section("redundancy"):
        redundancy = {
            "t_grid": list(
                _ints(_get(parser["redundancy"], "t_grid", str, required=True))
            ),
            "seeds": _get(parser["redundancy"], "seeds", int, 5),
        }

    return RunConfig(
        dataset=ds,
        spec=spec,
        head_kind=head_kind,
        head_t=head_t,
        head_k=head_k,
        head_s=head_s,
        head_p=head_p,
        loss=loss,
        lr=_get(osec, "lr", float, 0.1),
        momentum=_get(osec, "momentum", float, 0.0),
        epochs=epochs,
        batch_size=batch_size,
        decay_epochs=_ints(_get(osec, "decay_epochs", str, "")),
        attacks=attacks,
        seed=int(seed) if seed is not None else file_seed,
        out=out if out is not None else file_out,
        eval_n=eval_n,
        sweep=sweep,
        redundancy=redundancy,
    )


def _infer_input_dim(ds):
    kind = ds["kind"]
    if kind == "blobs":
        return ds["input_dim"]
    if "resize" in ds:
        return ds["resize"] ** 2
    if kind == "idx":
        import struct

        with open(ds["train_images"], "rb") as fh:
            head = fh.read(16)
        _, _, h, w = struct.unpack(">IIII", head)
        return h * w
    from ..data import load_cache

    return load_cache(ds["cache_train"]).inputs.shape[1]
