"""Experiment drivers: training, attack evaluation, redundancy grid, sweep.

Every source of randomness is a named sub-stream of the single run seed
(init / shuffle / attack / grid), so component-level reruns reproduce the
full run bit for bit; metrics CSVs are byte-identical across reruns. Wall
time and environment info go to the JSON manifest, never into CSVs.
"""

import json
import os
import time
from dataclasses import replace

import numpy as np

from .. import attacks as atk
from .. import data as dat
from .. import gradcore as gc
from .. import kernels, losses, models, orthoweights
from .config import RunConfig, build_head, config_hash

STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_ATTACK = 3
STREAM_GRID = 4


def substream(seed, *tags) -> int:
    """Derive an independent integer seed from the run seed and tags."""
    ss = np.random.SeedSequence([int(seed)] + [int(t) for t in tags])
    return int(ss.generate_state(1, np.uint64)[0])


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _sha256(path):
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def load_dataset(ds: dict):
    """Materialize (train, test-or-None) from a dataset descriptor."""
    kind = ds["kind"]
    if kind == "idx":
        train = dat.load_idx(ds["train_images"], ds["train_labels"], "train")
        test = None
        if "test_images" in ds and "test_labels" in ds:
            test = dat.load_idx(ds["test_images"], ds["test_labels"], "test")
    elif kind == "cache":
        train = dat.load_cache(ds["cache_train"])
        test = dat.load_cache(ds["cache_test"]) if "cache_test" in ds else None
    else:
        # one draw, split per class block, so both splits share centroids
        n_tr, n_te = ds["per_class"], ds.get("per_class_test", 0)
        full = dat.synth_blobs(
            ds["classes"], ds["input_dim"], n_tr + n_te, ds["spread"], ds["seed"]
        )
        per = n_tr + n_te
        tr_rows = np.concatenate(
            [np.arange(c * per, c * per + n_tr) for c in range(ds["classes"])]
        )
        train = dat.Dataset(
            full.inputs[tr_rows], full.labels[tr_rows], "train", full.provenance
        )
        test = None
        if n_te:
            te_rows = np.concatenate(
                [np.arange(c * per + n_tr, (c + 1) * per) for c in range(ds["classes"])]
            )
            test = dat.Dataset(
                full.inputs[te_rows], full.labels[te_rows], "test", full.provenance
            )
    if "resize" in ds:
        train = dat.resize_avgpool(train, ds["resize"])
        if test is not None:
            test = dat.resize_avgpool(test, ds["resize"])
    if "take_first" in ds:
        train = dat.take_first(train, ds["take_first"])
    return train, test


def train_model(cfg: RunConfig, w=None, train=None, test=None):
    """SGD train the encoder against a frozen head.

    Returns (head, params, epoch_rows, train_ds, test_ds); epoch_rows are
    (epoch, lr, train_loss, train_acc).
    """
    if w is None:
        w = build_head(cfg)
    if train is None:
        train, test = load_dataset(cfg.dataset)
    spec = cfg.spec
    params = models.init_params(spec, substream(cfg.seed, STREAM_INIT))
    names = params.param_names()
    arrays = params.param_list()
    vels = [np.zeros_like(a) for a in arrays]
    x, y, n = train.inputs, train.labels, len(train)
    rows = []
    for epoch in range(cfg.epochs):
        lr = gc.decayed_lr(cfg.lr, epoch, cfg.decay_epochs)
        order = np.random.default_rng([cfg.seed, STREAM_SHUFFLE, epoch]).permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            val, grads = losses.loss_and_grads(w, params, spec, x[idx], y[idx], cfg.loss)
            gc.sgd_step(arrays, [grads[nm] for nm in names], vels, lr, cfg.momentum)
            total += val * len(idx)
        rows.append((epoch, lr, total / n, models.accuracy(params, spec, w, x, y)))
    return w, params, rows, train, test


def _eval_split(cfg, train, test):
    ds = test if test is not None else train
    if cfg.eval_n and cfg.eval_n < len(ds):
        ds = dat.take_first(ds, cfg.eval_n)
    return ds


def run_attacks(cfg, w, params, ds, threads=1):
    """Evaluate every configured attack; rows of (label, method, norm,
    epsilon, clean_acc, robust_acc), plus per-attack AttackResults."""
    rows, results = [], {}
    for i, (label, acfg) in enumerate(cfg.attacks):
        robust, clean, res = atk.robust_accuracy(
            params, cfg.spec, w, ds.inputs, ds.labels, acfg,
            seed=substream(cfg.seed, STREAM_ATTACK, i), threads=threads,
        )
        rows.append((label, acfg.method, acfg.norm, acfg.epsilon, clean, robust))
        results[label] = res
    return rows, results


def feature_summary(w, params, spec, ds):
    """(mean intra-class distance to assigned center, min inter-center dist)."""
    f = models.encode(params, spec, ds.inputs)
    centers = w.matrix.T[ds.labels]
    intra = float(np.mean(np.sqrt(((f - centers) ** 2).sum(axis=1))))
    inter = float(np.sqrt(orthoweights.min_pairwise_sqdist(w)))
    return intra, inter


def _manifest(cfg, out_dir, wall, extra=None):
    m = {
        "config": cfg.canonical(),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "backend": kernels.BACKEND,
        "versions": {"numpy": np.__version__},
        "wall_time_s": wall,
        "outputs": {},
    }
    try:
        import numba

        m["versions"]["numba"] = numba.__version__
    except ImportError:
        m["versions"]["numba"] = None
    if extra:
        m.update(extra)
    for name in sorted(os.listdir(out_dir)):
        p = os.path.join(out_dir, name)
        if name != "manifest.json" and os.path.isfile(p):
            m["outputs"][name] = _sha256(p)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(m, fh, indent=2, sort_keys=True)
    return m


def cmd_weights(t, k, s, kind, out_path, p=None):
    """Build, verify, save a head; returns (weights, report)."""
    if kind == orthoweights.KIND_DENSE:
        w = orthoweights.build_hadamard(t, k, s)
    elif kind == orthoweights.KIND_MAXMAHA:
        if p is None:
            raise ValueError("max_mahalanobis_ut needs an explicit feature dim p")
        w = orthoweights.build_max_mahalanobis(p, k, s)
    else:
        raise ValueError(f"unknown head kind {kind!r}")
    report = orthoweights.verify(w)
    orthoweights.save_weights(w, out_path)
    return w, report


def cmd_train(cfg: RunConfig, threads=1):
    t0 = time.perf_counter()
    os.makedirs(cfg.out, exist_ok=True)
    losses.reset_inner_pgd_runs()
    w = build_head(cfg)
    wpath = os.path.join(cfg.out, "weights.ortw")
    orthoweights.save_weights(w, wpath)
    digest_before = _sha256(wpath)

    w, params, rows, train, test = train_model(cfg, w=w)
    _write_csv(
        os.path.join(cfg.out, "metrics.csv"),
        ["epoch", "lr", "train_loss", "train_acc"],
        rows,
    )
    models.save_checkpoint(
        os.path.join(cfg.out, "checkpoint.ortm"),
        cfg.spec,
        params,
        orthoweights.weights_digest(w),
    )

    ev = _eval_split(cfg, train, test)
    test_acc = models.accuracy(params, cfg.spec, w, ev.inputs, ev.labels)
    arows, results = run_attacks(cfg, w, params, ev, threads=threads)
    if arows:
        _write_csv(
            os.path.join(cfg.out, "attacks.csv"),
            ["attack", "method", "norm", "epsilon", "clean_acc", "robust_acc"],
            arows,
        )
        for label, res in results.items():
            atk.export_csv(res, os.path.join(cfg.out, f"samples_{label}.csv"))
    intra, inter = feature_summary(w, params, cfg.spec, ev)
    _write_csv(
        os.path.join(cfg.out, "summary.csv"),
        [
            "final_train_acc", "eval_acc", "mean_intra_dist",
            "min_inter_center_dist", "inner_pgd_runs",
        ],
        [(rows[-1][3], test_acc, intra, inter, losses.INNER_PGD_RUNS)],
    )
    if _sha256(wpath) != digest_before:
        raise AssertionError("classifier weights changed during training")
    return _manifest(cfg, cfg.out, time.perf_counter() - t0)


def cmd_attack(cfg: RunConfig, checkpoint_path, threads=1):
    """Re-evaluate the configured attacks on a saved checkpoint."""
    t0 = time.perf_counter()
    os.makedirs(cfg.out, exist_ok=True)
    spec, params, header = models.load_checkpoint(checkpoint_path)
    w = build_head(cfg)
    if orthoweights.weights_digest(w) != header["head_digest"]:
        raise ValueError(
            "head weights digest mismatch: config does not rebuild the "
            "head this checkpoint was trained against"
        )
    if spec != cfg.spec:
        raise ValueError("encoder spec mismatch between config and checkpoint")
    train, test = load_dataset(cfg.dataset)
    ev = _eval_split(cfg, train, test)
    arows, results = run_attacks(cfg, w, params, ev, threads=threads)
    _write_csv(
        os.path.join(cfg.out, "attacks.csv"),
        ["attack", "method", "norm", "epsilon", "clean_acc", "robust_acc"],
        arows,
    )
    for label, res in results.items():
        atk.export_csv(res, os.path.join(cfg.out, f"samples_{label}.csv"))
    _manifest(cfg, cfg.out, time.perf_counter() - t0)
    return arows


def cmd_redundancy(cfg: RunConfig, threads=1):
    """Accuracy of both head kinds across the feature-width grid.

    For each T in the grid: heads with P = 2^T columns, encoder rebuilt with
    feature_dim 2^T, trained per the config for each of `seeds` repeats.
    Emits raw per-run rows and mean/sd aggregates.
    """
    if not cfg.redundancy:
        raise ValueError("config has no [redundancy] section")
    t0 = time.perf_counter()
    os.makedirs(cfg.out, exist_ok=True)
    train, test = load_dataset(cfg.dataset)
    grid = cfg.redundancy["t_grid"]
    nseeds = cfg.redundancy["seeds"]
    raw, agg = [], []
    for t in grid:
        p = 2 ** t
        for kind_id, kind in enumerate(
            (orthoweights.KIND_MAXMAHA, orthoweights.KIND_DENSE)
        ):
            if kind == orthoweights.KIND_DENSE:
                w = orthoweights.build_hadamard(t, cfg.head_k, cfg.head_s)
            else:
                w = orthoweights.build_max_mahalanobis(p, cfg.head_k, cfg.head_s)
            spec = models.EncoderSpec(
                cfg.spec.input_dim, cfg.spec.hidden, cfg.spec.activation, p
            )
            tr_accs, te_accs = [], []
            for rep in range(nseeds):
                sub = replace(
                    cfg, spec=spec,
                    seed=substream(cfg.seed, STREAM_GRID, t, kind_id, rep),
                )
                _, params, rows, _, _ = train_model(sub, w=w, train=train, test=test)
                tr = rows[-1][3]
                te = (
                    models.accuracy(params, spec, w, test.inputs, test.labels)
                    if test is not None
                    else tr
                )
                raw.append((t, kind, rep, tr, te))
                tr_accs.append(tr)
                te_accs.append(te)
            agg.append(
                (
                    t, kind,
                    float(np.mean(tr_accs)), float(np.std(tr_accs)),
                    float(np.mean(te_accs)), float(np.std(te_accs)),
                )
            )
    _write_csv(
        os.path.join(cfg.out, "redundancy_runs.csv"),
        ["t", "head", "rep", "train_acc", "test_acc"],
        raw,
    )
    _write_csv(
        os.path.join(cfg.out, "redundancy.csv"),
        ["t", "head", "mean_train", "sd_train", "mean_test", "sd_test"],
        agg,
    )
    _manifest(cfg, cfg.out, time.perf_counter() - t0)
    return agg


def cmd_sweep(cfg: RunConfig, threads=1):
    """Train+attack once per (s, alpha) grid cell; one CSV row per cell."""
    if not cfg.sweep:
        raise ValueError("config has no [sweep] section")
    if not cfg.attacks:
        raise ValueError("sweep needs at least one [attack.*] section")
    t0 = time.perf_counter()
    os.makedirs(cfg.out, exist_ok=True)
    train, test = load_dataset(cfg.dataset)
    rows = []
    labels = [lbl for lbl, _ in cfg.attacks]
    for i, s in enumerate(cfg.sweep["s"]):
        for j, alpha in enumerate(cfg.sweep["alpha"]):
            sub = replace(
                cfg,
                head_s=float(s),
                loss=losses.LossConfig(
                    mode=losses.MODE_CENTER_WORST_CASE,
                    alpha=float(alpha),
                    epsilon=cfg.loss.epsilon,
                    inner_iters=cfg.loss.inner_iters,
                ),
                seed=substream(cfg.seed, STREAM_GRID, i, j),
            )
            w, params, erows, _, _ = train_model(sub, train=train, test=test)
            ev = _eval_split(sub, train, test)
            clean = models.accuracy(params, sub.spec, w, ev.inputs, ev.labels)
            arows, _ = run_attacks(sub, w, params, ev, threads=threads)
            rows.append((s, alpha, erows[-1][3], clean, *[r[5] for r in arows]))
    _write_csv(
        os.path.join(cfg.out, "sweep.csv"),
        ["s", "alpha", "train_acc", "clean_acc", *[f"robust_{l}" for l in labels]],
        rows,
    )
    _manifest(cfg, cfg.out, time.perf_counter() - t0)
    return rows


def cmd_feature_stats(cfg: RunConfig, checkpoint_path):
    """Per-class feature distance stats and the inter-center distance matrix."""
    t0 = time.perf_counter()
    os.makedirs(cfg.out, exist_ok=True)
    spec, params, header = models.load_checkpoint(checkpoint_path)
    w = build_head(cfg)
    if orthoweights.weights_digest(w) != header["head_digest"]:
        raise ValueError(
            "head weights digest mismatch: config does not rebuild the "
            "head this checkpoint was trained against"
        )
    train, test = load_dataset(cfg.dataset)
    ev = _eval_split(cfg, train, test)
    f = models.encode(params, spec, ev.inputs)
    rows = []
    for c in range(w.K):
        mask = ev.labels == c
        if not mask.any():
            rows.append((c, 0, 0.0, 0.0))
            continue
        d = np.sqrt(((f[mask] - w.matrix[:, c]) ** 2).sum(axis=1))
        rows.append((c, int(mask.sum()), float(d.mean()), float(d.max())))
    _write_csv(
        os.path.join(cfg.out, "feature_stats.csv"),
        ["class", "count", "mean_dist", "max_dist"],
        rows,
    )
    cols = w.matrix
    dmat = np.sqrt(
        np.maximum(
            ((cols[:, :, None] - cols[:, None, :]) ** 2).sum(axis=0), 0.0
        )
    )
    _write_csv(
        os.path.join(cfg.out, "center_distances.csv"),
        ["class", *[str(i) for i in range(w.K)]],
        [(c, *dmat[c]) for c in range(w.K)],
    )
    _manifest(cfg, cfg.out, time.perf_counter() - t0)
    return rows
