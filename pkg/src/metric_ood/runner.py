"""Training, evaluation and reporting for CE / ML / ODM runs."""

import csv
import json
import logging
import os
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from .config import load_config
from .detector import (ClassCentroids, classify_batch, compute_centroids, max_softmax_scores,
                       ood_scores, pca_project, write_pca_csv)
from .errors import ConfigurationError, FormatError, PairingWarning, TrainingDivergedError
from .losses import batch_metric_loss, build_pairs, cross_entropy_loss, softmax
from .metrics import MetricsReport, ScoreRecord, evaluate_scores, write_score_csv
from .nn import build_network, load_checkpoint, save_checkpoint
from .optim import OptimizerState, optimizer_step

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.bin"
LOSS_LOG = "loss_log.csv"
CENTROIDS = "centroids.csv"
CONFIG_ECHO = "config.ini"
EMBEDDINGS = "embeddings.csv"
RUN_REPORT = "run_report.json"

NOVELTY = "novelty"


@dataclass
class ExperimentData:
    input_shape: tuple
    class_ids: tuple
    train_in: D.LabeledImageSet
    val_in: D.LabeledImageSet
    seen_out: D.LabeledImageSet
    test_in: D.LabeledImageSet
    out_sources: dict  # name -> LabeledImageSet, in report order


def _resolve_paths(cfg):
    raw = cfg.raw["data"]
    if raw["dataset"] == "mnist" and not raw["mnist_dir"]:
        raw["mnist_dir"] = os.environ.get("METRIC_OOD_MNIST_DIR", "")
    if "cifar10" in cfg.split.anomaly_sources + cfg.split.seen_anomalies and not raw["cifar10_paths"]:
        raw["cifar10_paths"] = os.environ.get("METRIC_OOD_CIFAR10", "")


def _anomaly(cfg, name, input_shape, seed_offset):
    raw = cfg.raw["data"]
    if name == "gaussian_noise":
        return D.gaussian_noise_set(int(raw["noise_count"]), input_shape,
                                    mean=float(raw["noise_mean"]), stddev=float(raw["noise_stddev"]),
                                    seed=[cfg.seed, seed_offset])
    if name == "cifar10":
        paths = [p.strip() for p in raw["cifar10_paths"].split(",") if p.strip()]
        if not paths:
            raise ConfigurationError("data.cifar10_paths: cifar10 source requested but no files given")
        missing = [p for p in paths if not Path(p).exists()]
        if missing:
            raise ConfigurationError(f"data.cifar10_paths: missing files {missing}")
        return D.adapt_anomaly(D.load_cifar10_binary(paths), input_shape)
    raise ConfigurationError(f"unknown anomaly source {name!r}")


def load_experiment_data(cfg):
    """Materialise every dataset partition the config refers to."""
    _resolve_paths(cfg)
    raw = cfg.raw["data"]
    if raw["dataset"] == "mnist":
        if not raw["mnist_dir"]:
            raise ConfigurationError("data.mnist_dir: not set (or set METRIC_OOD_MNIST_DIR)")
        train, test = D.load_mnist(raw["mnist_dir"])
    else:
        train, test = _blob_sets(cfg)
    split = D.apply_split(train, test, cfg.split)
    input_shape = train.sample_shape
    train_in, val_in = D.holdout(split.train_in, float(raw["validation_fraction"]), [cfg.seed, 7])

    seen = [split.seen_out] if len(split.seen_out) else []
    for k, name in enumerate(cfg.split.seen_anomalies):
        seen.append(_anomaly(cfg, name, input_shape, 100 + k).relabel("seen_out", D.OOD_LABEL))
    seen_out = D.concat(seen) if seen else split.seen_out

    sources = {}
    if cfg.split.unseen_out_classes:
        sources[NOVELTY] = split.unseen_out
    for k, name in enumerate(cfg.split.anomaly_sources):
        sources[name] = _anomaly(cfg, name, input_shape, 200 + k)
    return ExperimentData(input_shape, cfg.split.in_classes, train_in, val_in, seen_out,
                          split.test_in, sources)


def _blob_sets(cfg):
    raw = cfg.raw["data"]
    n = int(raw["blob_n_per_class"])
    dims = tuple(int(d) for d in raw["blob_dims"].split(","))
    sep = float(raw["blob_separation"])
    ood_sep = float(raw["blob_ood_separation"])
    s = cfg.split
    out_classes = s.seen_out_classes + s.unseen_out_classes
    parts = []
    for offset in (0, 1):
        seed = [cfg.seed, 50 + offset]
        sets = [D.synthetic_blobs(n, s.in_classes, dims, sep, seed=seed)]
        if out_classes:
            sets.append(D.synthetic_blobs(n, out_classes, dims, ood_sep, seed=seed + [1]))
        parts.append(D.concat(sets))
    return parts[0], parts[1]


# -- training -------------------------------------------------------------------------


class _Cycler:
    """Reshuffled-epoch index stream."""

    def __init__(self, n, rng):
        self.n, self.rng = n, rng
        self.perm, self.pos = rng.permutation(n), 0

    def take(self, k):
        out = []
        while k:
            if self.pos == self.n:
                self.perm, self.pos = self.rng.permutation(self.n), 0
            m = min(k, self.n - self.pos)
            out.append(self.perm[self.pos:self.pos + m])
            self.pos += m
            k -= m
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


@dataclass
class TrainResult:
    network: object
    centroids: ClassCentroids
    losses: list
    out_out_pairs: int
    val_accuracy: float
    seconds: float


def _class_index(labels, class_ids):
    lut = {c: i for i, c in enumerate(class_ids)}
    return np.array([lut[int(l)] for l in labels])


def train(cfg, dataset=None, out_dir=None):
    """Train one network; writes artifacts when ``out_dir`` is given."""
    t0 = time.perf_counter()
    ds = dataset or load_experiment_data(cfg)
    net = build_network(cfg.architecture, ds.input_shape, cfg.embedding_dim, seed=cfg.seed)
    opt = OptimizerState(kind=cfg.optimizer, learning_rate=cfg.learning_rate)
    params = net.parameters()

    batch_rng = np.random.default_rng([cfg.seed, 1])
    pair_rng = np.random.default_rng([cfg.seed, 2])
    in_stream = _Cycler(len(ds.train_in), batch_rng)
    out_stream = _Cycler(len(ds.seen_out), batch_rng) if len(ds.seen_out) else None
    targets = _class_index(ds.train_in.labels, ds.class_ids)

    mining = cfg.mode == "odm"
    n_out_cross = int(round(cfg.pairs.cross_ratio * cfg.batch_size)) if mining else 0
    losses, out_out = [], 0
    for step in range(1, cfg.steps + 1):
        cross = mining and cfg.pairs.is_cross_step(step) and n_out_cross > 0
        n_out = n_out_cross if cross else 0
        idx = in_stream.take(cfg.batch_size - n_out)
        x = ds.train_in.images[idx]
        labels = ds.train_in.labels[idx]
        is_in = np.ones(len(idx), dtype=bool)
        if n_out:
            oidx = out_stream.take(n_out)
            x = np.concatenate([x, ds.seen_out.images[oidx]])
            labels = np.concatenate([labels, np.full(n_out, D.OOD_LABEL)])
            is_in = np.concatenate([is_in, np.zeros(n_out, dtype=bool)])

        emb, acts = net.forward(x)
        n_pairs = n_cross = 0
        if cfg.mode == "ce":
            value, grad = cross_entropy_loss(emb, targets[idx])
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", PairingWarning)
                pairs = build_pairs(labels, is_in, cfg.pairs, pair_rng, step=step)
                out = batch_metric_loss(emb, pairs, cfg.margin, kind="odm" if mining else "contrastive")
            value, grad = out.value, out.embedding_gradients
            n_pairs, n_cross = len(pairs), pairs.n_cross(is_in)
            out_out += pairs.n_out_out(is_in)
        if not np.isfinite(value):
            raise TrainingDivergedError(step, value)
        grads = net.flat_gradients(net.backward(acts, grad))
        optimizer_step(opt, params, grads)
        losses.append((step, value, n_pairs, n_cross))
        if step % 500 == 0:
            log.info("step %d loss %.6f", step, value)

    if out_out:
        raise AssertionError(f"{out_out} out/out pairs were built during training")
    centroids = None
    if cfg.mode == "ce":
        pred = np.asarray(ds.class_ids)[net.embed(ds.val_in.images).argmax(axis=1)]
    else:
        centroids = compute_centroids(net.embed(ds.train_in.images), ds.train_in.labels, ds.class_ids)
        pred = classify_batch(net.embed(ds.val_in.images), centroids)
    val_acc = 100.0 * float(np.mean(pred == ds.val_in.labels)) if len(ds.val_in) else float("nan")
    result = TrainResult(net, centroids, losses, out_out, val_acc, time.perf_counter() - t0)
    if out_dir is not None:
        write_train_artifacts(cfg, result, out_dir)
    return result


def write_train_artifacts(cfg, result, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.network, out / CHECKPOINT,
                    meta={"mode": cfg.mode, "class_ids": list(cfg.split.in_classes)})
    with open(out / LOSS_LOG, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss", "n_pairs", "n_cross_pairs"])
        for step, value, n_pairs, n_cross in result.losses:
            w.writerow([step, repr(value), n_pairs, n_cross])
    if result.centroids is not None:
        write_centroids(out / CENTROIDS, result.centroids)
    (out / CONFIG_ECHO).write_text(cfg.to_ini())
    summary = {"mode": cfg.mode, "steps": cfg.steps, "final_loss": result.losses[-1][1],
               "out_out_pairs": result.out_out_pairs, "validation_accuracy": result.val_accuracy,
               "seconds": result.seconds}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def write_centroids(path, centroids):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class_id"] + [f"c_{i + 1}" for i in range(centroids.dim)])
        for c, row in zip(centroids.class_ids, centroids.centers):
            w.writerow([c] + [repr(float(v)) for v in row])


def read_centroids(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][0] != "class_id":
        raise FormatError(f"{path}: missing class_id header")
    ids = tuple(int(r[0]) for r in rows[1:])
    centers = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return ClassCentroids(ids, centers)


# -- evaluation -----------------------------------------------------------------------


def _score(cfg, net, centroids, images):
    emb = net.embed(images)
    if cfg.mode == "ce":
        probs = softmax(emb)
        return max_softmax_scores(emb), np.asarray(cfg.split.in_classes)[probs.argmax(axis=1)], probs
    return ood_scores(emb, centroids), classify_batch(emb, centroids), emb


def evaluate_run(cfg, run_dir, dataset=None, checkpoint=None):
    """Score test-in against every out source; writes metrics and scores."""
    t0 = time.perf_counter()
    run = Path(run_dir)
    ckpt = Path(checkpoint) if checkpoint else run / CHECKPOINT
    needed = [ckpt] + ([] if cfg.mode == "ce" else [run / CENTROIDS])
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        raise ConfigurationError(f"run artifacts missing: {missing}")
    net, meta = load_checkpoint(ckpt)
    ds = dataset or load_experiment_data(cfg)
    expected = build_network(cfg.architecture, ds.input_shape, cfg.embedding_dim, seed=0)
    if net.descriptors() != expected.descriptors() or net.input_shape != expected.input_shape:
        raise ConfigurationError("checkpoint architecture does not match config "
                                 f"({cfg.architecture}, embedding_dim={cfg.embedding_dim})")
    if meta.get("mode", cfg.mode) != cfg.mode:
        raise ConfigurationError(f"checkpoint was trained in mode {meta['mode']!r}, config says {cfg.mode!r}")
    centroids = None if cfg.mode == "ce" else read_centroids(run / CENTROIDS)

    in_scores, in_pred, in_emb = _score(cfg, net, centroids, ds.test_in.images)
    accuracy = 100.0 * float(np.mean(in_pred == ds.test_in.labels))
    in_records = [ScoreRecord(float(s), True, int(p), int(t))
                  for s, p, t in zip(in_scores, in_pred, ds.test_in.labels)]
    k_plot = int(cfg.raw["data"]["embeddings_per_source"])
    plot_rows = [(in_emb[:k_plot], ds.test_in.labels[:k_plot], ds.test_in.origin[:k_plot])]
    metrics = {}
    for name, source in ds.out_sources.items():
        scores, pred, emb = _score(cfg, net, centroids, source.images)
        report = evaluate_scores(in_scores, scores)
        metrics[name] = report
        (run / f"metrics_{name}.json").write_text(report.to_json())
        write_score_csv(run / f"scores_{name}.csv",
                        in_records + [ScoreRecord(float(s), False, int(p), None)
                                      for s, p in zip(scores, pred)])
        plot_rows.append((emb[:k_plot], source.labels[:k_plot], source.origin[:k_plot]))

    with open(run / EMBEDDINGS, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        dim = in_emb.shape[1]
        w.writerow([f"e_{i + 1}" for i in range(dim)] + ["label", "origin"])
        for emb, labels, origins in plot_rows:
            for row, lab, org in zip(emb, labels, origins):
                w.writerow([repr(float(v)) for v in row] + [int(lab), org])

    report = {
        "run": run.name,
        "mode": cfg.mode,
        "in_dist_accuracy": accuracy,
        "metrics": {k: v.to_dict() for k, v in metrics.items()},
        "config": cfg.raw,
        "timings": {"eval_seconds": time.perf_counter() - t0},
    }
    summary = run / "train_summary.json"
    if summary.exists():
        report["timings"]["train_seconds"] = json.loads(summary.read_text()).get("seconds")
    (run / RUN_REPORT).write_text(json.dumps(report, indent=2) + "\n")
    return report


def config_from_run(run_dir, overrides=()):
    echo = Path(run_dir) / CONFIG_ECHO
    if not echo.exists():
        raise ConfigurationError(f"run artifacts missing: ['{echo}']")
    return load_config(echo, overrides=overrides)


# -- report ---------------------------------------------------------------------------

REPORT_COLUMNS = ["method", "run", "in_dist_accuracy", "out_dist", "fpr_at_95_tpr", "detection_error",
                  "auroc", "aupr_in", "aupr_out", "tnr_at_95_tpr", "detection_accuracy", "n_in", "n_out"]
_INT_COLUMNS = {"n_in", "n_out"}
_STR_COLUMNS = {"method", "run", "out_dist"}


def report_rows(run_reports):
    rows = []
    for rep in run_reports:
        for source, m in rep["metrics"].items():
            row = {"method": rep["mode"].upper(), "run": rep["run"],
                   "in_dist_accuracy": rep["in_dist_accuracy"], "out_dist": source}
            row.update({k: m[k] for k in REPORT_COLUMNS if k in m})
            rows.append(row)
    return rows


def write_report_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r[k] if k in _STR_COLUMNS | _INT_COLUMNS else repr(float(r[k]))
                        for k in REPORT_COLUMNS])


def read_report_csv(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != REPORT_COLUMNS:
            raise FormatError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for r in reader:
            rows.append({k: (r[k] if k in _STR_COLUMNS else int(r[k]) if k in _INT_COLUMNS else float(r[k]))
                         for k in REPORT_COLUMNS})
    return rows


def make_report(run_dirs, out_dir):
    """Comparison table across runs plus a PCA (k=3) projection per run."""
    runs = [Path(r) for r in run_dirs]
    if not runs:
        raise ConfigurationError("report needs at least one run directory")
    missing = [str(r / f) for r in runs for f in (RUN_REPORT, EMBEDDINGS) if not (r / f).exists()]
    if missing:
        raise ConfigurationError(f"run artifacts missing: {missing}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = [json.loads((r / RUN_REPORT).read_text()) for r in runs]
    rows = report_rows(reports)
    write_report_csv(out / "report.csv", rows)
    (out / "report.json").write_text(json.dumps(rows, indent=2) + "\n")
    for r in runs:
        emb, labels, origins = read_embeddings(r / EMBEDDINGS)
        k = min(3, emb.shape[1])
        pca = pca_project(emb, k)
        write_pca_csv(out / f"pca_{r.name}.csv", pca.projected, labels, origins)
    return rows


def read_embeddings(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = list(reader)
    dim = len(header) - 2
    emb = np.array([[float(v) for v in r[:dim]] for r in rows])
    labels = np.array([int(r[dim]) for r in rows])
    origins = [r[dim + 1] for r in rows]
    return emb, labels, origins


def metrics_from_run(run_dir):
    rep = json.loads((Path(run_dir) / RUN_REPORT).read_text())
    return rep["in_dist_accuracy"], {k: MetricsReport.from_dict(v) for k, v in rep["metrics"].items()}
