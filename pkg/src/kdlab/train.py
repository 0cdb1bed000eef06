"""Teacher pretraining, student distillation, and evaluation.

A run is fully determined by its config: every random draw (dataset, init,
shuffling, tie-breaking) comes from named streams derived from the config
seeds, and all arithmetic is float64, so identical configs reproduce
bit-identical reports and checkpoints.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import data as datasets
from . import losses, metrics
from . import tensor as T
from .config import ExperimentConfig
from .nets import Network, Projector, VarianceHead, build_convnet, build_mlp
from .tensor import DomainError, Tensor, backward, no_grad, sgd_step, zero_grads
from .uncertainty import VariancePrediction, extract_variance_table, uncertainty_loss
from .weighting import WarmupSchedule, WeightingScheme, lambda_at, load_variance_table


class TrainingDiverged(RuntimeError):
    """Training produced non-finite values; the run was aborted."""


@dataclass
class TrainReport:
    """Per-epoch metrics plus final per-sample diagnostics.

    ``wall_clock_s`` is informational only and is never written into run
    artifacts, which must be bit-identical across reruns.
    """

    rows: list = field(default_factory=list)  # (epoch, split, metric_name, value)
    final_metric: float = 0.0
    metric_name: str = "top1_accuracy"
    gap_ids: np.ndarray | None = None
    final_gaps: np.ndarray | None = None
    final_sigma_sq: np.ndarray | None = None
    sigma_degenerate: bool = False
    gap_history: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0


@dataclass
class DistillResult:
    student: Network
    projector: Projector
    head: VarianceHead | None
    report: TrainReport


def build_dataset(cfg: ExperimentConfig) -> datasets.DatasetBundle:
    kind = cfg["dataset.kind"]
    if kind == "synthetic_blobs":
        return datasets.make_blobs(
            seed=cfg["dataset.seed"],
            num_classes=cfg["dataset.num_classes"],
            dim=cfg["dataset.dim"],
            train_size=cfg["dataset.train_size"],
            test_size=cfg["dataset.test_size"],
            cluster_std=cfg["dataset.cluster_std"],
            center_scale=cfg["dataset.center_scale"],
            label_noise=cfg["dataset.label_noise"],
        )
    if kind == "two_spirals":
        return datasets.make_two_spirals(
            seed=cfg["dataset.seed"],
            train_size=cfg["dataset.train_size"],
            test_size=cfg["dataset.test_size"],
            noise_std=cfg["dataset.spiral_noise"],
            label_noise=cfg["dataset.label_noise"],
        )
    return datasets.load_idx_dataset(
        cfg["dataset.idx_train_images"],
        cfg["dataset.idx_train_labels"],
        cfg["dataset.idx_test_images"],
        cfg["dataset.idx_test_labels"],
        limit_train=cfg["dataset.idx_limit_train"],
        limit_test=cfg["dataset.idx_limit_test"],
    )


def build_network(cfg: ExperimentConfig, role: str, data: datasets.DatasetBundle,
                  rng: np.random.Generator) -> Network:
    width = cfg[f"{role}.width"]
    depth = cfg[f"{role}.depth"]
    if data.kind == "idx_images":
        channels = tuple(int(c) for c in cfg[f"{role}.channels"].split(","))
        emb = cfg[f"{role}.embedding_dim"] or width
        return build_convnet(rng, data.input_shape, channels, emb, data.num_classes)
    return build_mlp(rng, data.input_shape[0], width, depth, data.num_classes)


def _batches(order: np.ndarray, batch_size: int):
    """Consecutive slices of a shuffled index order; a trailing batch of
    size 1 is dropped (batch statistics need at least 2 samples)."""
    for lo in range(0, len(order), batch_size):
        batch = order[lo : lo + batch_size]
        if len(batch) >= 2:
            yield batch


def _pk_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Class-balanced batches for metric learning: every class contributes
    ``batch_size // num_classes`` samples per batch."""
    classes = np.unique(labels)
    k = batch_size // len(classes)
    if k < 2:
        raise ValueError(
            f"metric task needs batch_size >= 2 * num_classes, got {batch_size} for {len(classes)} classes"
        )
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in classes]
    n_batches = min(len(p) for p in pools) // k
    for b in range(n_batches):
        yield np.concatenate([p[b * k : (b + 1) * k] for p in pools])


def _task_loss(cfg: ExperimentConfig, out, labels: np.ndarray) -> Tensor:
    if cfg["task.kind"] == "classification":
        return losses.cross_entropy(out.logits, labels)
    return losses.triplet_loss(out.embedding, labels, margin=cfg["train.triplet_margin"])


def _lr_at(lr: float, drop_epoch: int, drop_factor: float, epoch: int) -> float:
    if drop_epoch > 0 and epoch >= drop_epoch:
        return lr * drop_factor
    return lr


def train_teacher(cfg: ExperimentConfig, data: datasets.DatasetBundle) -> tuple[Network, TrainReport]:
    started = time.monotonic()
    rng_init = np.random.default_rng([cfg.seed, 11])
    rng_shuffle = np.random.default_rng([cfg.seed, 12])
    net = build_network(cfg, "teacher", data, rng_init)
    params = net.parameters()
    epochs = cfg["teacher.epochs"]
    report = TrainReport(metric_name=_metric_name(cfg))

    try:
        for epoch in range(epochs):
            lr = _lr_at(cfg["teacher.lr"], cfg["teacher.lr_drop_epoch"],
                        cfg["teacher.lr_drop_factor"], epoch)
            for batch in _epoch_batches(cfg, data, rng_shuffle, cfg["teacher.batch_size"]):
                x = Tensor(data.train.inputs[batch])
                out = net.forward(x, train=True)
                loss = _task_loss(cfg, out, data.train.labels[batch])
                zero_grads(params)
                backward(loss)
                sgd_step(params, lr, cfg["teacher.momentum"], cfg["teacher.weight_decay"])
            _log_epoch_metrics(cfg, net, data, epoch + 1, report)
    except DomainError as err:
        raise TrainingDiverged(f"teacher training diverged at epoch {epoch + 1}: {err}") from err

    report.final_metric = _evaluate_split(cfg, net, data.test)[report.metric_name]
    report.wall_clock_s = time.monotonic() - started
    return net, report


def _epoch_batches(cfg, data, rng, batch_size):
    if cfg["task.kind"] == "metric":
        yield from _pk_batches(data.train.labels, batch_size, rng)
    else:
        yield from _batches(rng.permutation(len(data.train)), batch_size)


def _metric_name(cfg: ExperimentConfig) -> str:
    return "top1_accuracy" if cfg["task.kind"] == "classification" else "recall_at_1"


def _forward_numpy(net: Network, inputs: np.ndarray, batch_size: int = 256):
    """Evaluation-mode logits and embeddings as plain arrays."""
    logits, embs = [], []
    with no_grad():
        for lo in range(0, len(inputs), batch_size):
            out = net.forward(Tensor(inputs[lo : lo + batch_size]), train=False)
            logits.append(out.logits.data)
            embs.append(out.embedding.data)
    return np.concatenate(logits), np.concatenate(embs)


def _evaluate_split(cfg: ExperimentConfig, net: Network, split: datasets.Split) -> dict[str, float]:
    logits, embs = _forward_numpy(net, split.inputs)
    if cfg["task.kind"] == "classification":
        return {"top1_accuracy": metrics.top1_accuracy(logits, split.labels)}
    tie_rng = np.random.default_rng([cfg.seed, 31])
    return {
        "recall_at_1": metrics.recall_at_1(embs, split.labels, tie_rng),
        "mAP": metrics.mean_average_precision(embs, split.labels),
    }


def evaluate(net: Network, split: datasets.Split, metric: str,
             tie_seed: int = 0) -> float:
    """Standalone metric evaluation on one split."""
    if metric not in metrics.METRIC_NAMES:
        raise ValueError(f"unknown metric '{metric}'")
    logits, embs = _forward_numpy(net, split.inputs)
    if metric == "top1_accuracy":
        return metrics.top1_accuracy(logits, split.labels)
    if metric == "recall_at_1":
        return metrics.recall_at_1(embs, split.labels, np.random.default_rng([tie_seed, 31]))
    return metrics.mean_average_precision(embs, split.labels)


def _log_epoch_metrics(cfg, net, data, epoch, report):
    for split_name, split in (("train", data.train), ("test", data.test)):
        for name, value in _evaluate_split(cfg, net, split).items():
            report.rows.append((epoch, split_name, name, value))


# -- distillation -----------------------------------------------------------


def _teacher_target_arrays(cfg: ExperimentConfig, teacher: Network,
                           inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Precompute the frozen teacher's targets for every sample (the teacher
    is deterministic in evaluation mode, so this is loop-invariant)."""
    target = cfg["distill.target"]
    tap = cfg["distill.tap"]
    chunks = []
    with no_grad():
        for lo in range(0, len(inputs), batch_size):
            out = teacher.forward(Tensor(inputs[lo : lo + batch_size]), train=False)
            if target == "embedding":
                chunks.append(out.embedding.data)
            elif target in ("logits", "logits_kl"):
                chunks.append(out.logits.data)
            elif target == "feature_map":
                chunks.append(out.taps[tap].data)
            else:  # attention_map
                chunks.append(losses.attention_map(out.taps[tap]).data)
    return np.concatenate(chunks)


def _student_target_value(cfg: ExperimentConfig, out, projector: Projector) -> Tensor:
    target = cfg["distill.target"]
    if target == "embedding":
        return projector(out.embedding)
    if target in ("logits", "logits_kl"):
        return out.logits
    fmap = out.taps[cfg["distill.tap"]]
    if target == "feature_map":
        return projector(fmap)
    return losses.attention_map(fmap)


def _flatten_rows(x: Tensor) -> Tensor:
    if x.ndim == 2:
        return x
    return T.reshape(x, (x.shape[0], -1))


def _make_projector(cfg: ExperimentConfig, teacher: Network, student: Network,
                    rng: np.random.Generator) -> Projector:
    target = cfg["distill.target"]
    if target == "embedding":
        return Projector.for_vectors(rng, student.embedding_dim, teacher.embedding_dim)
    if target == "feature_map":
        tap = cfg["distill.tap"]
        s_probe = student.forward(Tensor(np.zeros((2,) + student.input_shape)), train=False)
        t_probe = teacher.forward(Tensor(np.zeros((2,) + teacher.input_shape)), train=False)
        s_shape, t_shape = s_probe.taps[tap].shape, t_probe.taps[tap].shape
        if s_shape[2:] != t_shape[2:]:
            raise ValueError(f"tap '{tap}' spatial shapes differ: {s_shape} vs {t_shape}")
        return Projector.for_feature_maps(rng, s_shape[1], t_shape[1])
    return Projector(None)


def _build_scheme(cfg: ExperimentConfig) -> WeightingScheme | None:
    if cfg["uncertainty.enabled"]:
        return None
    kind = cfg["distill.scheme"]
    table = None
    if kind == "frozen_variance":
        table = load_variance_table(cfg["distill.variance_table"])
    return WeightingScheme(
        kind=kind,
        temperature=cfg["distill.temperature"],
        alpha=cfg["distill.alpha"],
        discard_count=cfg["distill.discard_count"],
        variance_table=table,
    )


def distill_student(cfg: ExperimentConfig, data: datasets.DatasetBundle,
                    teacher: Network) -> DistillResult:
    """Train a student against the frozen teacher per the config's weighting
    mechanism; logs per-sample gaps (evaluation mode) at every epoch end."""
    started = time.monotonic()
    rng_student = np.random.default_rng([cfg.seed, 21])
    rng_proj = np.random.default_rng([cfg.seed, 22])
    rng_head = np.random.default_rng([cfg.seed, 23])
    rng_shuffle = np.random.default_rng([cfg.seed, 24])

    student = build_network(cfg, "student", data, rng_student)
    projector = _make_projector(cfg, teacher, student, rng_proj)
    scheme = _build_scheme(cfg)

    teacher_targets = _teacher_target_arrays(cfg, teacher, data.train.inputs)
    flat_dim = int(np.prod(teacher_targets.shape[1:]))

    head: VarianceHead | None = None
    if cfg["uncertainty.enabled"]:
        variance_dim = flat_dim if cfg["uncertainty.per_dimension"] else 1
        head = VarianceHead(rng_head, student.embedding_dim, variance_dim,
                            gamma_init=cfg["uncertainty.head_gamma_init"])

    task_params = student.parameters()
    params = task_params + projector.parameters()
    head_params: list = []
    if head is not None:
        head_params = head.parameters()
        params = params + head_params

    schedule = WarmupSchedule(cfg["distill.warmup_epochs"], cfg["distill.lambda"])
    epochs = cfg["train.epochs"]
    report = TrainReport(metric_name=_metric_name(cfg))
    use_kl = cfg["distill.target"] == "logits_kl"

    try:
        for epoch in range(epochs):
            lam = lambda_at(schedule, epoch)
            lr = _lr_at(cfg["optim.lr"], cfg["optim.lr_drop_epoch"],
                        cfg["optim.lr_drop_factor"], epoch)
            for batch in _epoch_batches(cfg, data, rng_shuffle, cfg["train.batch_size"]):
                x = Tensor(data.train.inputs[batch])
                out = student.forward(x, train=True)
                loss = _task_loss(cfg, out, data.train.labels[batch])
                if lam > 0:
                    tt = teacher_targets[batch]
                    if use_kl:
                        distill = losses.kl_distill_loss(
                            out.logits, Tensor(tt), cfg["distill.kl_temperature"]
                        )
                    else:
                        sv = _student_target_value(cfg, out, projector)
                        if head is not None:
                            pred = VariancePrediction(head.predict_log_variance(out.embedding))
                            terms = uncertainty_loss(
                                _flatten_rows(sv), Tensor(tt.reshape(len(batch), -1)), pred
                            )
                            distill = terms.total
                        else:
                            d = losses.gap(losses.DistillTarget(
                                cfg["distill.target"], Tensor(tt), sv))
                            w = scheme.weights(d.data, batch_ids=data.train.ids[batch])
                            distill = losses.weighted_distill_loss(d, w)
                    loss = losses.total_loss(loss, distill, lam)
                # with lambda 0 the distill branch is skipped, so the
                # projector/head are not in the graph and must not be stepped
                zero_grads(params)
                backward(loss)
                if lam > 0:
                    sgd_step(params[: len(params) - len(head_params)], lr,
                             cfg["optim.momentum"], cfg["optim.weight_decay"])
                    if head_params:
                        # before the start epoch only the BN shift trains, so
                        # predicted variances track the overall residual scale
                        # without differentiating samples prematurely
                        if epoch >= cfg["uncertainty.head_start_epoch"]:
                            stepped = head_params
                        else:
                            stepped = [head.bn.beta]
                        sgd_step(stepped, lr * cfg["uncertainty.head_lr_scale"],
                                 cfg["optim.momentum"], cfg["optim.weight_decay"])
                else:
                    sgd_step(task_params, lr, cfg["optim.momentum"], cfg["optim.weight_decay"])

            _log_epoch_metrics(cfg, student, data, epoch + 1, report)
            gaps = _eval_mode_gaps(cfg, student, projector, teacher_targets, data)
            report.gap_history[epoch + 1] = gaps
            report.rows.append((epoch + 1, "train", "mean_gap", float(gaps.mean())))
    except DomainError as err:
        raise TrainingDiverged(f"distillation diverged at epoch {epoch + 1}: {err}") from err

    report.gap_ids = data.train.ids.copy()
    report.final_gaps = report.gap_history.get(epochs)
    if report.final_gaps is None:  # zero-epoch run
        report.final_gaps = _eval_mode_gaps(cfg, student, projector, teacher_targets, data)
    if head is not None:
        _, sigma, degenerate = extract_variance_table(
            student, head, data.train.inputs, data.train.ids)
        report.final_sigma_sq = sigma
        report.sigma_degenerate = degenerate
    report.final_metric = _evaluate_split(cfg, student, data.test)[report.metric_name]
    report.wall_clock_s = time.monotonic() - started
    return DistillResult(student=student, projector=projector, head=head, report=report)


def _eval_mode_gaps(cfg, student, projector, teacher_targets, data,
                    batch_size: int = 256) -> np.ndarray:
    """Per-sample gaps over the train split, recomputed in evaluation mode
    so batch statistics cannot leak into the diagnostics."""
    if cfg["distill.target"] == "logits_kl":
        return _eval_mode_kl(cfg, student, teacher_targets, data, batch_size)
    out_gaps = np.empty(len(data.train))
    with no_grad():
        for lo in range(0, len(data.train), batch_size):
            hi = min(lo + batch_size, len(data.train))
            out = student.forward(Tensor(data.train.inputs[lo:hi]), train=False)
            sv = _student_target_value(cfg, out, projector)
            tt = Tensor(teacher_targets[lo:hi])
            d = losses.gap(losses.DistillTarget(cfg["distill.target"], tt, sv))
            out_gaps[lo:hi] = d.data
    return out_gaps


def _eval_mode_kl(cfg, student, teacher_targets, data, batch_size) -> np.ndarray:
    """Per-sample softened KL when the target is the class distribution."""
    temp = cfg["distill.kl_temperature"]
    out_vals = np.empty(len(data.train))
    with no_grad():
        for lo in range(0, len(data.train), batch_size):
            hi = min(lo + batch_size, len(data.train))
            out = student.forward(Tensor(data.train.inputs[lo:hi]), train=False)
            sl = out.logits.data / temp
            tl = teacher_targets[lo:hi] / temp
            ps = np.exp(sl - sl.max(axis=1, keepdims=True))
            ps /= ps.sum(axis=1, keepdims=True)
            pt = np.exp(tl - tl.max(axis=1, keepdims=True))
            pt /= pt.sum(axis=1, keepdims=True)
            kl = np.sum(np.where(pt > 0, pt * np.log(np.maximum(pt, 1e-300) / np.maximum(ps, 1e-300)), 0.0), axis=1)
            out_vals[lo:hi] = temp * temp * kl
    return out_vals
