"""Training loops, optimizer, metrics, and the rank-sweep harness.

The fine-tuning loop minimizes the classification loss plus
lambda1 * mean(orthogonality loss) + lambda2 * mean(spectral-energy loss),
the means running over the adapted weight matrices; both regularizer terms
are defined as 0 for non-svd regimes. Every run is deterministic given its
config and seed.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .analysis import effective_rank
from .data import Dataset, SyntheticSpec, gen_dataset
from .errors import ConfigError, NumericalError, PretrainingFailure, ValidationError
from .model import (
    REGIMES,
    BackboneConfig,
    ToyModel,
    adapt_model,
    cls_loss,
    cls_loss_grad,
    init_model,
    model_backward,
    model_forward,
)
from .adapters import RegularizerWeights
from .seeding import derive_seed, substream

_REGIME_TO_KIND = {"svd": "svd", "lora": "lora", "fft": "full", "linear_probe": "frozen"}


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch: int = 32
    iters: int = 20000
    lambda1: float = 0.03
    lambda2: float = 0.01
    regime: str = "svd"
    rank: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.iters < 0:
            raise ConfigError("iters must be >= 0")
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        RegularizerWeights(self.lambda1, self.lambda2)


@dataclass
class PretrainConfig:
    lr: float = 1e-3
    batch: int = 32
    max_iters: int = 3000
    eval_every: int = 50
    target_accuracy: float = 0.95
    min_accuracy: float = 0.6
    seed: int = 0


@dataclass
class ExperimentReport:
    """Per-iteration traces plus final metrics for one training run."""

    config: dict
    iters: list = field(default_factory=list)
    total_loss: list = field(default_factory=list)
    real_loss: list = field(default_factory=list)
    fake_loss: list = field(default_factory=list)
    orth_loss: list = field(default_factory=list)
    sv_loss: list = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    rank_before: int = None
    rank_after: int = None
    rank_threshold: float = 0.9
    trainable_params: int = 0
    error: str = None

    def trace_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iter", "total_loss", "real_loss", "fake_loss", "orth_loss", "sv_loss"])
        for row in zip(self.iters, self.total_loss, self.real_loss,
                       self.fake_loss, self.orth_loss, self.sv_loss):
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])
        return buf.getvalue()

    def summary(self):
        return {
            "config": self.config,
            "final_metrics": self.final_metrics,
            "rank_before": self.rank_before,
            "rank_after": self.rank_after,
            "rank_threshold": self.rank_threshold,
            "trainable_params": self.trainable_params,
            "iterations": len(self.iters),
            "error": self.error,
        }

    def summary_json(self):
        return json.dumps(self.summary(), sort_keys=True, indent=2) + "\n"


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=1):
    """One Adam update, in place. ``state`` maps names to (m, v) moment pairs
    and is created lazily; missing gradients count as zero."""
    if t < 1:
        raise ValidationError("adam_step needs t >= 1")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        else:
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ValidationError(f"gradient shape mismatch for {name}")
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for {name}")
        if name not in state:
            state[name] = (np.zeros_like(p), np.zeros_like(p))
        m, v = state[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def roc_auc(scores, labels):
    """P(score of a random positive > score of a random negative), ties at 1/2.

    Computed as the normalized Mann-Whitney U from average ranks.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError("scores and labels must be matching 1-D arrays")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("roc_auc needs both classes present")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy_at_half(probabilities, labels):
    """Fraction of samples where (p >= 0.5) matches the label."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise ValidationError("probabilities and labels must be matching 1-D arrays")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValidationError("probabilities must lie in [0, 1]")
    return float(((p >= 0.5).astype(np.int64) == y).mean())


def fake_probability(logits):
    """Softmax probability of the fake class (column 1)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e[:, 1] / e.sum(axis=1)


def evaluate(model: ToyModel, ds: Dataset):
    """Inference pass: returns (logits, features, fake probabilities)."""
    logits, features = model_forward(model, ds.x, train=False)
    return logits, features, fake_probability(logits)


def binary_metrics(model, ds):
    logits, _, probs = evaluate(model, ds)
    return {"auc": roc_auc(probs, ds.y), "accuracy": accuracy_at_half(probs, ds.y)}


def _sample_batch(rng, ds: Dataset, batch):
    idx = rng.integers(0, ds.groups, size=batch)
    return ds.x[ds.group_rows(idx)], ds.y[idx]


def _regularizers(model, lambda1, lambda2):
    """(orth_mean, sv_mean, per-parameter gradient dict) with the 1/m
    averaging over the adapted matrices. Only meaningful for svd adapters."""
    adapters = model.adapters()
    m = len(adapters)
    orth_mean = 0.0
    sv_mean = 0.0
    grads = {}
    for name, adapter in adapters:
        orth, sv, g = adapter.reg_terms(lambda1 / m, lambda2 / m)
        orth_mean += orth / m
        sv_mean += sv / m
        for key, arr in g.items():
            grads[f"{name}.{key}"] = arr
    return orth_mean, sv_mean, grads


def train(model: ToyModel, dataset: Dataset, cfg: TrainConfig,
          eval_sets=None, rank_set=None, rank_threshold=0.9):
    """Fine-tune ``model`` on ``dataset`` and report traces and final metrics.

    ``eval_sets`` maps names to binary datasets scored with AUC/accuracy after
    training; ``rank_set`` supplies features for the effective-rank probe
    before and after. Divergence aborts with the partial report and an error
    flag instead of raising.
    """
    expected_kind = _REGIME_TO_KIND[cfg.regime]
    kinds = {a.kind for _, a in model.adapters()}
    if kinds != {expected_kind}:
        raise ValidationError(f"model adapters {kinds} do not match regime {cfg.regime!r}")

    report = ExperimentReport(config=asdict(cfg))
    report.rank_threshold = rank_threshold
    report.trainable_params = model.count_trainable()
    if rank_set is not None:
        _, feats, _ = evaluate(model, rank_set)
        report.rank_before = effective_rank(feats, rank_threshold).effective_rank

    params = model.trainable()
    state = {}
    rng = substream(cfg.seed, "batches")
    is_svd = cfg.regime == "svd"

    for t in range(1, cfg.iters + 1):
        x, y = _sample_batch(rng, dataset, cfg.batch)
        logits, _ = model_forward(model, x, train=True)
        loss, real, fake = cls_loss(logits, y)
        if is_svd:
            orth_mean, sv_mean, reg_grads = _regularizers(model, cfg.lambda1, cfg.lambda2)
        else:
            orth_mean, sv_mean, reg_grads = 0.0, 0.0, {}
        total = loss + cfg.lambda1 * orth_mean + cfg.lambda2 * sv_mean

        report.iters.append(t - 1)
        report.total_loss.append(total)
        report.real_loss.append(real)
        report.fake_loss.append(fake)
        report.orth_loss.append(orth_mean)
        report.sv_loss.append(sv_mean)

        if not np.isfinite(total):
            report.error = f"diverged at iteration {t - 1}"
            break

        grads = model_backward(model, cls_loss_grad(logits, y))
        for key, g in reg_grads.items():
            grads[key] = grads.get(key, 0.0) + g
        adam_step(params, grads, state, cfg.lr, t=t)

    if eval_sets:
        for name, ds in eval_sets.items():
            report.final_metrics[name] = binary_metrics(model, ds)
    if rank_set is not None:
        _, feats, _ = evaluate(model, rank_set)
        report.rank_after = effective_rank(feats, rank_threshold).effective_rank
    return report


@dataclass
class PretrainResult:
    model: ToyModel
    accuracy: float
    iterations: int
    loss_trace: list
    accuracy_trace: list  # (iter, accuracy) pairs


def semantic_shards(spec: SyntheticSpec, seq_len):
    """The pretraining split, split 80/20 into train and held-out shards."""
    ds = gen_dataset(spec, "pretrain", seq_len)
    cut = max(1, int(ds.groups * 0.8))
    train_ds = Dataset(x=ds.x[: cut * seq_len], y=ds.y[:cut], seq_len=seq_len, split="pretrain")
    eval_ds = Dataset(x=ds.x[cut * seq_len :], y=ds.y[cut:], seq_len=seq_len, split="pretrain")
    return train_ds, eval_ds


def semantic_accuracy(model, ds):
    logits, _ = model_forward(model, ds.x, train=False)
    return float((logits.argmax(axis=1) == ds.y).mean())


def pretrain(backbone: BackboneConfig, spec: SyntheticSpec, cfg: PretrainConfig = None):
    """Train a fully-trainable backbone on the K-way semantic task.

    Stops once held-out accuracy reaches the target (checked every
    ``eval_every`` iterations) or at the cap; raises PretrainingFailure if the
    cap is hit below the minimum bar.
    """
    cfg = cfg or PretrainConfig()
    bb = replace(backbone, adapter_kind="full")
    train_ds, eval_ds = semantic_shards(spec, bb.seq_len)
    model = init_model(bb, cfg.seed, head_dim=spec.clusters)
    params = model.trainable()
    state = {}
    rng = substream(cfg.seed, "pretrain-batches")
    losses = []
    acc_trace = []
    accuracy = semantic_accuracy(model, eval_ds)
    iterations = 0
    for t in range(1, cfg.max_iters + 1):
        x, y = _sample_batch(rng, train_ds, cfg.batch)
        logits, _ = model_forward(model, x, train=True)
        loss, _, _ = cls_loss(logits, y)
        losses.append(loss)
        grads = model_backward(model, cls_loss_grad(logits, y))
        adam_step(params, grads, state, cfg.lr, t=t)
        iterations = t
        if t % cfg.eval_every == 0:
            accuracy = semantic_accuracy(model, eval_ds)
            acc_trace.append((t, accuracy))
            if accuracy >= cfg.target_accuracy:
                break
    else:
        accuracy = semantic_accuracy(model, eval_ds)
        acc_trace.append((cfg.max_iters, accuracy))
    if accuracy < cfg.min_accuracy:
        raise PretrainingFailure(
            f"pretraining reached {accuracy:.3f} accuracy after {iterations} iterations"
        )
    return PretrainResult(model=model, accuracy=accuracy, iterations=iterations,
                          loss_trace=losses, accuracy_trace=acc_trace)


def finetune_run(pretrained: ToyModel, spec: SyntheticSpec, cfg: TrainConfig,
                 rank_threshold=0.9):
    """Standard fine-tuning cell: adapt the backbone, train on the forgery
    task, evaluate seen/unseen splits and the semantic-feature rank."""
    seq_len = pretrained.seq_len
    reg = RegularizerWeights(cfg.lambda1, cfg.lambda2)
    model = adapt_model(pretrained, cfg.regime, cfg.rank, cfg.seed, reg=reg)
    train_ds = gen_dataset(spec, "finetune_train", seq_len)
    eval_sets = {
        "seen": gen_dataset(spec, "finetune_test_seen", seq_len),
        "unseen": gen_dataset(spec, "finetune_test_unseen", seq_len),
    }
    _, semantic_eval = semantic_shards(spec, seq_len)
    report = train(model, train_ds, cfg, eval_sets=eval_sets,
                   rank_set=semantic_eval, rank_threshold=rank_threshold)
    return model, report


SWEEP_COLUMNS = [
    "regime", "rank", "seed", "auc_seen", "auc_unseen", "acc_seen", "acc_unseen",
    "rank_before", "rank_after", "trainable_params", "error",
]


def rank_sweep(pretrained: ToyModel, spec: SyntheticSpec, base_cfg: TrainConfig,
               residual_ranks, lora_ranks, seeds):
    """Tab-of-cells comparison: svd at each residual rank, lora at each lora
    rank, plus fft and linear_probe baselines, for every seed. Per-cell errors
    are recorded in the row and the sweep continues."""
    cells = [("svd", r) for r in residual_ranks]
    cells += [("lora", r) for r in lora_ranks]
    cells += [("fft", 0), ("linear_probe", 0)]
    rows = []
    for regime, rank in cells:
        for s in seeds:
            cell_seed = derive_seed(base_cfg.seed, regime, rank, s)
            cfg = replace(base_cfg, regime=regime, rank=max(rank, 1), seed=cell_seed)
            row = {"regime": regime, "rank": rank if regime in ("svd", "lora") else "",
                   "seed": s}
            try:
                _, report = finetune_run(pretrained, spec, cfg)
                row.update({
                    "auc_seen": report.final_metrics["seen"]["auc"],
                    "auc_unseen": report.final_metrics["unseen"]["auc"],
                    "acc_seen": report.final_metrics["seen"]["accuracy"],
                    "acc_unseen": report.final_metrics["unseen"]["accuracy"],
                    "rank_before": report.rank_before,
                    "rank_after": report.rank_after,
                    "trainable_params": report.trainable_params,
                    "error": report.error or "",
                })
            except (ValidationError, NumericalError) as exc:
                row.update({k: "" for k in SWEEP_COLUMNS if k not in row})
                row["error"] = str(exc)
            rows.append(row)
    return rows


def sweep_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        out = dict(row)
        for key in ("auc_seen", "auc_unseen", "acc_seen", "acc_unseen"):
            if isinstance(out.get(key), float):
                out[key] = repr(out[key])
        writer.writerow(out)
    return buf.getvalue()
