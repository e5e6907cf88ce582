"""Transductive node-classification training.

Full-graph and mini-batch loops over the block model, a bias-corrected Adam
implementation, accuracy/ROC-AUC metrics, and the depth-sweep and ablation
experiment drivers. Everything is deterministic per seed.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .graph import (
    GraphError,
    SparseGraph,
    dirichlet_energy,
    induced_subgraph,
    laplacian_lambda_max,
    make_synthetic,
    neighbor_sample,
    normalize_adjacency,
)
from .model import (
    BlockConfig,
    ModelSpec,
    as_param_vars,
    hidden_states,
    init_params,
    model_forward,
)

__all__ = [
    "TrainConfig",
    "SplitSpec",
    "MetricsRow",
    "Dataset",
    "AdamState",
    "adam_step",
    "evaluate",
    "train_full_graph",
    "train_mini_batch",
    "depth_sweep",
    "ablation_study",
    "random_splits",
    "make_desk_dataset",
    "ABLATION_CONFIGS",
    "SAMPLED_INFERENCE_FANOUTS",
]

SAMPLED_INFERENCE_FANOUTS = (15, 10, 5)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 200
    batch_nodes: int | None = None  # None means full-graph training
    dropout: float = 0.0
    depth: int = 2
    hidden_dim: int = 32
    seed: int = 0
    eval_every: int = 1
    metric: str = "accuracy"
    sampled_inference: bool = False

    def __post_init__(self):
        # lr = 0 is allowed: it freezes the model, useful as a control.
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")


@dataclass(frozen=True)
class SplitSpec:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        sets = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("splits must be pairwise disjoint")

    def validate_range(self, n: int) -> None:
        for name, ids in (("train", self.train), ("val", self.val), ("test", self.test)):
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise ValueError(f"{name} split has node id outside [0, {n})")


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    val_metric: float
    test_metric: float
    wall_ms: float


@dataclass
class Dataset:
    graph: SparseGraph
    features: np.ndarray
    labels: np.ndarray  # (N,) int class ids or (N, C) binary for multi-label
    splits: SplitSpec
    num_classes: int

    @property
    def multilabel(self) -> bool:
        return self.labels.ndim == 2


def random_splits(n: int, seed: int, fractions=(0.5, 0.25)) -> SplitSpec:
    """Shuffled train/val/test split; test takes the remainder."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(fractions[0] * n)
    n_val = int(fractions[1] * n)
    return SplitSpec(
        train=np.sort(perm[:n_train]),
        val=np.sort(perm[n_train:n_train + n_val]),
        test=np.sort(perm[n_train + n_val:]),
    )


def make_desk_dataset(
    seed: int = 0,
    blocks: int = 4,
    block_size: int = 250,
    p_in: float = 0.02,
    p_out: float = 0.008,
    feature_dim: int = 16,
    separation: float = 2.5,
    noise_scales=None,
) -> Dataset:
    """Seeded planted-block benchmark task (about a thousand nodes).

    Class-dependent noise scales make the optimal decision boundary
    quadratic, so pointwise nonlinear capacity is genuinely useful.
    """
    if noise_scales is None:
        noise_scales = np.linspace(0.6, 1.8, blocks)
    g, x, y = make_synthetic(
        "sbm",
        blocks=blocks,
        block_size=block_size,
        p_in=p_in,
        p_out=p_out,
        feature_dim=feature_dim,
        separation=separation,
        noise_scales=noise_scales,
        seed=seed,
    )
    splits = random_splits(g.num_nodes, seed=seed + 1)
    return Dataset(graph=g, features=x, labels=y, splits=splits, num_classes=blocks)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> None:
    """Bias-corrected Adam update, in place.

    Raises on any non-finite gradient, naming the parameter.
    """
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        g = np.asarray(g, dtype=np.float64).reshape(p.shape)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if config.weight_decay:
            g = g + config.weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        params[name] = p - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _roc_auc_single(scores: np.ndarray, targets: np.ndarray) -> float:
    pos = targets > 0.5
    n_pos = int(pos.sum())
    n_neg = targets.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC undefined: split contains a single class")
    ranks = rankdata(scores)
    return (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate(logits: np.ndarray, labels: np.ndarray, split: np.ndarray, metric: str) -> float:
    """Accuracy (argmax, ties to the lowest index) or column-averaged ROC-AUC."""
    split = np.asarray(split, dtype=np.int64)
    if metric == "accuracy":
        pred = np.argmax(logits[split], axis=1)
        return float(np.mean(pred == labels[split]))
    if metric == "rocauc":
        targets = labels[split]
        scores = logits[split]
        if targets.ndim == 1:
            targets = targets[:, None]
            scores = scores[:, : targets.shape[1]]
        aucs = [_roc_auc_single(scores[:, j], targets[:, j]) for j in range(targets.shape[1])]
        return float(np.mean(aucs))
    raise ValueError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _loss_node(logits, dataset: Dataset, rows: np.ndarray):
    if dataset.multilabel:
        return ad.bce_with_logits(logits, dataset.labels, rows=rows)
    return ad.cross_entropy(logits, dataset.labels, rows=rows)


def _grads_of(pvars: dict[str, ad.Var]) -> dict[str, np.ndarray]:
    return {k: v.grad for k, v in pvars.items() if v.grad is not None}


def _full_logits(dataset: Dataset, params, spec: ModelSpec) -> np.ndarray:
    adj = normalize_adjacency(dataset.graph)
    pv = {k: ad.constant(v) for k, v in params.items()}
    return model_forward(dataset.features, adj, pv, spec).value


def _sampled_logits(dataset: Dataset, params, spec: ModelSpec, seeds_chunk=512, rng_seed=0) -> np.ndarray:
    """Neighbor-sampled inference: logits for every node, computed on
    induced multi-hop subgraphs around chunks of seed nodes."""
    n = dataset.graph.num_nodes
    logits = np.zeros((n, spec.out_dim))
    pv = {k: ad.constant(v) for k, v in params.items()}
    for start in range(0, n, seeds_chunk):
        seeds = np.arange(start, min(start + seeds_chunk, n))
        sub, ids = neighbor_sample(
            dataset.graph, seeds, SAMPLED_INFERENCE_FANOUTS, rng_seed=rng_seed + start
        )
        adj = normalize_adjacency(sub)
        out = model_forward(dataset.features[ids], adj, pv, spec).value
        pos = {int(node): i for i, node in enumerate(ids)}
        sel = np.array([pos[int(s)] for s in seeds])
        logits[seeds] = out[sel]
    return logits


def _inference_logits(dataset, params, spec, config) -> np.ndarray:
    if config.sampled_inference:
        return _sampled_logits(dataset, params, spec, rng_seed=config.seed)
    return _full_logits(dataset, params, spec)


def _make_spec(dataset: Dataset, config: TrainConfig, block_config: BlockConfig) -> ModelSpec:
    out_dim = dataset.labels.shape[1] if dataset.multilabel else dataset.num_classes
    return ModelSpec(
        in_dim=dataset.features.shape[1],
        hidden_dim=config.hidden_dim,
        out_dim=out_dim,
        depth=config.depth,
        config=block_config,
    )


@dataclass
class TrainResult:
    metrics: list[MetricsRow]
    params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    best_val: float
    spec: ModelSpec
    skipped_batches: int = 0


def _evaluate_epoch(dataset, params, spec, config) -> tuple[float, float]:
    logits = _inference_logits(dataset, params, spec, config)
    val = evaluate(logits, dataset.labels, dataset.splits.val, config.metric)
    test = evaluate(logits, dataset.labels, dataset.splits.test, config.metric)
    return val, test


def train_full_graph(
    dataset: Dataset,
    config: TrainConfig,
    block_config: BlockConfig = BlockConfig(),
) -> TrainResult:
    """Whole-graph steps; the loss sees only train-split nodes.

    Validation/test metrics are computed every ``eval_every`` epochs and at
    the last epoch; the best-validation parameters are retained (ties go to
    the later epoch).
    """
    dataset.splits.validate_range(dataset.graph.num_nodes)
    spec = _make_spec(dataset, config, block_config)
    params = init_params(spec, seed=config.seed)
    adj = normalize_adjacency(dataset.graph)
    state = AdamState()
    rng = np.random.default_rng(config.seed + 77)
    metrics: list[MetricsRow] = []
    best_val, best_params = -np.inf, {k: v.copy() for k, v in params.items()}
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        pv = as_param_vars(params)
        logits = model_forward(
            dataset.features, adj, pv, spec,
            train_mode=True, dropout_p=config.dropout, rng=rng,
        )
        loss = _loss_node(logits, dataset, dataset.splits.train)
        ad.backward(loss)
        adam_step(params, _grads_of(pv), state, config)
        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            val, test = _evaluate_epoch(dataset, params, spec, config)
            if val >= best_val:
                best_val = val
                best_params = {k: v.copy() for k, v in params.items()}
            metrics.append(MetricsRow(
                epoch=epoch + 1,
                train_loss=float(loss.value),
                val_metric=val,
                test_metric=test,
                wall_ms=1000.0 * (time.perf_counter() - t0),
            ))
    if config.epochs == 0:
        val, test = _evaluate_epoch(dataset, params, spec, config)
        best_val, best_params = val, {k: v.copy() for k, v in params.items()}
        metrics.append(MetricsRow(0, float("nan"), val, test, 1000.0 * (time.perf_counter() - t0)))
    return TrainResult(metrics, params, best_params, best_val, spec)


def node_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Sorted batches partitioning a fresh permutation of range(n)."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield np.sort(perm[start:start + batch_size])


def train_mini_batch(
    dataset: Dataset,
    config: TrainConfig,
    block_config: BlockConfig = BlockConfig(),
) -> TrainResult:
    """Uniform node batches without replacement; one induced subgraph per step.

    Each epoch partitions a fresh node permutation into batches of
    ``config.batch_nodes``. Batches whose induced subgraph contains no
    labeled train node are skipped and counted. Inference is full-graph
    unless ``config.sampled_inference`` is set.
    """
    if not config.batch_nodes or config.batch_nodes <= 0:
        raise ValueError("train_mini_batch requires batch_nodes >= 1")
    dataset.splits.validate_range(dataset.graph.num_nodes)
    n = dataset.graph.num_nodes
    spec = _make_spec(dataset, config, block_config)
    params = init_params(spec, seed=config.seed)
    state = AdamState()
    rng = np.random.default_rng(config.seed + 77)
    batch_rng = np.random.default_rng(config.seed + 177)
    train_mask = np.zeros(n, dtype=bool)
    train_mask[dataset.splits.train] = True
    metrics: list[MetricsRow] = []
    best_val, best_params = -np.inf, {k: v.copy() for k, v in params.items()}
    skipped = 0
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        last_loss = float("nan")
        for batch in node_batches(n, config.batch_nodes, batch_rng):
            labeled_local = np.flatnonzero(train_mask[batch])
            if labeled_local.size == 0:
                skipped += 1
                continue
            sub, ids = induced_subgraph(dataset.graph, batch)
            adj = normalize_adjacency(sub)
            pv = as_param_vars(params)
            logits = model_forward(
                dataset.features[ids], adj, pv, spec,
                train_mode=True, dropout_p=config.dropout, rng=rng,
            )
            if dataset.multilabel:
                loss = ad.bce_with_logits(logits, dataset.labels[ids], rows=labeled_local)
            else:
                loss = ad.cross_entropy(logits, dataset.labels[ids], rows=labeled_local)
            ad.backward(loss)
            adam_step(params, _grads_of(pv), state, config)
            last_loss = float(loss.value)
        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            val, test = _evaluate_epoch(dataset, params, spec, config)
            if val >= best_val:
                best_val = val
                best_params = {k: v.copy() for k, v in params.items()}
            metrics.append(MetricsRow(
                epoch=epoch + 1,
                train_loss=last_loss,
                val_metric=val,
                test_metric=test,
                wall_ms=1000.0 * (time.perf_counter() - t0),
            ))
    return TrainResult(metrics, params, best_params, best_val, spec, skipped_batches=skipped)


# ---------------------------------------------------------------------------
# Experiment drivers
# ---------------------------------------------------------------------------

STANDARD = BlockConfig()
NO_RESIDUAL = BlockConfig(use_residual=False)

ABLATION_CONFIGS = {
    "standard": STANDARD,
    "no_alpha": BlockConfig(learn_alpha=False),
    "no_ff": BlockConfig(use_feedforward=False),
    "no_gcn_layernorm": BlockConfig(use_gcn_layernorm=False),
    "no_residual": NO_RESIDUAL,
}


def _energy_rows(dataset: Dataset, result: TrainResult, tag: dict) -> list[dict]:
    states = hidden_states(
        dataset.features, normalize_adjacency(dataset.graph), result.best_params, result.spec
    )
    lam = laplacian_lambda_max(dataset.graph)
    rows = []
    for layer, h in enumerate(states):
        energy = dirichlet_energy(dataset.graph, h)
        norm2 = float(np.sum(h * h))
        rows.append({
            **tag,
            "layer": layer,
            "energy": energy,
            "normalized_energy": energy / norm2 if norm2 > 0 else 0.0,
            "lambda_max": lam,
        })
    return rows


@dataclass
class SweepReport:
    summary: list[dict]  # one row per (config, depth): mean/std over seeds
    details: list[dict]  # one row per (config, depth, seed)
    energies: list[dict]  # per-layer traces of the trained models


def depth_sweep(
    dataset_for_seed,
    depths,
    seeds,
    base_config: TrainConfig,
    configs: dict[str, BlockConfig] | None = None,
) -> SweepReport:
    """Mean/std test metric per (config, depth) plus per-layer energy traces.

    ``dataset_for_seed`` maps a seed to a Dataset so graph sampling noise is
    part of the seed variation. Three or more seeds give meaningful spread;
    fewer are allowed for shape checks.
    """
    seeds = list(seeds)
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    if configs is None:
        configs = {"standard": STANDARD, "no_residual": NO_RESIDUAL}
    report = SweepReport([], [], [])
    for name, block_cfg in configs.items():
        for depth in depths:
            accs = []
            for seed in seeds:
                dataset = dataset_for_seed(seed)
                cfg = replace(base_config, depth=int(depth), seed=int(seed))
                result = train_full_graph(dataset, cfg, block_cfg)
                acc = evaluate(
                    _inference_logits(dataset, result.best_params, result.spec, cfg),
                    dataset.labels, dataset.splits.test, cfg.metric,
                )
                accs.append(acc)
                report.details.append({
                    "config": name, "depth": int(depth), "seed": int(seed),
                    "test_metric": acc, "val_metric": result.best_val,
                })
                report.energies.extend(_energy_rows(
                    dataset, result, {"config": name, "depth": int(depth), "seed": int(seed)}
                ))
            report.summary.append({
                "config": name, "depth": int(depth),
                "mean_test": float(np.mean(accs)), "std_test": float(np.std(accs)),
                "num_seeds": len(seeds),
            })
    return report


def ablation_study(
    dataset_for_seed,
    seeds,
    base_config: TrainConfig,
    configs: dict[str, BlockConfig] | None = None,
) -> SweepReport:
    """Test metric per ablation config: mean/std summary plus per-seed detail."""
    if configs is None:
        configs = ABLATION_CONFIGS
    report = SweepReport([], [], [])
    for name, block_cfg in configs.items():
        accs = []
        for seed in seeds:
            dataset = dataset_for_seed(seed)
            cfg = replace(base_config, seed=int(seed))
            result = train_full_graph(dataset, cfg, block_cfg)
            acc = evaluate(
                _inference_logits(dataset, result.best_params, result.spec, cfg),
                dataset.labels, dataset.splits.test, cfg.metric,
            )
            accs.append(acc)
            report.details.append({"config": name, "seed": int(seed), "test_metric": acc})
        report.summary.append({
            "config": name,
            "mean_test": float(np.mean(accs)), "std_test": float(np.std(accs)),
            "num_seeds": len(list(seeds)),
        })
    return report
