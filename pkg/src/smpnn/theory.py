"""Numerical experiments on injectivity, concentration, and oversmoothing.

Three families of trials, all on the complete graph with self loops (whose
degree-normalized adjacency has every entry 1/N and spectrum {1, 0^(N-1)}):

* kernel witnesses certifying that the residual-free convolution
  X -> A_norm X W annihilates rank-one inputs u w^T with u orthogonal to
  the all-ones vector;
* Monte-Carlo trials of I + A_norm (x) W for Gaussian W, checking how often
  the map is invertible and how often the eigenvalue-sum sufficient
  condition holds;
* singular-value concentration of square standard-Gaussian matrices;
* Dirichlet-energy traces of repeated smoothing, with and without the
  residual block structure.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graph import (
    EnergyTrace,
    GraphError,
    SparseGraph,
    adjacency_eigenvalues,
    dirichlet_energy,
    laplacian_lambda_max,
    make_synthetic,
    normalize_adjacency,
    num_components,
    spmm,
)
from .model import BlockConfig, ModelSpec, as_const_vars, block_forward, init_params

__all__ = [
    "InjectivityTrialConfig",
    "SpectrumReport",
    "kernel_witness",
    "residual_injectivity_trial",
    "gordon_bound_trial",
    "oversmoothing_trace",
    "kron_eigenvalues",
    "assemble_kron_operator",
    "spectrum_report",
    "DENSE_KRON_CAP",
    "default_varsigma",
]

# Dense assembly of I + A (x) W is refused beyond this operator size.
DENSE_KRON_CAP = 4096

# Relative floor below which the smallest singular value counts as zero.
SINGULAR_THRESHOLD = 1e-9


def default_varsigma(d: int) -> float:
    """Entry std safely inside the injectivity bound 1/(9 D^{3/2})."""
    return 0.9 / (9.0 * d ** 1.5)


@dataclass(frozen=True)
class InjectivityTrialConfig:
    num_nodes: int = 8
    dim: int = 16
    varsigma: float | None = None  # None: default_varsigma(dim)
    trials: int = 2000
    seed: int = 0
    singular_threshold: float = SINGULAR_THRESHOLD

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.varsigma is not None and self.varsigma <= 0:
            raise ValueError("varsigma must be positive")

    @property
    def sigma(self) -> float:
        return self.varsigma if self.varsigma is not None else default_varsigma(self.dim)


@dataclass
class SpectrumReport:
    """Eigenvalues of an operator plus the summary statistics the trials use.

    ``lambda_norm_sum`` is the square root of the sum of squared eigenvalue
    moduli (for a symmetric matrix this is the Frobenius norm; it differs
    from the conventional spectral norm, which is reported separately).
    """

    eigenvalues: np.ndarray
    lambda_norm_sum: float
    spectral_norm: float
    s_min: float | None = None
    s_max: float | None = None
    classification: str = ""


def spectrum_report(matrix: np.ndarray, with_singular: bool = True) -> SpectrumReport:
    matrix = np.asarray(matrix, dtype=np.float64)
    eigs = np.linalg.eigvals(matrix)
    s_min = s_max = None
    if with_singular:
        svals = np.linalg.svd(matrix, compute_uv=False)
        s_min, s_max = float(svals[-1]), float(svals[0])
    return SpectrumReport(
        eigenvalues=eigs,
        lambda_norm_sum=float(np.sqrt(np.sum(np.abs(eigs) ** 2))),
        spectral_norm=float(np.linalg.norm(matrix, 2)),
        s_min=s_min,
        s_max=s_max,
    )


def complete_graph_adjacency(n: int):
    g, _, _ = make_synthetic("complete", num_nodes=n, self_loop_policy="add")
    return g, normalize_adjacency(g)


def kernel_witness(n: int, d: int, w: np.ndarray, seed: int = 0) -> tuple[np.ndarray, float]:
    """Nonzero input annihilated by the residual-free convolution.

    Builds X = (e1 - e2) w_r^T with a random row w_r; on the complete graph
    with self loops every row of A_norm is identical, so A_norm X = 0 and
    the returned Frobenius norm of A_norm X W certifies the nontrivial
    kernel. Requires n >= 2.
    """
    if n < 2:
        raise ValueError("kernel witness needs at least 2 nodes")
    w = np.asarray(w, dtype=np.float64)
    rng = np.random.default_rng(seed)
    w_row = rng.standard_normal((1, d))
    u = np.zeros((n, 1))
    u[0, 0] = 1.0
    u[1, 0] = -1.0
    x = u @ w_row
    _, adj = complete_graph_adjacency(n)
    residual = spmm(adj, x) @ w
    return x, float(np.linalg.norm(residual))


def kron_eigenvalues(a_eigs: np.ndarray, w_eigs: np.ndarray) -> np.ndarray:
    """Eigenvalues of A (x) W: all pairwise products."""
    return np.outer(a_eigs, w_eigs).ravel()


def assemble_kron_operator(a_dense: np.ndarray, w: np.ndarray, cap: int = DENSE_KRON_CAP) -> np.ndarray:
    """I + A (x) W, densely. Refuses operators larger than ``cap``."""
    size = a_dense.shape[0] * w.shape[0]
    if size > cap:
        raise ValueError(
            f"dense Kronecker assembly refused: size {size} exceeds cap {cap}"
        )
    return np.eye(size) + np.kron(a_dense, w)


@dataclass
class InjectivityReport:
    config: InjectivityTrialConfig
    rows: list[dict] = field(default_factory=list)
    fraction_invertible: float = 0.0
    fraction_condition: float = 0.0
    implication_violations: int = 0
    theoretical_bound: float = 0.0
    dense_route: bool = True


def residual_injectivity_trial(config: InjectivityTrialConfig) -> InjectivityReport:
    """Monte-Carlo invertibility of I + A_norm (x) W on the complete graph.

    Per trial, W has i.i.d. N(0, sigma^2) entries. Two statistics:

    * the eigenvalue-sum condition sqrt(sum_j |lambda_j(W)|^2) < 1, a
      sufficient condition for invertibility (complex eigenvalues enter by
      modulus);
    * invertibility itself: via dense SVD of the assembled operator when
      N*D <= DENSE_KRON_CAP (s_min above the relative threshold), otherwise
      via the eigenvalue products min|1 + lambda_i(A) lambda_j(W)|.

    The empirical invertible fraction is compared against 1 - e^{-D/2}.
    """
    n, d = config.num_nodes, config.dim
    sigma = config.sigma
    g, adj = complete_graph_adjacency(n)
    a_dense = adj.to_dense()
    a_eigs = np.linalg.eigvalsh(a_dense)
    dense_route = n * d <= DENSE_KRON_CAP
    report = InjectivityReport(config=config, dense_route=dense_route)
    inv_count = 0
    cond_count = 0
    for trial in range(config.trials):
        rng = np.random.default_rng([config.seed, trial])
        w = sigma * rng.standard_normal((d, d))
        w_eigs = np.linalg.eigvals(w)
        lambda_sum = float(np.sqrt(np.sum(np.abs(w_eigs) ** 2)))
        condition_ok = lambda_sum < 1.0
        if dense_route:
            op = assemble_kron_operator(a_dense, w)
            svals = np.linalg.svd(op, compute_uv=False)
            s_min, s_max = float(svals[-1]), float(svals[0])
            invertible = s_min > config.singular_threshold * s_max
        else:
            prods = np.abs(1.0 + kron_eigenvalues(a_eigs, w_eigs))
            s_min, s_max = float(prods.min()), float(prods.max())
            invertible = s_min > config.singular_threshold * s_max
        inv_count += invertible
        cond_count += condition_ok
        if condition_ok and not invertible:
            report.implication_violations += 1
        report.rows.append({
            "trial": trial,
            "lambda_sum": lambda_sum,
            "s_min": s_min,
            "s_max": s_max,
            "condition_ok": int(condition_ok),
            "invertible": int(invertible),
        })
    report.fraction_invertible = inv_count / config.trials
    report.fraction_condition = cond_count / config.trials
    report.theoretical_bound = 1.0 - np.exp(-d / 2.0)
    return report


@dataclass
class GordonReport:
    dim: int
    t: float
    trials: int
    rows: list[dict] = field(default_factory=list)
    violations: int = 0
    fraction_within: float = 0.0
    theoretical_bound: float = 0.0
    mean_smax_over_sqrt_d: float = 0.0


def gordon_bound_trial(d: int, trials: int, t: float | None = None, seed: int = 0) -> GordonReport:
    """Concentration of extreme singular values of a D x D Gaussian matrix.

    Checks sqrt(D) - sqrt(D) - t <= s_min and s_max <= 2 sqrt(D) + t per
    sample; with the default t = sqrt(D) the upper bound is 3 sqrt(D). The
    within-bounds fraction is compared against 1 - e^{-t^2/2}.
    """
    if d < 2:
        raise ValueError("dimension must be >= 2")
    if t is None:
        t = float(np.sqrt(d))
    report = GordonReport(dim=d, t=t, trials=trials)
    lower = -t  # sqrt(D) - sqrt(D) - t
    upper = 2.0 * np.sqrt(d) + t
    smax_acc = 0.0
    within = 0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        m = rng.standard_normal((d, d))
        svals = np.linalg.svd(m, compute_uv=False)
        s_min, s_max = float(svals[-1]), float(svals[0])
        ok = (lower <= s_min) and (s_max <= upper)
        within += ok
        report.violations += not ok
        smax_acc += s_max
        report.rows.append({
            "trial": trial, "s_min": s_min, "s_max": s_max, "within_bounds": int(ok),
        })
    report.fraction_within = within / trials
    report.theoretical_bound = 1.0 - np.exp(-t * t / 2.0)
    report.mean_smax_over_sqrt_d = smax_acc / trials / np.sqrt(d)
    return report


# ---------------------------------------------------------------------------
# Oversmoothing traces
# ---------------------------------------------------------------------------

OVERSMOOTHING_MODES = ("linear_no_residual", "smpnn_default", "smpnn_no_residual")

# Final normalized energy below this fraction of lambda_max counts as
# low-frequency dominant; above (1 - it) as high-frequency dominant. The
# true definitions are limits in depth, so any finite-depth label is a
# heuristic.
_CLASSIFY_REL_TOL = 1e-3


def _classify(final_normalized: float, lam_max: float) -> str:
    if final_normalized <= _CLASSIFY_REL_TOL * lam_max:
        return "LFD-like"
    if final_normalized >= (1.0 - _CLASSIFY_REL_TOL) * lam_max:
        return "HFD-like"
    return "neither"


def oversmoothing_trace(
    g: SparseGraph,
    x0: np.ndarray,
    layers: int,
    mode: str = "linear_no_residual",
    params_seed: int = 0,
) -> EnergyTrace:
    """Raw and normalized Dirichlet energy of layer-by-layer features.

    Modes:

    * ``linear_no_residual``: X <- A_norm X (identity weights and
      activation), the pure smoothing iteration;
    * ``smpnn_default``: freshly initialized residual blocks (near-identity)
      applied repeatedly;
    * ``smpnn_no_residual``: the same blocks without the convolution
      residual.

    Requires a connected graph; with several components the smallest
    Laplacian eigenvalue is not simple and the limit statement breaks.
    """
    if mode not in OVERSMOOTHING_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if num_components(g) != 1:
        raise GraphError("oversmoothing trace requires a connected graph")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 1:
        x0 = x0[:, None]
    adj = normalize_adjacency(g)
    energies = [dirichlet_energy(g, x0)]
    norms = [float(np.sum(x0 * x0))]

    if mode == "linear_no_residual":
        x = x0
        for _ in range(layers):
            x = spmm(adj, x)
            energies.append(dirichlet_energy(g, x))
            norms.append(float(np.sum(x * x)))
    else:
        cfg = BlockConfig() if mode == "smpnn_default" else BlockConfig(use_residual=False)
        d = x0.shape[1]
        spec = ModelSpec(in_dim=d, hidden_dim=d, out_dim=d, depth=layers, config=cfg)
        pv = as_const_vars(init_params(spec, seed=params_seed))
        h = ad.constant(x0)
        for l in range(layers):
            h = block_forward(h, adj, pv, l, cfg)
            energies.append(dirichlet_energy(g, h.value))
            norms.append(float(np.sum(h.value * h.value)))

    energies = np.array(energies)
    norms = np.array(norms)
    normalized = np.where(norms > 0.0, energies / np.where(norms > 0, norms, 1.0), 0.0)
    lam_max = laplacian_lambda_max(g)
    return EnergyTrace(
        per_layer_energy=energies,
        per_layer_normalized=normalized,
        lambda_min=0.0,
        lambda_max=lam_max,
        mode=mode,
        classification=_classify(float(normalized[-1]), lam_max),
    )
