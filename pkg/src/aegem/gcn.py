"""Two-layer graph convolutional network that refines abundance maps.

The star graph's spectral-angle distances become edge similarities
exp(-angle); with self-loops added, the symmetrically normalized
operator D^{-1/2} (A + I) D^{-1/2} drives both layers.  Training is
semi-supervised: binary cross-entropy against reference abundances on a
labeled pixel subset, with the sigmoid head renormalized to sum-to-one
for production output.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import checkpoint
from .autoencoder import DivergenceError
from .graph import EllipticalGraph
from .hsi import HsiCube
from .rng import SplitMix64


@dataclass
class GcnConfig:
    hidden: int = 128
    epochs: int = 200
    learning_rate: float = 0.001
    label_fraction: float = 0.1
    folds: int = 10
    seed: int = 0
    features: str = "abundance"  # abundance | abundance+spectrum_pca
    pca_components: int = 8
    paper_literal_asc: bool = False

    def __post_init__(self):
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError("label_fraction must be in (0, 1]")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.features not in ("abundance", "abundance+spectrum_pca"):
            raise ValueError(f"unknown feature mode {self.features!r}")


def normalized_operator(graph: EllipticalGraph) -> sp.csr_matrix:
    """Sparse symmetric D^{-1/2} (A + I) D^{-1/2} with A_ij = exp(-angle).

    Star edges are made bidirectional and de-duplicated before
    normalization; self-loops guarantee positive degrees everywhere.
    """
    if graph.edge_weights is None:
        raise ValueError("graph has no edge weights; run sad_adjacency first")
    n = graph.n_pixels
    both = np.vstack([graph.edges, graph.edges[:, ::-1]])
    sim = np.exp(-np.concatenate([graph.edge_weights, graph.edge_weights]))
    pairs, keep = np.unique(both, axis=0, return_index=True)
    rows = np.concatenate([pairs[:, 0], np.arange(n)])
    cols = np.concatenate([pairs[:, 1], np.arange(n)])
    vals = np.concatenate([sim[keep], np.ones(n)])
    a_hat = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    inv_sqrt = 1.0 / np.sqrt(np.asarray(a_hat.sum(axis=1)).ravel())
    d = sp.diags(inv_sqrt)
    return (d @ a_hat @ d).tocsr()


class GcnModel:
    """Weights plus the cached normalized graph operator."""

    def __init__(self, operator: sp.csr_matrix, feature_dim: int, hidden: int,
                 out_dim: int, rng: SplitMix64):
        self.operator = operator
        self.w1 = ad.glorot_uniform((feature_dim, hidden), feature_dim, hidden, rng)
        self.w2 = ad.glorot_uniform((hidden, out_dim), hidden, out_dim, rng)

    def parameters(self) -> list[ad.Tensor]:
        return [self.w1, self.w2]

    def logits(self, features) -> ad.Tensor:
        y = ad.as_tensor(features)
        h = ad.relu(ad.sparse_matmul(self.operator, y, self.operator) @ self.w1)
        return ad.sparse_matmul(self.operator, h, self.operator) @ self.w2


def forward(model: GcnModel, features: np.ndarray,
            paper_literal_asc: bool = False) -> np.ndarray:
    """Refined abundances per node: sigmoid head renormalized to sum one.

    The literal variant returns the raw sigmoid outputs (the constraint
    the sigmoid alone does not actually enforce).
    """
    with ad.no_grad():
        p = ad.sigmoid(model.logits(features)).data
    if paper_literal_asc:
        return p
    return p / (p.sum(axis=1, keepdims=True) + 1e-12)


def bce_with_logits(logits: ad.Tensor, targets: np.ndarray) -> ad.Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against fractional targets."""
    return (ad.softplus(logits) - ad.as_tensor(targets) * logits).mean()


def _bce_value(z: np.ndarray, t: np.ndarray) -> float:
    return float(np.mean(np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - t * z))


def sample_labels(abundances: np.ndarray, fraction: float,
                  rng: SplitMix64) -> tuple[np.ndarray, np.ndarray]:
    """Seeded sample of labeled pixels: flat indices and their target rows."""
    h, w, p = abundances.shape
    n = h * w
    k = max(1, int(round(fraction * n)))
    idx = np.sort(rng.choice(n, k))
    return idx, abundances.reshape(n, p)[idx]


def train_gcn(graph: EllipticalGraph, features: np.ndarray, label_idx: np.ndarray,
              label_targets: np.ndarray, config: GcnConfig,
              ) -> tuple[GcnModel, list[tuple[int, float, float]]]:
    """Full-batch Adam on labeled-node BCE; deterministic per config.seed.

    One tenth of the labeled set (at least one node when possible) is
    held out from the gradient for validation logging; history rows are
    (epoch, train_bce, val_bce).
    """
    if label_idx.size == 0:
        raise ValueError("labeled pixel set is empty")
    root = SplitMix64(config.seed)
    operator = normalized_operator(graph)
    model = GcnModel(operator, features.shape[1], config.hidden,
                     label_targets.shape[1], root.split(0))
    n_lab = label_idx.size
    n_val = n_lab // 10 if n_lab >= 2 else 0
    order = root.split(1).permutation(n_lab)
    val_rows, train_rows = order[:n_val], order[n_val:]
    optimizer = ad.Adam(model.parameters(), lr=config.learning_rate)
    history: list[tuple[int, float, float]] = []
    for epoch in range(config.epochs):
        try:
            z = model.logits(features)
            z_lab = z[label_idx]
            loss = bce_with_logits(z_lab[train_rows], label_targets[train_rows])
        except ad.NonFiniteError as exc:
            raise DivergenceError(epoch) from exc
        train_bce = loss.item()
        if not np.isfinite(train_bce):
            raise DivergenceError(epoch)
        z_data = z_lab.data
        val_bce = _bce_value(z_data[val_rows], label_targets[val_rows]) if n_val else train_bce
        grads = ad.backward(loss)
        optimizer.step(grads)
        history.append((epoch, train_bce, val_bce))
    return model, history


@dataclass
class CrossValResult:
    best_config: GcnConfig
    best_index: int
    fold_losses: np.ndarray  # (n_configs, folds)

    @property
    def mean_losses(self) -> np.ndarray:
        return self.fold_losses.mean(axis=1)


def cross_validate(graph: EllipticalGraph, features: np.ndarray, label_idx: np.ndarray,
                   label_targets: np.ndarray, configs: list[GcnConfig]) -> CrossValResult:
    """K-fold validation BCE per config; argmin with (hidden, lr) tie-break.

    Folds partition the labeled set by a seeded shuffle taken from the
    first config; every config trains once per fold on the other folds.
    """
    if not configs:
        raise ValueError("no configurations to validate")
    folds = configs[0].folds
    n_lab = label_idx.size
    if n_lab < folds:
        raise ValueError(
            f"{n_lab} labeled nodes cannot fill {folds} folds; use fewer folds"
        )
    order = SplitMix64(configs[0].seed).split(7).permutation(n_lab)
    fold_of = np.empty(n_lab, dtype=int)
    for pos, row in enumerate(order):
        fold_of[row] = pos % folds
    losses = np.zeros((len(configs), folds))
    for ci, config in enumerate(configs):
        for f in range(folds):
            tr, va = fold_of != f, fold_of == f
            try:
                model, _ = train_gcn(graph, features, label_idx[tr],
                                     label_targets[tr], config)
                with ad.no_grad():
                    z = model.logits(features).data[label_idx[va]]
                losses[ci, f] = _bce_value(z, label_targets[va])
            except DivergenceError:
                losses[ci, f] = np.inf
    means = losses.mean(axis=1)
    best = min(range(len(configs)),
               key=lambda i: (means[i], configs[i].hidden, configs[i].learning_rate))
    return CrossValResult(configs[best], best, losses)


# -- optional spectral features --------------------------------------------------

def pca_features(cube: HsiCube, k: int, seed: int = 0, iters: int = 100) -> np.ndarray:
    """Top-k spectral principal components via power iteration with deflation.

    Scores are standardized per component so they sit on the abundance
    features' scale.
    """
    x = cube.spectra()
    x = x - x.mean(axis=0)
    c = x.T @ x
    k = min(k, c.shape[0])
    rng = SplitMix64(seed)
    comps = []
    for _ in range(k):
        v = rng.normal((c.shape[0],))
        v /= np.linalg.norm(v)
        for _ in range(iters):
            v = c @ v
            norm = np.linalg.norm(v)
            if norm == 0:
                break
            v /= norm
        lam = float(v @ c @ v)
        comps.append(v)
        c = c - lam * np.outer(v, v)
    scores = x @ np.stack(comps, axis=1)
    std = scores.std(axis=0)
    std[std == 0] = 1.0
    return scores / std


def build_node_features(abundance: np.ndarray, cube: HsiCube,
                        config: GcnConfig) -> np.ndarray:
    """Node feature matrix: abundances, optionally plus PCA spectra."""
    nodes = abundance.reshape(-1, abundance.shape[2])
    if config.features == "abundance":
        return nodes
    return np.hstack([nodes, pca_features(cube, config.pca_components, config.seed)])


def save_gcn(model: GcnModel, path) -> None:
    checkpoint.save_tensors({"w1": model.w1.data, "w2": model.w2.data}, path)


def load_gcn(path, graph: EllipticalGraph) -> GcnModel:
    tensors = checkpoint.load_tensors(path)
    operator = normalized_operator(graph)
    model = GcnModel(operator, tensors["w1"].shape[0], tensors["w1"].shape[1],
                     tensors["w2"].shape[1], SplitMix64(0))
    model.w1.data = tensors["w1"]
    model.w2.data = tensors["w2"]
    return model
