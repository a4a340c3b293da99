"""Elliptical neighborhood masks and the star-topology pixel graph.

Centroids on a regular grid each own an integer-grid ellipse of
neighbors; every (centroid, neighbor) pair becomes a directed edge
weighted by the spectral angle between the two pixel spectra.  Pixels
that no clipped ellipse reaches (image corners, for some axis choices)
are attached to their elliptically-nearest centroid so that every pixel
participates in the graph.

Also houses the general graph utilities: RBF adjacency, the graph
Laplacian, and its symmetric normalization.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hsi import HsiCube, fmt9


@dataclass(frozen=True)
class EllipseKernel:
    """Integer offsets (dr, dc) with dr^2/a^2 + dc^2/b^2 <= 1."""

    a: int
    b: int
    offsets: tuple[tuple[int, int], ...]


def build_kernel(a: int, b: int) -> EllipseKernel:
    """Enumerate the integer-grid ellipse with semi-axes a (rows), b (cols)."""
    if a < 1 or b < 1:
        raise ValueError("semi-axes must be >= 1")
    offsets = [
        (dr, dc)
        for dr in range(-a, a + 1)
        for dc in range(-b, b + 1)
        if dr * dr / (a * a) + dc * dc / (b * b) <= 1.0
    ]
    return EllipseKernel(a, b, tuple(offsets))


def tile_centroids(height: int, width: int, kernel: EllipseKernel,
                   stride_r: int | None = None, stride_c: int | None = None) -> np.ndarray:
    """Centroid coordinates on a regular grid starting at (a, b).

    Default strides (a, b) make adjacent ellipses overlap.  On an axis
    shorter than the kernel the single centroid sits at the image middle.
    """
    stride_r = kernel.a if stride_r is None else stride_r
    stride_c = kernel.b if stride_c is None else stride_c
    if stride_r < 1 or stride_c < 1:
        raise ValueError("strides must be >= 1")
    rows = [height // 2] if height < 2 * kernel.a + 1 else list(range(kernel.a, height, stride_r))
    cols = [width // 2] if width < 2 * kernel.b + 1 else list(range(kernel.b, width, stride_c))
    return np.array([(r, c) for r in rows for c in cols], dtype=np.int64)


@dataclass
class EllipticalGraph:
    """Star-topology graph: centroid senders, in-ellipse receivers."""

    height: int
    width: int
    kernel: EllipseKernel
    senders: np.ndarray  # (n_centroids, 2) pixel coordinates
    edges: np.ndarray  # (n_edges, 2) flat (sender, receiver) pixel indices
    edge_weights: np.ndarray | None = None  # spectral angles, filled by sad_adjacency
    centroid_mean_sad: np.ndarray | None = None

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def coords(self, flat: np.ndarray) -> np.ndarray:
        return np.stack(np.divmod(flat, self.width), axis=-1)


def build_star_edges(height: int, width: int, kernel: EllipseKernel,
                     centroids: np.ndarray) -> np.ndarray:
    """Directed (sender, receiver) edges, sorted, covering every pixel.

    Receivers are the clipped-ellipse members around each centroid; any
    pixel left uncovered is attached to its nearest centroid under the
    elliptical norm (ties broken by centroid order).
    """
    covered = np.zeros(height * width, dtype=bool)
    edges = []
    for r0, c0 in centroids:
        covered[r0 * width + c0] = True
        for dr, dc in kernel.offsets:
            r, c = r0 + dr, c0 + dc
            if (dr or dc) and 0 <= r < height and 0 <= c < width:
                edges.append((r0 * width + c0, r * width + c))
                covered[r * width + c] = True
    leftovers = np.nonzero(~covered)[0]
    if leftovers.size:
        a2, b2 = float(kernel.a**2), float(kernel.b**2)
        for flat in leftovers:
            r, c = divmod(int(flat), width)
            d = (centroids[:, 0] - r) ** 2 / a2 + (centroids[:, 1] - c) ** 2 / b2
            k = int(np.argmin(d))
            edges.append((centroids[k, 0] * width + centroids[k, 1], int(flat)))
    out = np.array(sorted(edges), dtype=np.int64)
    return out


def sad_adjacency(cube: HsiCube, graph: EllipticalGraph,
                  paper_literal: bool = False) -> np.ndarray:
    """Per-edge spectral angles plus the per-centroid neighborhood mean.

    The literal variant replaces the sender/receiver inner product with
    the sender's self inner product (kept for comparison runs; it reduces
    the cosine to a norm ratio).  Weights and per-centroid means are
    stored on the graph and the weights returned.
    """
    spectra = cube.spectra()
    norms = np.linalg.norm(spectra, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        r, c = divmod(int(zero[0]), graph.width)
        raise ValueError(f"pixel ({r},{c}) has a zero spectrum; spectral angle undefined")
    s, r = graph.edges[:, 0], graph.edges[:, 1]
    if paper_literal:
        weights = np.arccos(np.clip(norms[s] / norms[r], -1.0, 1.0))
    else:
        # half-angle form of the spectral angle: exact 0 for identical spectra
        a = spectra[s] / norms[s, None]
        b = spectra[r] / norms[r, None]
        weights = 2.0 * np.arctan2(np.linalg.norm(a - b, axis=1),
                                   np.linalg.norm(a + b, axis=1))

    sender_flat = graph.senders[:, 0] * graph.width + graph.senders[:, 1]
    order = {int(f): i for i, f in enumerate(sender_flat)}
    sums = np.zeros(len(sender_flat))
    counts = np.ones(len(sender_flat))  # the centroid itself, angle 0
    for e, w in zip(s, weights):
        i = order[int(e)]
        sums[i] += w
        counts[i] += 1
    graph.edge_weights = weights
    graph.centroid_mean_sad = sums / counts
    return weights


def build_graph(cube: HsiCube, a: int = 3, b: int = 5,
                stride_r: int | None = None, stride_c: int | None = None,
                paper_literal: bool = False) -> EllipticalGraph:
    """Kernel, centroid tiling, star edges, and SAD weights in one call."""
    kernel = build_kernel(a, b)
    centroids = tile_centroids(cube.height, cube.width, kernel, stride_r, stride_c)
    edges = build_star_edges(cube.height, cube.width, kernel, centroids)
    graph = EllipticalGraph(cube.height, cube.width, kernel, centroids, edges)
    sad_adjacency(cube, graph, paper_literal=paper_literal)
    return graph


# -- stacked features ---------------------------------------------------------

@dataclass
class StackedFeatures:
    """Per-node abundance features and per-edge stacked records.

    edge_matrix rows are (sender features, receiver features, angle),
    one row per directed edge in graph order.
    """

    node_features: np.ndarray  # (n_pixels, P)
    edge_matrix: np.ndarray  # (n_edges, 2P + 1)
    endmembers: np.ndarray  # (L, P), context for serialization


def stack_features(graph: EllipticalGraph, abundance: np.ndarray,
                   endmembers: np.ndarray) -> StackedFeatures:
    """Assemble node features and the per-edge stacked matrix."""
    if graph.edge_weights is None:
        raise ValueError("graph has no edge weights; run sad_adjacency first")
    h, w, p = abundance.shape
    if (h, w) != (graph.height, graph.width):
        raise ValueError(f"abundance {h}x{w} does not match graph {graph.height}x{graph.width}")
    if endmembers.shape[1] != p:
        raise ValueError("endmember count does not match abundance channels")
    nodes = abundance.reshape(-1, p)
    m = np.concatenate(
        [nodes[graph.edges[:, 0]], nodes[graph.edges[:, 1]], graph.edge_weights[:, None]],
        axis=1,
    )
    return StackedFeatures(nodes, m, endmembers)


# -- general graph utilities ---------------------------------------------------

def rbf_adjacency(vectors: np.ndarray, sigma: float) -> np.ndarray:
    """Dense RBF adjacency exp(-||x_i - x_j|| / sigma^2), unsquared distance."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    v = np.asarray(vectors, dtype=np.float64)
    d = np.linalg.norm(v[:, None, :] - v[None, :, :], axis=2)
    return np.exp(-d / sigma**2)


def laplacian(adjacency: np.ndarray) -> np.ndarray:
    """Graph Laplacian D - A; rows sum to zero."""
    a = np.asarray(adjacency, dtype=np.float64)
    return np.diag(a.sum(axis=1)) - a


def normalized_laplacian(adjacency: np.ndarray) -> np.ndarray:
    """Symmetric normalized Laplacian I - D^{-1/2} A D^{-1/2}.

    Zero-degree nodes use the pseudo-inverse convention: their row and
    column of D^{-1/2} are zero, leaving a bare 1 on the diagonal.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    pos = deg > 0
    inv_sqrt[pos] = 1.0 / np.sqrt(deg[pos])
    return np.eye(a.shape[0]) - inv_sqrt[:, None] * a * inv_sqrt[None, :]


# -- serialization -------------------------------------------------------------

def write_graph_csv(graph: EllipticalGraph, path) -> None:
    """Edge list CSV: sender_row,sender_col,recv_row,recv_col,sad."""
    if graph.edge_weights is None:
        raise ValueError("graph has no edge weights; run sad_adjacency first")
    with open(path, "w", encoding="utf-8") as f:
        f.write("sender_row,sender_col,recv_row,recv_col,sad\n")
        for (s, r), w in zip(graph.edges, graph.edge_weights):
            sr, sc = divmod(int(s), graph.width)
            rr, rc = divmod(int(r), graph.width)
            f.write(f"{sr},{sc},{rr},{rc},{fmt9(w)}\n")


def read_graph_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read back (edge coordinate rows, weights) from write_graph_csv output."""
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "sender_row,sender_col,recv_row,recv_col,sad":
            raise ValueError(f"{path}: unexpected graph CSV header")
        rows = [line.strip().split(",") for line in f if line.strip()]
    coords = np.asarray([[int(v) for v in r[:4]] for r in rows], dtype=np.int64)
    weights = np.asarray([float(r[4]) for r in rows])
    return coords, weights


def write_stacked_features_csv(features: StackedFeatures, path) -> None:
    """Serialize the edge matrix M at full precision (lossless round-trip)."""
    p = features.node_features.shape[1]
    cols = [f"sf{i}" for i in range(p)] + [f"rf{i}" for i in range(p)] + ["sad"]
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(cols) + "\n")
        for row in features.edge_matrix:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def read_stacked_features_csv(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        f.readline()
        rows = [line.strip().split(",") for line in f if line.strip()]
    return np.asarray([[float(v) for v in r] for r in rows])
