"""Orthonormal polynomial-chaos bases, quadrature, and testing nodes.

Gaussian parameters use probabilists' Hermite polynomials normalized by
sqrt(k!), uniform ones use Legendre polynomials on [-1, 1] with density
1/2 normalized by sqrt(2k+1). Multivariate basis functions are products of
univariate factors over a total-degree index set in graded lexicographic
order with the constant function first, so the first coefficient block of
any expansion is its mean.

The testing-node set is a size-K subset of a tensor Gauss rule chosen so
that the collocation matrix V[i, j] = H_j(node_i) is well conditioned:
candidates are ranked by quadrature weight and accepted greedily when
their basis-evaluation row stays numerically independent of the rows
already taken.
"""

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

HERMITE = "hermite"
LEGENDRE = "legendre"


class GpcError(ValueError):
    pass


def family_for(dist):
    """Polynomial family matching a distribution."""
    if dist.kind == "gaussian":
        return HERMITE
    if dist.kind == "uniform":
        return LEGENDRE
    raise GpcError(f"no polynomial family for {dist.kind!r} parameters")


def eval_univariate(family, max_order, x):
    """Orthonormal polynomial values of orders 0..max_order at x.

    Returns an array of shape (max_order + 1,) + x.shape.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty((max_order + 1,) + x.shape)
    out[0] = 1.0
    if max_order == 0:
        return out
    if family == HERMITE:
        out[1] = x
        for k in range(1, max_order):
            out[k + 1] = (x * out[k] - math.sqrt(k) * out[k - 1]) / math.sqrt(k + 1)
    elif family == LEGENDRE:
        # standard Legendre recurrence, then orthonormal scaling
        p_prev = np.ones_like(x)
        p_cur = x
        out[1] = x * math.sqrt(3.0)
        for k in range(1, max_order):
            p_next = ((2 * k + 1) * x * p_cur - k * p_prev) / (k + 1)
            out[k + 1] = p_next * math.sqrt(2 * k + 3)
            p_prev, p_cur = p_cur, p_next
    else:
        raise GpcError(f"unknown family {family!r}")
    return out


def _graded_indices(d, p):
    """Total-degree multi-indices, grade by grade, lexicographic within."""
    idx = []

    def grade(g, dims):
        if dims == 1:
            return [(g,)]
        return [(first,) + rest for first in range(g, -1, -1) for rest in grade(g - first, dims - 1)]

    for g in range(p + 1):
        idx.extend(grade(g, d))
    return np.array(idx, dtype=int).reshape(len(idx), d)


@dataclass(frozen=True)
class GpcBasis:
    """Multivariate orthonormal basis of total order <= `order`."""

    families: tuple
    order: int
    index_set: np.ndarray  # (K, d)

    @property
    def dim(self):
        return len(self.families)

    @property
    def size(self):
        return self.index_set.shape[0]

    def eval(self, xi):
        """Basis values H_1..H_K at xi; shape (K,) or (B, K)."""
        xi = np.asarray(xi, dtype=float)
        single = xi.ndim == 1
        pts = np.atleast_2d(xi)
        if pts.shape[1] != self.dim:
            raise GpcError(f"expected {self.dim} coordinates, got {pts.shape[1]}")
        vals = np.ones((pts.shape[0], self.size))
        for j, fam in enumerate(self.families):
            uni = eval_univariate(fam, self.order, pts[:, j])  # (p+1, B)
            vals *= uni[self.index_set[:, j]].T
        return vals[0] if single else vals


def basis_size(order, dim):
    """Number of total-degree basis functions, (order + dim)! / (order! dim!)."""
    return math.comb(order + dim, dim)


def build_basis(dists, order):
    """Construct the orthonormal basis for a list of distributions."""
    if order < 0:
        raise GpcError("order must be >= 0")
    families = tuple(family_for(s) for s in dists)
    index_set = _graded_indices(len(families), order)
    basis = GpcBasis(families, order, index_set)
    assert basis.size == basis_size(order, len(families))
    return basis


def eval_basis(basis, xi):
    return basis.eval(xi)


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray  # (M, d)
    weights: np.ndarray  # (M,), sums to 1

    @property
    def count(self):
        return self.nodes.shape[0]


def gauss_rule(family, m):
    """1-D Gauss rule with m points for the family's weight function.

    Computed by eigen-decomposition of the symmetric tridiagonal matrix of
    the three-term recurrence; weights are normalized to sum to one (the
    densities are probability densities).
    """
    if m < 1:
        raise GpcError("quadrature needs at least one point")
    if family == HERMITE:
        beta = np.arange(1, m, dtype=float)
    elif family == LEGENDRE:
        k = np.arange(1, m, dtype=float)
        beta = k * k / (4.0 * k * k - 1.0)
    else:
        raise GpcError(f"unknown family {family!r}")
    if m == 1:
        return np.zeros(1), np.ones(1)
    nodes, vecs = eigh_tridiagonal(np.zeros(m), np.sqrt(beta))
    weights = vecs[0] ** 2
    weights /= weights.sum()
    return nodes, weights


def tensor_rule(basis, points_per_dim, max_candidates=1_000_000):
    """Tensor-product Gauss rule across the basis dimensions.

    When the full tensor grid exceeds ``max_candidates`` points, only the
    largest-weight points are kept.
    """
    rules = [gauss_rule(fam, points_per_dim) for fam in basis.families]
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    wgrids = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.ones(nodes.shape[0])
    for w in wgrids:
        weights = weights * w.ravel()
    if nodes.shape[0] > max_candidates:
        keep = np.argsort(-weights, kind="stable")[:max_candidates]
        keep.sort()
        nodes, weights = nodes[keep], weights[keep]
        weights = weights / weights.sum()
    return QuadratureRule(nodes, weights)


# ---------------------------------------------------------------------------
# testing nodes


@dataclass(frozen=True)
class TestingSet:
    """K testing nodes with the collocation matrix V and its inverse."""

    basis: GpcBasis
    nodes: np.ndarray  # (K, d)
    vandermonde: np.ndarray  # (K, K), row i = basis values at node i
    v_inv: np.ndarray
    cond_estimate: float

    @property
    def size(self):
        return self.nodes.shape[0]

    def to_json(self):
        return json.dumps(
            {
                "nodes": self.nodes.tolist(),
                "cond_estimate": self.cond_estimate,
                "order": int(self.basis.order),
                "families": list(self.basis.families),
            },
            indent=2,
        )


def select_testing_nodes(basis, candidates, cond_bound=1e6, pivot_threshold=1e-3):
    """Pick K candidate nodes whose collocation matrix is well conditioned.

    Candidates are visited in order of decreasing quadrature weight (ties
    broken by coordinates, so the choice is deterministic) and accepted
    when the orthogonalized remainder of their basis row exceeds the pivot
    threshold relative to the row norm. The threshold is relaxed stepwise
    if the scan cannot fill all K slots.
    """
    K = basis.size
    if candidates.count < K:
        raise GpcError(f"need at least {K} candidates, got {candidates.count}")
    keys = tuple(candidates.nodes[:, j] for j in range(basis.dim - 1, -1, -1))
    order = np.lexsort(keys + (-candidates.weights,))
    rows_all = basis.eval(candidates.nodes[order])  # (M, K)

    threshold = pivot_threshold
    while True:
        picked = []
        ortho = np.zeros((K, K))
        n_ortho = 0
        for i in range(rows_all.shape[0]):
            row = rows_all[i]
            resid = row - ortho[:n_ortho].T @ (ortho[:n_ortho] @ row)
            # second orthogonalization pass for numerical safety
            resid -= ortho[:n_ortho].T @ (ortho[:n_ortho] @ resid)
            rnorm = np.linalg.norm(resid)
            if rnorm > threshold * max(np.linalg.norm(row), 1e-300):
                ortho[n_ortho] = resid / rnorm
                n_ortho += 1
                picked.append(i)
                if n_ortho == K:
                    break
        if n_ortho == K:
            break
        threshold *= 0.1
        if threshold < 1e-13:
            raise GpcError("candidate set does not span the basis (rank deficient)")

    sel = order[picked]
    nodes = candidates.nodes[sel]
    V = rows_all[picked]
    cond = float(np.linalg.cond(V))
    if not np.isfinite(cond) or cond > cond_bound:
        raise GpcError(f"collocation matrix too ill-conditioned: cond = {cond:.3e}")
    return TestingSet(basis, nodes, V, np.linalg.inv(V), cond)


# ---------------------------------------------------------------------------
# coefficient vectors


@dataclass
class GpcCoefficients:
    """K coefficient blocks of an expansion, ordered like the index set."""

    basis: GpcBasis
    blocks: np.ndarray  # (K,) scalars or (K, m) block vectors

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=float)
        if self.blocks.shape[0] != self.basis.size:
            raise GpcError(
                f"expected {self.basis.size} blocks, got {self.blocks.shape[0]}"
            )


@dataclass
class Moments:
    mean: np.ndarray
    std: np.ndarray


def surrogate_eval(coeffs, xi):
    """Evaluate the expansion at xi: sum_k blocks[k] * H_k(xi)."""
    H = coeffs.basis.eval(xi)
    return H @ coeffs.blocks


def moments(coeffs):
    """Mean and standard deviation from orthonormal coefficients."""
    blocks = coeffs.blocks
    mean = blocks[0].copy() if blocks.ndim > 1 else float(blocks[0])
    var = np.sum(blocks[1:] ** 2, axis=0)
    return Moments(mean, np.sqrt(var))


def gram_matrix(basis, rule):
    """Quadrature approximation of the basis Gram matrix (identity, ideally)."""
    H = basis.eval(rule.nodes)  # (M, K)
    return H.T @ (H * rule.weights[:, None])
