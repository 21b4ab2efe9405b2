"""Undirected graphs with spectral certification and random sampling.

Provides the topology layer: graph construction and serialization, the
second-smallest normalized-Laplacian eigenvalue, well-connectedness
certification, combinatorial set functionals (internal/boundary edges,
volume, edge-density bound), the core-subgraph fixed point, and G(n, p)
sampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse


class DegenerateGraph(Exception):
    """Raised when a spectral routine is given a graph with an isolated node."""


class NoConvergence(Exception):
    """Raised when the iterative eigensolver misses its residual target."""


class CoreBoundViolation(Exception):
    """Raised when the core-subgraph size bound fails although its precondition held."""


class Graph:
    """Simple undirected graph over node indices 0..n-1.

    Adjacency is stored as one sorted int32 array per node.  Instances are
    immutable after construction and safe to share across threads.
    """

    __slots__ = ("n", "adj", "_degrees")

    def __init__(self, n: int, adj: Sequence[np.ndarray], _validated: bool = False):
        self.n = int(n)
        self.adj = tuple(adj)
        self._degrees = np.fromiter((len(a) for a in self.adj), dtype=np.int64, count=self.n)
        if not _validated:
            self._validate()

    def _validate(self) -> None:
        if self.n < 0 or len(self.adj) != self.n:
            raise ValueError("adjacency length must equal n")
        seen = {}
        for v, nbrs in enumerate(self.adj):
            if nbrs.size == 0:
                continue
            if nbrs.min() < 0 or nbrs.max() >= self.n:
                raise ValueError(f"node {v}: neighbor index out of range")
            if np.any(np.diff(nbrs) <= 0):
                raise ValueError(f"node {v}: neighbors must be sorted and distinct")
            if np.any(nbrs == v):
                raise ValueError(f"node {v}: self-loop")
            seen[v] = set(nbrs.tolist())
        for v, nbrs in seen.items():
            for u in nbrs:
                if v not in seen.get(u, ()):
                    raise ValueError(f"asymmetric edge ({v}, {u})")

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> "Graph":
        adj: list[list[int]] = [[] for _ in range(n)]
        seen = set()
        for u, v in edges:
            u, v = int(u), int(v)
            if u == v:
                raise ValueError(f"self-loop ({u}, {v})")
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge ({u}, {v}) out of range")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
            adj[u].append(v)
            adj[v].append(u)
        arrays = [np.array(sorted(a), dtype=np.int32) for a in adj]
        return cls(n, arrays, _validated=True)

    @classmethod
    def complete(cls, n: int) -> "Graph":
        all_nodes = np.arange(n, dtype=np.int32)
        adj = [np.delete(all_nodes, v) for v in range(n)]
        return cls(n, adj, _validated=True)

    @classmethod
    def cycle(cls, n: int) -> "Graph":
        if n < 3:
            raise ValueError("cycle needs n >= 3")
        return cls.from_edges(n, [(v, (v + 1) % n) for v in range(n)])

    @classmethod
    def path(cls, n: int) -> "Graph":
        return cls.from_edges(n, [(v, v + 1) for v in range(n - 1)])

    @classmethod
    def circulant(cls, n: int, offsets: Sequence[int]) -> "Graph":
        """Regular graph connecting each v to v +/- o (mod n) for every offset o."""
        offs = np.array(sorted({int(o) % n for o in offsets} - {0}), dtype=np.int64)
        if offs.size == 0:
            return cls(n, [np.array([], dtype=np.int32)] * n, _validated=True)
        deltas = np.unique(np.concatenate([offs, n - offs]) % n)
        deltas = deltas[deltas != 0]
        adj = [
            np.sort((v + deltas) % n).astype(np.int32) for v in range(n)
        ]
        return cls(n, adj, _validated=True)

    def degree(self, v: int) -> int:
        return int(self._degrees[v])

    def degrees(self) -> np.ndarray:
        return self._degrees.copy()

    def neighbors(self, v: int) -> np.ndarray:
        return self.adj[v]

    @property
    def num_edges(self) -> int:
        return int(self._degrees.sum()) // 2

    def volume(self) -> int:
        return int(self._degrees.sum())

    def edges(self) -> Iterator[tuple[int, int]]:
        """Canonical edge order: ascending (u, v) with u < v."""
        for u in range(self.n):
            for v in self.adj[u]:
                if u < v:
                    yield (u, int(v))

    def adjacency_matrix(self, dtype=np.float64) -> np.ndarray:
        a = np.zeros((self.n, self.n), dtype=dtype)
        for v, nbrs in enumerate(self.adj):
            a[v, nbrs] = 1
        return a

    def sparse_adjacency(self) -> scipy.sparse.csr_matrix:
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(self._degrees, out=indptr[1:])
        indices = np.concatenate(self.adj) if self.n else np.array([], dtype=np.int32)
        data = np.ones(len(indices), dtype=np.float64)
        return scipy.sparse.csr_matrix((data, indices, indptr), shape=(self.n, self.n))

    def to_text(self) -> str:
        lines = [f"{self.n} {self.num_edges}"]
        lines.extend(f"{u} {v}" for u, v in self.edges())
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Graph":
        lines = [ln for ln in text.split("\n") if ln.strip()]
        if not lines:
            raise ValueError("empty graph file")
        try:
            n, m = (int(x) for x in lines[0].split())
        except ValueError as exc:
            raise ValueError(f"malformed header: {lines[0]!r}") from exc
        if len(lines) - 1 != m:
            raise ValueError(f"header promises {m} edges, found {len(lines) - 1}")
        edges = []
        for ln in lines[1:]:
            parts = ln.split()
            if len(parts) != 2:
                raise ValueError(f"malformed edge line: {ln!r}")
            u, v = int(parts[0]), int(parts[1])
            if not u < v:
                raise ValueError(f"edge ({u}, {v}) must satisfy u < v")
            edges.append((u, v))
        return cls.from_edges(n, edges)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_file(cls, path) -> "Graph":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def __repr__(self) -> str:
        return f"Graph(n={self.n}, m={self.num_edges})"


@dataclass(frozen=True)
class WellConnectedParams:
    """Degree window plus a lambda_2 floor for certification.

    When ``lambda2_floor`` is None, `check_well_connected` uses the default
    1 - 1/(10 ln ln n) with natural logarithms; the base is a convention,
    not part of the certification logic.
    """

    d_min: float
    d_max: float
    lambda2_floor: Optional[float] = None

    def __post_init__(self):
        if not (0 < self.d_min <= self.d_max):
            raise ValueError("need 0 < d_min <= d_max")
        if self.lambda2_floor is not None and not (0.0 <= self.lambda2_floor <= 2.0):
            raise ValueError("lambda2_floor must lie in [0, 2]")


@dataclass(frozen=True)
class SpectralReport:
    lambda2: float
    residual: float
    iterations: int


@dataclass(frozen=True)
class WellConnectedVerdict:
    ok: bool
    reason: Optional[str] = None  # "degree" | "lambda2" when failing
    offending_value: Optional[float] = None
    offending_node: Optional[int] = None
    lambda2: Optional[float] = None
    floor: Optional[float] = None

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class CoreSubgraphResult:
    removed: frozenset
    retained: frozenset
    phi: float
    steps: int
    bound_checked: bool = False  # True when the size-bound precondition held


def default_lambda2_floor(n: int) -> float:
    """1 - 1/(10 ln ln n); defined as 0 for n too small for ln ln n > 0."""
    if n < 3 or math.log(n) <= 1.0:
        return 0.0
    return 1.0 - 1.0 / (10.0 * math.log(math.log(n)))


def normalized_laplacian(g: Graph, sparse: bool = False):
    """I - D^{-1/2} A D^{-1/2}; requires all degrees >= 1."""
    degs = g._degrees
    if g.n < 2:
        raise DegenerateGraph("need at least 2 nodes")
    if degs.min() == 0:
        raise DegenerateGraph(f"node {int(np.argmin(degs))} has degree 0")
    dinv = 1.0 / np.sqrt(degs.astype(np.float64))
    if sparse:
        a = g.sparse_adjacency()
        scale = scipy.sparse.diags(dinv)
        lap = scipy.sparse.identity(g.n, format="csr") - scale @ a @ scale
        return lap.tocsr()
    a = g.adjacency_matrix()
    lap = np.eye(g.n) - (dinv[:, None] * a) * dinv[None, :]
    return lap


def _lanczos_lambda2(lap, degrees: np.ndarray, tol: float, max_iter: int) -> tuple[float, float, int]:
    """lambda2 via Lanczos on 2I - L with the known kernel of L deflated.

    D^{1/2} 1 always spans a zero eigenvector of the normalized Laplacian, so
    projecting it out makes lambda2 the TOP eigenvalue of the deflated
    operator; a plain Krylov sequence cannot otherwise see the kernel's
    multiplicity on disconnected graphs.  Full reorthogonalization,
    deterministic start vector.
    """
    n = len(degrees)
    kernel = np.sqrt(degrees.astype(np.float64))
    kernel /= np.linalg.norm(kernel)

    def matvec(x):
        y = 2.0 * x - lap @ x
        return y - (kernel @ y) * kernel

    rng = np.random.default_rng(0x5EED)
    q = rng.standard_normal(n)
    q -= (kernel @ q) * kernel
    q /= np.linalg.norm(q)
    basis = np.empty((max_iter, n))
    alphas = np.empty(max_iter)
    betas = np.empty(max_iter)
    basis[0] = q
    k = 0
    beta = 0.0
    check_at = 16

    def ritz(k, beta):
        theta, vecs = scipy.linalg.eigh_tridiagonal(alphas[:k], betas[: k - 1])
        residual = beta * abs(float(vecs[-1, -1])) if k > 0 else math.inf
        return float(theta[-1]), residual

    while True:
        w = matvec(basis[k])
        alphas[k] = basis[k] @ w
        w -= alphas[k] * basis[k]
        if k > 0:
            w -= beta * basis[k - 1]
        # full reorthogonalization against the whole basis
        w -= basis[: k + 1].T @ (basis[: k + 1] @ w)
        beta = float(np.linalg.norm(w))
        k += 1
        if beta < 1e-13:
            # Krylov space is invariant: Ritz values are exact
            theta, _ = ritz(k, 0.0)
            return 2.0 - theta, 0.0, k
        if k == max_iter:
            break
        betas[k - 1] = beta
        basis[k] = w / beta
        if k >= check_at:
            check_at = int(check_at * 1.5)
            theta, residual = ritz(k, beta)
            if residual <= tol:
                return 2.0 - theta, residual, k
    theta, residual = ritz(k, beta)
    if residual > tol:
        raise NoConvergence(f"residual {residual:.3e} > tol {tol:.3e} after {k} iterations")
    return 2.0 - theta, residual, k


def lambda2(g: Graph, tol: float = 1e-8, method: str = "auto") -> SpectralReport:
    """Second-smallest eigenvalue of the normalized Laplacian.

    Dense symmetric solve for n <= 2048, Lanczos with full
    reorthogonalization above (on 2I - L, whose top pair maps back to the
    bottom of L).  The value is clamped to the valid range [0, 2].
    """
    if g.n < 2:
        raise DegenerateGraph("need at least 2 nodes")
    if method == "auto":
        method = "dense" if g.n <= 2048 else "lanczos"
    if method == "dense":
        lap = normalized_laplacian(g)
        vals, vecs = scipy.linalg.eigh(lap, subset_by_index=(0, 1))
        lam = float(vals[1])
        residual = float(np.linalg.norm(lap @ vecs[:, 1] - lam * vecs[:, 1]))
        if residual > max(tol, 1e-10):
            raise NoConvergence(f"dense solve residual {residual:.3e}")
        return SpectralReport(min(max(lam, 0.0), 2.0), residual, 1)
    if method == "lanczos":
        lap = normalized_laplacian(g, sparse=True)
        lam, residual, iters = _lanczos_lambda2(
            lap, g._degrees, tol, max_iter=min(g.n - 1, 500)
        )
        return SpectralReport(min(max(lam, 0.0), 2.0), residual, iters)
    raise ValueError(f"unknown method {method!r}")


def check_well_connected(
    g: Graph, params: WellConnectedParams, tol: float = 1e-8
) -> WellConnectedVerdict:
    """Pass iff every degree lies in [d_min, d_max] and lambda2 >= floor."""
    degs = g._degrees
    lo, hi = int(np.argmin(degs)), int(np.argmax(degs))
    if degs[lo] < params.d_min:
        return WellConnectedVerdict(False, "degree", float(degs[lo]), lo)
    if degs[hi] > params.d_max:
        return WellConnectedVerdict(False, "degree", float(degs[hi]), hi)
    floor = params.lambda2_floor
    if floor is None:
        floor = default_lambda2_floor(g.n)
    report = lambda2(g, tol=tol)
    if report.lambda2 < floor:
        return WellConnectedVerdict(
            False, "lambda2", report.lambda2, None, report.lambda2, floor
        )
    return WellConnectedVerdict(True, None, None, None, report.lambda2, floor)


def _member_mask(g: Graph, w: Iterable[int]) -> np.ndarray:
    mask = np.zeros(g.n, dtype=bool)
    idx = np.fromiter((int(v) for v in w), dtype=np.int64)
    if idx.size:
        if idx.min() < 0 or idx.max() >= g.n:
            raise ValueError("subset index out of range")
        mask[idx] = True
    return mask


def internal_edges(g: Graph, w: Iterable[int]) -> int:
    """Number of edges with both endpoints in w."""
    mask = _member_mask(g, w)
    total = sum(int(mask[g.adj[v]].sum()) for v in np.flatnonzero(mask))
    return total // 2


def boundary_edges(g: Graph, w: Iterable[int]) -> int:
    """Number of edges with exactly one endpoint in w."""
    mask = _member_mask(g, w)
    return sum(int((~mask[g.adj[v]]).sum()) for v in np.flatnonzero(mask))


def volume(g: Graph, w: Iterable[int]) -> int:
    """Sum of degrees over w."""
    mask = _member_mask(g, w)
    return int(g._degrees[mask].sum())


def edge_density_bound(g: Graph, w: Iterable[int], lam: float) -> float:
    """Upper bound (1/2) vol(W) (1 - lambda2 (1 - vol(W)/vol(G))) on E(W)."""
    if not (0.0 <= lam <= 2.0):
        raise ValueError("lambda2 must lie in [0, 2]")
    vol_w = volume(g, w)
    vol_g = g.volume()
    if vol_g == 0 or vol_w == 0:
        return 0.0
    return 0.5 * vol_w * (1.0 - lam * (1.0 - vol_w / vol_g))


def edge_density_ok(g: Graph, w: Iterable[int], lam: float, slack: float = 1e-9) -> bool:
    """Companion checker: internal edge count never exceeds the spectral bound."""
    w = list(w)
    return internal_edges(g, w) <= edge_density_bound(g, w, lam) + slack


def core_alpha_bound(phi: float, d_min: float, d_max: float) -> float:
    """Largest fault fraction for which the 3/2-size bound on the removed set holds."""
    r = d_min / d_max
    return (1.0 - phi) * (40.0 / 27.0) * r * r - (2.0 / 9.0) * r


def core_subgraph(
    g: Graph,
    f: Iterable[int],
    phi: float,
    d_min: float,
    d_max: Optional[float] = None,
) -> CoreSubgraphResult:
    """Fixed point of removing nodes with fewer than phi*d_min surviving neighbors.

    Starts from the fault set f and removes one qualifying node per step,
    lowest index first, so traces are reproducible.  When d_max is supplied
    and |f| is below the alpha precondition for (phi, d_min, d_max), the
    ceil(3|f|/2) size bound is enforced and its violation raises.
    """
    if not (0.0 < phi < 1.0):
        raise ValueError("phi must lie in (0, 1)")
    fault = sorted({int(v) for v in f})
    if fault and (fault[0] < 0 or fault[-1] >= g.n):
        raise ValueError("fault set out of range")
    removed = np.zeros(g.n, dtype=bool)
    removed[fault] = True
    threshold = phi * d_min
    # surviving-neighbor counts, maintained incrementally per removal
    counts = g._degrees.astype(np.int64).copy()
    for v in fault:
        counts[g.adj[v]] -= 1
    steps = 0
    while True:
        candidates = np.flatnonzero(~removed & (counts < threshold))
        if candidates.size == 0:
            break
        v = int(candidates[0])
        removed[v] = True
        counts[g.adj[v]] -= 1
        steps += 1
    removed_set = frozenset(int(v) for v in np.flatnonzero(removed))
    retained_set = frozenset(int(v) for v in np.flatnonzero(~removed))
    bound_checked = False
    if d_max is not None and fault:
        alpha = core_alpha_bound(phi, d_min, d_max)
        if len(fault) < alpha * g.n:
            bound_checked = True
            limit = math.ceil(1.5 * len(fault))
            if len(removed_set) > limit:
                raise CoreBoundViolation(
                    f"|removed| = {len(removed_set)} > {limit} despite |F| = {len(fault)}"
                    f" < {alpha:.4f} * n"
                )
    return CoreSubgraphResult(removed_set, retained_set, phi, steps, bound_checked)


def gnp_probability(n: int, c: float = 20.0) -> float:
    """Edge probability c ln(n) (ln ln n)^2 / (n - 1) used by the sampler presets."""
    if n < 3:
        raise ValueError("need n >= 3")
    return c * math.log(n) * math.log(math.log(n)) ** 2 / (n - 1)


def sample_gnp(n: int, p: float, rng) -> Graph:
    """Erdos-Renyi sample: each unordered pair appears independently with probability p.

    Deterministic given the generator state; pairs are scanned row-major over
    the upper triangle.
    """
    if not (0.0 <= p <= 1.0):
        raise ValueError("p must lie in [0, 1]")
    if n < 2:
        raise ValueError("need n >= 2")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    adj: list[list[np.ndarray]] = [[] for _ in range(n)]
    for u in range(n - 1):
        hits = np.flatnonzero(rng.random(n - 1 - u) < p).astype(np.int32) + u + 1
        adj[u].append(hits)
        for v in hits:
            adj[int(v)].append(np.array([u], dtype=np.int32))
    arrays = []
    for v in range(n):
        if adj[v]:
            merged = np.sort(np.concatenate(adj[v]))
        else:
            merged = np.array([], dtype=np.int32)
        arrays.append(merged.astype(np.int32))
    return Graph(n, arrays, _validated=True)
