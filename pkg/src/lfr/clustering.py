"""Dropped/retained-block analysis: embeddings, k-means, cosine similarity.

Reproduces the desk-scale version of the dropped-vs-retained study: embed
each blockid set, cluster both sides with k-means (k each), and compare
the centroid sets through a cosine-similarity matrix summarized by
population mean / std / variance, with a heatmap rendered for inspection.
The numbers (CSV) are the tested artifact; the image is a convenience.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Corpus
from .errors import ConfigError, EngineError

EMBED_METHODS = ("token-frequency", "learner-hidden")


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

def embed_blocks(
    corpus: Corpus,
    block_ids: Sequence[int],
    method: str = "token-frequency",
    learner=None,
) -> np.ndarray:
    """Embed blocks into one row per id.

    token-frequency: L1-normalized token-id histogram (d = vocab_size).
    learner-hidden: mean of the learner's final hidden states over the
    block (d = model width); needs a learner exposing ``hidden_states``.
    """
    ids = np.asarray(block_ids, dtype=np.int64)
    if ids.size == 0:
        raise EngineError("cannot embed an empty id set")
    if ids.min() < 0 or ids.max() >= len(corpus):
        raise EngineError(f"block ids outside corpus range [0, {len(corpus)})")

    if method == "token-frequency":
        L = corpus.context_length
        rows = np.empty((ids.size, corpus.vocab_size), dtype=np.float64)
        for i, bid in enumerate(ids):
            counts = np.bincount(corpus.tokens[bid], minlength=corpus.vocab_size)
            rows[i] = counts / L
        return rows
    if method == "learner-hidden":
        if learner is None or not hasattr(learner, "hidden_states"):
            raise ConfigError("learner-hidden embeddings need a learner with hidden_states()")
        rows = [learner.hidden_states(corpus.tokens[bid]).mean(axis=0) for bid in ids]
        return np.asarray(rows, dtype=np.float64)
    raise ConfigError(f"unknown embedding method {method!r}; expected one of {EMBED_METHODS}")


# ---------------------------------------------------------------------------
# k-means (Lloyd's algorithm, k-means++ init)
# ---------------------------------------------------------------------------

@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray  # (k, d)
    assignments: np.ndarray  # (n,) ints in [0, k)
    inertia: float
    n_iters: int
    inertia_history: list[float]


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Pairwise squared euclidean distances, shape (n, k)."""
    d = (X * X).sum(axis=1)[:, None] + (C * C).sum(axis=1)[None, :] - 2.0 * (X @ C.T)
    return np.maximum(d, 0.0)


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]), dtype=np.float64)
    centroids[0] = X[rng.integers(n)]
    closest = _sq_dists(X, centroids[:1]).ravel()
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with chosen centroids
            centroids[j] = X[rng.integers(n)]
            continue
        probs = closest / total
        idx = rng.choice(n, p=probs)
        centroids[j] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, centroids[j : j + 1]).ravel())
    return centroids


def kmeans(
    embeddings: np.ndarray,
    k: int,
    seed: int = 0,
    max_iters: int = 300,
    rel_tol: float = 0.0,
    n_init: int = 10,
) -> ClusterModel:
    """Lloyd's algorithm with k-means++ initialization, best of n_init runs.

    Each run iterates until the assignment vector is a fixed point (or
    the relative inertia improvement drops below rel_tol, or max_iters).
    Inertia is checked to be non-increasing on every iteration.  Empty
    clusters are reseeded to the point farthest from its current
    centroid.

    The k-means++ draws run over a lexicographically sorted view of the
    rows, so the chosen centroids depend on the data multiset and the
    seed, not on row order (label-equivariance under row permutation).
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2:
        raise EngineError(f"embeddings must be 2-D, got shape {X.shape}")
    n = X.shape[0]
    if not 1 <= k <= n:
        raise EngineError(f"k must be in [1, n={n}], got {k}")
    if max_iters < 1 or n_init < 1:
        raise ConfigError("max_iters and n_init must be >= 1")

    rng = np.random.default_rng(seed)
    canonical = np.lexsort(X.T[::-1])
    best: ClusterModel | None = None
    for _ in range(n_init):
        model = _lloyd_once(X, _kmeans_pp_init(X[canonical], k, rng), max_iters, rel_tol)
        if best is None or model.inertia < best.inertia:
            best = model
    return best


def _lloyd_once(
    X: np.ndarray, centroids: np.ndarray, max_iters: int, rel_tol: float
) -> ClusterModel:
    n, k = X.shape[0], centroids.shape[0]
    assignments = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    prev_inertia = np.inf

    for it in range(1, max_iters + 1):
        dists = _sq_dists(X, centroids)
        new_assign = dists.argmin(axis=1)
        inertia = float(dists[np.arange(n), new_assign].sum())
        if inertia > prev_inertia * (1 + 1e-12) + 1e-12:
            raise EngineError(
                f"k-means inertia increased at iteration {it}: {prev_inertia} -> {inertia}"
            )
        history.append(inertia)
        converged = bool(np.array_equal(new_assign, assignments))
        assignments = new_assign

        # reseed empty clusters to the points farthest from their centroid
        point_dist = dists[np.arange(n), assignments]
        for j in range(k):
            if not np.any(assignments == j):
                far = int(point_dist.argmax())
                centroids[j] = X[far]
                assignments[far] = j
                point_dist[far] = 0.0
                converged = False

        for j in range(k):
            members = assignments == j
            if np.any(members):
                centroids[j] = X[members].mean(axis=0)

        if converged:
            break
        if (
            rel_tol > 0
            and np.isfinite(prev_inertia)
            and prev_inertia > 0
            and (prev_inertia - inertia) / prev_inertia < rel_tol
        ):
            break
        prev_inertia = inertia

    dists = _sq_dists(X, centroids)
    assignments = dists.argmin(axis=1)
    inertia = float(dists[np.arange(n), assignments].sum())
    return ClusterModel(k, centroids, assignments, inertia, len(history), history)


def default_k(n: int) -> int:
    """Proportional stand-in for the fixed web-scale cluster count."""
    return max(1, min(270, n // 10))


# ---------------------------------------------------------------------------
# Cosine similarity
# ---------------------------------------------------------------------------

@dataclass
class SimilarityMatrix:
    values: np.ndarray  # (a, b)
    row_labels: list[str]
    col_labels: list[str]


@dataclass(frozen=True)
class SimilarityStats:
    mean: float
    std: float
    variance: float


def cosine_similarity(set_a: np.ndarray, set_b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between the rows of two matrices."""
    A = np.asarray(set_a, dtype=np.float64)
    B = np.asarray(set_b, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise EngineError(f"dimension mismatch: {A.shape} vs {B.shape}")
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    for name, norms in (("A", na), ("B", nb)):
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise EngineError(f"zero-norm vector in set {name} at row {int(zero[0])}")
    return (A / na[:, None]) @ (B / nb[:, None]).T


def similarity_stats(matrix: np.ndarray) -> SimilarityStats:
    """Population mean / std / variance over all matrix entries."""
    M = np.asarray(matrix, dtype=np.float64)
    if M.size == 0:
        raise EngineError("similarity stats need a nonempty matrix")
    variance = float(np.var(M))
    return SimilarityStats(mean=float(np.mean(M)), std=float(np.sqrt(variance)), variance=variance)


# ---------------------------------------------------------------------------
# Set-vs-set comparison and phase reports
# ---------------------------------------------------------------------------

@dataclass
class PairingResult:
    label_a: str
    label_b: str
    k_a: int
    k_b: int
    stats: SimilarityStats
    matrix: np.ndarray
    csv_path: Path | None = None
    heatmap_path: Path | None = None


def compare_sets(
    corpus: Corpus,
    ids_a: Sequence[int],
    ids_b: Sequence[int],
    label_a: str = "A",
    label_b: str = "B",
    k: int | None = None,
    method: str = "token-frequency",
    seed: int = 0,
    learner=None,
    out_dir: Path | str | None = None,
) -> PairingResult:
    """Cluster two block-id sets and compare their centroid sets."""
    if len(ids_a) == 0 or len(ids_b) == 0:
        raise EngineError("comparison needs two nonempty id sets")
    emb_a = embed_blocks(corpus, ids_a, method, learner)
    emb_b = embed_blocks(corpus, ids_b, method, learner)
    k_a = min(k if k is not None else default_k(len(ids_a)), len(ids_a))
    k_b = min(k if k is not None else default_k(len(ids_b)), len(ids_b))
    model_a = kmeans(emb_a, k_a, seed=seed)
    model_b = kmeans(emb_b, k_b, seed=seed)
    matrix = cosine_similarity(model_a.centroids, model_b.centroids)
    result = PairingResult(label_a, label_b, k_a, k_b, similarity_stats(matrix), matrix)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = f"{_slug(label_a)}__vs__{_slug(label_b)}"
        result.csv_path = out_dir / f"{stem}.csv"
        np.savetxt(result.csv_path, matrix, delimiter=",", fmt="%.17g")
        result.heatmap_path = out_dir / f"{stem}.png"
        _render_heatmap(matrix, f"{label_a} vs {label_b}", result.heatmap_path)
    return result


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in label)


def _render_heatmap(matrix: np.ndarray, title: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(matrix, cmap="viridis", vmin=-1.0, vmax=1.0)
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def load_id_file(path: Path | str) -> list[int]:
    return [int(line) for line in Path(path).read_text().split()]


def collect_run_id_sets(run_dir: Path | str) -> dict[str, list[int]]:
    """All dropped/retained id files a run produced, keyed by file stem."""
    run_dir = Path(run_dir)
    sets = {}
    for p in sorted(run_dir.glob("*.ids")):
        sets[p.stem] = load_id_file(p)
    return sets


def phase_comparison(
    run_artifacts: dict[str, Path | str],
    corpus: Corpus,
    k: int | None = None,
    method: str = "token-frequency",
    seed: int = 0,
    learner=None,
    out_dir: Path | str | None = None,
) -> list[PairingResult]:
    """Standard pairings over one or more runs' dropped/retained id files.

    Within each run: dropped sets of every pair of Focus phases, and
    dropped vs retained within each phase.  Across runs: dropped sets of
    matching phases.  All runs must reference the same corpus (their
    run.json corpus checksum is verified when present).
    """
    per_run: dict[str, dict[str, list[int]]] = {}
    for run_label, run_dir in run_artifacts.items():
        run_dir = Path(run_dir)
        summary = run_dir / "run.json"
        if summary.exists():
            import json

            recorded = json.loads(summary.read_text()).get("corpus_sha256")
            if recorded and corpus.sha256 and recorded != corpus.sha256:
                raise EngineError(
                    f"run {run_label!r} was produced from a different corpus"
                    f" ({recorded[:12]}... != {corpus.sha256[:12]}...)"
                )
        per_run[run_label] = collect_run_id_sets(run_dir)

    results: list[PairingResult] = []

    def _compare(label_a, ids_a, label_b, ids_b):
        results.append(
            compare_sets(
                corpus, ids_a, ids_b, label_a, label_b, k=k, method=method,
                seed=seed, learner=learner, out_dir=out_dir,
            )
        )

    for run_label, sets in per_run.items():
        dropped = sorted(s for s in sets if s.startswith("dropped_phase"))
        for i in range(len(dropped)):
            for j in range(i + 1, len(dropped)):
                _compare(
                    f"{run_label}:{dropped[i]}", sets[dropped[i]],
                    f"{run_label}:{dropped[j]}", sets[dropped[j]],
                )
        for d in dropped:
            r = d.replace("dropped", "retained")
            if r in sets:
                _compare(f"{run_label}:{d}", sets[d], f"{run_label}:{r}", sets[r])

    run_labels = sorted(per_run)
    for i in range(len(run_labels)):
        for j in range(i + 1, len(run_labels)):
            a, b = run_labels[i], run_labels[j]
            shared = sorted(
                s for s in per_run[a] if s.startswith("dropped_phase") and s in per_run[b]
            )
            for s in shared:
                _compare(f"{a}:{s}", per_run[a][s], f"{b}:{s}", per_run[b][s])
    return results


def write_stats_csv(results: Iterable[PairingResult], path: Path | str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["set_a", "set_b", "k_a", "k_b", "mean", "std", "variance"])
        for r in results:
            w.writerow(
                [r.label_a, r.label_b, r.k_a, r.k_b,
                 f"{r.stats.mean:.6f}", f"{r.stats.std:.6f}", f"{r.stats.variance:.6f}"]
            )
