"""Target-domain adaptation utilities: statistic adaptation (mean
normalization with target-domain statistics), spherical k-means pseudo
labeling, and pseudo-label imposter cohorts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import EmbeddingSet
from .errors import DataError
from .rand import as_rng
from .scoring import Cohort, build_cohort


@dataclass
class DomainStats:
    mean: np.ndarray
    count: int
    domain_tag: str = ""

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        if self.count < 1:
            raise DataError(f"domain stats need count >= 1, got {self.count}")
        if not np.all(np.isfinite(self.mean)):
            raise DataError("domain stats mean is not finite")


def compute_domain_stats(emb: EmbeddingSet, domain_tag: str = "") -> DomainStats:
    if len(emb) == 0:
        raise DataError("cannot compute statistics of an empty embedding set")
    return DomainStats(emb.vectors.astype(np.float64).mean(axis=0), len(emb), domain_tag)


def apply_statistic_adaptation(emb: EmbeddingSet, stats: DomainStats) -> EmbeddingSet:
    """Subtract the domain mean from every vector (scoring re-normalizes lengths)."""
    if stats.mean.shape != (emb.dim,):
        raise DataError(f"stats dim {stats.mean.shape} does not match embeddings ({emb.dim})")
    return EmbeddingSet(list(emb.names), emb.vectors.astype(np.float64) - stats.mean,
                        dim=emb.dim)


# ---------------------------------------------------------------------------
# spherical k-means pseudo labels
# ---------------------------------------------------------------------------

@dataclass
class PseudoLabels:
    assignment: dict  # name -> cluster id in [0, K)
    k: int
    inertia: float
    inertia_history: list = field(default_factory=list)

    def __post_init__(self):
        for name, cid in self.assignment.items():
            if not 0 <= cid < self.k:
                raise DataError(f"cluster id {cid} for {name!r} outside [0, {self.k})")

    def labels_for(self, names) -> np.ndarray:
        try:
            return np.array([self.assignment[n] for n in names], dtype=np.int64)
        except KeyError as e:
            raise DataError(f"no pseudo label for {e.args[0]!r}") from None


def _plusplus_init(x: np.ndarray, k: int, rng) -> np.ndarray:
    """k-means++ style seeding with 1 - cos as the distance."""
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    best_sim = x @ x[chosen[0]]
    for _ in range(k - 1):
        d = np.maximum(0.0, 1.0 - best_sim)
        d[chosen] = 0.0
        total = (d ** 2).sum()
        if total <= 0:
            # all remaining points coincide with a center; take the first unchosen
            remaining = [i for i in range(n) if i not in set(chosen)]
            idx = remaining[0]
        else:
            idx = int(rng.choice(n, p=d ** 2 / total))
        chosen.append(idx)
        best_sim = np.maximum(best_sim, x @ x[idx])
    return x[chosen].copy()


def spherical_kmeans(emb: EmbeddingSet, k: int, seed: int = 0,
                     max_iter: int = 100) -> PseudoLabels:
    """Cosine k-means over length-normalized embeddings.

    Centroids are normalized means; the objective 1 - mean cosine to the
    assigned centroid is recorded after every assignment step and asserted
    non-increasing.  Empty clusters are re-seeded from the point farthest
    from its assigned centroid.  Deterministic given the seed.
    """
    n = len(emb)
    if k < 1 or k > n:
        raise DataError(f"k must lie in [1, {n}], got {k}")
    x = emb.vectors.astype(np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms <= 0):
        raise DataError("spherical k-means needs nonzero vectors")
    x = x / norms[:, None]

    rng = as_rng(seed)
    centers = _plusplus_init(x, k, rng)
    history: list[float] = []
    assign = None
    for _ in range(max_iter):
        sims = x @ centers.T
        new_assign = np.argmax(sims, axis=1)
        inertia = float(1.0 - sims[np.arange(n), new_assign].mean())
        if history and inertia > history[-1] + 1e-12:
            raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign

        used = set()
        for c in range(k):
            members = np.nonzero(assign == c)[0]
            if len(members):
                mean = x[members].mean(axis=0)
                nm = np.linalg.norm(mean)
                if nm > 0:
                    centers[c] = mean / nm
                    continue
            # empty (or degenerate) cluster: steal the worst-fit point
            worst = np.argsort(sims[np.arange(n), assign], kind="stable")
            pick = next(int(i) for i in worst if int(i) not in used)
            used.add(pick)
            centers[c] = x[pick]

    return PseudoLabels({name: int(c) for name, c in zip(emb.names, assign)},
                        k, history[-1], history)


def build_pseudo_cohort(emb: EmbeddingSet, labels: PseudoLabels) -> Cohort:
    """Imposter cohort from pseudo speakers: per-cluster normalized means."""
    speaker_of = {}
    for name in emb.names:
        if name not in labels.assignment:
            raise DataError(f"no pseudo label for {name!r}")
        speaker_of[name] = f"pseudo{labels.assignment[name]}"
    present = {labels.assignment[n] for n in emb.names}
    missing = set(range(labels.k)) - present
    if missing:
        raise DataError(f"empty pseudo cluster(s): {sorted(missing)}")
    return build_cohort(emb, speaker_of)


def write_pseudo_labels(labels: PseudoLabels, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for name, cid in labels.assignment.items():
            f.write(f"{name} {cid}\n")


def read_pseudo_labels(path) -> PseudoLabels:
    assignment = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 2:
                raise DataError(f"{path}:{lineno}: expected `name cluster-id`")
            try:
                assignment[fields[0]] = int(fields[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad cluster id {fields[1]!r}") from None
    if not assignment:
        raise DataError(f"{path}: empty pseudo-label file")
    k = max(assignment.values()) + 1
    return PseudoLabels(assignment, k, float("nan"))
