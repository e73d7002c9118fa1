"""Embeddings, knowledge index, top-j retrieval, and contrastive head training."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatchError,
    EmptyKbError,
    ProviderError,
    UnknownEntryError,
)

if TYPE_CHECKING:
    from .knowledge_base import KnowledgeBase, KnowledgeEntry

_TOKEN = re.compile(r"[a-z0-9]+")


def _l2_normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    return vec / norm if norm > 0 else vec


@dataclass
class EmbeddingProvider:
    """Sentence embedding source.

    The "hash" backend is fully deterministic and offline. Its recipe,
    fixed for reproducibility: lowercase the text, extract tokens matching
    [a-z0-9]+, and for each token occurrence add 1.0 at bucket
    int(sha256(token)[:8]) % dim; finally L2-normalize (an all-zero vector
    is returned as-is). Texts with disjoint, non-colliding token sets are
    therefore orthogonal.

    The "http" backend POSTs {"texts": [...]} to the endpoint and expects
    {"embeddings": [[...], ...]} back.
    """

    name: str = "hash"
    dim: int = 256
    backend: str = "hash"  # "hash" | "http"
    endpoint: Optional[str] = None
    timeout: float = 30.0
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def fingerprint(self) -> str:
        return f"{self.name}:{self.dim}:{self.backend}"

    def embed(self, text: str) -> np.ndarray:
        """Return an L2-normalized vector of length dim."""
        if not text:
            raise ValueError("cannot embed empty text")
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        if self.backend == "hash":
            vec = self._hash_embed(text)
        elif self.backend == "http":
            vec = self._http_embed(text)
        else:
            raise ConfigError(f"unknown embedding backend {self.backend!r}")
        self._cache[text] = vec
        return vec

    def _hash_embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in _TOKEN.findall(text.lower()):
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:8], "big") % self.dim
            vec[bucket] += 1.0
        return _l2_normalize(vec)

    def _http_embed(self, text: str) -> np.ndarray:
        import requests

        if not self.endpoint:
            raise ConfigError("http embedding backend requires an endpoint")
        try:
            resp = requests.post(
                self.endpoint, json={"texts": [text]}, timeout=self.timeout
            )
            resp.raise_for_status()
            vec = np.asarray(resp.json()["embeddings"][0], dtype=np.float64)
        except Exception as exc:
            raise ProviderError(f"embedding service failed: {exc}") from exc
        if vec.shape != (self.dim,):
            raise ProviderError(
                f"service returned dim {vec.shape}, expected ({self.dim},)"
            )
        return _l2_normalize(vec)


@dataclass
class ProjectionHead:
    """Trainable linear projection over frozen provider embeddings."""

    weights: np.ndarray  # (dim_in, dim_out)
    tau: float = 0.05
    # best held-out pairwise MRR observed during training, when known
    holdout_mrr: Optional[float] = None

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("head weights must be finite")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def dim_in(self) -> int:
        return self.weights.shape[0]

    @property
    def dim_out(self) -> int:
        return self.weights.shape[1]

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256(self.weights.tobytes())
        h.update(repr(self.tau).encode())
        return h.hexdigest()[:16]

    def project(self, vec: np.ndarray) -> np.ndarray:
        if vec.shape[-1] != self.dim_in:
            raise DimensionMismatchError(
                f"vector dim {vec.shape[-1]} != head dim_in {self.dim_in}"
            )
        return _l2_normalize(vec @ self.weights)

    def save(
        self,
        path: Path | str,
        provider_fingerprint: str = "",
        config_hash: Optional[str] = None,
    ) -> None:
        obj = {
            "dim_in": self.dim_in,
            "dim_out": self.dim_out,
            "tau": self.tau,
            "provider_fingerprint": provider_fingerprint,
            "weights": self.weights.tolist(),
        }
        if config_hash is not None:
            obj["config_hash"] = config_hash
        Path(path).write_text(json.dumps(obj) + "\n")

    @classmethod
    def load(cls, path: Path | str) -> tuple["ProjectionHead", dict]:
        obj = json.loads(Path(path).read_text())
        head = cls(weights=np.asarray(obj["weights"], dtype=np.float64), tau=obj["tau"])
        meta = {k: v for k, v in obj.items() if k != "weights"}
        return head, meta


def init_head(dim_in: int, dim_out: int, seed: int = 0) -> ProjectionHead:
    rng = np.random.default_rng(seed)
    weights = rng.standard_normal((dim_in, dim_out)) / np.sqrt(dim_in)
    return ProjectionHead(weights=weights)


def embed(
    provider: EmbeddingProvider, text: str, head: Optional[ProjectionHead] = None
) -> np.ndarray:
    """Provider embedding, optionally passed through the projection head."""
    vec = provider.embed(text)
    return head.project(vec) if head is not None else vec


@dataclass
class KnowledgeIndex:
    """Flat full-scan index: one L2-normalized row per KB entry."""

    entries: tuple["KnowledgeEntry", ...]
    matrix: np.ndarray
    provider_fingerprint: str
    head_fingerprint: Optional[str] = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]


def build_index(
    kb: "KnowledgeBase",
    provider: EmbeddingProvider,
    head: Optional[ProjectionHead] = None,
) -> KnowledgeIndex:
    entries = tuple(kb.sorted_entries())
    if not entries:
        raise EmptyKbError("cannot index an empty knowledge base")
    rows = np.stack([embed(provider, e.text, head) for e in entries])
    return KnowledgeIndex(
        entries=entries,
        matrix=rows,
        provider_fingerprint=provider.fingerprint,
        head_fingerprint=head.fingerprint if head is not None else None,
    )


def retrieve(
    query: str,
    index: KnowledgeIndex,
    j: int,
    provider: EmbeddingProvider,
    head: Optional[ProjectionHead] = None,
) -> list[tuple["KnowledgeEntry", float]]:
    """Top-j entries by cosine similarity, ties broken by entry id ascending."""
    if j < 1:
        raise ValueError("j must be >= 1")
    if len(index) == 0:
        raise EmptyKbError("index is empty")
    qvec = embed(provider, query, head)
    scores = index.matrix @ qvec
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.entries[i].id))
    return [(index.entries[i], float(scores[i])) for i in order[:j]]


def info_nce_loss(
    q_vec: np.ndarray,
    pos_vec: np.ndarray,
    neg_vecs: Sequence[np.ndarray],
    tau: float,
) -> float:
    """Contrastive loss over cosine similarities, log-sum-exp stabilized."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if len(neg_vecs) < 1:
        raise ValueError("at least one negative required")
    q = np.asarray(q_vec, dtype=np.float64)
    vecs = [np.asarray(pos_vec, dtype=np.float64)] + [
        np.asarray(v, dtype=np.float64) for v in neg_vecs
    ]
    for v in vecs:
        if v.shape != q.shape:
            raise DimensionMismatchError(f"vector shape {v.shape} != query {q.shape}")
    qn = _l2_normalize(q)
    logits = np.array([float(qn @ _l2_normalize(v)) / tau for v in vecs])
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    return float(lse - logits[0])


def info_nce_batch(
    weights: np.ndarray,
    queries: np.ndarray,
    positives: np.ndarray,
    tau: float,
    extra_negatives: Optional[np.ndarray] = None,
) -> tuple[float, np.ndarray]:
    """Mean in-batch InfoNCE loss and its analytic gradient w.r.t. the head.

    Rows of `queries`/`positives` are raw provider embeddings; both sides
    are projected by `weights` and L2-normalized before similarity. Each
    other positive in the batch serves as a negative; `extra_negatives`
    rows, when given, extend every row's denominator.
    """
    B = queries.shape[0]
    U = queries @ weights
    V = positives @ weights
    un = np.linalg.norm(U, axis=1, keepdims=True)
    vn = np.linalg.norm(V, axis=1, keepdims=True)
    un = np.where(un == 0, 1.0, un)
    vn = np.where(vn == 0, 1.0, vn)
    Uh, Vh = U / un, V / vn

    cols = Vh
    extra = None
    if extra_negatives is not None and len(extra_negatives):
        N = extra_negatives @ weights
        nn = np.linalg.norm(N, axis=1, keepdims=True)
        nn = np.where(nn == 0, 1.0, nn)
        extra = N / nn
        cols = np.vstack([Vh, extra])

    S = (Uh @ cols.T) / tau  # (B, B + n_extra)
    m = S.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(S - m).sum(axis=1))
    diag = S[np.arange(B), np.arange(B)]
    loss = float(np.mean(lse - diag))

    P = np.exp(S - m)
    P /= P.sum(axis=1, keepdims=True)
    G = P.copy()
    G[np.arange(B), np.arange(B)] -= 1.0
    G /= B * tau

    gUh = G @ cols
    gVh = G[:, :B].T @ Uh
    gU = (gUh - (gUh * Uh).sum(axis=1, keepdims=True) * Uh) / un
    gV = (gVh - (gVh * Vh).sum(axis=1, keepdims=True) * Vh) / vn
    grad = queries.T @ gU + positives.T @ gV
    if extra is not None:
        gNh = G[:, B:].T @ Uh
        nvn = np.linalg.norm(extra_negatives @ weights, axis=1, keepdims=True)
        nvn = np.where(nvn == 0, 1.0, nvn)
        gN = (gNh - (gNh * extra).sum(axis=1, keepdims=True) * extra) / nvn
        grad += extra_negatives.T @ gN
    return loss, grad


@dataclass(frozen=True)
class TrainingPair:
    query: str
    positive: str
    negatives: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.positive:
            raise ValueError("positive knowledge must be non-empty")


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 30
    lr: float = 1e-3
    tau: float = 0.05
    seed: int = 0
    dim_out: Optional[int] = None  # defaults to provider dim
    holdout_fraction: float = 0.25


@dataclass
class RetrievalMetrics:
    mrr: float
    top_at: dict[int, int | float]


def _pairwise_mrr(head_w: np.ndarray, q_raw: np.ndarray, k_raw: np.ndarray) -> float:
    """MRR of each query's own positive ranked against all positives."""
    U = q_raw @ head_w
    V = k_raw @ head_w
    un = np.linalg.norm(U, axis=1, keepdims=True)
    vn = np.linalg.norm(V, axis=1, keepdims=True)
    un = np.where(un == 0, 1.0, un)
    vn = np.where(vn == 0, 1.0, vn)
    S = (U / un) @ (V / vn).T
    n = S.shape[0]
    ranks = (S > S[np.arange(n), np.arange(n)][:, None]).sum(axis=1) + 1
    return float(np.mean(1.0 / ranks))


def train_head(
    pairs: Sequence[TrainingPair],
    provider: EmbeddingProvider,
    config: Optional[TrainConfig] = None,
) -> ProjectionHead:
    """Minimize mean in-batch InfoNCE with plain gradient descent.

    Embeddings are computed once up front (the provider is frozen). A
    seeded holdout split is scored by pairwise MRR after every epoch and
    the best-scoring weights are returned.
    """
    config = config or TrainConfig()
    if config.batch_size < 2:
        raise ConfigError("batch_size must be >= 2 for in-batch negatives")
    if len(pairs) < 2:
        raise ConfigError("need at least 2 training pairs")

    q_raw = np.stack([provider.embed(p.query) for p in pairs])
    k_raw = np.stack([provider.embed(p.positive) for p in pairs])
    neg_texts = sorted({t for p in pairs for t in p.negatives})
    neg_raw = np.stack([provider.embed(t) for t in neg_texts]) if neg_texts else None

    rng = np.random.default_rng(config.seed)
    n = len(pairs)
    n_hold = int(round(n * config.holdout_fraction))
    perm = rng.permutation(n)
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    if len(train_idx) < 2:
        raise ConfigError("not enough pairs left after holdout split")

    dim_out = config.dim_out or provider.dim
    head = init_head(provider.dim, dim_out, seed=config.seed)
    W = head.weights.copy()

    eval_idx = hold_idx if len(hold_idx) >= 2 else train_idx
    best_w = W.copy()
    best_mrr = _pairwise_mrr(W, q_raw[eval_idx], k_raw[eval_idx])

    for _ in range(config.epochs):
        order = rng.permutation(train_idx)
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            if len(batch) < 2:
                continue
            extra = neg_raw
            if neg_raw is not None:
                in_batch = sorted(
                    {t for i in batch for t in pairs[i].negatives}
                )
                extra = (
                    np.stack([provider.embed(t) for t in in_batch])
                    if in_batch
                    else None
                )
            _, grad = info_nce_batch(
                W, q_raw[batch], k_raw[batch], config.tau, extra_negatives=extra
            )
            W -= config.lr * grad
        mrr = _pairwise_mrr(W, q_raw[eval_idx], k_raw[eval_idx])
        if mrr > best_mrr:
            best_mrr = mrr
            best_w = W.copy()
    return ProjectionHead(weights=best_w, tau=config.tau, holdout_mrr=best_mrr)


def eval_retrieval(
    index: KnowledgeIndex,
    labeled: Sequence[tuple[str, Sequence[str]]],
    provider: EmbeddingProvider,
    head: Optional[ProjectionHead] = None,
    ks: Sequence[int] = (1, 3, 10),
) -> RetrievalMetrics:
    """MRR and Top@K over (query text, relevant entry ids) pairs."""
    if not labeled:
        raise ValueError("labeled set must be non-empty")
    known = set(index.ids)
    reciprocal = []
    hits = {k: 0 for k in ks}
    for query, relevant in labeled:
        rel = set(relevant)
        missing = rel - known
        if missing:
            raise UnknownEntryError(f"labels reference unknown entries: {sorted(missing)}")
        ranking = retrieve(query, index, len(index), provider, head)
        rank = next(
            i for i, (entry, _) in enumerate(ranking, start=1) if entry.id in rel
        )
        reciprocal.append(1.0 / rank)
        for k in ks:
            if rank <= k:
                hits[k] += 1
    n = len(labeled)
    return RetrievalMetrics(
        mrr=float(np.mean(reciprocal)),
        top_at={k: hits[k] / n for k in ks},
    )
