"""Episodic N-way K-shot machinery: episodes, prototypes, losses, rejection.

The scalar helpers (prototypes, distances, class_likelihood, ...) are plain
numpy and serve evaluation; episode_loss composes the same math on autodiff
tensors for training. The likelihood softmax runs over negative distances so
that minimizing the loss pulls queries toward their class prototype.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (DimensionMismatch, EmptySupport, InsufficientClasses,
                     InsufficientSamples)

PROB_FLOOR = 1e-12
DEFAULT_QUERY_CAP = 8


@dataclass
class Episode:
    n_way: int
    k_shot: int
    classes: tuple  # class id per episode index
    support: dict  # class id -> list of sample refs, length k_shot
    queries: list = field(default_factory=list)  # (ref, class id, p_e or None)

    def class_index(self, class_id) -> int:
        return self.classes.index(class_id)


@dataclass(frozen=True)
class Prototype:
    class_id: object
    vector: np.ndarray


@dataclass(frozen=True)
class RejectionRule:
    threshold: float

    def __post_init__(self):
        if self.threshold < 0.0:
            raise ValueError("rejection threshold must be >= 0")


def sample_episode(dataset: dict, n_way: int, k_shot: int,
                   rng: np.random.Generator, query_cap: int = DEFAULT_QUERY_CAP,
                   allow_fewer_classes: bool = False,
                   label_fn=None) -> Episode:
    """Draw classes uniformly, split each into K support + capped queries."""
    class_ids = sorted(dataset)
    if len(class_ids) < n_way:
        if not allow_fewer_classes:
            raise InsufficientClasses(
                f"dataset has {len(class_ids)} classes, need {n_way}")
        n_way = len(class_ids)
    if n_way < 1:
        raise InsufficientClasses("no classes available")
    chosen = [class_ids[i] for i in rng.choice(len(class_ids), n_way, replace=False)]
    support = {}
    queries = []
    for cid in chosen:
        items = dataset[cid]
        if len(items) <= k_shot:
            raise InsufficientSamples(
                f"class {cid!r} has {len(items)} samples, need > {k_shot}")
        perm = rng.permutation(len(items))
        support[cid] = [items[i] for i in perm[:k_shot]]
        for i in perm[k_shot:k_shot + query_cap]:
            item = items[i]
            queries.append((item, cid, label_fn(item) if label_fn else None))
    return Episode(n_way=n_way, k_shot=k_shot, classes=tuple(chosen),
                   support=support, queries=queries)


def prototypes(embedded_support: dict) -> list[Prototype]:
    """Per-class mean embedding; input maps class id -> (K, E) array."""
    out = []
    for cid, emb in embedded_support.items():
        emb = np.asarray(emb, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise EmptySupport(f"class {cid!r} has no support embeddings")
        out.append(Prototype(class_id=cid, vector=emb.mean(axis=0)))
    if not out:
        raise EmptySupport("no support classes")
    return out


def distances(query: np.ndarray, protos: list[Prototype]) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64)
    mat = np.stack([p.vector for p in protos])
    if mat.shape[1] != query.shape[-1]:
        raise DimensionMismatch(
            f"query dim {query.shape[-1]} vs prototype dim {mat.shape[1]}")
    return np.linalg.norm(mat - query, axis=1)


def class_likelihood(dists: np.ndarray) -> np.ndarray:
    """softmax over negative distances, max-subtracted for stability."""
    z = -np.asarray(dists, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def class_loss(likelihoods: np.ndarray, true_class: int) -> float:
    return float(-np.log(max(float(likelihoods[true_class]), PROB_FLOOR)))


def reg_loss(p_e: float, p_hat: float) -> float:
    return abs(p_e - p_hat)


def total_loss(class_term: float, reg_term: float, reg_enabled: bool) -> float:
    return class_term + reg_term if reg_enabled else class_term


def predict(likelihoods: np.ndarray) -> int:
    """argmax class index; exact ties resolve to the lowest index."""
    return int(np.argmax(likelihoods))


def reject_unknown(dists: np.ndarray, rule: RejectionRule):
    """('accept', argmin class index) unless every distance exceeds the
    threshold, then ('reject', None)."""
    dists = np.asarray(dists)
    if float(dists.min()) > rule.threshold:
        return ("reject", None)
    return ("accept", int(np.argmin(dists)))


# ---------------------------------------------------------------------------
# tensor-graph episode loss for training
# ---------------------------------------------------------------------------

def pairwise_distances(emb_q: Tensor, protos: Tensor) -> Tensor:
    """(Q, N) Euclidean distances between query embeddings and prototypes."""
    q2 = ad.sum_(ad.mul(emb_q, emb_q), axis=1, keepdims=True)           # (Q,1)
    p2 = ad.sum_(ad.mul(protos, protos), axis=1, keepdims=True)         # (N,1)
    cross = ad.matmul(emb_q, ad.transpose(protos))                      # (Q,N)
    d2 = ad.add(ad.add(q2, ad.transpose(p2)), ad.mul(cross, -2.0))
    return ad.sqrt(ad.relu(d2))


def episode_tensors(model, support_x, query_x, query_class_idx, n_way, k_shot,
                    training=False, rng=None):
    """Embed an episode and return (distances (Q,N), query embeddings)."""
    emb_s = model.embed(support_x, training=training, rng=rng)
    emb_q = model.embed(query_x, training=training, rng=rng)
    avg = np.zeros((n_way, n_way * k_shot), dtype=emb_s.values.dtype)
    for c in range(n_way):
        avg[c, c * k_shot:(c + 1) * k_shot] = 1.0 / k_shot
    protos = ad.matmul(Tensor(avg), emb_s)
    return pairwise_distances(emb_q, protos), emb_q


def episode_loss(model, support_x, query_x, query_class_idx,
                 query_labels=None, training=False, rng=None,
                 n_way=None, k_shot=None, reg_weight=1.0):
    """Mean NLL over queries, plus mean L1 regression loss when labels given.

    support_x is ordered class-major: k_shot consecutive samples per class,
    classes in episode index order. Returns (total, class_term, reg_term);
    the total adds reg_weight * reg_term.
    """
    q_idx = np.asarray(query_class_idx)
    dists, emb_q = episode_tensors(model, support_x, query_x, q_idx,
                                   n_way, k_shot, training, rng)
    logp = ad.log_softmax(ad.mul(dists, -1.0), axis=1)
    picked = ad.take_pairs(logp, np.arange(q_idx.size), q_idx)
    class_term = ad.mul(ad.mean_(picked), -1.0)
    if query_labels is None:
        return class_term, class_term, None
    preds = model.regress(emb_q)
    target = Tensor(np.asarray(query_labels, dtype=preds.values.dtype))
    reg_term = ad.mean_(ad.abs_(ad.add(preds, ad.mul(target, -1.0))))
    return ad.add(class_term, ad.mul(reg_term, reg_weight)), class_term, reg_term
