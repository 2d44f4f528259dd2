"""Cold-start ranking evaluation: full ranking of a cold partition, Recall@K and NDCG@K."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError, ProtocolError

log = logging.getLogger(__name__)

DEFAULT_KS = (10, 20)


def recall_at_k(ranked, ground_truth, k: int) -> float:
    if k < 1:
        raise ParameterError(f"K must be >= 1, got {k}")
    truth = set(ground_truth)
    if not truth:
        raise ParameterError("recall_at_k needs a non-empty ground truth")
    hits = sum(1 for item in list(ranked)[:k] if item in truth)
    return hits / len(truth)


def ndcg_at_k(ranked, ground_truth, k: int) -> float:
    """Binary-relevance NDCG, log2 discount, 1-indexed positions, IDCG over min(K, |GT|)."""
    if k < 1:
        raise ParameterError(f"K must be >= 1, got {k}")
    truth = set(ground_truth)
    if not truth:
        raise ParameterError("ndcg_at_k needs a non-empty ground truth")
    dcg = sum(1.0 / math.log2(pos + 2) for pos, item in enumerate(list(ranked)[:k]) if item in truth)
    idcg = sum(1.0 / math.log2(pos + 2) for pos in range(min(k, len(truth))))
    return dcg / idcg


def rank_by_scores(candidates, scores) -> np.ndarray:
    """Candidates sorted by descending score, ties to the lower item index."""
    candidates = np.asarray(candidates)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((candidates, -scores))
    return candidates[order]


@dataclass
class RankingResult:
    partition: str
    ks: tuple
    rankings: dict = field(default_factory=dict)    # user index -> ranked item indices
    per_user: dict = field(default_factory=dict)    # user index -> {metric: value}
    macro: dict = field(default_factory=dict)
    n_evaluated: int = 0
    n_skipped: int = 0
    n_candidates: int = 0
    cold_users: int = 0      # evaluated users without any training interaction
    excluded_items: int = 0
    mean_alpha: np.ndarray | None = None


def _candidates(dataset, partition):
    inter = dataset.interactions
    if partition not in ("valid", "test"):
        raise ProtocolError(f"partition must be 'valid' or 'test', got {partition!r}")
    if not inter.is_split:
        raise ProtocolError("dataset has not been split")
    items = inter.items_in(partition)
    usable = dataset.present[items].any(axis=1)
    if not usable.all():
        log.warning("%d %s-cold item(s) lack all modality features; excluded", int((~usable).sum()), partition)
    return items[usable], int((~usable).sum())


def rank_cold_items(model, dataset, user: int, partition: str) -> np.ndarray:
    items, _ = _candidates(dataset, partition)
    if not 0 <= user < dataset.interactions.n_users:
        raise ParameterError(f"unknown user index {user}")
    e, _ = model.item_embeddings(dataset, items)
    return rank_by_scores(items, e @ model.user_emb.value[user])


def evaluate(model, dataset, partition: str, ks=DEFAULT_KS) -> RankingResult:
    """Macro-averaged Recall@K / NDCG@K over users with cold ground truth in the partition."""
    items, excluded = _candidates(dataset, partition)
    if items.size == 0:
        raise ProtocolError(f"{partition} partition has no rankable items")
    inter = dataset.interactions
    truth = inter.truth(partition)
    by_user: dict[int, list] = {}
    for u, i in truth:
        by_user.setdefault(int(u), []).append(int(i))
    if not by_user:
        raise ProtocolError(f"{partition} partition has no ground-truth interactions")
    ks = tuple(ks)
    e, alpha = model.item_embeddings(dataset, items)
    users = np.array(sorted(by_user))
    scores = model.user_emb.value[users] @ e.T
    trained = np.zeros(inter.n_users, dtype=bool)
    trained[inter.train_records[:, 0]] = True

    result = RankingResult(partition, ks, n_candidates=int(items.size), excluded_items=excluded,
                           mean_alpha=alpha.mean(axis=0))
    names = [f"{m}@{k}" for m in ("recall", "ndcg") for k in ks]
    totals = dict.fromkeys(names, 0.0)
    for row, u in enumerate(users):
        ranked = rank_by_scores(items, scores[row])
        gt = by_user[u]
        metrics = {}
        for k in ks:
            metrics[f"recall@{k}"] = recall_at_k(ranked, gt, k)
            metrics[f"ndcg@{k}"] = ndcg_at_k(ranked, gt, k)
        result.rankings[int(u)] = ranked
        result.per_user[int(u)] = metrics
        for name in names:
            totals[name] += metrics[name]
        if not trained[u]:
            result.cold_users += 1
    result.n_evaluated = len(users)
    result.n_skipped = inter.n_users - len(users)
    result.macro = {name: totals[name] / len(users) for name in names}
    if result.cold_users:
        log.warning("%d evaluated user(s) have no training interactions", result.cold_users)
    return result


def report_table(result: RankingResult, modalities) -> str:
    """TSV with Recall and NDCG columns plus mean fusion weight per modality."""
    cols = ["partition"] + [f"Rec@{k}" for k in result.ks] + [f"NDCG@{k}" for k in result.ks]
    cols += [f"alpha_{m}" for m in modalities] + ["users_evaluated", "users_skipped", "cold_users", "candidates"]
    vals = [result.partition]
    vals += [repr(result.macro[f"recall@{k}"]) for k in result.ks]
    vals += [repr(result.macro[f"ndcg@{k}"]) for k in result.ks]
    vals += [repr(float(a)) for a in result.mean_alpha]
    vals += [str(result.n_evaluated), str(result.n_skipped), str(result.cold_users), str(result.n_candidates)]
    return "\t".join(cols) + "\n" + "\t".join(vals) + "\n"


def write_per_user(result: RankingResult, path, user_ids, item_ids, top: int = 20) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        keys = sorted(next(iter(result.per_user.values())))
        fh.write("user\t" + "\t".join(keys) + "\ttop_items\n")
        for u, metrics in result.per_user.items():
            top_items = ",".join(item_ids[i] for i in result.rankings[u][:top])
            fh.write(f"{user_ids[u]}\t" + "\t".join(repr(metrics[k]) for k in keys) + f"\t{top_items}\n")
