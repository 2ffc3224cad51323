"""Retrieval quality metrics: AP, AR, F1 per query; MAP/MAR/MAF1/Top-k overall.

Precision and recall are sampled at each cutoff where a relevant image is
retrieved, then averaged over the query's relevant set; relevant images
absent from the ranking contribute zero. Aggregates are unweighted means
over queries. All arithmetic is plain Python floats accumulated in rank
order, so results are exactly reproducible.
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class QueryJudgment:
    """Ground truth for one query.

    ``relevant_ids`` is every image counted as relevant; ``correct_id`` is
    the single paired image used for Top-k accuracy and must be relevant.
    """

    query_id: str
    relevant_ids: frozenset
    correct_id: str

    def __post_init__(self):
        object.__setattr__(self, "relevant_ids", frozenset(self.relevant_ids))
        if not self.relevant_ids:
            raise ValueError(f"query {self.query_id!r}: relevant_ids must be non-empty")
        if self.correct_id not in self.relevant_ids:
            raise ValueError(
                f"query {self.query_id!r}: correct_id {self.correct_id!r} "
                f"is not in relevant_ids"
            )


@dataclass
class MetricsReport:
    map: float
    mar: float
    maf1: float
    top1: float
    top5: float
    top10: float
    per_query: list

    def as_dict(self) -> dict:
        return {
            "map": self.map,
            "mar": self.mar,
            "maf1": self.maf1,
            "top1": self.top1,
            "top5": self.top5,
            "top10": self.top10,
            "per_query": self.per_query,
        }


def _check_ranked(ranked):
    if len(set(ranked)) != len(ranked):
        raise ValueError("ranked list contains duplicate ids")


def average_precision(ranked, relevant) -> float:
    """Mean of precision-at-cutoff over each relevant item found.

    >>> average_precision(["a", "b", "c"], {"a", "c"})   # (1/1 + 2/3) / 2
    0.8333333333333333
    """
    _check_ranked(ranked)
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    m = len(relevant)
    hits = 0
    acc = 0.0
    for pos, doc in enumerate(ranked, start=1):
        if doc in relevant:
            hits += 1
            acc += hits / pos
    return acc / m


def average_recall(ranked, relevant) -> float:
    """Mean of recall-at-cutoff over each relevant item found.

    >>> average_recall(["a", "b", "c"], {"a", "c"})   # (1/2 + 2/2) / 2
    0.75
    """
    _check_ranked(ranked)
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    m = len(relevant)
    hits = 0
    acc = 0.0
    for doc in ranked:
        if doc in relevant:
            hits += 1
            acc += hits / m
    return acc / m


def f1_per_query(ap, ar) -> float:
    """Harmonic mean of a query's AP and AR; zero when both are zero."""
    for name, v in (("ap", ap), ("ar", ar)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    if ap + ar == 0.0:
        return 0.0
    return 2.0 * (ap * ar) / (ap + ar)


def topk_hit(ranked, correct_id, k) -> int:
    """1 if the paired image appears in the first min(k, len) entries, else 0."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return 1 if correct_id in ranked[:k] else 0


def evaluate_run(results, judgments) -> MetricsReport:
    """Score a batch of ranked results against their judgments.

    Results and judgments are matched by query_id (order-independent);
    every result needs exactly one judgment and vice versa. Per-query rows
    follow result order. Rankings should cover the whole index so every
    retrieved-relevant item has a cutoff; relevant items missing from a
    ranking simply contribute zero.
    """
    if not results:
        raise ValueError("no results to evaluate")
    by_id = {}
    for j in judgments:
        if j.query_id in by_id:
            raise ValueError(f"duplicate judgment for query {j.query_id!r}")
        by_id[j.query_id] = j
    seen = set()
    per_query = []
    for r in results:
        if r.query_id in seen:
            raise ValueError(f"duplicate result for query {r.query_id!r}")
        seen.add(r.query_id)
        if r.query_id not in by_id:
            raise ValueError(f"result {r.query_id!r} has no judgment")
        j = by_id[r.query_id]
        ranked = [doc for doc, _ in r.hits]
        ap = average_precision(ranked, j.relevant_ids)
        ar = average_recall(ranked, j.relevant_ids)
        per_query.append(
            {
                "query_id": r.query_id,
                "ap": ap,
                "ar": ar,
                "f1": f1_per_query(ap, ar),
                "top1": topk_hit(ranked, j.correct_id, 1),
                "top5": topk_hit(ranked, j.correct_id, 5),
                "top10": topk_hit(ranked, j.correct_id, 10),
            }
        )
    missing = set(by_id) - seen
    if missing:
        raise ValueError(f"judgment {sorted(missing)[0]!r} has no result")
    q = len(per_query)
    return MetricsReport(
        map=sum(p["ap"] for p in per_query) / q,
        mar=sum(p["ar"] for p in per_query) / q,
        maf1=sum(p["f1"] for p in per_query) / q,
        top1=sum(p["top1"] for p in per_query) / q,
        top5=sum(p["top5"] for p in per_query) / q,
        top10=sum(p["top10"] for p in per_query) / q,
        per_query=per_query,
    )


_TABLE_COLUMNS = ("MAP", "MAR", "MAF1", "Top1", "Top5", "Top10")


def format_table(rows) -> str:
    """Fixed-width summary table, one row per (model, dataset) evaluation.

    ``rows`` are dicts with keys model, dataset, map, mar, maf1, top1,
    top5, top10.
    """
    model_w = max([len("Model")] + [len(str(r["model"])) for r in rows])
    ds_w = max([len("Dataset")] + [len(str(r["dataset"])) for r in rows])
    header = f"{'Model':<{model_w}}  {'Dataset':<{ds_w}}  " + "  ".join(
        f"{c:>6}" for c in _TABLE_COLUMNS
    )
    lines = [header, "-" * len(header)]
    for r in rows:
        vals = (r["map"], r["mar"], r["maf1"], r["top1"], r["top5"], r["top10"])
        lines.append(
            f"{r['model']:<{model_w}}  {r['dataset']:<{ds_w}}  "
            + "  ".join(f"{v:>6.4f}" for v in vals)
        )
    return "\n".join(lines)
