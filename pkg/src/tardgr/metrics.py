"""Top-k ranking metrics and the per-snapshot evaluation report.

All sums and means go through math.fsum, which is correctly rounded and
therefore order-independent; two implementations that agree on the set
of per-user terms agree on the final float bit-for-bit. That property
is load-bearing: the test suite holds these functions to exact equality
against an independent reference.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

__all__ = ["recall_at_k", "ndcg_at_k", "EvalReport", "SnapshotRow",
           "evaluate_snapshots", "evaluable_users"]

log = logging.getLogger(__name__)


def evaluable_users(predictions, ground_truth):
    """Users rankable and gradable: present in predictions with nonempty
    ground truth. Returns (sorted users, excluded count)."""
    users = []
    excluded = 0
    for u in predictions:
        if ground_truth.get(u):
            users.append(u)
        else:
            excluded += 1
    if excluded:
        log.info("excluded %d users with empty ground truth", excluded)
    return sorted(users), excluded


def recall_at_k(predictions, ground_truth, k: int) -> float:
    """Mean over users of |top-k hits| / |ground truth|. The normalizer
    is the full ground-truth size even when it exceeds k."""
    users, _ = evaluable_users(predictions, ground_truth)
    if not users:
        raise ValueError("recall_at_k: no evaluable users")
    per_user = []
    for u in users:
        gt = ground_truth[u]
        hits = sum(1 for item in predictions[u][:k] if item in gt)
        per_user.append(hits / len(gt))
    return math.fsum(per_user) / len(per_user)


def _dcg(ranked, gt, k: int) -> float:
    return math.fsum(1.0 / math.log2(j + 2)
                     for j, item in enumerate(ranked[:k]) if item in gt)


def _ideal_dcg(n_relevant: int, k: int) -> float:
    return math.fsum(1.0 / math.log2(j + 2)
                     for j in range(min(k, n_relevant)))


def ndcg_at_k(predictions, ground_truth, k: int) -> float:
    """Mean over users of DCG@k / IDCG@k with binary relevance; IDCG is
    the DCG of min(k, |ground truth|) leading hits."""
    users, _ = evaluable_users(predictions, ground_truth)
    if not users:
        raise ValueError("ndcg_at_k: no evaluable users")
    per_user = []
    for u in users:
        gt = ground_truth[u]
        per_user.append(_dcg(predictions[u], gt, k)
                        / _ideal_dcg(len(gt), k))
    return math.fsum(per_user) / len(per_user)


@dataclass
class SnapshotRow:
    time_index: int
    recall: float
    ndcg: float
    users_evaluated: int
    users_excluded: int
    skipped: bool = False


@dataclass
class EvalReport:
    k: int
    seed: int
    variant: str
    rows: list = field(default_factory=list)

    def _scored_rows(self):
        return [r for r in self.rows if not r.skipped]

    @property
    def mean_recall(self) -> float:
        rows = self._scored_rows()
        return math.fsum(r.recall for r in rows) / len(rows)

    @property
    def mean_ndcg(self) -> float:
        rows = self._scored_rows()
        return math.fsum(r.ndcg for r in rows) / len(rows)

    def to_text(self) -> str:
        lines = [f"variant {self.variant}", f"k {self.k}",
                 f"seed {self.seed}"]
        for r in self.rows:
            if r.skipped:
                lines.append(f"snapshot {r.time_index} skipped "
                             f"excluded {r.users_excluded}")
            else:
                lines.append(
                    f"snapshot {r.time_index} recall {r.recall!r} "
                    f"ndcg {r.ndcg!r} users {r.users_evaluated} "
                    f"excluded {r.users_excluded}")
        lines.append(f"mean recall {self.mean_recall!r} "
                     f"ndcg {self.mean_ndcg!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        header: dict = {}
        rows = []
        mean_line = None
        for line in text.splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] in ("variant", "k", "seed"):
                header[parts[0]] = parts[1]
            elif parts[0] == "snapshot" and parts[2] == "skipped":
                rows.append(SnapshotRow(int(parts[1]), 0.0, 0.0, 0,
                                        int(parts[4]), skipped=True))
            elif parts[0] == "snapshot":
                rows.append(SnapshotRow(
                    time_index=int(parts[1]), recall=float(parts[3]),
                    ndcg=float(parts[5]), users_evaluated=int(parts[7]),
                    users_excluded=int(parts[9])))
            elif parts[0] == "mean":
                mean_line = (float(parts[2]), float(parts[4]))
        report = cls(k=int(header["k"]), seed=int(header["seed"]),
                     variant=header["variant"], rows=rows)
        if mean_line is not None and report._scored_rows():
            if (report.mean_recall, report.mean_ndcg) != mean_line:
                raise ValueError("report mean row inconsistent with rows")
        return report

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def evaluate_snapshots(recommender, graph, k: int = 20, seed: int = 0,
                       variant: str = "full") -> EvalReport:
    """Score a recommender over every test snapshot.

    `recommender(user, position)` must return the ranked item list for
    that snapshot position; ground truth is the snapshot's own edges.
    Snapshots with no evaluable users are recorded as skipped.
    """
    report = EvalReport(k=k, seed=seed, variant=variant)
    split = graph.pretrain_split
    for offset, snap in enumerate(graph.test_snapshots()):
        position = split + offset
        gt = {int(u): set(int(i) for i in items)
              for u, items in snap.user_items.items()}
        predictions = {u: recommender(u, position) for u in sorted(gt)}
        users, excluded = evaluable_users(predictions, gt)
        if not users:
            report.rows.append(SnapshotRow(snap.time_index, 0.0, 0.0, 0,
                                           excluded, skipped=True))
            log.warning("snapshot %d skipped: no evaluable users",
                        snap.time_index)
            continue
        report.rows.append(SnapshotRow(
            time_index=snap.time_index,
            recall=recall_at_k(predictions, gt, k),
            ndcg=ndcg_at_k(predictions, gt, k),
            users_evaluated=len(users),
            users_excluded=excluded))
    return report
