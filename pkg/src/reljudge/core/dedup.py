"""
Near-duplicate removal for qrels and runs.
Only each cluster's canonical passage survives; other members are dropped.
"""

from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Tuple

import structlog

from src.reljudge.core.errors import ClusterError, DataError
from src.reljudge.core.trec_io import (
    Qrels,
    RankedPassage,
    RunList,
    TextSource,
    check_id,
    numbered_lines,
)

logger = structlog.get_logger()


@dataclass(frozen=True)
class Cluster:
    canonical_id: str
    members: FrozenSet[str]


@dataclass(frozen=True)
class DupClusters:
    """Disjoint near-duplicate clusters, each with one canonical passage."""

    clusters: Tuple[Cluster, ...] = ()

    def __post_init__(self):
        owner: Dict[str, str] = {}
        for cluster in self.clusters:
            if cluster.canonical_id not in cluster.members:
                raise ClusterError(f"canonical {cluster.canonical_id} is not a member of its cluster")
            if len(cluster.members) < 2:
                raise ClusterError(f"cluster of {cluster.canonical_id} has a single member")
            for member in cluster.members:
                if member in owner:
                    raise ClusterError(
                        f"passage {member} is in the clusters of both {owner[member]} and {cluster.canonical_id}"
                    )
                owner[member] = cluster.canonical_id
        removable = frozenset(member for member, canonical in owner.items() if member != canonical)
        object.__setattr__(self, "_removable", removable)

    @property
    def non_canonical(self) -> FrozenSet[str]:
        """Every clustered passage that is not its cluster's canonical."""
        return self._removable

    def __len__(self) -> int:
        return len(self.clusters)


def _add_cluster(
    clusters: List[Cluster],
    owner: Dict[str, str],
    canonical_id: str,
    members: FrozenSet[str],
    source: Optional[str],
    line_number: Optional[int],
) -> None:
    if len(members) < 2:
        raise ClusterError(
            f"cluster of {canonical_id} has a single member", source=source, line_number=line_number
        )
    for member in members:
        if member in owner:
            raise ClusterError(
                f"passage {member} is in the clusters of both {owner[member]} and {canonical_id}",
                source=source,
                line_number=line_number,
            )
    for member in members:
        owner[member] = canonical_id
    clusters.append(Cluster(canonical_id=canonical_id, members=members))


def parse_clusters(text: TextSource, *, source: Optional[str] = None) -> DupClusters:
    """
    Parse the toolkit's cluster TSV: "canonical_id<TAB>member_id[,member_id...]".

    The canonical id is added to its members when absent.
    """
    clusters: List[Cluster] = []
    owner: Dict[str, str] = {}
    for line_number, line in numbered_lines(text):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ClusterError("missing tab separator", source=source, line_number=line_number)
        canonical_id, member_field = line.split("\t", 1)
        canonical_id = canonical_id.strip()
        member_ids = [member.strip() for member in member_field.split(",") if member.strip()]
        if not member_ids:
            raise ClusterError("empty member list", source=source, line_number=line_number)
        try:
            for passage_id in [canonical_id, *member_ids]:
                check_id(passage_id, "passage id")
        except DataError as e:
            raise ClusterError(e.message, source=source, line_number=line_number) from e
        _add_cluster(
            clusters, owner, canonical_id, frozenset([canonical_id, *member_ids]), source, line_number
        )
    return DupClusters(tuple(clusters))


def clusters_from_pairs(text: TextSource, *, source: Optional[str] = None) -> DupClusters:
    """
    Convert a duplicate list of "member_id canonical_id" pairs into clusters.

    This is the converter for externally compiled duplicate lists: any
    whitespace-separated two-column file naming each duplicate's canonical.
    Lines where member and canonical coincide are allowed and ignored.
    """
    members_of: Dict[str, set] = {}
    canonical_of: Dict[str, str] = {}
    for line_number, line in numbered_lines(text):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 2:
            raise ClusterError(
                f"expected 2 fields, got {len(fields)}", source=source, line_number=line_number
            )
        member_id, canonical_id = fields
        previous = canonical_of.get(member_id)
        if previous is not None and previous != canonical_id:
            raise ClusterError(
                f"passage {member_id} mapped to both {previous} and {canonical_id}",
                source=source,
                line_number=line_number,
            )
        canonical_of[member_id] = canonical_id
        members_of.setdefault(canonical_id, {canonical_id}).add(member_id)

    clusters: List[Cluster] = []
    owner: Dict[str, str] = {}
    for canonical_id in sorted(members_of):
        members = frozenset(members_of[canonical_id])
        if len(members) < 2:
            continue
        _add_cluster(clusters, owner, canonical_id, members, source, None)
    return DupClusters(tuple(clusters))


def write_clusters(clusters: DupClusters) -> str:
    """Serialize clusters in the toolkit TSV format, members sorted."""
    lines = []
    for cluster in sorted(clusters.clusters, key=lambda c: c.canonical_id):
        others = sorted(cluster.members - {cluster.canonical_id})
        lines.append(f"{cluster.canonical_id}\t{','.join(others)}\n")
    return "".join(lines)


def dedup_qrels(qrels: Qrels, clusters: DupClusters) -> Qrels:
    """Drop judgments of non-canonical cluster members; nothing is merged or remapped."""
    removable = clusters.non_canonical
    kept = {
        topic_id: {pid: grade for pid, grade in row.items() if pid not in removable}
        for topic_id, row in qrels.items()
    }
    result = Qrels(kept)
    logger.info(
        "Qrels deduplicated",
        entries_before=qrels.n_entries,
        entries_after=result.n_entries,
        removed=qrels.n_entries - result.n_entries,
    )
    return result


def dedup_run(run: RunList, clusters: DupClusters) -> RunList:
    """
    Drop non-canonical cluster members from every topic's ranking.

    Surviving passages keep their order and scores; ranks are renumbered 1..n.
    """
    removable = clusters.non_canonical
    rankings = {}
    for topic_id, entries in run.rankings.items():
        survivors = [entry for entry in entries if entry.passage_id not in removable]
        rankings[topic_id] = tuple(
            RankedPassage(entry.passage_id, rank, entry.score)
            for rank, entry in enumerate(survivors, start=1)
        )
    result = RunList(tag=run.tag, rankings=rankings)
    logger.info(
        "Run deduplicated",
        run=run.tag,
        entries_before=run.n_entries,
        entries_after=result.n_entries,
    )
    return result
