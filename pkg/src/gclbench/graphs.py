"""Bipartite implicit-feedback graphs: loading, splitting, indexing, adjacency.

A graph is a set of (user, item) edges with a split tag per edge. String ids
from input files are densely re-indexed; the id maps are kept on the graph and
persisted next to snapshots so every report can use the original ids.
Ratings are ignored on purpose: edge presence is the only signal used anywhere.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ParseError

log = logging.getLogger(__name__)

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")


@dataclass(eq=False)
class InteractionGraph:
    """Immutable user-item interaction graph with per-edge split labels.

    Edges are parallel arrays (edges_u[k], edges_i[k]) with split[k] in
    {TRAIN, VAL, TEST}. ``malicious_users`` marks injected fake-user indices;
    it is empty for graphs loaded from data.
    """

    num_users: int
    num_items: int
    edges_u: np.ndarray
    edges_i: np.ndarray
    split: np.ndarray
    user_ids: list[str]
    item_ids: list[str]
    dedup_count: int = 0
    dropped_users: int = 0
    malicious_users: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.edges_u = np.asarray(self.edges_u, dtype=np.int64)
        self.edges_i = np.asarray(self.edges_i, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.uint8)
        self._cache = {}

    @property
    def num_edges(self) -> int:
        return len(self.edges_u)

    @property
    def real_users(self) -> np.ndarray:
        """Indices of non-injected users."""
        if not self.malicious_users:
            return np.arange(self.num_users)
        mask = np.ones(self.num_users, dtype=bool)
        mask[list(self.malicious_users)] = False
        return np.flatnonzero(mask)

    def edges_of(self, tag: int) -> tuple[np.ndarray, np.ndarray]:
        mask = self.split == tag
        return self.edges_u[mask], self.edges_i[mask]

    def interaction_matrix(self, tag: int | None = None) -> sp.csr_matrix:
        """Boolean user x item CSR over one split (or all edges if tag is None)."""
        key = ("mat", tag)
        if key not in self._cache:
            if tag is None:
                u, i = self.edges_u, self.edges_i
            else:
                u, i = self.edges_of(tag)
            mat = sp.csr_matrix(
                (np.ones(len(u), dtype=np.float64), (u, i)),
                shape=(self.num_users, self.num_items),
            )
            self._cache[key] = mat
        return self._cache[key]

    def user_items(self, tag: int | None = None) -> list[np.ndarray]:
        """Per-user sorted item arrays for one split (or all edges)."""
        key = ("ui", tag)
        if key not in self._cache:
            mat = self.interaction_matrix(tag)
            self._cache[key] = [mat.indices[mat.indptr[u]:mat.indptr[u + 1]]
                                for u in range(self.num_users)]
        return self._cache[key]

    def item_popularity(self) -> np.ndarray:
        """Interaction count per item over all splits."""
        return np.asarray(
            np.bincount(self.edges_i, minlength=self.num_items), dtype=np.int64
        )

    def validate(self) -> None:
        if self.num_edges and (self.edges_u.max() >= self.num_users
                               or self.edges_i.max() >= self.num_items):
            raise ConfigError("edge index out of range")
        for tag in (TRAIN, VAL, TEST):
            u, i = self.edges_of(tag)
            if len(set(zip(u.tolist(), i.tolist()))) != len(u):
                raise ConfigError(f"duplicate edges in split {SPLIT_NAMES[tag]}")


def load_interactions(path, fmt: str = "tsv_pairs") -> InteractionGraph:
    """Load a UTF-8 TSV of "user<TAB>item" lines into a graph.

    Ids may be arbitrary strings and are densely re-indexed in order of first
    appearance. Duplicate pairs are dropped (keeping the first) and counted.
    Lines starting with '#' are comments. All edges start in the train split.
    """
    if fmt != "tsv_pairs":
        raise ConfigError(f"unsupported format: {fmt}")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    edges_u: list[int] = []
    edges_i: list[int] = []
    dedup = 0

    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2 or not parts[0].strip() or not parts[1].strip():
                raise ParseError(f"expected 'user<TAB>item', got {line!r}", line_no)
            # extra columns (e.g. a rating) are ignored: implicit feedback only
            uid, iid = parts[0].strip(), parts[1].strip()
            u = user_index.setdefault(uid, len(user_index))
            i = item_index.setdefault(iid, len(item_index))
            if (u, i) in seen:
                dedup += 1
                continue
            seen.add((u, i))
            edges_u.append(u)
            edges_i.append(i)

    if not edges_u:
        raise ParseError("file contains no interactions")
    if dedup:
        log.warning("dropped %d duplicate interaction lines", dedup)

    return InteractionGraph(
        num_users=len(user_index),
        num_items=len(item_index),
        edges_u=np.array(edges_u),
        edges_i=np.array(edges_i),
        split=np.zeros(len(edges_u), dtype=np.uint8),
        user_ids=list(user_index),
        item_ids=list(item_index),
        dedup_count=dedup,
    )


def _allocate_counts(n: int, ratios: tuple[float, float, float]) -> list[int]:
    """Split n into 3 integer counts proportional to ratios.

    Largest-remainder rounding; remainder ties broken in split order
    (train, val, test) so the allocation is deterministic.
    """
    floors = [math.floor(n * r) for r in ratios]
    rem = n - sum(floors)
    order = sorted(range(3), key=lambda k: (-(n * ratios[k] - floors[k]), k))
    for k in order[:rem]:
        floors[k] += 1
    return floors


def split(graph: InteractionGraph, ratios=(0.7, 0.1, 0.2), seed: int = 0,
          per_user: bool = True) -> InteractionGraph:
    """Randomly partition edges into train/val/test.

    Per-user by default: each user's edges are shuffled and allocated by
    largest-remainder rounding of the ratios, so e.g. 10 edges at
    (0.7, 0.1, 0.2) give exactly 7/1/2. Any user left without a train edge
    gets one reassigned from val, then test. Deterministic for a fixed seed.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError("ratios must be 3 positive numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("ratios must sum to 1")

    rng = np.random.default_rng(seed)
    new_split = np.empty(graph.num_edges, dtype=np.uint8)

    if per_user:
        order = np.argsort(graph.edges_u, kind="stable")
        bounds = np.searchsorted(graph.edges_u[order],
                                 np.arange(graph.num_users + 1))
        for u in range(graph.num_users):
            idx = order[bounds[u]:bounds[u + 1]]
            if len(idx) == 0:
                continue
            idx = rng.permutation(idx)
            n_tr, n_va, _ = _allocate_counts(len(idx), tuple(ratios))
            new_split[idx[:n_tr]] = TRAIN
            new_split[idx[n_tr:n_tr + n_va]] = VAL
            new_split[idx[n_tr + n_va:]] = TEST
    else:
        idx = rng.permutation(graph.num_edges)
        n_tr, n_va, _ = _allocate_counts(len(idx), tuple(ratios))
        new_split[idx[:n_tr]] = TRAIN
        new_split[idx[n_tr:n_tr + n_va]] = VAL
        new_split[idx[n_tr + n_va:]] = TEST

    # no user may end up without a train edge
    has_train = np.zeros(graph.num_users, dtype=bool)
    has_train[graph.edges_u[new_split == TRAIN]] = True
    for u in np.flatnonzero(~has_train):
        owned = np.flatnonzero(graph.edges_u == u)
        if len(owned) == 0:
            continue
        for want in (VAL, TEST):
            cand = owned[new_split[owned] == want]
            if len(cand):
                new_split[cand[0]] = TRAIN
                break

    return replace(graph, split=new_split)


def normalized_adjacency(graph: InteractionGraph):
    """Symmetrically normalized bipartite adjacency over the train split.

    Entry (r, c) is 1/sqrt(deg_r * deg_c) for each train edge, mirrored, with
    users stacked above items. Isolated nodes produce all-zero rows, which is
    allowed but counted.
    """
    u, i = graph.edges_of(TRAIN)
    if len(u) == 0:
        raise ConfigError("training split is empty")
    n = graph.num_users + graph.num_items
    rows = np.concatenate([u, i + graph.num_users])
    cols = np.concatenate([i + graph.num_users, u])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv_sqrt = np.zeros(n)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv_sqrt)
    norm = (d @ adj @ d).tocsr()
    isolated = int((~nz).sum())
    if isolated:
        log.warning("%d isolated nodes (all-zero adjacency rows)", isolated)
    return NormalizedAdjacency(matrix=norm, num_users=graph.num_users,
                               num_items=graph.num_items,
                               isolated_nodes=isolated)


@dataclass(eq=False)
class NormalizedAdjacency:
    matrix: sp.csr_matrix
    num_users: int
    num_items: int
    isolated_nodes: int = 0

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items


@dataclass(frozen=True)
class TargetSet:
    """Attack target items, drawn from the unpopular end of the catalog."""

    item_indices: tuple
    selection_seed: int


def popularity_order(graph: InteractionGraph) -> np.ndarray:
    """Items ranked most popular first; ties broken by ascending item index."""
    pop = graph.item_popularity()
    return np.lexsort((np.arange(graph.num_items), -pop))


def select_targets(graph: InteractionGraph, n_targets: int, seed: int) -> TargetSet:
    """Uniformly sample targets from the bottom-80%-by-popularity item pool."""
    order = popularity_order(graph)
    pool_size = math.floor(0.8 * graph.num_items)
    pool = order[graph.num_items - pool_size:]
    if len(pool) < n_targets:
        raise ConfigError(
            f"target pool has {len(pool)} items, need {n_targets}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(pool, size=n_targets, replace=False)
    return TargetSet(item_indices=tuple(int(t) for t in chosen),
                     selection_seed=seed)


def user_degree_stats(graph: InteractionGraph):
    """Mean train degree over real users, plus the per-user degree array."""
    u, _ = graph.edges_of(TRAIN)
    if len(u) == 0:
        raise ConfigError("training split is empty")
    degrees = np.bincount(u, minlength=graph.num_users)
    real = graph.real_users
    return float(degrees[real].mean()), degrees


def inject_profiles(graph: InteractionGraph, profiles) -> InteractionGraph:
    """Append fake users with their interactions as train edges.

    ``profiles`` is a MaliciousProfileSet (attack module); only its user ids
    and per-user item lists are read here. Val/test splits are untouched and
    the new user indices are recorded in ``malicious_users``.
    """
    n_fake = len(profiles.fake_user_ids)
    add_u, add_i = [], []
    for k, items in enumerate(profiles.interactions):
        for it in items:
            add_u.append(graph.num_users + k)
            add_i.append(int(it))
    return InteractionGraph(
        num_users=graph.num_users + n_fake,
        num_items=graph.num_items,
        edges_u=np.concatenate([graph.edges_u, np.array(add_u, dtype=np.int64)]),
        edges_i=np.concatenate([graph.edges_i, np.array(add_i, dtype=np.int64)]),
        split=np.concatenate([graph.split,
                              np.zeros(len(add_u), dtype=np.uint8)]),
        user_ids=graph.user_ids + list(profiles.fake_user_ids),
        item_ids=graph.item_ids,
        dedup_count=graph.dedup_count,
        dropped_users=graph.dropped_users,
        malicious_users=graph.malicious_users.union(
            range(graph.num_users, graph.num_users + n_fake)),
    )


def graph_stats(graph: InteractionGraph) -> dict:
    mean_deg, _ = user_degree_stats(graph)
    return {
        "num_users": graph.num_users,
        "num_items": graph.num_items,
        "num_edges": graph.num_edges,
        "density": graph.num_edges / (graph.num_users * graph.num_items),
        "mean_train_degree": mean_deg,
        "dedup_count": graph.dedup_count,
        "dropped_users": graph.dropped_users,
    }


def save_snapshot(graph: InteractionGraph, out_dir, config_hash: str = "") -> None:
    """Write train/val/test TSVs, id maps, and a JSON stats sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for tag, name in enumerate(SPLIT_NAMES):
        u, i = graph.edges_of(tag)
        with (out / f"{name}.tsv").open("w", encoding="utf-8") as fh:
            if config_hash:
                fh.write(f"# config_hash={config_hash}\n")
            for uu, ii in zip(u, i):
                fh.write(f"{graph.user_ids[uu]}\t{graph.item_ids[ii]}\n")
    for name, ids in (("users", graph.user_ids), ("items", graph.item_ids)):
        with (out / f"{name}.tsv").open("w", encoding="utf-8") as fh:
            for k, s in enumerate(ids):
                fh.write(f"{k}\t{s}\n")
    stats = graph_stats(graph)
    if config_hash:
        stats["config_hash"] = config_hash
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))


def load_snapshot(snap_dir) -> InteractionGraph:
    """Reload a snapshot written by save_snapshot, keeping the saved indexing.

    Users that end up without a single train edge are dropped with a warning
    count (snapshots produced by split() never contain such users).
    """
    snap = Path(snap_dir)
    id_maps = {}
    for name in ("users", "items"):
        pairs = []
        for line in (snap / f"{name}.tsv").read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            k, s = line.split("\t", 1)
            pairs.append((int(k), s))
        pairs.sort()
        id_maps[name] = [s for _, s in pairs]
    user_index = {s: k for k, s in enumerate(id_maps["users"])}
    item_index = {s: k for k, s in enumerate(id_maps["items"])}

    edges_u, edges_i, split_tags = [], [], []
    for tag, name in enumerate(SPLIT_NAMES):
        p = snap / f"{name}.tsv"
        if not p.exists():
            continue
        for line_no, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"bad snapshot line in {name}.tsv", line_no)
            edges_u.append(user_index[parts[0]])
            edges_i.append(item_index[parts[1]])
            split_tags.append(tag)

    edges_u = np.array(edges_u, dtype=np.int64)
    edges_i = np.array(edges_i, dtype=np.int64)
    split_arr = np.array(split_tags, dtype=np.uint8)

    has_train = np.zeros(len(id_maps["users"]), dtype=bool)
    has_train[edges_u[split_arr == TRAIN]] = True
    seen = np.zeros(len(id_maps["users"]), dtype=bool)
    seen[edges_u] = True
    bad = seen & ~has_train
    dropped = int(bad.sum())
    if dropped:
        log.warning("dropping %d users without train edges", dropped)
        keep_mask = ~bad[edges_u]
        edges_u, edges_i, split_arr = edges_u[keep_mask], edges_i[keep_mask], split_arr[keep_mask]
        remap = np.cumsum(~bad) - 1
        edges_u = remap[edges_u]
        id_maps["users"] = [s for k, s in enumerate(id_maps["users"]) if not bad[k]]

    return InteractionGraph(
        num_users=len(id_maps["users"]),
        num_items=len(id_maps["items"]),
        edges_u=edges_u,
        edges_i=edges_i,
        split=split_arr,
        user_ids=id_maps["users"],
        item_ids=id_maps["items"],
        dropped_users=dropped,
    )
