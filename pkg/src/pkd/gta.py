"""Graph-topology-aware instruction generators.

Four record types for structure-focused fine-tuning data: edge existence
between sampled pairs, node degree by degree group, cycle presence in random
walk sequences, and path-conditioned text generation. Every record carries
both the rendered instruction and a structured answer so correctness is
checkable without parsing prose.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .annotate import split_title_abstract
from .graph import TagGraph, subseed

TASK_TAGS = ("connectivity", "degree", "cycle", "textgen")
STAGE_GTA = 47


@dataclass
class GtaRecord:
    """One fine-tuning example: instruction, answer text, structured answer."""

    task: str
    instruction: str
    answer_text: str
    answer: bool | int | str
    nodes: list[int]


def _node_block(graph: TagGraph, node: int) -> str:
    title, abstract = split_title_abstract(graph.texts[node])
    return f"Node index: {node}; Title: {title}; Abstract: {abstract}"


def _neighbor_line(graph: TagGraph, node: int) -> str:
    nbrs = ", ".join(str(j) for j in graph.neighbor_lists()[node])
    return f"Neighbor indexes of node {node}: [{nbrs}]"


def _pair_from_rank(offsets: np.ndarray, rank: int) -> tuple[int, int]:
    """Invert the row-major rank of an (i, j), i < j pair over N nodes."""
    i = int(np.searchsorted(offsets, rank, side="right") - 1)
    j = rank - int(offsets[i]) + i + 1
    return i, j


def gen_connectivity(graph: TagGraph, seed: int) -> list[GtaRecord]:
    """Sample a third of all node pairs and ask whether an edge joins them."""
    n = graph.n
    if n < 2:
        raise ValueError(f"need at least 2 nodes, got {n}")
    total = n * (n - 1) // 2
    count = n * (n - 1) // 6
    rng = np.random.default_rng(subseed(seed, STAGE_GTA, 0))
    ranks = rng.choice(total, size=count, replace=False)
    offsets = np.array([i * (2 * n - i - 1) // 2 for i in range(n - 1)], dtype=np.int64)
    edges = {(int(u), int(v)) for u, v in graph.edges}
    records = []
    for rank in ranks:
        i, j = _pair_from_rank(offsets, int(rank))
        linked = (i, j) in edges
        instruction = "\n".join([
            "You will serve as a graph machine learning expert in connectivity "
            "detection to help me to determine whether the edge exists between "
            "the given two targeted nodes in an undirected graph.",
            "The first targeted node:",
            _node_block(graph, i),
            _neighbor_line(graph, i),
            "The second targeted node:",
            _node_block(graph, j),
            _neighbor_line(graph, j),
            "Answer with one of [True, False]: does an edge exist between them?",
        ])
        records.append(GtaRecord(task="connectivity", instruction=instruction,
                                 answer_text=str(linked), answer=linked, nodes=[i, j]))
    return records


def gen_degree(graph: TagGraph, seed: int) -> list[GtaRecord]:
    """Sample a third of each degree group and ask for the node's degree."""
    rng = np.random.default_rng(subseed(seed, STAGE_GTA, 1))
    degrees = graph.degrees()
    groups: dict[int, list[int]] = {}
    for node, deg in enumerate(degrees):
        groups.setdefault(int(deg), []).append(node)
    records = []
    for deg in sorted(groups):
        members = np.array(groups[deg], dtype=np.int64)
        take = math.ceil(len(members) / 3)
        chosen = rng.choice(members, size=take, replace=False)
        for node in sorted(int(v) for v in chosen):
            instruction = "\n".join([
                "You will serve as a graph machine learning expert to report the "
                "degree of a targeted node, the number of nodes directly "
                "connected to it in an undirected graph.",
                _node_block(graph, node),
                _neighbor_line(graph, node),
                "Answer with a single integer: what is the degree of this node?",
            ])
            records.append(GtaRecord(task="degree", instruction=instruction,
                                     answer_text=str(deg), answer=deg, nodes=[node]))
    return records


def gen_cycle(graph: TagGraph, seed: int, num_walks: int, walk_len: int) -> list[GtaRecord]:
    """Random-walk sequences asked for cycle presence (a repeated node).

    Walks truncate at nodes with no neighbors; truncated walks of length 10
    or less are dropped.
    """
    if walk_len <= 10:
        raise ValueError(f"walk_len must exceed 10, got {walk_len}")
    if graph.n == 0:
        raise ValueError("empty graph")
    rng = np.random.default_rng(subseed(seed, STAGE_GTA, 2))
    neighbor_lists = graph.neighbor_lists()
    records = []
    for _ in range(num_walks):
        walk = [int(rng.integers(graph.n))]
        for _ in range(walk_len - 1):
            nbrs = neighbor_lists[walk[-1]]
            if not len(nbrs):
                break
            walk.append(int(nbrs[rng.integers(len(nbrs))]))
        if len(walk) <= 10:
            continue
        has_cycle = len(set(walk)) < len(walk)
        seq = " -> ".join(str(v) for v in walk)
        neighbor_info = "\n".join(_neighbor_line(graph, v) for v in sorted(set(walk)))
        instruction = "\n".join([
            "You will serve as a graph machine learning expert in cycle "
            "detection. A cycle exists in a node sequence when some node "
            "appears more than once and every consecutive pair is joined by "
            "an edge of the undirected graph.",
            f"Node sequence: {seq}",
            neighbor_info,
            "Answer with one of [True, False]: does this sequence contain a cycle?",
        ])
        records.append(GtaRecord(task="cycle", instruction=instruction,
                                 answer_text=str(has_cycle), answer=has_cycle, nodes=walk))
    return records


def _bfs_with_parents(neighbor_lists, source: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Distances and BFS parents from source; neighbors visited ascending."""
    dist = np.full(n, -1, dtype=np.int64)
    parent = np.full(n, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in neighbor_lists[u]:
            v = int(v)
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                parent[v] = u
                queue.append(v)
    return dist, parent


def gen_textgen(graph: TagGraph, seed: int, t: int) -> list[GtaRecord]:
    """Path-conditioned generation: describe the node past distance t.

    A third of the nodes act as sources. Each source's target is its nearest
    node at distance greater than t (ties to the lowest index); the shortest
    path's texts, target excluded, form the context and the target's text is
    the answer. Sources with no node beyond t yield no record.
    """
    if t < 1:
        raise ValueError(f"distance threshold must be at least 1, got {t}")
    if not graph.texts:
        raise ValueError("graph has no texts")
    rng = np.random.default_rng(subseed(seed, STAGE_GTA, 3))
    neighbor_lists = graph.neighbor_lists()
    count = graph.n // 3
    sources = sorted(int(v) for v in rng.choice(graph.n, size=count, replace=False))
    records = []
    for source in sources:
        dist, parent = _bfs_with_parents(neighbor_lists, source, graph.n)
        beyond = np.flatnonzero(dist > t)
        if not beyond.size:
            continue
        target = int(beyond[np.argmin(dist[beyond])])
        path = [target]
        while path[-1] != source:
            path.append(int(parent[path[-1]]))
        path.reverse()
        context = "\n".join(_node_block(graph, v) for v in path[:-1])
        instruction = "\n".join([
            "You will serve as a graph machine learning expert in text "
            "generation. I will provide the contents of the nodes along a "
            "shortest path of an undirected graph, in order, stopping one "
            "step before the final node.",
            context,
            f"Generate the textual description of the path's final node "
            f"(node index {target}).",
        ])
        records.append(GtaRecord(task="textgen", instruction=instruction,
                                 answer_text=graph.texts[target],
                                 answer=graph.texts[target], nodes=path))
    return records


def generate_all(graph: TagGraph, seed: int, *, num_walks: int | None = None,
                 walk_len: int = 12, t: int = 2) -> list[GtaRecord]:
    """All four task generators with shared defaults; num_walks defaults to N/3."""
    if num_walks is None:
        num_walks = max(1, graph.n // 3)
    records = gen_connectivity(graph, seed)
    records += gen_degree(graph, seed)
    records += gen_cycle(graph, seed, num_walks, walk_len)
    records += gen_textgen(graph, seed, t)
    return records


def write_gta_jsonl(path, records: list[GtaRecord]) -> None:
    """One record per line: {"task", "instruction", "answer", "nodes"}."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({"task": rec.task, "instruction": rec.instruction,
                                 "answer": rec.answer_text, "nodes": rec.nodes}) + "\n")
