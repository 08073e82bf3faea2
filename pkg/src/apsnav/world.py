"""Procedural navigation worlds and everything that lives on them.

A world is a connected 2-D graph of landmarked nodes whose edges are walkable
in either direction. Each node exposes ``M_PATCHES`` panoramic view patches;
patch features, landmarks, and layout are all deterministic functions of the
world seed. The module also provides the environment transition, shortest
paths (with a query counter used by the exploration-hygiene checks), the
grammar that writes ground-truth instructions, teacher actions for
student-forcing supervision, and the episode/dataset file formats.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

M_PATCHES = 6
D_FEAT = 32
EDGE_MIN = 1.5
EDGE_MAX = 3.0
DEGREE_CAP = M_PATCHES
AREA_PER_NODE = 4.8  # m^2; keeps typical spacing ~2.2 m
SUCCESS_RADIUS = 3.0
MAX_INSTRUCTION_LEN = 24

TRAIN_SEEN = "train-seen"
VAL_UNSEEN = "val-unseen"
TEST_UNSEEN = "test-unseen"
SPLITS = (TRAIN_SEEN, VAL_UNSEEN, TEST_UNSEEN)

COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "white", "black")
NOUNS = ("door", "table", "chair", "lamp", "sofa", "shelf", "plant", "sink")

VOCAB = ("<pad>", "<bos>", "<eos>", "stop", "forward", "left", "right",
         "to", "the") + COLORS + NOUNS
PAD, BOS, EOS = 0, 1, 2
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)

# motion classes fed to the speaker's path encoder
ACT_FORWARD, ACT_LEFT, ACT_RIGHT, ACT_STOP = 0, 1, 2, 3
N_ACT_CLASSES = 4

TURN_THRESHOLD = math.pi / 4.0

# substream tags so unrelated draws never share a seed sequence
_STREAM_WORLD = 11
_STREAM_FEAT = 23


class PolicyViolationError(RuntimeError):
    """An operation touched an environment its phase is not allowed to."""


class DegeneratePathError(ValueError):
    """A path whose endpoints coincide; the shortest-path transform is undefined."""


@dataclass
class NavGraph:
    """One immutable environment. ``planner_calls`` counts shortest-path queries."""

    env_id: str
    seed: int
    split: str
    positions: np.ndarray            # (n, 2) meters
    colors: np.ndarray               # (n,) int in [0, 8)
    nouns: np.ndarray                # (n,) int in [0, 8)
    adj: list[list[int]]             # sorted neighbor ids per node
    features: np.ndarray             # (n, M_PATCHES, D_FEAT)
    planner_calls: int = 0
    _dist_cache: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    _cand_cache: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def num_nodes(self) -> int:
        return len(self.adj)

    def degree(self, node: int) -> int:
        return len(self.adj[node])

    def edge_length(self, u: int, v: int) -> float:
        return float(np.linalg.norm(self.positions[u] - self.positions[v]))

    def euclid(self, a: int, b: int) -> float:
        return float(np.linalg.norm(self.positions[a] - self.positions[b]))

    def heading(self, u: int, v: int) -> float:
        d = self.positions[v] - self.positions[u]
        return math.atan2(d[1], d[0])

    def edges(self) -> list[tuple[int, int]]:
        return [(u, v) for u in range(self.num_nodes) for v in self.adj[u] if u < v]

    def patch_toward(self, u: int, v: int) -> int:
        """Index of the view patch whose heading is nearest the direction u -> v."""
        sector = 2.0 * math.pi / M_PATCHES
        return int(math.floor(self.heading(u, v) / sector + 0.5)) % M_PATCHES

    def candidate_features(self, node: int, exact_heading: bool = False) -> np.ndarray:
        """Patch features facing each neighbor, in adj order.

        With ``exact_heading`` the exact direction encoding of each edge is
        appended (4 dims): two neighbors inside the same 60-degree patch
        sector share a patch, so the raw feature alone cannot tell them apart.
        """
        cached = self._cand_cache.get((node, exact_heading))
        if cached is None:
            rows = [self.features[node, self.patch_toward(node, v)]
                    for v in self.adj[node]]
            if exact_heading:
                rows = [np.concatenate([r, heading_encoding(self.heading(node, v))])
                        for r, v in zip(rows, self.adj[node])]
            cached = np.stack(rows)
            self._cand_cache[(node, exact_heading)] = cached
        return cached

    @classmethod
    def from_arrays(cls, env_id: str, seed: int, split: str,
                    positions: np.ndarray, edge_list: list[tuple[int, int]],
                    colors: np.ndarray, nouns: np.ndarray) -> "NavGraph":
        positions = np.asarray(positions, dtype=np.float64)
        n = positions.shape[0]
        adj: list[list[int]] = [[] for _ in range(n)]
        for u, v in edge_list:
            adj[u].append(v)
            adj[v].append(u)
        for lst in adj:
            lst.sort()
        colors = np.asarray(colors, dtype=np.int64)
        nouns = np.asarray(nouns, dtype=np.int64)
        feats = _compute_features(seed, colors, nouns)
        return cls(env_id=env_id, seed=seed, split=split, positions=positions,
                   colors=colors, nouns=nouns, adj=adj, features=feats)


def heading_encoding(theta: float) -> np.ndarray:
    """Direction encoding used in patch features: sin/cos at two frequencies."""
    return np.array([math.sin(theta), math.cos(theta),
                     math.sin(2 * theta), math.cos(2 * theta)])


def _compute_features(seed: int, colors: np.ndarray, nouns: np.ndarray) -> np.ndarray:
    """Features: one-hot color (8) + one-hot noun (8) + heading sin/cos at two
    frequencies (4) + seeded hash noise (12)."""
    n = len(colors)
    feats = np.zeros((n, M_PATCHES, D_FEAT))
    for node in range(n):
        feats[node, :, colors[node]] = 1.0
        feats[node, :, 8 + nouns[node]] = 1.0
        for j in range(M_PATCHES):
            theta = 2.0 * math.pi * j / M_PATCHES
            feats[node, j, 16:20] = heading_encoding(theta)
            noise_rng = np.random.default_rng([_STREAM_FEAT, seed, node, j])
            feats[node, j, 20:32] = noise_rng.uniform(-0.5, 0.5, 12)
    return feats


def _build_edges(pos: np.ndarray) -> list[tuple[int, int]] | None:
    """Connect pairs whose distance lies in the walkable band, shortest first.

    A spanning pass runs before the fill pass so connectivity is not starved
    by the degree cap. Returns None when the band graph cannot be connected.
    """
    n = pos.shape[0]
    cands = []
    for u in range(n):
        for v in range(u + 1, n):
            d = float(np.linalg.norm(pos[u] - pos[v]))
            if EDGE_MIN <= d <= EDGE_MAX:
                cands.append((d, u, v))
    cands.sort()

    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    deg = [0] * n
    edges: list[tuple[int, int]] = []
    used = set()
    for d, u, v in cands:  # spanning pass
        if find(u) != find(v) and deg[u] < DEGREE_CAP and deg[v] < DEGREE_CAP:
            parent[find(u)] = find(v)
            deg[u] += 1
            deg[v] += 1
            edges.append((u, v))
            used.add((u, v))
    if len({find(x) for x in range(n)}) != 1:
        return None
    for d, u, v in cands:  # fill pass
        if (u, v) not in used and deg[u] < DEGREE_CAP and deg[v] < DEGREE_CAP:
            deg[u] += 1
            deg[v] += 1
            edges.append((u, v))
    return edges


def generate_world(seed: int, node_count: int, split: str) -> NavGraph:
    """Deterministic world from (seed, node_count, split); retries layouts that
    cannot be connected inside the edge-length band."""
    if node_count < 8:
        raise ValueError(f"node_count must be >= 8, got {node_count}")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    side = math.sqrt(node_count * AREA_PER_NODE)
    for attempt in itertools.count():
        rng = np.random.default_rng([_STREAM_WORLD, seed, attempt])
        pos = rng.uniform(0.0, side, (node_count, 2))
        colors = rng.integers(0, 8, node_count)
        nouns = rng.integers(0, 8, node_count)
        edge_list = _build_edges(pos)
        if edge_list is not None:
            return NavGraph.from_arrays(f"{split}-w{seed}", seed, split,
                                        pos, edge_list, colors, nouns)


def step(g: NavGraph, node: int, action: int) -> int:
    """Environment transition: follow edge ``action`` out of ``node``."""
    if not (0 <= action < g.degree(node)):
        raise ValueError(f"action {action} out of range at node {node} "
                         f"(degree {g.degree(node)})")
    return g.adj[node][action]


def features(g: NavGraph, node: int) -> np.ndarray:
    """(M_PATCHES, D_FEAT) view-patch features at ``node``."""
    if not (0 <= node < g.num_nodes):
        raise ValueError(f"invalid node {node}")
    return g.features[node]


# ---------------------------------------------------------------------------
# paths


@dataclass(frozen=True)
class Path:
    """A walk through one environment: L+1 nodes, L edge choices."""

    env_id: str
    nodes: tuple[int, ...]
    actions: tuple[int, ...]
    length: float

    @property
    def start(self) -> int:
        return self.nodes[0]

    @property
    def end(self) -> int:
        return self.nodes[-1]

    @property
    def hops(self) -> int:
        return len(self.actions)

    @classmethod
    def from_nodes(cls, g: NavGraph, nodes) -> "Path":
        nodes = tuple(int(n) for n in nodes)
        if len(nodes) < 2:
            raise ValueError("a path needs at least one step")
        actions = []
        length = 0.0
        for u, v in zip(nodes[:-1], nodes[1:]):
            if v not in g.adj[u]:
                raise ValueError(f"nodes {u} and {v} are not adjacent")
            actions.append(g.adj[u].index(v))
            length += g.edge_length(u, v)
        return cls(env_id=g.env_id, nodes=nodes, actions=tuple(actions),
                   length=length)


def _dist_to(g: NavGraph, goal: int) -> np.ndarray:
    """Geometric distance from every node to ``goal`` (Dijkstra, cached)."""
    cached = g._dist_cache.get(goal)
    if cached is not None:
        return cached
    n = g.num_nodes
    dist = np.full(n, np.inf)
    dist[goal] = 0.0
    heap = [(0.0, goal)]
    done = [False] * n
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for v in g.adj[u]:
            nd = dist[u] + g.edge_length(u, v)
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    g._dist_cache[goal] = dist
    return dist


def shortest_path(g: NavGraph, a: int, b: int) -> Path:
    """Geometric-length-minimal path; equal-length choices take the smaller
    next node id."""
    if a == b:
        raise ValueError("shortest_path endpoints must differ")
    g.planner_calls += 1
    dist = _dist_to(g, b)
    nodes = [a]
    node = a
    while node != b:
        nxt = None
        for v in g.adj[node]:  # adj sorted: first exact minimizer has smallest id
            if dist[v] + g.edge_length(node, v) == dist[node]:
                nxt = v
                break
        if nxt is None:  # defensive: float asymmetry; fall back to argmin
            nxt = min(g.adj[node], key=lambda v: (dist[v] + g.edge_length(node, v), v))
        nodes.append(nxt)
        node = nxt
    return Path.from_nodes(g, nodes)


def shortest_path_transform(g: NavGraph, p: Path) -> Path:
    """Replace a sampled walk with the shortest path between its endpoints.

    Only legal on training environments; a walk that returns to its start has
    no defined transform.
    """
    if g.split != TRAIN_SEEN:
        raise PolicyViolationError(
            f"shortest-path transform is not allowed on split {g.split!r}")
    if p.start == p.end:
        raise DegeneratePathError("cannot transform a closed walk")
    return shortest_path(g, p.start, p.end)


def teacher_action(g: NavGraph, node: int, goal: int) -> int:
    """Next-hop edge index of the shortest path to ``goal``; degree(node)
    (the stop action) when already there."""
    if node == goal:
        return g.degree(node)
    g.planner_calls += 1
    dist = _dist_to(g, goal)
    if not np.isfinite(dist[node]):
        raise RuntimeError(f"goal {goal} unreachable from node {node}")
    for i, v in enumerate(g.adj[node]):
        if dist[v] + g.edge_length(node, v) == dist[node]:
            return i
    return int(min(range(g.degree(node)),
                   key=lambda i: dist[g.adj[node][i]] + g.edge_length(node, g.adj[node][i])))


def stop_action(g: NavGraph, node: int) -> int:
    return g.degree(node)


# ---------------------------------------------------------------------------
# instructions


@dataclass(frozen=True)
class Instruction:
    """Token sequence over the closed vocabulary, terminated by <eos>."""

    tokens: tuple[int, ...]
    provenance: str  # "oracle" | "speaker"

    def __post_init__(self):
        if len(self.tokens) > MAX_INSTRUCTION_LEN:
            raise ValueError("instruction too long")
        if any(not (0 <= t < VOCAB_SIZE) for t in self.tokens):
            raise ValueError("token id out of vocabulary")
        if not self.tokens or self.tokens[-1] != EOS:
            raise ValueError("instruction must end with <eos>")

    def words(self) -> list[str]:
        return [VOCAB[t] for t in self.tokens]


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def motion_classes(g: NavGraph, p: Path) -> list[int]:
    """Per-step turn class. The walker starts facing heading 0 (+x); a step
    turning less than 45 degrees is "forward", otherwise left/right by sign."""
    classes = []
    prev = 0.0
    for u, v in zip(p.nodes[:-1], p.nodes[1:]):
        h = g.heading(u, v)
        delta = wrap_angle(h - prev)
        if abs(delta) < TURN_THRESHOLD:
            classes.append(ACT_FORWARD)
        elif delta > 0:
            classes.append(ACT_LEFT)
        else:
            classes.append(ACT_RIGHT)
        prev = h
    return classes

_MOTION_WORD = {ACT_FORWARD: "forward", ACT_LEFT: "left", ACT_RIGHT: "right"}


def oracle_instruction(g: NavGraph, p: Path) -> Instruction:
    """Ground-truth instruction: one motion word per step, then
    "to the <color> <noun>" of the end node, then "stop"."""
    words = [_MOTION_WORD[c] for c in motion_classes(g, p)]
    words += ["to", "the", COLORS[g.colors[p.end]], NOUNS[g.nouns[p.end]], "stop"]
    tokens = tuple(TOKEN_ID[w] for w in words) + (EOS,)
    return Instruction(tokens=tokens, provenance="oracle")


# ---------------------------------------------------------------------------
# episodes and datasets


@dataclass(frozen=True)
class EpisodePair:
    """One (path, instruction) training or evaluation example."""

    env_id: str
    path: Path
    instruction: Instruction
    split: str
    round_index: int | None = None


def valid_episode_endpoints(g: NavGraph, hop_min: int = 4, hop_max: int = 6,
                            min_goal_dist: float = SUCCESS_RADIUS) -> list[tuple[int, int]]:
    """Ordered endpoint pairs whose shortest path has hop_min..hop_max hops and
    whose straight-line separation exceeds the success radius (so an agent
    that never moves cannot succeed)."""
    pairs = []
    for a in range(g.num_nodes):
        for b in range(g.num_nodes):
            if a == b or g.euclid(a, b) <= min_goal_dist:
                continue
            if hop_min <= shortest_path(g, a, b).hops <= hop_max:
                pairs.append((a, b))
    return pairs


def sample_dataset_paths(g: NavGraph, count: int, rng: np.random.Generator,
                         hop_min: int = 4, hop_max: int = 6) -> list[Path]:
    """Shortest paths between ``count`` distinct eligible endpoint pairs."""
    pairs = valid_episode_endpoints(g, hop_min, hop_max)
    if not pairs:
        raise RuntimeError(f"world {g.env_id} has no eligible episode endpoints")
    take = min(count, len(pairs))
    idx = rng.choice(len(pairs), size=take, replace=False)
    paths = [shortest_path(g, *pairs[i]) for i in idx]
    while len(paths) < count:  # tiny worlds: reuse pairs rather than fail
        paths.append(paths[len(paths) % take])
    return paths


def make_episodes(g: NavGraph, paths: list[Path], instructions_per_path: int = 1,
                  split: str | None = None) -> list[EpisodePair]:
    """Oracle-annotated episodes; ``split`` overrides the world's tag (held-out
    episodes in training worlds carry a "val-seen" tag)."""
    out = []
    for p in paths:
        instr = oracle_instruction(g, p)
        for _ in range(instructions_per_path):
            out.append(EpisodePair(env_id=g.env_id, path=p, instruction=instr,
                                   split=split or g.split))
    return out


# ---------------------------------------------------------------------------
# file formats


def write_world(g: NavGraph, path) -> None:
    lines = [f"world {g.env_id} seed {g.seed} split {g.split}"]
    for i in range(g.num_nodes):
        x, y = float(g.positions[i][0]), float(g.positions[i][1])
        lines.append(f"node {i} {x!r} {y!r} {int(g.colors[i])} {int(g.nouns[i])}")
    for u, v in g.edges():
        lines.append(f"edge {u} {v}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_world(path) -> NavGraph:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    head = lines[0].split()
    if head[0] != "world":
        raise ValueError(f"not a world file: {path}")
    env_id, seed, split = head[1], int(head[3]), head[5]
    positions, colors, nouns, edge_list = [], [], [], []
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "node":
            positions.append((float(parts[2]), float(parts[3])))
            colors.append(int(parts[4]))
            nouns.append(int(parts[5]))
        elif parts[0] == "edge":
            edge_list.append((int(parts[1]), int(parts[2])))
        else:
            raise ValueError(f"bad record {parts[0]!r} in {path}")
    return NavGraph.from_arrays(env_id, seed, split, np.array(positions),
                                edge_list, colors, nouns)


def write_pairs(pairs: list[EpisodePair], path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            rec = {"env": p.env_id, "nodes": list(p.path.nodes),
                   "tokens": list(p.instruction.tokens),
                   "provenance": p.instruction.provenance, "split": p.split}
            if p.round_index is not None:
                rec["round"] = p.round_index
            fh.write(json.dumps(rec) + "\n")


def read_pairs(path, worlds: dict[str, NavGraph]) -> list[EpisodePair]:
    out = []
    with open(path) as fh:
        for ln in fh:
            if not ln.strip():
                continue
            rec = json.loads(ln)
            g = worlds[rec["env"]]
            out.append(EpisodePair(
                env_id=rec["env"],
                path=Path.from_nodes(g, rec["nodes"]),
                instruction=Instruction(tuple(rec["tokens"]), rec["provenance"]),
                split=rec["split"],
                round_index=rec.get("round")))
    return out
