"""Generative samplers for Dirichlet-process constructions and the tree prior.

Used to simulate from the model and to drive the statistical tests.  All
samplers take explicit seeds and run on a counter-based generator (Philox),
so every draw is replayable bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def rng_from_seed(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator keyed by (seed, *stream); distinct keys are independent."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed),) + tuple(int(s) for s in stream))))


@dataclass
class Partition:
    """Seating outcome of a restaurant process: 1-based contiguous table labels."""

    assignments: np.ndarray

    @property
    def n_tables(self) -> int:
        return int(self.assignments.max())

    def table_sizes(self) -> np.ndarray:
        return np.bincount(self.assignments)[1:]


@dataclass
class StickWeights:
    """Stick fractions v in (0, 1) and the resulting weights pi.

    pi_i = v_i * prod_{j<i} (1 - v_j); the weights sum to at most one, with
    the deficit being the unbroken remainder of the stick.
    """

    v: np.ndarray
    pi: np.ndarray

    @property
    def remainder(self) -> float:
        return float(np.prod(1.0 - self.v))


@dataclass
class TreePath:
    """One tourist's route: a table index per layer, each a child of the previous."""

    nodes: tuple


@dataclass
class StickTreeNode:
    """A node of a layered stick tree holding its mass and its children's sticks."""

    mass: float
    sticks: StickWeights | None = None
    children: list = field(default_factory=list)

    def leaf_masses(self) -> list:
        if not self.children:
            return [self.mass]
        out = []
        for child in self.children:
            out.extend(child.leaf_masses())
        return out


def crp_sample(n: int, alpha: float, seed: int) -> Partition:
    """Sequential restaurant-process seating of ``n`` customers.

    Customer m+1 opens a new table with probability alpha / (m + alpha) and
    joins an occupied table of size c with probability c / (m + alpha).
    Tables are labeled in order of first occupancy.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    rng = rng_from_seed(seed)
    return _crp_with_rng(n, alpha, rng)


def _crp_with_rng(n: int, alpha: float, rng: np.random.Generator) -> Partition:
    assignments = np.empty(n, dtype=np.int64)
    uniforms = rng.random(n)  # one draw per customer, first one unused
    sizes = []
    for m in range(n):
        if m == 0:
            sizes.append(1)
            assignments[0] = 1
            continue
        u = uniforms[m] * (m + alpha)
        acc = 0.0
        table = len(sizes)  # falls through to a new table
        for idx, c in enumerate(sizes):
            acc += c
            if u < acc:
                table = idx
                break
        if table == len(sizes):
            sizes.append(1)
        else:
            sizes[table] += 1
        assignments[m] = table + 1
    return Partition(assignments)


def stick_weights_from_fractions(v: np.ndarray) -> np.ndarray:
    """Weights pi_i = v_i * prod_{j<i}(1 - v_j) from given stick fractions."""
    v = np.asarray(v, dtype=float)
    cum = np.concatenate(([1.0], np.cumprod(1.0 - v)[:-1]))
    return v * cum


def stick_breaking(alpha: float, truncation: int, seed: int) -> StickWeights:
    """Truncated stick-breaking draw: v_i iid Beta(1, alpha), pi per the product rule."""
    if truncation < 1:
        raise ValueError("truncation must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    rng = rng_from_seed(seed)
    v = rng.beta(1.0, alpha, size=truncation)
    return StickWeights(v=v, pi=stick_weights_from_fractions(v))


def crtp_sample(n: int, layers: int, alphas, seed: int) -> list:
    """Route ``n`` tourists through nested restaurant processes, one per layer.

    Layer 1 is a single process over all tourists; each table at layer l
    runs an independent process (concentration ``alphas[l]``) over the
    tourists routed to it.  Returns one :class:`TreePath` per tourist.
    """
    if layers < 1:
        raise ValueError("layers must be >= 1")
    alphas = list(alphas)
    if len(alphas) != layers:
        raise ValueError("need one concentration per layer")
    rng = rng_from_seed(seed)

    paths = [[] for _ in range(n)]
    # groups maps a prefix path to the tourist indices routed through it
    groups = {(): list(range(n))}
    for layer in range(layers):
        next_groups = {}
        for prefix in sorted(groups):
            members = groups[prefix]
            part = _crp_with_rng(len(members), alphas[layer], rng)
            for local, tourist in enumerate(members):
                table = int(part.assignments[local])
                paths[tourist].append(table)
                next_groups.setdefault(prefix + (table,), []).append(tourist)
        groups = next_groups
    return [TreePath(nodes=tuple(p)) for p in paths]


def ddpt_stick_tree(alphas, truncations, seed: int) -> StickTreeNode:
    """Layered stick tree: each node's mass is broken among its children.

    The root has mass one.  At layer l every node runs an independent
    truncated stick-breaking with concentration ``alphas[l]`` and
    ``truncations[l]`` segments; a child's mass is the parent mass times
    its stick weight.
    """
    alphas = list(alphas)
    truncations = [int(t) for t in truncations]
    if len(alphas) != len(truncations):
        raise ValueError("alphas and truncations must have equal length")
    if any(t < 1 for t in truncations):
        raise ValueError("truncations must be >= 1")
    rng = rng_from_seed(seed)
    root = StickTreeNode(mass=1.0)
    frontier = [root]
    for alpha, trunc in zip(alphas, truncations):
        next_frontier = []
        for node in frontier:
            v = rng.beta(1.0, alpha, size=trunc)
            sticks = StickWeights(v=v, pi=stick_weights_from_fractions(v))
            node.sticks = sticks
            node.children = [StickTreeNode(mass=node.mass * w) for w in sticks.pi]
            next_frontier.extend(node.children)
        frontier = next_frontier
    return root
