"""Site adjacency graphs of a mouth (or sub-region) under three grid rules.

Teeth are laid out along each dental arch. Every tooth carries six
measurement sites, indexed tooth-major: tooth ``t`` owns sites
``6*t .. 6*t+5``, the first three on the buccal side and the last three on
the lingual side, ordered along the arch so that position 2 of tooth ``t``
faces position 0 of tooth ``t+1``.

Grid variants:

* grid 1 -- on each tooth the three buccal sites form a path and the three
  lingual sites form a path; the two sites at each end of the tooth (the
  interproximal positions) are linked across sides; facing end sites of
  consecutive teeth on the same side are linked across the gap. The exact
  within-tooth rule is stated here because published pictures of this grid
  are ambiguous about cross-side links away from tooth ends.
* grid 2 -- grid 1 without the cross-side links, which leaves two disjoint
  site paths per jaw (one per side).
* grid 3 -- every pair of sites on the same tooth is adjacent (a 15-edge
  clique per tooth) plus grid 1's cross-gap links.

Jaws are never linked to each other.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, DataValidationError

SITES_PER_TOOTH = 6

JAW_NAMES = ("mandible", "maxilla")
SIDE_NAMES = ("buccal", "lingual")


@dataclass(frozen=True)
class MouthGraph:
    """Immutable site topology: adjacency, degrees and site labels."""

    n_sites: int
    n_teeth: int
    edges: np.ndarray  # (E, 2) int, site_a < site_b
    tooth_of_site: np.ndarray  # (S,)
    jaw_of_site: np.ndarray  # (S,) index into JAW_NAMES
    side_of_site: np.ndarray  # (S,) index into SIDE_NAMES
    position_of_site: np.ndarray  # (S,) 0..2 along the arch within the tooth
    gap_site: np.ndarray  # (S,) bool, site faces a gap between teeth
    grid_variant: int
    sites_per_tooth: int = SITES_PER_TOOTH

    def __post_init__(self):
        for name in ("edges", "tooth_of_site", "jaw_of_site", "side_of_site",
                     "position_of_site", "gap_site"):
            getattr(self, name).setflags(write=False)

    @cached_property
    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_sites, dtype=np.int64)
        np.add.at(deg, self.edges[:, 0], 1)
        np.add.at(deg, self.edges[:, 1], 1)
        deg.setflags(write=False)
        return deg

    def adjacency(self) -> np.ndarray:
        """Dense symmetric 0/1 adjacency matrix."""
        d = np.zeros((self.n_sites, self.n_sites))
        d[self.edges[:, 0], self.edges[:, 1]] = 1.0
        d[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return d

    def sites_of_tooth(self, tooth: int) -> np.ndarray:
        return np.arange(tooth * self.sites_per_tooth,
                         (tooth + 1) * self.sites_per_tooth)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.edges}

    def validate(self):
        deg = self.degrees
        if (deg < 1).any():
            bad = int(np.argmin(deg))
            raise DataValidationError(f"site {bad} has no neighbors")
        if self.grid_variant != 0 and \
                self.n_sites != self.n_teeth * self.sites_per_tooth:
            raise DataValidationError("site count is not 6 per tooth")
        if (self.edges[:, 0] >= self.edges[:, 1]).any():
            raise DataValidationError("edge list is not in (low, high) order")


def _site(tooth: int, side: int, pos: int) -> int:
    return SITES_PER_TOOTH * tooth + 3 * side + pos


def build_mouth_graph(n_teeth_per_quadrant: int, n_quadrants: int = 1,
                      grid_variant: int = 1) -> MouthGraph:
    """Construct the adjacency structure of a mouth region.

    Parameters
    ----------
    n_teeth_per_quadrant : int
        Teeth per quadrant (7 for a standard mouth without third molars).
    n_quadrants : int
        1 = half jaw, 2 = one full jaw, 4 = full mouth (two jaws).
    grid_variant : int
        Adjacency rule, 1, 2 or 3 (see module docstring).
    """
    if n_teeth_per_quadrant < 1:
        raise ConfigurationError(
            f"n_teeth_per_quadrant must be >= 1, got {n_teeth_per_quadrant}")
    if n_quadrants not in (1, 2, 4):
        raise ConfigurationError(
            f"n_quadrants must be 1, 2 or 4, got {n_quadrants}")
    if grid_variant not in (1, 2, 3):
        raise ConfigurationError(
            f"grid_variant must be 1, 2 or 3, got {grid_variant}")

    n_jaws = 2 if n_quadrants == 4 else 1
    teeth_per_jaw = n_teeth_per_quadrant * (1 if n_quadrants == 1 else 2)
    n_teeth = n_jaws * teeth_per_jaw
    n_sites = n_teeth * SITES_PER_TOOTH

    edges: list[tuple[int, int]] = []

    def add(a: int, b: int):
        edges.append((a, b) if a < b else (b, a))

    for jaw in range(n_jaws):
        first = jaw * teeth_per_jaw
        row = range(first, first + teeth_per_jaw)
        for t in row:
            if grid_variant == 3:
                sites = [_site(t, side, pos) for side in (0, 1) for pos in range(3)]
                for idx, a in enumerate(sites):
                    for b in sites[idx + 1:]:
                        add(a, b)
            else:
                for side in (0, 1):
                    add(_site(t, side, 0), _site(t, side, 1))
                    add(_site(t, side, 1), _site(t, side, 2))
                if grid_variant == 1:
                    add(_site(t, 0, 0), _site(t, 1, 0))
                    add(_site(t, 0, 2), _site(t, 1, 2))
        for t in row[:-1]:
            # Cross-gap links join facing interproximal sites on the same side.
            for side in (0, 1):
                add(_site(t, side, 2), _site(t + 1, side, 0))

    tooth_of_site = np.repeat(np.arange(n_teeth), SITES_PER_TOOTH)
    jaw_of_site = tooth_of_site // teeth_per_jaw
    within = np.tile(np.arange(SITES_PER_TOOTH), n_teeth)
    side_of_site = within // 3
    position_of_site = within % 3

    tooth_in_jaw = tooth_of_site % teeth_per_jaw
    gap_site = ((position_of_site == 0) & (tooth_in_jaw > 0)) | \
               ((position_of_site == 2) & (tooth_in_jaw < teeth_per_jaw - 1))

    graph = MouthGraph(
        n_sites=n_sites,
        n_teeth=n_teeth,
        edges=np.array(sorted(set(edges)), dtype=np.int64),
        tooth_of_site=tooth_of_site,
        jaw_of_site=jaw_of_site.astype(np.int64),
        side_of_site=side_of_site.astype(np.int64),
        position_of_site=position_of_site.astype(np.int64),
        gap_site=gap_site,
        grid_variant=grid_variant,
    )
    graph.validate()
    return graph


def graph_from_edges(edges, n_sites: int | None = None,
                     tooth_of_site=None) -> MouthGraph:
    """Wrap an arbitrary edge list as a graph (grid_variant 0 = custom).

    Import plumbing: custom graphs skip the six-sites-per-tooth rule and
    carry no jaw/side labels.
    """
    edges = np.asarray(edges, dtype=np.int64)
    edges = np.sort(edges, axis=1)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    if n_sites is None:
        n_sites = int(edges.max()) + 1
    tooth = (np.zeros(n_sites, dtype=np.int64) if tooth_of_site is None
             else np.asarray(tooth_of_site, dtype=np.int64))
    zeros = np.zeros(n_sites, dtype=np.int64)
    graph = MouthGraph(
        n_sites=n_sites, n_teeth=int(tooth.max()) + 1, edges=edges,
        tooth_of_site=tooth, jaw_of_site=zeros, side_of_site=zeros.copy(),
        position_of_site=zeros.copy(), gap_site=np.zeros(n_sites, dtype=bool),
        grid_variant=0)
    graph.validate()
    return graph


def path_graph(n_sites: int) -> MouthGraph:
    """Chain of n_sites sites (custom graph, handy for small exact checks)."""
    edges = np.column_stack([np.arange(n_sites - 1), np.arange(1, n_sites)])
    return graph_from_edges(edges, n_sites=n_sites)


def tooth_average_map(graph: MouthGraph) -> np.ndarray:
    """T x S matrix whose row t averages the six sites of tooth t."""
    z = np.zeros((graph.n_teeth, graph.n_sites))
    for t in range(graph.n_teeth):
        z[t, graph.sites_of_tooth(t)] = 1.0 / graph.sites_per_tooth
    return z


def connected_components(graph: MouthGraph) -> np.ndarray:
    """Component label per site (labels are 0..k-1 in site order)."""
    parent = np.arange(graph.n_sites)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in graph.edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(s) for s in range(graph.n_sites)])
    _, labels = np.unique(roots, return_inverse=True)
    return labels


def write_graph_csv(graph: MouthGraph, edges_path, sites_path):
    """Export the edge list and site metadata for documentation/debugging."""
    with open(edges_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site_a", "site_b"])
        for a, b in graph.edges:
            w.writerow([int(a), int(b)])
    with open(sites_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site", "tooth", "jaw", "side", "position"])
        for s in range(graph.n_sites):
            w.writerow([s, int(graph.tooth_of_site[s]),
                        JAW_NAMES[graph.jaw_of_site[s]],
                        SIDE_NAMES[graph.side_of_site[s]],
                        int(graph.position_of_site[s])])


def read_graph_csv(edges_path, sites_path) -> MouthGraph:
    """Rebuild a graph from the CSV pair written by :func:`write_graph_csv`."""
    with open(sites_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    n_sites = len(rows)
    tooth = np.zeros(n_sites, dtype=np.int64)
    jaw = np.zeros(n_sites, dtype=np.int64)
    side = np.zeros(n_sites, dtype=np.int64)
    pos = np.zeros(n_sites, dtype=np.int64)
    for row in rows:
        s = int(row["site"])
        tooth[s] = int(row["tooth"])
        jaw[s] = JAW_NAMES.index(row["jaw"])
        side[s] = SIDE_NAMES.index(row["side"])
        pos[s] = int(row["position"])
    with open(edges_path, newline="") as fh:
        edges = np.array([[int(r["site_a"]), int(r["site_b"])]
                          for r in csv.DictReader(fh)], dtype=np.int64)
    edges = np.sort(edges, axis=1)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    n_teeth = int(tooth.max()) + 1
    graph = MouthGraph(
        n_sites=n_sites, n_teeth=n_teeth,
        edges=edges,
        tooth_of_site=tooth, jaw_of_site=jaw, side_of_site=side,
        position_of_site=pos,
        gap_site=np.zeros(n_sites, dtype=bool),  # unknown for imported graphs
        grid_variant=0,
    )
    graph.validate()
    return graph
