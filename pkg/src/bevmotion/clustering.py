"""Breadth-first connected components over occupied BEV cells."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .geometry import PillarSet

_OFFSETS = {
    4: ((-1, 0), (0, -1), (0, 1), (1, 0)),
    8: ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)),
}


@dataclass(frozen=True)
class ClusterMap:
    cluster_id: np.ndarray  # (H, W) int, -1 where unoccupied
    members: list  # list of (n_k, 2) int arrays

    @property
    def n_clusters(self) -> int:
        return len(self.members)

    def sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self.members], dtype=np.int64)


def bfs_clusters(pillars: PillarSet | np.ndarray, connectivity: int = 8) -> ClusterMap:
    """Label connected occupied cells.

    Seeds are taken in row-major order and expanded with a FIFO queue, so ids
    depend on the occupancy map only.
    """
    if connectivity not in _OFFSETS:
        raise ValueError("connectivity must be 4 or 8")
    occ = pillars.occupancy if isinstance(pillars, PillarSet) else np.asarray(pillars, dtype=bool)
    H, W = occ.shape
    ids = np.full((H, W), -1, dtype=np.int64)
    offsets = _OFFSETS[connectivity]
    members = []
    for si, sj in np.argwhere(occ):
        if ids[si, sj] >= 0:
            continue
        cid = len(members)
        ids[si, sj] = cid
        queue = deque([(si, sj)])
        cells = []
        while queue:
            i, j = queue.popleft()
            cells.append((i, j))
            for di, dj in offsets:
                ni, nj = i + di, j + dj
                if 0 <= ni < H and 0 <= nj < W and occ[ni, nj] and ids[ni, nj] < 0:
                    ids[ni, nj] = cid
                    queue.append((ni, nj))
        members.append(np.array(cells, dtype=np.int64).reshape(-1, 2))
    return ClusterMap(ids, members)
