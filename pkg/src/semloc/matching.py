"""2D-2D descriptor matching and lifting to 2D-3D matches through SfM tracks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, TooFewDescriptors
from .model_ingest import DbImageRecord, DescriptorSet, NO_POINT
from .semantic_map import SemanticMap


@dataclass(frozen=True)
class Match2D2D:
    query_kp: int
    db_kp: int
    distance: float  # L2 to the nearest db descriptor


@dataclass(frozen=True, eq=False)
class Match2D3D:
    query_kp: int
    query_px: np.ndarray  # (2,)
    point3d: int
    source_image: int  # retrieved database image that produced the match

    def key(self) -> tuple[int, int]:
        """Identity used when merging duplicates across candidates."""
        return (self.query_kp, self.point3d)


def knn_ratio_match(
    query_descs: DescriptorSet, db_descs: DescriptorSet, ratio: float = 0.9
) -> list[Match2D2D]:
    """Nearest-neighbor matching with the ratio test d1/d2 <= ratio,
    one-to-one in the database keypoints.

    On a conflict for the same db keypoint the smaller-d1 match wins
    (ties toward the smaller query index). Requires >= 2 db descriptors.
    """
    if query_descs.dim != db_descs.dim:
        raise DimMismatch(f"descriptor dims {query_descs.dim} != {db_descs.dim}")
    if db_descs.rows < 2:
        raise TooFewDescriptors(f"ratio test needs >= 2 db descriptors, got {db_descs.rows}")

    db = db_descs.data.astype(np.float64)
    accepted: list[Match2D2D] = []
    chunk = 256
    for start in range(0, query_descs.rows, chunk):
        block = query_descs.data[start : start + chunk].astype(np.float64)
        # (q, db) distances via explicit differences
        dists = np.linalg.norm(block[:, None, :] - db[None, :, :], axis=2)
        for row in range(dists.shape[0]):
            d = dists[row]
            best = int(np.argmin(d))
            d1 = float(d[best])
            d_rest = np.delete(d, best)
            d2 = float(d_rest.min())
            if d1 <= ratio * d2:
                accepted.append(Match2D2D(start + row, best, d1))

    # one-to-one db usage: smaller distance wins, then smaller query index
    accepted.sort(key=lambda m: (m.distance, m.query_kp))
    used_db: set[int] = set()
    kept = []
    for m in accepted:
        if m.db_kp in used_db:
            continue
        used_db.add(m.db_kp)
        kept.append(m)
    kept.sort(key=lambda m: m.query_kp)
    return kept


def lift_matches(
    matches: list[Match2D2D],
    db_image: DbImageRecord,
    smap: SemanticMap,
    retrieved_id: int,
    query_keypoints: np.ndarray,
) -> list[Match2D3D]:
    """Turn 2D-2D matches into 2D-3D matches via the db image's tracks.

    Matches whose db keypoint is untracked, or whose 3D point was pruned
    from the semantic map, are dropped; the rest are tagged with the
    retrieved image id.
    """
    lifted = []
    for m in matches:
        pid = int(db_image.point3d_ids[m.db_kp])
        if pid == NO_POINT or pid not in smap:
            continue
        lifted.append(
            Match2D3D(
                query_kp=m.query_kp,
                query_px=np.asarray(query_keypoints[m.query_kp], dtype=float),
                point3d=pid,
                source_image=retrieved_id,
            )
        )
    return lifted
