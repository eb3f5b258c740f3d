"""Overlap-driven grouping of streamed frames into clusters.

A cluster is the unit of work downstream: its middle three frames form
the bundle-adjustment window and the middle frame becomes the
representative view that receives the anchor map.  Two modes:

* ``gnss_dynamic`` grows a cluster from the first unconsumed frame while
  the candidate's footprint still overlaps the first frame's footprint
  (prior poses projected on the ground plane), capped at
  ``max_cluster_size``.
* ``fixed_triple`` takes the next three frames; the fallback whenever
  priors are missing or overlap collapses.

Consecutive clusters share a boundary frame (step = L-1, or 2 for
triples) so no frame is skipped.  The first three frames of a cluster
are always taken: the minimum length is 3 even when overlap is already
gone by frame two (that case carries an ``insufficient_overlap``
warning and degrades to a triple).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

from .errors import InsufficientFrames
from .geometry import Frame, footprint, overlap_ratio

logger = logging.getLogger(__name__)

# Growth uses a strict comparison with a small slack: a candidate whose
# overlap lands exactly on the threshold (the 10th frame of an exact
# 90%-overlap strip) must not join, and float noise must not flip it.
_THRESHOLD_SLACK = 1e-9


@dataclass(frozen=True)
class ClusterPolicy:
    """Knobs for cluster formation."""

    overlap_threshold: float = 0.10
    max_cluster_size: int = 10
    mode: str = "auto"  # auto | gnss_dynamic | fixed_triple
    ground_elevation: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.overlap_threshold < 1.0:
            raise ValueError(f"overlap_threshold out of (0, 1): {self.overlap_threshold}")
        if self.max_cluster_size < 3:
            raise ValueError("max_cluster_size must be >= 3")
        if self.mode not in ("auto", "gnss_dynamic", "fixed_triple"):
            raise ValueError(f"unknown cluster mode {self.mode!r}")


@dataclass(frozen=True)
class Cluster:
    """A group of consecutive frames plus its three-view BA window."""

    frame_ids: tuple[int, ...]
    representative_index: int
    ba_window: tuple[int, int, int]
    mode: str
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        L = len(self.frame_ids)
        if L < 3:
            raise ValueError("cluster needs at least 3 frames")
        m = self.representative_index
        if not 1 <= m <= L - 2:
            raise ValueError(f"representative index {m} not interior to {L} frames")
        if self.ba_window != tuple(self.frame_ids[m - 1 : m + 2]):
            raise ValueError("ba_window must be the three frames centred on the representative")

    @property
    def representative_id(self) -> int:
        return self.frame_ids[self.representative_index]


def _make_cluster(frames: Sequence[Frame], start: int, length: int, mode: str,
                  warnings: tuple[str, ...] = ()) -> Cluster:
    ids = tuple(f.frame_id for f in frames[start : start + length])
    m = length // 2
    return Cluster(ids, m, tuple(ids[m - 1 : m + 2]), mode, warnings)


def form_cluster(frames: Sequence[Frame], start: int, policy: ClusterPolicy) -> tuple[Cluster, int]:
    """Form one cluster starting at ``frames[start]``.

    Returns the cluster and the stream step to the next cluster start
    (L-1 dynamic, 2 triple), which lands on the shared boundary frame.

    Raises:
        InsufficientFrames: fewer than three frames remain.
    """
    remaining = len(frames) - start
    if remaining < 3:
        raise InsufficientFrames(f"{remaining} frame(s) left at stream position {start}")

    mode = policy.mode
    if mode == "auto":
        mode = "gnss_dynamic" if frames[start].gnss_prior is not None else "fixed_triple"

    if mode == "fixed_triple":
        return _make_cluster(frames, start, 3, "fixed_triple"), 2

    first_fp = footprint(frames[start], policy.ground_elevation)
    warnings: tuple[str, ...] = ()
    if frames[start + 1].gnss_prior is not None:
        second_fp = footprint(frames[start + 1], policy.ground_elevation)
        second_overlap = overlap_ratio(first_fp, second_fp)
    else:
        second_overlap = 0.0
    if second_overlap <= policy.overlap_threshold + _THRESHOLD_SLACK:
        # Coverage gap right at the start: fall back to a plain triple.
        logger.warning(
            "frame %d -> %d overlap %.3f below threshold %.2f, degrading to fixed triple",
            frames[start].frame_id, frames[start + 1].frame_id,
            second_overlap, policy.overlap_threshold,
        )
        return _make_cluster(frames, start, 3, "fixed_triple", ("insufficient_overlap",)), 2

    length = 3  # first three frames are unconditional; L >= 3 by contract
    while length < policy.max_cluster_size and start + length < len(frames):
        candidate = frames[start + length]
        if candidate.gnss_prior is None:
            break
        ratio = overlap_ratio(first_fp, footprint(candidate, policy.ground_elevation))
        if ratio <= policy.overlap_threshold + _THRESHOLD_SLACK:
            break
        length += 1
    return _make_cluster(frames, start, length, "gnss_dynamic", warnings), length - 1


def iter_clusters(frames: Sequence[Frame], policy: ClusterPolicy) -> list[Cluster]:
    """Cover a closed frame stream with clusters.

    Every frame belongs to at least one cluster.  When the stepping rule
    leaves one or two trailing frames that cannot start a cluster of
    their own, a final triple over the last three stream frames is
    emitted (flagged ``tail``).

    Raises:
        InsufficientFrames: stream has fewer than three frames in total.
    """
    if len(frames) < 3:
        raise InsufficientFrames(f"stream has only {len(frames)} frame(s)")
    clusters: list[Cluster] = []
    start = 0
    while len(frames) - start >= 3:
        cluster, step = form_cluster(frames, start, policy)
        clusters.append(cluster)
        start += step
    if start < len(frames) - 1:
        # 1..2 unconsumed trailing frames; cover them with a final triple.
        clusters.append(_make_cluster(frames, len(frames) - 3, 3, "fixed_triple", ("tail",)))
    return clusters
