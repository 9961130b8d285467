"""Multi-view evaluation: feature distances and assignment-based metrics.

Given unit-normalized feature rows for ground-truth views and rendered
views, three numbers summarize agreement: mean distance to the reference
feature (d_ref), mean distance over all GT x rendered pairs (d_all), and the
mean matched distance under the optimal one-to-one assignment (d_oracle).
Metrics run on "all views" and on a near-reference pose subset.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .cameras import CameraPose

NEAR_REF_ELEVATION_DEG = 15.0
NEAR_REF_AZIMUTH_DEG = 45.0
_ANGLE_EPS = 1e-9


@dataclass
class FeatureSet:
    features: np.ndarray  # [N, D], rows unit-normalized
    pose_tags: list[int] | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError("features must be NxD")
        norms = np.linalg.norm(feats, axis=1)
        if np.any(norms < 1e-12):
            raise ValueError("zero feature vector cannot be normalized")
        self.features = feats / norms[:, None]

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, indices) -> "FeatureSet":
        tags = [self.pose_tags[i] for i in indices] if self.pose_tags else None
        return FeatureSet(self.features[np.asarray(indices, dtype=int)], tags)


def feature_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine distance 1 - <a, b> for unit-normalized vectors; range [0, 2]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise ValueError("zero feature vector")
    return float(1.0 - np.dot(a / na, b / nb))


def distance_matrix(a: FeatureSet, b: FeatureSet) -> np.ndarray:
    return 1.0 - a.features @ b.features.T


def d_ref(ref_feature: np.ndarray, rendered: FeatureSet) -> float:
    ref = np.asarray(ref_feature, dtype=np.float64)
    ref = ref / np.linalg.norm(ref)
    return float(np.mean(1.0 - rendered.features @ ref))


def d_all(gt: FeatureSet, rendered: FeatureSet) -> float:
    return float(distance_matrix(gt, rendered).mean())


def linear_sum_assignment(cost: np.ndarray):
    """Minimum-cost perfect matching on a square matrix (Kuhn-Munkres, O(N^3)).

    Returns (assignment, total) where assignment[i] is the column matched to
    row i. Potentials-based formulation; handles arbitrary finite reals.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("cost matrix must be square")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    n = cost.shape[0]
    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match = [0] * (n + 1)  # match[j] = row assigned to column j (1-based, 0 = free)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = INF
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1][j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    assignment = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        assignment[match[j] - 1] = j - 1
    total = float(cost[np.arange(n), assignment].sum())
    return assignment, total


def d_oracle(gt: FeatureSet, rendered: FeatureSet) -> float:
    if len(gt) != len(rendered):
        raise ValueError("assignment metric needs equally sized sets")
    _, total = linear_sum_assignment(distance_matrix(gt, rendered))
    return total / len(gt)


def circular_azimuth_delta(a: float, b: float) -> float:
    """Smallest absolute azimuth difference in radians."""
    d = math.fmod(a - b, 2 * math.pi)
    if d < -math.pi:
        d += 2 * math.pi
    elif d > math.pi:
        d -= 2 * math.pi
    return abs(d)


def near_reference_filter(poses: list[CameraPose], ref_pose: CameraPose,
                          elevation_tol_deg: float = NEAR_REF_ELEVATION_DEG,
                          azimuth_tol_deg: float = NEAR_REF_AZIMUTH_DEG) -> list[int]:
    """Indices of poses within the elevation/azimuth window of the reference."""
    el_tol = math.radians(elevation_tol_deg) + _ANGLE_EPS
    az_tol = math.radians(azimuth_tol_deg) + _ANGLE_EPS
    keep = []
    for idx, pose in enumerate(poses):
        if abs(pose.elevation - ref_pose.elevation) <= el_tol and \
                circular_azimuth_delta(pose.azimuth, ref_pose.azimuth) <= az_tol:
            keep.append(idx)
    return keep


def canonical_eval_rig(radius: float = 3.2) -> list[CameraPose]:
    """68-view rig: 4 elevation rings x 17 evenly spaced azimuths.

    Ring elevations (-15, 0, 15, 30) degrees put exactly 3 rings inside the
    near-reference elevation window; 5 of the 17 azimuths fall inside the
    azimuth window, so the near-reference subset has exactly 15 poses.
    """
    poses = []
    for el_deg in (-15.0, 0.0, 15.0, 30.0):
        for k in range(17):
            poses.append(CameraPose(
                azimuth=math.radians(k * 360.0 / 17.0),
                elevation=math.radians(el_deg),
                radius=radius,
            ))
    return poses


@dataclass
class MetricTriple:
    d_ref: float
    d_all: float
    d_oracle: float
    count: int

    def as_dict(self):
        return {"d_ref": self.d_ref, "d_all": self.d_all,
                "d_oracle": self.d_oracle, "count": self.count}


@dataclass
class EvalReport:
    all_views: MetricTriple
    near_reference: MetricTriple
    provenance: dict

    def __post_init__(self):
        for triple in (self.all_views, self.near_reference):
            if triple.d_oracle > triple.d_all + 1e-9:
                raise ValueError("optimal assignment mean exceeds all-pairs mean")

    def to_json(self) -> str:
        return json.dumps({
            "all_views": self.all_views.as_dict(),
            "near_reference": self.near_reference.as_dict(),
            "provenance": self.provenance,
        }, indent=2, sort_keys=False)


def _triple(gt: FeatureSet, rendered: FeatureSet, ref_feature: np.ndarray) -> MetricTriple:
    return MetricTriple(
        d_ref=d_ref(ref_feature, rendered),
        d_all=d_all(gt, rendered),
        d_oracle=d_oracle(gt, rendered),
        count=len(rendered),
    )


def evaluate_feature_sets(gt: FeatureSet, rendered: FeatureSet, poses: list[CameraPose],
                          ref_pose: CameraPose, ref_feature: np.ndarray,
                          provenance: dict | None = None) -> EvalReport:
    """Full report over all views and the near-reference subset."""
    if not (len(gt) == len(rendered) == len(poses)):
        raise ValueError("feature sets and pose list must be congruent")
    near = near_reference_filter(poses, ref_pose)
    return EvalReport(
        all_views=_triple(gt, rendered, ref_feature),
        near_reference=_triple(gt.subset(near), rendered.subset(near), ref_feature),
        provenance=provenance or {},
    )
