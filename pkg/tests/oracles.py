"""Independent reference implementations used only to check the real code.

These deliberately take a different route: 4x4 homogeneous matrices built with
scipy rotations instead of the package's quaternion composition. Keep them
dumb and obvious.
"""

import numpy as np
from scipy.spatial.transform import Rotation


def mat_from_axis_angle(axis, angle):
    T = np.eye(4)
    T[:3, :3] = Rotation.from_rotvec(np.asarray(axis, dtype=float) * angle).as_matrix()
    return T


def mat_from_translation(t):
    T = np.eye(4)
    T[:3, 3] = np.asarray(t, dtype=float)
    return T


def fk_matrix_chain(arm, q):
    """Fork-tip pose via plain matrix products: for each joint, translate by the
    fixed offset then rotate about the joint axis; finish with the tool offset."""
    T = np.eye(4)
    for link, angle in zip(arm.links, q):
        T = T @ mat_from_translation(link.offset) @ mat_from_axis_angle(link.axis, angle)
    T = T @ mat_from_translation(arm.tool_transform.position)
    T[:3, :3] = T[:3, :3] @ Rotation.from_quat(
        np.roll(arm.tool_transform.orientation, -1)).as_matrix()
    return T


def pose_to_matrix(pose):
    T = np.eye(4)
    T[:3, :3] = Rotation.from_quat(np.roll(pose.orientation, -1)).as_matrix()
    T[:3, 3] = pose.position
    return T


def brute_force_k_medoids_cost(dist, k):
    """Optimal k-medoids total cost by exhaustive enumeration. Tiny n only."""
    from itertools import combinations
    n = dist.shape[0]
    best = np.inf
    for medoids in combinations(range(n), k):
        cost = dist[:, list(medoids)].min(axis=1).sum()
        best = min(best, float(cost))
    return best
