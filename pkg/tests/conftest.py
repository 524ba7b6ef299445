import math

import numpy as np

from capfed.geometry import normalize, normalize_rows


def planted_bundle(center: np.ndarray, count: int, max_angle: float, rng) -> np.ndarray:
    """Unit rows concentrated around a direction, all within max_angle of it.

    The tangential Gaussian is scaled so the draw concentrates safely inside
    max_angle; any stragglers are pulled back onto the boundary.
    """
    center = normalize(center)
    d = center.size
    tau = math.tan(0.8 * max_angle) / math.sqrt(d)
    pts = normalize_rows(center[None, :] + tau * rng.standard_normal((count, d)))
    cos_limit = math.cos(max_angle)
    cos = pts @ center
    bad = cos < cos_limit
    if np.any(bad):
        # project stragglers to the cap boundary, keeping their tangential direction
        tangent = pts[bad] - cos[bad, None] * center[None, :]
        tangent = normalize_rows(tangent)
        pts[bad] = cos_limit * center[None, :] + math.sin(max_angle) * tangent
    return pts
