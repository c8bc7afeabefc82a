"""Independent oracles shared by the test modules.

Nothing here imports the code paths it is used to check.
"""

import numpy as np

EPS = 1e-5


def central_difference(f, arrays, eps=EPS, entries=None, rng=None):
    """Central-difference gradient of ``f()`` w.r.t. arrays mutated in place.

    ``arrays`` maps name -> float64 ndarray that ``f`` reads on every call.
    ``f`` may return a scalar or a tuple of terms whose sum is the objective;
    differencing each term on its own avoids cancellation when one term is
    much larger than the others.
    ``entries`` limits the check to that many random flat indices per array.
    Returns name -> (flat indices, numeric gradient values).
    """
    out = {}
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        if entries is None or entries >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=entries, replace=False))
        vals = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            vals[n] = float(np.sum(np.subtract(fp, fm))) / (2 * eps)
        out[name] = (idx, vals)
    return out


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a-n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def max_rel_error(analytic_grads, numeric):
    worst = 0.0
    for name, (idx, vals) in numeric.items():
        a = analytic_grads[name].reshape(-1)[idx]
        worst = max(worst, float(relative_error(a, vals).max(initial=0.0)))
    return worst


def ray_cast_inside(point, polygon):
    """Brute-force crossing-number test with boundary counted as inside."""
    x, y = float(point[0]), float(point[1])
    pts = [(float(p[0]), float(p[1])) for p in polygon]
    if pts[0] == pts[-1]:
        pts = pts[:-1]
    inside = False
    n = len(pts)
    for i in range(n):
        x1, y1 = pts[i]
        x2, y2 = pts[(i + 1) % n]
        cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
        if abs(cross) <= 1e-12 * max(1.0, abs(x2 - x1) + abs(y2 - y1)) \
                and min(x1, x2) - 1e-12 <= x <= max(x1, x2) + 1e-12 \
                and min(y1, y2) - 1e-12 <= y <= max(y1, y2) + 1e-12:
            return True
        if (y1 > y) != (y2 > y):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xint:
                inside = not inside
    return inside


def brute_ade(pred, gt):
    total = 0.0
    for (px, py), (gx, gy) in zip(pred, gt):
        total += ((px - gx) ** 2 + (py - gy) ** 2) ** 0.5
    return total / len(pred)


def brute_fde(pred, gt):
    (px, py), (gx, gy) = pred[-1], gt[-1]
    return ((px - gx) ** 2 + (py - gy) ** 2) ** 0.5


def bivariate_nll_oracle(mu, sigma, rho, point):
    """-log N(point; mu, Sigma) using an explicit covariance inverse."""
    sx, sy = sigma
    cov = np.array([[sx * sx, rho * sx * sy], [rho * sx * sy, sy * sy]])
    d = np.asarray(point, float) - np.asarray(mu, float)
    quad = d @ np.linalg.inv(cov) @ d
    return 0.5 * quad + 0.5 * np.log(np.linalg.det(cov)) + np.log(2 * np.pi)
