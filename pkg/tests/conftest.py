import numpy as np

FD_H = 1e-5
REL_TOL = 1e-4


def finite_diff_check(loss_fn, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
    """Max relative error between analytic gradients and central differences.

    Coordinates where both sides are below 1e-6 in magnitude count as exact;
    elsewhere the error is |a - n| / max(|a|, |n|).
    """
    worst = 0.0
    for key, p in params.items():
        flat = p.ravel()
        g = grads[key].ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + FD_H
            up = loss_fn()
            flat[i] = keep - FD_H
            down = loss_fn()
            flat[i] = keep
            numeric = (up - down) / (2.0 * FD_H)
            scale = max(abs(g[i]), abs(numeric))
            if scale < 1e-6:
                continue
            worst = max(worst, abs(g[i] - numeric) / scale)
    return worst


def away_from_relu_kinks(z: np.ndarray, margin: float = 1e-3) -> bool:
    """Finite differences are only valid when no hidden unit sits on a kink."""
    return bool(np.all(np.abs(z) > margin))
