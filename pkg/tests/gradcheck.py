"""Central finite-difference oracle used across the test suite.

The engine is evaluated at float64 so rounding noise does not swamp the
differences. Piecewise-linear functions (relu) get one-sided slope checks:
coordinates where forward and backward slopes disagree straddle a kink,
where the derivative is undefined, and are excluded and counted.
"""

import numpy as np

from vistra.tensor import Tape, Tensor, precision


def gradient_error(f, arrays, h=1e-3, max_coords=48, seed=0, kinks=False, min_kept=0.75):
    """Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||).

    ``f`` maps tensors (one per array) to a scalar tensor.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with precision(np.float64):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            out = f(*leaves)
        grads = tape.backward(out)
        analytic = [grads[t] for t in leaves]

        def value(args):
            return f(*[Tensor(a) for a in args]).item()

        base = value(arrays)
        num, ana = [], []
        checked = kept = 0
        for i, a in enumerate(arrays):
            coords = np.arange(a.size)
            if a.size > max_coords:
                coords = rng.choice(a.size, max_coords, replace=False)
            for c in coords:
                plus = [x.copy() for x in arrays]
                minus = [x.copy() for x in arrays]
                plus[i].flat[c] += h
                minus[i].flat[c] -= h
                fp, fm = value(plus), value(minus)
                central = (fp - fm) / (2 * h)
                checked += 1
                if kinks:
                    fwd = (fp - base) / h
                    bwd = (base - fm) / h
                    scale = max(abs(central), np.abs(analytic[i]).mean(), 1e-8)
                    if abs(fwd - bwd) > 2e-3 * scale:
                        continue
                kept += 1
                num.append(central)
                ana.append(analytic[i].flat[c])
    if checked and kept / checked < min_kept:
        raise AssertionError(f"only {kept}/{checked} coordinates away from kinks")
    num, ana = np.asarray(num), np.asarray(ana)
    denom = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)
    return float(np.linalg.norm(num - ana) / denom)


def away_from_zero(a, margin=0.05):
    """Push values out of (-margin, margin) so relu kinks stay out of reach."""
    a = np.array(a, dtype=np.float64)
    a[np.abs(a) < margin] += np.sign(a[np.abs(a) < margin] + 1e-12) * 2 * margin
    return a
