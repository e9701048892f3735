"""Independent reference implementations used as test oracles.

These deliberately avoid the library's own code paths: the dense convolution
materialises a padded dense grid, the FPS oracle is the O(N^2 n) textbook
greedy loop, and the finite-difference checker perturbs one scalar at a time.
"""

import numpy as np

from scenegrid.nn import backward
from scenegrid.nn.sparse import kernel_offsets


def fps_bruteforce(points, n, first):
    """O(N^2 n) greedy farthest point sampling, ties to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    chosen = [first]
    while len(chosen) < n:
        best, best_dist = None, -1.0
        for i in range(len(points)):
            if i in chosen:
                continue
            d = min(np.linalg.norm(points[i] - points[j]) for j in chosen)
            if d > best_dist:
                best, best_dist = i, d
        chosen.append(best)
    return np.array(chosen)


def dense_conv_oracle(coords, feats, weights, in_stride, out_coords, kernel_size):
    """Zero-padded dense 3D convolution evaluated at given output coords.

    out[p] = sum_k dense[p + offset_k * in_stride] @ W[k], offsets enumerated
    exactly like the library (lexicographic over (dz, dy, dx)).
    """
    coords = np.asarray(coords)
    out_coords = np.asarray(out_coords)
    offsets = kernel_offsets(kernel_size)
    reach = (kernel_size // 2) * in_stride

    mins = coords[:, 1:].min(axis=0) - reach
    maxs = coords[:, 1:].max(axis=0) + reach
    dims = maxs - mins + 1
    n_batch = int(coords[:, 0].max()) + 1
    c_in = feats.shape[1]
    c_out = weights.shape[2]

    dense = np.zeros((n_batch, dims[0], dims[1], dims[2], c_in), dtype=np.float64)
    for row, (b, x, y, z) in enumerate(coords):
        dense[b, x - mins[0], y - mins[1], z - mins[2]] = feats[row]

    out = np.zeros((len(out_coords), c_out), dtype=np.float64)
    for o, (b, x, y, z) in enumerate(out_coords):
        for k, (dx, dy, dz) in enumerate(offsets):
            px = x + dx * in_stride - mins[0]
            py = y + dy * in_stride - mins[1]
            pz = z + dz * in_stride - mins[2]
            if 0 <= px < dims[0] and 0 <= py < dims[1] and 0 <= pz < dims[2]:
                out[o] += dense[b, px, py, pz] @ weights[k]
    return out


def finite_diff_gradients(build_loss, params, h=1e-5):
    """Central finite differences of build_loss() w.r.t. each parameter.

    ``build_loss`` must rebuild the forward pass from current parameter
    values and return (tape, scalar loss node).
    """
    grads = {}
    for p in params:
        flat = p.value.ravel()
        g = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(build_loss()[1].value)
            flat[i] = orig - h
            down = float(build_loss()[1].value)
            flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
        grads[p.name] = g.reshape(p.value.shape)
    return grads


def analytic_gradients(build_loss, params):
    """Backward-pass gradients for the same loss closure."""
    for p in params:
        p.zero_grad()
    tape, loss = build_loss()
    backward(tape, loss)
    return {p.name: p.grad.copy() for p in params}


def max_relative_error(analytic, numeric, floor=1e-6):
    """max over elements of |a - f| / max(|a|, |f|, floor)."""
    worst = 0.0
    for name, a in analytic.items():
        f = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
        worst = max(worst, float((np.abs(a - f) / denom).max()))
    return worst
