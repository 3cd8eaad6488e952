"""Independent brute-force references shared by the test modules.

Everything here is written directly against dense numpy arrays and plain
loops, deliberately avoiding the package's sparse/gather implementations so
the two routes stay independent.
"""

import numpy as np


def dense_conv3d(dense, weights, bias, kernel, stride):
    """Brute-force 3D convolution with zero padding of kernel//2 per side.

    Args:
        dense: (W, L, H, Cin) input volume.
        weights: (kernel**3, Cin, Cout) with offsets in row-major (i, j, k) order.
        bias: (Cout,).
        kernel: odd cube edge.
        stride: 1 or 2.

    Returns:
        (ceil(W/s), ceil(L/s), ceil(H/s), Cout) output volume, bias applied
        everywhere.
    """
    w, l, h, cin = dense.shape
    cout = weights.shape[2]
    half = kernel // 2
    out_dims = (-(-w // stride), -(-l // stride), -(-h // stride))
    out = np.zeros(out_dims + (cout,))
    for oi in range(out_dims[0]):
        for oj in range(out_dims[1]):
            for ok in range(out_dims[2]):
                acc = np.zeros(cout)
                f = 0
                for di in range(kernel):
                    for dj in range(kernel):
                        for dk in range(kernel):
                            pi = oi * stride + di - half
                            pj = oj * stride + dj - half
                            pk = ok * stride + dk - half
                            if 0 <= pi < w and 0 <= pj < l and 0 <= pk < h:
                                acc += dense[pi, pj, pk] @ weights[f]
                            f += 1
                out[oi, oj, ok] = acc + bias
    return out


def dense_block_pool(dense, occupied_mask, factor, mode):
    """Blockwise mean/max over occupied entries only.

    Returns (pooled, pooled_mask); blocks with no occupied entry are masked
    out and left at zero.
    """
    w, l, h, c = dense.shape
    out_dims = (-(-w // factor), -(-l // factor), -(-h // factor))
    out = np.zeros(out_dims + (c,))
    out_mask = np.zeros(out_dims, dtype=bool)
    for oi in range(out_dims[0]):
        for oj in range(out_dims[1]):
            for ok in range(out_dims[2]):
                vals = []
                for pi in range(oi * factor, min((oi + 1) * factor, w)):
                    for pj in range(oj * factor, min((oj + 1) * factor, l)):
                        for pk in range(ok * factor, min((ok + 1) * factor, h)):
                            if occupied_mask[pi, pj, pk]:
                                vals.append(dense[pi, pj, pk])
                if vals:
                    stack = np.stack(vals)
                    out[oi, oj, ok] = (stack.mean(axis=0) if mode == "avg"
                                       else stack.max(axis=0))
                    out_mask[oi, oj, ok] = True
    return out, out_mask


def dense_trilinear(dense, factor, fine_sites, target_dims=None):
    """Trilinear sampling of a zero-filled coarse volume at fine voxel centers."""
    w, l, h, c = dense.shape
    out = np.zeros((len(fine_sites), c))
    for n, site in enumerate(fine_sites):
        u = (np.asarray(site, dtype=float) + 0.5) / factor - 0.5
        base = np.floor(u).astype(int)
        frac = u - base
        acc = np.zeros(c)
        for b0 in (0, 1):
            for b1 in (0, 1):
                for b2 in (0, 1):
                    ci, cj, ck = base + np.array([b0, b1, b2])
                    wgt = ((frac[0] if b0 else 1 - frac[0])
                           * (frac[1] if b1 else 1 - frac[1])
                           * (frac[2] if b2 else 1 - frac[2]))
                    if 0 <= ci < w and 0 <= cj < l and 0 <= ck < h:
                        acc += wgt * dense[ci, cj, ck]
        out[n] = acc
    return out


def monte_carlo_iou3d(box_a, box_b, n_samples, rng):
    """Volumetric IoU by uniform point sampling over the joint bounding box."""
    corners = np.vstack([box_a.corners(), box_b.corners()])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n_samples, 3))

    def inside(box):
        local = (pts - box.center) @ _rotz(-box.yaw).T
        half = np.array([0.5 * box.length, 0.5 * box.width, 0.5 * box.height])
        return (np.abs(local) <= half).all(axis=1)

    in_a = inside(box_a)
    in_b = inside(box_b)
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a | in_b)
    return inter / union if union else 0.0


def _rotz(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def finite_difference_gradients(forward, params, eps=1e-4):
    """Central finite differences of a scalar-valued callable.

    Args:
        forward: () -> float, evaluated under the current parameter values.
        params: dict name -> np.ndarray, mutated in place during probing.

    Returns:
        dict name -> array of the same shape with the FD gradient.
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + eps
            hi = forward()
            flat[i] = orig - eps
            lo = forward()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads[name] = g
    return grads


def relative_gradient_error(analytic, numeric, min_grad=1e-6):
    """Max relative error over entries whose analytic gradient is significant."""
    worst = 0.0
    mask = np.abs(analytic) > min_grad
    if not mask.any():
        return 0.0
    denom = np.maximum(np.abs(analytic[mask]), np.abs(numeric[mask]))
    err = np.abs(analytic[mask] - numeric[mask]) / denom
    worst = float(err.max())
    return worst
