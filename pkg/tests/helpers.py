"""Shared oracles for the test suite.

conv2d_reference is a deliberately slow nested-loop correlation used to
check the vectorized implementation; finite_difference perturbs every
scalar of every leaf with central differences. Both stay independent of
the library code under test.
"""
import numpy as np


def conv2d_reference(x, w, b=None, stride=1, padding=0, groups=1):
    n, cin, h, wid = x.shape
    cout, cin_g, kh, kw = w.shape
    assert cin % groups == 0 and cout % groups == 0 and cin_g == cin // groups
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hout = (x.shape[2] - kh) // stride + 1
    wout = (x.shape[3] - kw) // stride + 1
    out = np.zeros((n, cout, hout, wout), dtype=np.float64)
    per_group = cout // groups
    for img in range(n):
        for oc in range(cout):
            g = oc // per_group
            ics = range(g * cin_g, (g + 1) * cin_g)
            for oy in range(hout):
                for ox in range(wout):
                    acc = 0.0
                    for ic_off, ic in enumerate(ics):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (x[img, ic, oy * stride + ky,
                                          ox * stride + kx]
                                        * w[oc, ic_off, ky, kx])
                    out[img, oc, oy, ox] = acc
    if b is not None:
        out += b.reshape(1, cout, 1, 1)
    return out


def finite_difference(loss_fn, leaves, h=1e-5):
    """Central-difference gradients of a scalar loss w.r.t. each leaf
    tensor's raw array. loss_fn() must recompute the loss from the leaves'
    current .data."""
    grads = []
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        g = np.empty_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_fn()
            flat[i] = keep - h
            down = loss_fn()
            flat[i] = keep
            g[i] = (up - down) / (2 * h)
        grads.append(g.reshape(leaf.data.shape))
    return grads


def fd_gate(analytic, numeric, tol=1e-4, floor=1e-8):
    """Worst |analytic - numeric| scaled by the allowance
    tol * max(|analytic|, |numeric|) + floor; passes while <= 1. The
    absolute floor keeps near-zero gradients from tripping on the
    cancellation noise inherent to central differences."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    allow = tol * np.maximum(np.abs(a), np.abs(n)) + floor
    return float(np.max(np.abs(a - n) / allow))


def report(name, ok, detail=""):
    tag = "PASS" if ok else "FAIL"
    line = f"[{tag}] {name}"
    if detail:
        line += f": {detail}"
    print(line)
    assert ok, line
