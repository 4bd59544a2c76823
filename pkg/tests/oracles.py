"""Independent loop-based reference implementations used as test oracles.

Everything here works on float64 numpy arrays of a single sample and never
calls torch or scipy convolution routines.
"""

import math

import numpy as np


def to_np(t):
    return t.detach().cpu().double().numpy()


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def conv2d(x, w, b=None):
    """Same-padded cross-correlation of (Cin, R, C) with (Cout, Cin, k, k)."""
    cout, cin, k, _ = w.shape
    pad = k // 2
    _, R, C = x.shape
    xp = np.zeros((cin, R + 2 * pad, C + 2 * pad))
    xp[:, pad:pad + R, pad:pad + C] = x
    out = np.zeros((cout, R, C))
    for o in range(cout):
        for i in range(cin):
            for di in range(k):
                for dj in range(k):
                    out[o] += w[o, i, di, dj] * xp[i, di:di + R, dj:dj + C]
        if b is not None:
            out[o] += b[o]
    return out


def conv1x1(x, w, b=None):
    cout, cin = w.shape[:2]
    out = np.zeros((cout,) + x.shape[1:])
    for o in range(cout):
        for i in range(cin):
            out[o] += w[o, i, 0, 0] * x[i]
        if b is not None:
            out[o] += b[o]
    return out


def batchnorm_eval(y, bn):
    mean, var = to_np(bn.running_mean), to_np(bn.running_var)
    gamma, beta = to_np(bn.weight), to_np(bn.bias)
    out = np.empty_like(y)
    for c in range(y.shape[0]):
        out[c] = (y[c] - mean[c]) / math.sqrt(var[c] + bn.eps) * gamma[c] + beta[c]
    return out


def multibranch(x, block):
    """Reference for one multi-branch block (eval mode for the batch-norm variant)."""
    outs = []
    for idx, conv in enumerate(block.branches):
        y = conv2d(x, to_np(conv.weight), None if conv.bias is None else to_np(conv.bias))
        if block.norms is not None:
            y = batchnorm_eval(y, block.norms[idx])
        outs.append(np.maximum(y, 0.0))
    cat = np.concatenate(outs, axis=0)
    fuse = block.fuse
    return conv1x1(cat, to_np(fuse.weight), None if fuse.bias is None else to_np(fuse.bias))


def lstm_step(x, H, C, cell):
    """Reference for one gated recurrent step with elementwise peepholes."""
    hid = cell.hidden_channels
    xs = multibranch(x, cell.input_block)
    hs = multibranch(H, cell.hidden_block)
    part = lambda a, k: a[k * hid:(k + 1) * hid]
    Wcf, Wci, Wco = to_np(cell.W_cf), to_np(cell.W_ci), to_np(cell.W_co)
    bf, bi, bc, bo = (to_np(b)[:, None, None] for b in (cell.b_f, cell.b_i, cell.b_c, cell.b_o))
    f = sigmoid(part(xs, 0) + part(hs, 0) + Wcf * C + bf)
    i = sigmoid(part(xs, 1) + part(hs, 1) + Wci * C + bi)
    C_new = f * C + i * np.tanh(part(xs, 2) + part(hs, 2) + bc)
    o = sigmoid(part(xs, 3) + part(hs, 3) + Wco * C_new + bo)
    return o * np.tanh(C_new), C_new


def fuse(light_H, light_C, aux_H, aux_C, fusion):
    C = conv1x1(np.concatenate([light_C, aux_C]), to_np(fusion.conv_c.weight), to_np(fusion.conv_c.bias))
    H = conv1x1(np.concatenate([light_H, aux_H]), to_np(fusion.conv_h.weight), to_np(fusion.conv_h.bias))
    return np.maximum(H, 0.0), np.maximum(C, 0.0)


def gaussian_weights(sigmas, sizes):
    """Kernel sampled from the trivariate normal density, renormalized to unit sum."""
    w = np.zeros(sizes)
    centre = [s // 2 for s in sizes]
    norm = (2 * math.pi) ** 1.5 * sigmas[0] * sigmas[1] * sigmas[2]
    for a in range(sizes[0]):
        for b in range(sizes[1]):
            for c in range(sizes[2]):
                q = ((a - centre[0]) / sigmas[0]) ** 2 + ((b - centre[1]) / sigmas[1]) ** 2 \
                    + ((c - centre[2]) / sigmas[2]) ** 2
                w[a, b, c] = math.exp(-0.5 * q) / norm
    return w / w.sum()


def blur(L, weights, normalize=True):
    """Zero-padded 3-D convolution by explicit loops, then per-slice max normalization.

    Each positive input cell scatters the (symmetric) kernel onto every output
    cell it reaches, which is the same sum as the gather form but only visits
    non-zero inputs.
    """
    h, R, C = L.shape
    ka, kb, kc = weights.shape
    ra, rb, rc = ka // 2, kb // 2, kc // 2
    out = np.zeros((h, R, C))
    sources = [(t, y, x) for t in range(h) for y in range(R) for x in range(C) if L[t, y, x]]
    for t in range(h):
        for y in range(R):
            for x in range(C):
                acc = 0.0
                for tt, yy, xx in sources:
                    a, b, c = tt - t + ra, yy - y + rb, xx - x + rc
                    if 0 <= a < ka and 0 <= b < kb and 0 <= c < kc:
                        acc += weights[a, b, c] * L[tt, yy, xx]
                out[t, y, x] = acc
    if normalize:
        for t in range(h):
            m = out[t].max()
            if m > 0:
                out[t] /= m
    return out


def confusion_scan(pred, truth, neighborhood=False):
    """Per-cell scan over a 2-D pair; neighbourhood hits look at the 8 surrounding cells."""
    R, C = pred.shape

    def near(mask, y, x):
        if not neighborhood:
            return bool(mask[y, x])
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                yy, xx = y + dy, x + dx
                if 0 <= yy < R and 0 <= xx < C and mask[yy, xx]:
                    return True
        return False

    tp = fp = fn = 0
    for y in range(R):
        for x in range(C):
            if pred[y, x]:
                if near(truth, y, x):
                    tp += 1
                else:
                    fp += 1
            if truth[y, x] and not near(pred, y, x):
                fn += 1
    return tp, fp, fn, R * C - tp - fp - fn
