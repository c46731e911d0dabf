"""Independent reference implementations used only by the tests.

Nothing here imports the package's kernels: loops, elimination and
closed-form counting formulas stand in for the vectorized code paths.
"""
from __future__ import annotations

import math

import numpy as np


def naive_conv2d(x, w, b=None, stride=1, padding="same"):
    """Nested-loop NHWC convolution with TF-style padding."""
    n, h, wd, ci = x.shape
    kh, kw, _, co = w.shape
    if padding == "same":
        oh, ow = math.ceil(h / stride), math.ceil(wd / stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - wd, 0)
        top, left = ph // 2, pw // 2
    else:
        oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
        top = left = 0
    out = np.zeros((n, oh, ow, co))
    for bi in range(n):
        for i in range(oh):
            for j in range(ow):
                for o in range(co):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            y, xx = i * stride + di - top, j * stride + dj - left
                            if 0 <= y < h and 0 <= xx < wd:
                                for c in range(ci):
                                    acc += float(x[bi, y, xx, c]) * float(w[di, dj, c, o])
                    out[bi, i, j, o] = acc + (float(b[o]) if b is not None else 0.0)
    return out


def elimination_rank(m, rel_tol=1e-6):
    """Rank by Gaussian elimination with partial pivoting."""
    a = np.array(m, dtype=np.float64)
    rows, cols = a.shape
    scale = np.abs(a).max(initial=0.0)
    if scale == 0:
        return 0
    tol = max(rows, cols) * scale * rel_tol
    rank, r = 0, 0
    for c in range(cols):
        if r == rows:
            break
        p = r + int(np.argmax(np.abs(a[r:, c])))
        if abs(a[p, c]) <= tol:
            continue
        a[[r, p]] = a[[p, r]]
        a[r + 1 :] -= np.outer(a[r + 1 :, c] / a[r, c], a[r])
        r += 1
        rank += 1
    return rank


def eigen_singular_values(w):
    """Singular values as square roots of the eigenvalues of W^T W (or W W^T)."""
    w = np.asarray(w, dtype=np.float64)
    gram = w.T @ w if w.shape[0] >= w.shape[1] else w @ w.T
    ev = np.linalg.eigvalsh(gram)[::-1]
    return np.sqrt(np.clip(ev, 0, None))


def central_difference(f, value, h, entries=None):
    """Central difference of scalar ``f`` with respect to entries of ``value`` (modified in place).

    ``entries`` selects flat indices; by default every entry. Others stay zero.
    """
    grad = np.zeros(value.shape)
    flat = value.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        orig = flat[i]
        flat[i] = orig + h
        up = flat[i]
        fp = f()
        flat[i] = orig - h
        down = flat[i]
        fm = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (float(up) - float(down))
    return grad


def concat_index_map(widths, masks):
    """Kept positions of a concatenation of sources with the given widths and masks."""
    kept, offset = [], 0
    for width, mask in zip(widths, masks):
        kept += [offset + i for i in range(width) if mask[i]]
        offset += width
    return kept


# --- closed-form counting of the full-scale templates ------------------------
# Each conv is (k = kh*kw*ci, co, output side, has_bias); BN widths listed separately.

def _same(h, s):
    return -(-h // s)


def vgg16_layers(side):
    plan = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512]
    convs, c, h = [], 3, side
    for v in plan:
        if v == "M":
            h //= 2
            continue
        convs.append((9 * c, v, h, True))
        c = v
    # every conv gets a BN inserted by head replacement
    return convs, [co for _, co, _, _ in convs], c


def resnet50_layers(side):
    convs, bns = [], []
    h = _same(side, 2)
    convs.append((147, 64, h, True))
    bns.append(64)
    h = _same(h, 2)
    c = 64
    for stage, (f, blocks) in enumerate([(64, 3), (128, 4), (256, 6), (512, 3)]):
        for b in range(blocks):
            s = 2 if b == 0 and stage > 0 else 1
            h = _same(h, s)
            convs += [(c, f, h, True), (9 * f, f, h, True), (f, 4 * f, h, True)]
            bns += [f, f, 4 * f]
            if b == 0:
                convs.append((c, 4 * f, h, True))
                bns.append(4 * f)
            c = 4 * f
    return convs, bns, c


def densenet121_layers(side):
    convs, bns = [], []
    h = _same(side, 2)
    convs.append((147, 64, h, False))
    bns.append(64)
    h = _same(h, 2)
    c = 64
    for i, blocks in enumerate([6, 12, 24, 16]):
        for _ in range(blocks):
            bns.append(c)
            convs.append((c, 128, h, False))
            bns.append(128)
            convs.append((9 * 128, 32, h, False))
            c += 32
        if i < 3:
            bns.append(c)
            convs.append((c, c // 2, h, False))
            c //= 2
            h //= 2
    bns.append(c)
    return convs, bns, c


def closed_form_counts(layers, classes=10):
    convs, bns, feat = layers
    params = sum(k * co + (co if bias else 0) for k, co, _, bias in convs) + 4 * sum(bns)
    params += (feat + 1) * classes
    flops = sum(k * co * h * h for k, co, h, _ in convs) + feat * classes
    growth = sum(min(k, co) * (k + co + 1) - k * co for k, co, _, _ in convs)
    trainable = 2 * sum(bns) + sum(min(k, co) for k, co, _, _ in convs) + (feat + 1) * classes
    return {"conv_layers": len(convs), "params": params, "flops": flops,
            "decomposed_params": params + growth, "decomposed_trainable": trainable}
