"""Independent oracles shared by the test modules.

Nothing here calls into the code paths it is used to check: the finite
difference harness only evaluates forward passes, and the reference
implementations are plain loops in float64.
"""

import math

import numpy as np

from lowbridge.tensor import Tensor, backward, tsum

FD_STEP = 1e-3
GRAD_RTOL = 1e-3


def gradcheck(fn, arrays, wrt=None, seed=0, step=FD_STEP):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps float64 Tensors to a Tensor. A fixed random projection turns
    non-scalar outputs into a scalar. Relative error per element is
    |a - n| / max(|a|, |n|, 1e-3 * scale, 1e-8) where ``scale`` is the largest
    numeric gradient magnitude.
    """
    wrt = range(len(arrays)) if wrt is None else wrt
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    probe = fn(*[Tensor(a, dtype=np.float64) for a in arrays])
    proj = np.random.default_rng(seed).uniform(0.5, 1.5, size=probe.shape)

    def scalar(vals):
        out = fn(*[Tensor(v, dtype=np.float64) for v in vals])
        return float((out.data * proj).sum())

    tensors = [Tensor(a, dtype=np.float64, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = fn(*tensors)
    backward(tsum(out * Tensor(proj, dtype=np.float64)))

    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad
        assert analytic is not None, f"input {i} got no gradient"
        numeric = np.zeros_like(arrays[i])
        for idx in np.ndindex(arrays[i].shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += step
            minus[i][idx] -= step
            numeric[idx] = (scalar(plus) - scalar(minus)) / (2 * step)
        scale = np.abs(numeric).max()
        denom = np.maximum.reduce([np.abs(analytic), np.abs(numeric), np.full_like(numeric, max(1e-3 * scale, 1e-8))])
        worst = max(worst, float((np.abs(analytic - numeric) / denom).max()))
    return worst


def away_from_zero(rng, shape, low=-2.0, high=2.0, gap=0.01):
    """Uniform samples with no entry closer than ``gap`` to 0 (relu kinks)."""
    x = rng.uniform(low, high, size=shape)
    bad = np.abs(x) < gap
    while bad.any():
        x[bad] = rng.uniform(low, high, size=int(bad.sum()))
        bad = np.abs(x) < gap
    return x


def distinct_windows(rng, shape, gap=0.01):
    """Values in [-2, 2] whose 2x2 window maxima beat the runner-up by ``gap``."""
    while True:
        x = rng.uniform(-2, 2, size=shape)
        n, c, h, w = shape
        win = np.sort(x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4), axis=-1)
        if (win[..., -1] - win[..., -2]).min() > gap:
            return x


def conv2d_direct(x, w, b, stride=1, padding=0):
    """Six nested loops, float64."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for ch in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += float(xp[i, ch, y * stride + dy, z * stride + dx]) * float(w[o, ch, dy, dx])
                    out[i, o, y, z] = acc
    return out


def softmax_scalar(logits):
    """Per-pixel softmax over axis 1 with Python floats."""
    n, k, h, w = logits.shape
    out = np.zeros(logits.shape)
    for i in range(n):
        for y in range(h):
            for x in range(w):
                vals = [float(logits[i, c, y, x]) for c in range(k)]
                m = max(vals)
                ex = [math.exp(v - m) for v in vals]
                s = sum(ex)
                for c in range(k):
                    out[i, c, y, x] = ex[c] / s
    return out


def ce_scalar(logits, labels):
    p = softmax_scalar(logits)
    n, k, h, w = logits.shape
    total = 0.0
    for i in range(n):
        for y in range(h):
            for x in range(w):
                total -= math.log(p[i, int(labels[i, y, x]), y, x])
    return total / (n * h * w)


def dice_loss_scalar(logits, labels, smooth=1.0):
    p = softmax_scalar(logits)
    n, k, h, w = logits.shape
    scores = []
    for c in range(k):
        inter = psum = ysum = 0.0
        for i in range(n):
            for y in range(h):
                for x in range(w):
                    yc = 1.0 if labels[i, y, x] == c else 0.0
                    inter += p[i, c, y, x] * yc
                    psum += p[i, c, y, x]
                    ysum += yc
        scores.append((2 * inter + smooth) / (psum + ysum + smooth))
    return 1.0 - sum(scores) / k


def boundary_bruteforce(mask):
    """Set of (r, c) foreground pixels with a background or off-image 4-neighbour."""
    h, w = mask.shape
    out = set()
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if not (0 <= rr < h and 0 <= cc < w) or not mask[rr, cc]:
                    out.add((r, c))
                    break
    return out


def asd_bruteforce(pred, truth, cls, spacing=(1.0, 1.0)):
    bp = sorted(boundary_bruteforce(pred == cls))
    bt = sorted(boundary_bruteforce(truth == cls))
    if not bp and not bt:
        return 0.0
    if not bp or not bt:
        h, w = pred.shape
        return math.hypot(h * spacing[0], w * spacing[1])

    def directed(src, dst):
        acc = []
        for r, c in src:
            acc.append(min(math.sqrt(((r - r2) * spacing[0]) ** 2 + ((c - c2) * spacing[1]) ** 2) for r2, c2 in dst))
        return math.fsum(acc) / len(acc)

    return 0.5 * (directed(bp, bt) + directed(bt, bp))


def dice_bruteforce(pred, truth, cls):
    p = t = both = 0
    for a, b in zip(pred.ravel(), truth.ravel()):
        p += a == cls
        t += b == cls
        both += (a == cls) and (b == cls)
    return 1.0 if p + t == 0 else 2.0 * both / (p + t)


def adam_reference(theta0, grad_fn, steps, lr, beta1=0.9, beta2=0.999, eps=1e-8, wd=0.0):
    """Scalar Adam/AdamW trajectory in Python floats."""
    theta, m, v = float(theta0), 0.0, 0.0
    traj = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        theta = theta * (1 - lr * wd)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        theta = theta - lr * mh / (math.sqrt(vh) + eps)
        traj.append(theta)
    return traj
