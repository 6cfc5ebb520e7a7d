"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``.

Used when the extension is not built or when ``LOWBRIDGE_PURE_PYTHON=1``.
Results match the compiled versions exactly.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    # (N, C, Ho, Wo, kh, kw) -> (N, C, kh, kw, Ho, Wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


def col2im(cols, shape, kh, kw, stride, pad):
    n, c, h, w = shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    blocks = cols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += blocks[:, :, i, j]
    if pad:
        dxp = dxp[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(dxp)


def maxpool2x2_forward(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = np.argmax(win, axis=-1).astype(np.uint8)  # first occurrence on ties
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2x2_backward(grad, arg):
    n, c, ho, wo = grad.shape
    win = np.zeros((n, c, ho, wo, 4), dtype=grad.dtype)
    np.put_along_axis(win, arg[..., None].astype(np.intp), grad[..., None], axis=-1)
    return np.ascontiguousarray(
        win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    )


_NMS_OFFSETS = ((0, 1), (1, 1), (1, 0), (1, -1))


def nms(mag, bins):
    h, w = mag.shape
    out = np.zeros((h, w), dtype=np.float64)
    if h < 3 or w < 3:
        return out
    centre = mag[1:-1, 1:-1]
    keep = np.zeros(centre.shape, dtype=bool)
    for b, (dy, dx) in enumerate(_NMS_OFFSETS):
        fwd = mag[1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
        bwd = mag[1 - dy:h - 1 - dy, 1 - dx:w - 1 - dx]
        keep |= (bins[1:-1, 1:-1] == b) & (centre >= fwd) & (centre >= bwd)
    out[1:-1, 1:-1] = np.where(keep, centre, 0.0)
    return out


def _dilate8(mask):
    grown = mask.copy()
    grown[1:, :] |= mask[:-1, :]
    grown[:-1, :] |= mask[1:, :]
    rows = grown.copy()
    grown[:, 1:] |= rows[:, :-1]
    grown[:, :-1] |= rows[:, 1:]
    return grown


def hysteresis(sup, low, high):
    candidate = sup >= low
    edges = sup >= high
    while True:
        grown = _dilate8(edges) & candidate | edges
        if np.array_equal(grown, edges):
            return edges.astype(np.uint8)
        edges = grown


def min_distances(a, b, sy, sx, chunk=2048):
    out = np.empty(len(a), dtype=np.float64)
    bf = b.astype(np.float64)
    for s in range(0, len(a), chunk):
        blk = a[s:s + chunk].astype(np.float64)
        dy = (blk[:, None, 0] - bf[None, :, 0]) * sy
        dx = (blk[:, None, 1] - bf[None, :, 1]) * sx
        out[s:s + chunk] = np.sqrt((dy * dy + dx * dx).min(axis=1))
    return out


def _crc_table():
    poly = 0xC96C5795D7870F42
    table = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ poly if c & 1 else c >> 1
        table.append(c)
    return table


_CRC_TABLE = _crc_table()


def crc64(data, crc=0):
    """CRC-64/XZ. ``crc`` continues a previous call's result."""
    table = _CRC_TABLE
    c = crc ^ 0xFFFFFFFFFFFFFFFF
    for byte in bytes(data):
        c = table[(c ^ byte) & 0xFF] ^ (c >> 8)
    return c ^ 0xFFFFFFFFFFFFFFFF
