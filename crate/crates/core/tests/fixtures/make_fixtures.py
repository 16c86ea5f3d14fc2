"""Regenerates the PNG fixtures and the frozen bicubic reference values.

Run from this directory: python3 make_fixtures.py
"""
import json

import numpy as np
from PIL import Image

rng = np.random.default_rng(20240611)


def save(name, arr):
    arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(name)


def fixtures():
    yy, xx = np.mgrid[0:24, 0:32].astype(np.float64)
    out = []
    out.append(np.stack([xx / 31, yy / 23, (xx + yy) / 54], -1))
    out.append(rng.random((24, 32, 3)))
    out.append(np.repeat(((xx // 4 + yy // 4) % 2)[..., None], 3, -1))
    out.append(np.stack([0.5 + 0.5 * np.sin(xx / 2.0), 0.5 + 0.5 * np.cos(yy / 3.0), 0.5 + 0.5 * np.sin((xx + yy) / 5.0)], -1))
    disc = ((xx - 15) ** 2 + (yy - 11) ** 2 < 64).astype(np.float64)
    out.append(np.stack([disc, 1 - disc, 0.5 * disc + 0.25], -1))
    out.append(np.repeat((xx % 2)[..., None], 3, -1))
    out.append(np.clip(np.stack([xx / 31, yy / 23, 0.5 * np.ones_like(xx)], -1) + 0.1 * rng.standard_normal((24, 32, 3)), 0, 1))
    out.append(np.full((24, 32, 3), 0.6))
    out.append(rng.random((20, 20, 3)))
    out.append(np.repeat(rng.random((28, 36))[..., None], 3, -1) ** 2)
    for i, a in enumerate(out):
        save(f"fixture_{i:02}.png", a)


def cubic(x):
    ax = np.abs(x)
    return np.where(ax <= 1, 1.5 * ax**3 - 2.5 * ax**2 + 1,
                    np.where(ax <= 2, -0.5 * ax**3 + 2.5 * ax**2 - 4 * ax + 2, 0.0))


def weights(in_len, out_len, scale):
    """Dense (out_len, in_len) matrix, MATLAB imresize bicubic with antialiasing."""
    kernel_width = 4.0
    if scale < 1:
        h = lambda x: scale * cubic(scale * x)
        kernel_width /= scale
    else:
        h = cubic
    m = np.zeros((out_len, in_len))
    for i in range(out_len):
        u = (i + 1) / scale + 0.5 * (1 - 1 / scale)
        left = int(np.floor(u - kernel_width / 2))
        taps = int(np.ceil(kernel_width)) + 2
        idx = left + np.arange(taps)
        w = h(u - idx)
        w = w / w.sum()
        for j, wt in zip(idx, w):
            # symmetric padding, 1-based
            k = j - 1
            period = 2 * in_len
            k = k % period
            if k >= in_len:
                k = period - 1 - k
            m[i, k] += wt
    return m


def resize(img, scale):
    h, w = img.shape
    oh, ow = int(round(h * scale)), int(round(w * scale))
    return weights(h, oh, scale) @ img @ weights(w, ow, scale).T


def reference():
    ramp = np.arange(64, dtype=np.float64).reshape(8, 8) / 63.0
    return {
        "ramp_8x8": ramp.ravel().tolist(),
        "down_quarter": resize(ramp, 0.25).ravel().tolist(),
        "up_double": resize(ramp, 2.0).ravel().tolist(),
    }


if __name__ == "__main__":
    fixtures()
    with open("bicubic_reference.json", "w") as f:
        json.dump(reference(), f, indent=1)
