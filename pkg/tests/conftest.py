import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def brute_convolve2d(image, kernel):
    """Direct-sum reference convolution: reflective padding, explicit offsets.

    Kernel offsets are looped in Python; the image shift is a slice, so the
    arithmetic is the plain quadruple sum grouped by kernel tap.
    """
    image = np.asarray(image, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    ry, rx = kernel.shape[0] // 2, kernel.shape[1] // 2
    padded = np.pad(image, ((ry, ry), (rx, rx)), mode="symmetric")
    h, w = image.shape
    out = np.zeros((h, w))
    for dy in range(-ry, ry + 1):
        for dx in range(-rx, rx + 1):
            tap = kernel[ry + dy, rx + dx]
            out += tap * padded[ry - dy:ry - dy + h, rx - dx:rx - dx + w]
    return out


def brute_convolve2d_scalar(image, kernel):
    """Fully scalar quadruple loop; cross-checks the grouped form above."""
    image = np.asarray(image, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    ry, rx = kernel.shape[0] // 2, kernel.shape[1] // 2
    padded = np.pad(image, ((ry, ry), (rx, rx)), mode="symmetric")
    h, w = image.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-ry, ry + 1):
                for dx in range(-rx, rx + 1):
                    acc += kernel[ry + dy, rx + dx] * padded[y + ry - dy, x + rx - dx]
            out[y, x] = acc
    return out
