"""Pure numpy versions of the ragged-row kernels.

Same signatures and results as the compiled ``_kernels`` extension.
"""

import numpy as np


def scatter_add_rows(grad, index, n_rows):
    out = np.zeros((n_rows, grad.shape[1]))
    np.add.at(out, index, grad)
    return out


def segment_mean(x, offsets):
    lengths = np.diff(offsets)
    sums = np.add.reduceat(x, offsets[:-1], axis=0)
    return sums / lengths[:, None]


def segment_spread(g, offsets):
    lengths = np.diff(offsets)
    return np.repeat(g / lengths[:, None], lengths, axis=0)
