"""Independent reference implementations the tests check production code
against. Deliberately written as naive loops over full sorts so they share
no code path with the vectorized implementations."""

import numpy as np


def propagate_oracle(m: np.ndarray, y: np.ndarray, k: int) -> np.ndarray:
    """Eq-by-the-book label transfer: per target row, sort the entire
    similarity row (score descending, index ascending on ties), take the
    first k, average score-weighted class vectors, softmax."""
    n_t, n_s = m.shape
    c = y.shape[1]
    out = np.zeros((n_t, c))
    for i in range(n_t):
        order = sorted(range(n_s), key=lambda j: (-m[i, j], j))
        agg = np.zeros(c)
        for j in order[:k]:
            agg = agg + m[i, j] * y[j]
        agg = agg / k
        e = np.exp(agg)
        out[i] = e / e.sum()
    return out


def cosine_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine via explicit loops; zero-norm rows give 0."""
    out = np.zeros((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            na = np.sqrt((a[i] ** 2).sum())
            nb = np.sqrt((b[j] ** 2).sum())
            if na == 0.0 or nb == 0.0:
                continue
            out[i, j] = float(a[i] @ b[j]) / (na * nb)
    return out


def dice_oracle(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Joint foreground Dice from explicit one-hot planes."""
    inter = 0
    p_size = 0
    g_size = 0
    for c in range(1, num_classes):
        p = (pred == c)
        g = (gt == c)
        inter += int((p & g).sum())
        p_size += int(p.sum())
        g_size += int(g.sum())
    if p_size + g_size == 0:
        return 1.0
    return 2.0 * inter / (p_size + g_size)
