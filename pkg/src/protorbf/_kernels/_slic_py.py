"""Numpy fallback for the superpixel assignment sweep."""

import numpy as np


def slic_assign(lab, cy, cx, ccol, win, alpha, labels, dist):
    """Assign each pixel to the nearest cluster within a search window.

    ``lab`` is the (H, W, 3) Lab image, ``cy``/``cx`` cluster centers,
    ``ccol`` (K, 3) cluster colors, ``win`` the half-window in pixels and
    ``alpha`` the squared spatial weight (m/S)^2.  Writes the winning cluster
    id into ``labels`` and its squared distance into ``dist``.

    Distances are accumulated in the same association order as the compiled
    kernel so both backends produce bit-identical sweeps.
    """
    H, W = lab.shape[:2]
    K = cy.shape[0]
    for k in range(K):
        yc = int(np.floor(cy[k] + 0.5))
        xc = int(np.floor(cx[k] + 0.5))
        y0 = max(0, yc - win)
        y1 = min(H, yc + win + 1)
        x0 = max(0, xc - win)
        x1 = min(W, xc + win + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        sub = lab[y0:y1, x0:x1]
        dl = sub[:, :, 0] - ccol[k, 0]
        da = sub[:, :, 1] - ccol[k, 1]
        db = sub[:, :, 2] - ccol[k, 2]
        t = dl * dl + da * da + db * db
        dy = np.arange(y0, y1, dtype=np.float64) - cy[k]
        dx = np.arange(x0, x1, dtype=np.float64) - cx[k]
        s = (dy * dy)[:, None] + (dx * dx)[None, :]
        d = t + s * alpha
        view_d = dist[y0:y1, x0:x1]
        view_l = labels[y0:y1, x0:x1]
        better = d < view_d
        view_d[better] = d[better]
        view_l[better] = k
    return labels, dist
