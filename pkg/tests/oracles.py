"""Independent oracles used to freeze expected test values.

Everything here deliberately avoids the code paths under test: the
cubic solver is closed-form trigonometric, the scale minimizer is a
projected-gradient loop, and the finite-difference Jacobian only calls
the model's forward pass.
"""

import numpy as np


def symmetric_3x3_eigenvalues(a):
    """Roots of the characteristic polynomial via the trigonometric cubic.

    For a symmetric 3x3 matrix the eigenvalues are the real roots of
    det(A - x I) = 0; this evaluates them in closed form (no linear
    algebra library involved).
    """
    a = np.asarray(a, dtype=np.float64)
    p1 = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
    q = np.trace(a) / 3.0
    p2 = (a[0, 0] - q) ** 2 + (a[1, 1] - q) ** 2 + (a[2, 2] - q) ** 2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    if p == 0.0:
        return np.array([q, q, q])
    b = (a - q * np.eye(3)) / p
    det_b = (
        b[0, 0] * (b[1, 1] * b[2, 2] - b[1, 2] * b[2, 1])
        - b[0, 1] * (b[1, 0] * b[2, 2] - b[1, 2] * b[2, 0])
        + b[0, 2] * (b[1, 0] * b[2, 1] - b[1, 1] * b[2, 0])
    )
    r = np.clip(det_b / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    eig1 = q + 2.0 * p * np.cos(phi)
    eig3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    eig2 = 3.0 * q - eig1 - eig3
    return np.sort(np.array([eig1, eig2, eig3]))[::-1]


def projected_gradient_scales(s, iters=20000, step=None):
    """Minimize sum(s_i^2 lam_i) s.t. sum(1/sqrt(lam_i)) = m, lam > 0.

    Parametrized by x = 1/sqrt(lam) on the plane sum(x) = m with
    positivity clamping; plain projected gradient with backtracking.
    Returns (lam, objective).
    """
    s = np.asarray(s, dtype=np.float64)
    m = s.size

    def objective(x):
        return float(np.sum(s**2 / x**2))

    x = np.full(m, 1.0)
    if step is None:
        step = 0.1 / max(np.max(s) ** 2, 1e-12)
    best = objective(x)
    for _ in range(iters):
        grad = -2.0 * s**2 / x**3
        grad -= grad.mean()  # project onto the constraint plane
        trial_step = step
        for _ in range(40):
            cand = np.clip(x - trial_step * grad, 1e-9, None)
            cand *= m / cand.sum()
            cand_obj = objective(cand)
            if cand_obj <= best:
                break
            trial_step *= 0.5
        if cand_obj > best - 1e-15 * abs(best):
            x = cand
            best = min(best, cand_obj)
            break
        x = cand
        best = cand_obj
    return 1.0 / x**2, best


def finite_difference_jacobian(forward, z, step=1e-5):
    """Central differences of a vector-valued map; forward-pass only."""
    z = np.asarray(z, dtype=np.float64)
    columns = []
    for j in range(z.size):
        up, down = z.copy(), z.copy()
        up[j] += step
        down[j] -= step
        columns.append((np.asarray(forward(up)) - np.asarray(forward(down))) / (2.0 * step))
    return np.stack(columns, axis=1)


def nearest_mean_accuracy(train_x, train_y, test_x, test_y):
    """Nearest-class-mean classifier; a Bayes-rate stand-in for blobs."""
    classes = np.unique(train_y)
    means = np.stack([train_x[train_y == k].mean(axis=0) for k in classes])
    dists = ((test_x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    pred = classes[np.argmin(dists, axis=1)]
    return float(np.mean(pred == test_y))


def perceptron_separable(x, y, max_epochs=200):
    """True iff the perceptron converges, certifying linear separability."""
    signs = np.where(y == y.max(), 1.0, -1.0)
    aug = np.hstack([x, np.ones((x.shape[0], 1))])
    w = np.zeros(aug.shape[1])
    for _ in range(max_epochs):
        mistakes = 0
        for xi, si in zip(aug, signs):
            if si * (w @ xi) <= 0.0:
                w += si * xi
                mistakes += 1
        if mistakes == 0:
            return True
    return False
