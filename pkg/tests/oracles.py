"""Independent oracles used by the tests: kept deliberately separate from the
package so each check has a second route to the same number."""

import numpy as np


def binomial_american_put(s0, strike, rate, sigma, T, steps):
    """Cox-Ross-Rubinstein tree with early exercise."""
    dt = T / steps
    up = np.exp(sigma * np.sqrt(dt))
    down = 1.0 / up
    p = (np.exp(rate * dt) - down) / (up - down)
    disc = np.exp(-rate * dt)
    j = np.arange(steps + 1)
    v = np.maximum(strike - s0 * up ** (2 * j - steps), 0.0)
    for m in range(steps - 1, -1, -1):
        j = np.arange(m + 1)
        s = s0 * up ** (2 * j - m)
        v = np.maximum(np.maximum(strike - s, 0.0), disc * (p * v[1:] + (1 - p) * v[:-1]))
    return float(v[0])


def dense_lcp_solve(M, b, h, tol=1e-11):
    """Solve min(u - h, M u - b) = 0 by enumerating active sets (n <= ~14).

    Returns the unique solution for M-matrices.  Brute force on purpose.
    """
    n = len(b)
    for mask in range(2 ** n):
        active = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        u = np.empty(n)
        u[active] = h[active]
        free = ~active
        if free.any():
            A = M[np.ix_(free, free)]
            rhs = b[free] - M[np.ix_(free, active)] @ h[active]
            u[free] = np.linalg.solve(A, rhs)
        resid = M @ u - b
        if np.all(u[free] >= h[free] - tol) and np.all(resid[active] >= -tol):
            return u
    raise RuntimeError("no consistent active set found")


def heat_bump_value(t, x, T, width=1.0, height=1.0):
    """u(t, x) for the half-Laplacian backward equation with Gaussian terminal
    bump: the convolution has variance width^2 + (T - t)."""
    v = width**2 + (T - t)
    return height * width / np.sqrt(v) * np.exp(-0.5 * np.asarray(x) ** 2 / v)


def heat_bump_gradient(t, x, T, width=1.0, height=1.0):
    v = width**2 + (T - t)
    x = np.asarray(x)
    return -height * width * x / v**1.5 * np.exp(-0.5 * x**2 / v)


def brute_force_lipschitz(f, t, x, y_grid, z_grid):
    """Max |df| / (|dy| + |dz|) over all pairs of a dense (y, z) lattice."""
    yy, zz = np.meshgrid(y_grid, z_grid, indexing="ij")
    vals = f(t, x, yy, zz).ravel()
    ys, zs = yy.ravel(), zz.ravel()
    best = 0.0
    for i in range(len(vals)):
        dy = np.abs(ys - ys[i]) + np.abs(zs - zs[i])
        ok = dy > 0
        best = max(best, float(np.max(np.abs(vals[ok] - vals[i]) / dy[ok])))
    return best


def gaussian_kernel_weight_ratio(phi, rho, T, x_grid):
    """Quadrature oracle for the weighted terminal-data ratio with the exact
    unit-diffusion heat kernel: R = (int int |phi(y)| g_T(y - x) rho(x) dy dx)
    / (int |phi| rho dx)."""
    dx = x_grid[1] - x_grid[0]
    g = np.exp(-0.5 * (x_grid[None, :] - x_grid[:, None]) ** 2 / T) / np.sqrt(2 * np.pi * T)
    inner = g @ np.abs(phi(x_grid)) * dx
    num = float(np.sum(inner * rho(x_grid)) * dx)
    den = float(np.sum(np.abs(phi(x_grid)) * rho(x_grid)) * dx)
    return num / den
