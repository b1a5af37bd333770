"""Independent reference values frozen into the test suite.

Nothing here imports adaptdiv; each value comes from plain arithmetic,
quadrature or a brute-force scan. Run it to regenerate the constants in
tests/oracle_values.py.
"""

import math

import numpy as np
from scipy import integrate, stats


def two_point_loss():
    # constant 0.75 scorer: -(1/2) ln 0.75 - (1/2) ln 0.25
    return 0.5 * (-math.log(0.75)) + 0.5 * (-math.log(0.25))


def matern_unit():
    return (1.0 + math.sqrt(3.0)) * math.exp(-math.sqrt(3.0))


def jsd_quadrature(pdf_p, pdf_q, lo, hi):
    def integrand(x):
        p, q = pdf_p(x), pdf_q(x)
        m = 0.5 * (p + q)
        out = 0.0
        if p > 0:
            out += 0.5 * p * math.log(p / m)
        if q > 0:
            out += 0.5 * q * math.log(q / m)
        return out

    val, _ = integrate.quad(integrand, lo, hi, limit=400, epsabs=1e-12)
    return val


def jsd_unit_gaussians():
    return jsd_quadrature(stats.norm(0, 1).pdf, stats.norm(1, 1).pdf, -15, 16)


def jsd_separated_2d():
    # N((-3,-3), I) vs N((3,3), I) reduces to 1-D along the diagonal: means -3 sqrt2, 3 sqrt2
    s = 3.0 * math.sqrt(2.0)
    return jsd_quadrature(stats.norm(-s, 1).pdf, stats.norm(s, 1).pdf, -20, 20)


def stub_stop_index(c0=0.25, n=100, r=0.9):
    ln2 = math.log(2.0)
    for i in range(n + 1):
        if ln2 * r**i <= c0 * i / n * ln2:
            return i
    return n


def stub_ad_grid(eps=0.05):
    # D_alpha = alpha ln2 / 2 on the grid 0, eps, ...: first alpha with D >= (1 - alpha) ln 2
    ln2 = math.log(2.0)
    k = 0
    while True:
        a = k * eps
        if a * ln2 / 2 >= (1 - a) * ln2:
            return a, a * ln2 / 2
        k += 1


def tv_xor_half_turn():
    """Total variation between the xor mixture at 0 and at pi/2 (Monte Carlo on a grid)."""
    std = 0.35
    c = 1 / math.sqrt(2)
    xs = np.linspace(-3, 3, 1201)
    X, Y = np.meshgrid(xs, xs)

    def mix(means):
        return sum(0.5 * stats.norm(mx, std).pdf(X) * stats.norm(my, std).pdf(Y) for mx, my in means)

    p = mix([(c, c), (-c, -c)])
    q = mix([(-c, c), (c, -c)])
    h = xs[1] - xs[0]
    return 0.5 * np.sum(np.abs(p - q)) * h * h


def jsd_xor_half_turn():
    std = 0.35
    c = 1 / math.sqrt(2)
    xs = np.linspace(-3.5, 3.5, 1401)
    X, Y = np.meshgrid(xs, xs)

    def mix(means):
        return sum(0.5 * stats.norm(mx, std).pdf(X) * stats.norm(my, std).pdf(Y) for mx, my in means)

    p = mix([(c, c), (-c, -c)])
    q = mix([(-c, c), (c, -c)])
    m = 0.5 * (p + q)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = 0.5 * np.where(p > 0, p * np.log(p / m), 0) + 0.5 * np.where(q > 0, q * np.log(q / m), 0)
    h = xs[1] - xs[0]
    return float(np.sum(t) * h * h)


if __name__ == "__main__":
    print(f"TWO_POINT_LOSS = {two_point_loss()!r}")
    print(f"MATERN_UNIT = {matern_unit()!r}")
    print(f"JSD_UNIT_GAUSSIANS = {jsd_unit_gaussians()!r}")
    print(f"JSD_SEPARATED_2D = {jsd_separated_2d()!r}")
    print(f"STUB_STOP_INDEX = {stub_stop_index()!r}")
    a, v = stub_ad_grid()
    print(f"STUB_AD_ALPHA = {a!r}")
    print(f"STUB_AD_VALUE = {v!r}")
    print(f"TV_XOR_HALF_TURN = {tv_xor_half_turn()!r}")
    print(f"JSD_XOR_HALF_TURN = {jsd_xor_half_turn()!r}")
