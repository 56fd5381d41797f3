"""Long-run mean of z on the Lorenz attractor, independent of the package.

The z equation gives beta <z> = <x y> exactly for any bounded orbit, so
both sides are printed; they must agree before the mean is frozen in
``tests/oracle_values.py``.
"""

import numpy as np
from scipy.integrate import solve_ivp

SIGMA, RHO, BETA = 10.0, 28.0, 8.0 / 3.0


def rhs(t, u):
    x, y, z = u[:3]
    # running integrals of z and x y ride along as extra states
    return [SIGMA * (y - x), x * (RHO - z) - y, x * y - BETA * z, z, x * y]


def main(T=50000.0, transient=100.0, starts=((1.0, 1.0, 20.0), (-5.0, 3.0, 30.0))):
    for x0 in starts:
        s = solve_ivp(rhs, (0, transient), list(x0) + [0.0, 0.0], method="DOP853",
                      rtol=1e-10, atol=1e-10)
        u = np.concatenate([s.y[:3, -1], [0.0, 0.0]])
        s = solve_ivp(rhs, (0, T), u, method="DOP853", rtol=1e-10, atol=1e-10)
        mz, mxy = s.y[3, -1] / T, s.y[4, -1] / T
        print(x0, repr(mz), repr(mxy / BETA))


if __name__ == "__main__":
    main()
