"""Frozen outputs of the scripts in ``tests/oracles``."""

# lorenz_benettin.py: scipy DOP853 Benettin, T = 10000, transient 100
LORENZ_LYAPUNOV = (0.9038803782327788, -0.00021323880516194168, -14.570333367945844)

# lorenz_periodic.py: periods of short orbits keyed by crossings of z = 27
LORENZ_PERIODS = {2: (1.5586522107,), 3: (2.3059072639,), 4: (3.0235837034, 3.0842767758)}

# lorenz_mean.py: scipy DOP853, T = 50000 after transient 100, mean over two starts
# (23.548847 and 23.547073; beta <z> = <x y> agrees to 5 digits)
LORENZ_MEAN_Z = 23.54796
