"""Long memory of the subdiffusive modes.

Start from the first Laplace eigenfunction and watch the solution norm.
Ordinary diffusion kills it like exp(-pi^2 t); the fractional equation only
lets it decay like t^{-alpha}.
"""

import numpy as np

from stfde.forward import Scenario, solve_initial_subdiffusion
from stfde.fracops import TimeGrid
from stfde.spectral import laplace_1d

grid = TimeGrid(1000.0, 100_000)
t = grid.nodes
sel = t >= 10

for alpha in (0.3, 0.6, 0.9):
    s = Scenario(alpha, 0.3, laplace_1d(1, 400), grid, u0_coeffs=[1.0])
    v = np.abs(solve_initial_subdiffusion(s).values[0, 0])
    slope = np.polyfit(np.log(t[sel]), np.log(v[sel]), 1)[0]
    picks = [v[np.searchsorted(t, x)] for x in (1, 10, 100, 1000)]
    print(
        f"alpha={alpha}: |u(t)| at t=1,10,100,1000: "
        + " ".join(f"{p:.3e}" for p in picks)
        + f"   fitted slope {slope:.3f}"
    )
print(f"classical diffusion at t=1: {np.exp(-np.pi**2):.3e}")
