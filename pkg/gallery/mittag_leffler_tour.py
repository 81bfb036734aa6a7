"""Mittag-Leffler relaxation for a few orders.

For alpha < 1 the function E_alpha(-x) decays like x^{-1}/Gamma(1-alpha), far
slower than the exponential. For 1 < alpha < 2 it oscillates while decaying.
"""

import math

import numpy as np

from stfde.mlf import ml

x = np.array([0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0, 200.0])

print("x       " + "".join(f"{a:>14}" for a in ("0.3", "0.7", "1.0", "1.5", "1.9")))
for xi in x:
    row = [ml(a, 1.0, np.array([xi]))[0] for a in (0.3, 0.7, 1.0, 1.5, 1.9)]
    print(f"{xi:<8g}" + "".join(f"{v:14.6e}" for v in row))

# the algebraic tail
for a in (0.3, 0.7):
    big = 1e4
    tail = 1 / (big * math.gamma(1 - a))
    print(f"alpha={a}: E(-1e4) = {ml(a, 1.0, np.array([big]))[0]:.6e}, leading tail {tail:.6e}")
