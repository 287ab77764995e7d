"""
Mask schedules and the masked-count sequence
============================================

gamma(r) is the fraction of the initially masked fields still masked
after progress r = t/T.
"""

import numpy as np

from refinectr.schedules import ScheduleKind, gamma, masked_count_sequence

grid = np.linspace(0, 1, 6)
print("r      " + "  ".join(f"{r:5.2f}" for r in grid))
for kind in ScheduleKind:
    print(f"{kind.value:<12}" + "  ".join(f"{gamma(kind, r):5.3f}" for r in grid))

# Concave curves keep more fields masked early on.
for kind in ScheduleKind:
    print(kind.value, masked_count_sequence(kind, T=5, m0=10))

# Few maskable fields and many steps: some steps retain nothing.
print(masked_count_sequence(ScheduleKind.COSINE, T=8, m0=3))
