"""Regenerate the synthetic 7-bottom / 1-total monthly fixture.

Run from this directory: ``python make_states7.py``. Values are rounded to
three decimals so the CSV text is the source of truth; the expected total is
the column sum of the rounded values.
"""
import numpy as np

STATES = ("NSW", "VIC", "QLD", "SA", "WA", "TAS", "NT")
N_MONTHS = 96

rng = np.random.default_rng(20240501)
t = np.arange(N_MONTHS)
rows = []
values = np.empty((len(STATES), N_MONTHS))
for i, s in enumerate(STATES):
    level = rng.uniform(20, 120)
    amp = rng.uniform(0.1, 0.3) * level
    phase = rng.uniform(0, 2 * np.pi)
    trend = rng.uniform(-0.05, 0.15)
    y = level + trend * t + amp * np.sin(2 * np.pi * t / 12 + phase) + rng.normal(0, 0.05 * level, N_MONTHS)
    values[i] = np.round(y, 3)

stamps = [f"{1998 + k // 12:04d}-{k % 12 + 1:02d}" for k in t]
with open("states7.csv", "w", newline="\n") as fh:
    fh.write("series,t,value\n")
    for i, s in enumerate(STATES):
        for k in t:
            fh.write(f"{s},{stamps[k]},{values[i, k]:.3f}\n")

with open("states7_hierarchy.txt", "w", newline="\n") as fh:
    fh.write("# one national total over seven states\n")
    fh.write(f"AUS: {','.join(STATES)}\n")

total = np.round(values, 3).sum(axis=0)
with open("states7_total.csv", "w", newline="\n") as fh:
    fh.write("t,total\n")
    for k in t:
        fh.write(f"{stamps[k]},{float(total[k])!r}\n")
