"""Accuracy against overlap fraction for plain VFL and RISA.

Fewer overlapping rows hurt plain vertical training most; the imputed and
pseudo-labelled rows recover much of the loss.

Run: python demos/04_overlap_sweep.py  (about a minute)
"""

from risa.cli import render_table, sweep

record = sweep(["vfl", "local_vfl", "risa"], [0.01, 0.1, 0.5], [0, 1, 2])
print(render_table(record["methods"], record["fractions"], record["median"], record["seeds"]))
print(f"{record['seconds']:.0f} s")
