"""Vertical split of a table, overlap sampling and mean imputation.

Run: python demos/02_split_and_imputation.py
"""

import numpy as np

from risa import dataops

table, labels, columns = dataops.gen_synthetic(3, 2, 200, informative=2, noise_dims=1, seed=0)
overlap, owned = dataops.sample_overlap(200, 0.1, seed=0, n_parties=2)
parties = dataops.vertical_split(table, labels, columns=columns, overlap_ids=overlap,
                                 nonoverlap_ids=owned)
for p in parties:
    role = "active" if p.party_id == 0 else "passive"
    print(f"party {p.party_id} ({role}): columns {p.columns.tolist()}, "
          f"{p.n_overlap} overlapping rows, {p.n_nonoverlap} rows of its own")

snapshot = dataops.compute_means(parties)
print("overlap means per party:", [np.round(m, 3).tolist() for m in snapshot.means])

ids, owners, blocks = dataops.impute_nonoverlap(parties)
i = int(np.flatnonzero(owners == 1)[0])
print(f"row {ids[i]} is owned by party 1; after imputation:")
print("  party 0 block (mean):    ", np.round(blocks[0][i], 3))
print("  party 1 block (observed):", np.round(blocks[1][i], 3))
print("  true party 0 values:     ", np.round(table[ids[i], columns[0]], 3))
