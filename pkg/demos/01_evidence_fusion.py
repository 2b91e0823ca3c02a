"""Two parties' Dirichlet opinions fused with the reduced Yager rule.

Run: python demos/01_evidence_fusion.py
"""

import numpy as np

from risa import evidence as ev

# each party emits non-negative evidence for K = 2 classes
for e1, e2 in [([3.0, 1.0], [2.0, 2.0]), ([8.0, 0.0], [0.0, 8.0]), ([0.0, 0.0], [5.0, 1.0])]:
    _, m1 = ev.evidence_to_opinion(np.array(e1))
    _, m2 = ev.evidence_to_opinion(np.array(e2))
    fused, _ = ev.fuse_pair(m1, m2)
    c = float(ev.conflict(m1, m2))
    print(f"evidence {e1} and {e2}")
    print(f"  party opinions  b1={np.round(m1.b, 3)} u1={float(m1.u):.3f}"
          f"  b2={np.round(m2.b, 3)} u2={float(m2.u):.3f}")
    print(f"  fused           b={np.round(fused.b, 3)} u={float(fused.u):.3f}  conflict {c:.3f}")
    # Dempster normalises conflict away, Yager keeps it as uncertainty
    d = ev.dempster_combine(m1, m2)
    print(f"  Dempster        b={np.round(d.b, 3)} u={float(d.u):.3f}")

# the fused opinion maps back to a Dirichlet the loss can score
fused, _ = ev.fuse_pair(*(ev.evidence_to_opinion(np.array(e))[1] for e in ([3.0, 1.0], [2.0, 2.0])))
params = ev.opinion_to_dirichlet(fused)
loss, _ = ev.evidential_loss(params, np.array([1.0, 0.0]))
print(f"fused alpha {np.round(params.alpha, 3)}, loss for class 0: {float(loss):.4f}")
