"""Accuracy versus risk on toy-CMNIST.

Whenever the invariant weight dominates (w_inv > |w_spu|) the sign of the
output follows the invariant bit, so train and test accuracy both sit at
p_inv = 0.75. The BCE risk still changes with w_spu, and it changes
differently in the train and test environments.

Run:  python3 demos/toy_cmnist_accuracy_plateau.py
"""

import numpy as np

from ivlab.invariance import ConstraintKind
from ivlab.optimize import GridSpec, landscape, make_problem

problem = make_problem("toy-cmnista", ConstraintKind.MRI_V1)
grid = GridSpec((-1.5, 1.5), (-1.5, 1.5), 61)
land = landscape(grid, ["accuracy", "risk_train", "risk_test"], problem)

wi, ws = np.meshgrid(land.w_inv, land.w_spu, indexing="ij")
plateau = wi > np.abs(ws) + max(grid.steps)
print(f"{plateau.sum()} grid points with w_inv > |w_spu|")
print("train accuracy there:", np.unique(land["accuracy_train"][plateau]))
print("test accuracy there: ", np.unique(land["accuracy_test"][plateau]))

# a slice at fixed w_inv: accuracy is flat while the risks move apart
i = int(np.argmin(np.abs(land.w_inv - 1.2)))
print(f"\nslice w_inv = {land.w_inv[i]:.2f}")
print("  w_spu   acc_tr  acc_te  risk_tr  risk_te")
for j in range(0, len(land.w_spu), 6):
    print(f"  {land.w_spu[j]:+.2f}   {land['accuracy_train'][i, j]:.3f}   {land['accuracy_test'][i, j]:.3f}"
          f"   {land['risk_train'][i, j]:.4f}   {land['risk_test'][i, j]:.4f}")

# outside the plateau the spurious bit takes over and test accuracy collapses
j = int(np.argmin(np.abs(land.w_spu - 1.5)))
i = int(np.argmin(np.abs(land.w_inv - 0.3)))
print(f"\nat w = ({land.w_inv[i]:.2f}, {land.w_spu[j]:.2f}): "
      f"train acc {land['accuracy_train'][i, j]:.3f}, test acc {land['accuracy_test'][i, j]:.3f}")
