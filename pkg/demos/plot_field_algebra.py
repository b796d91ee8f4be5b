"""
Composing a deformation with an inverse affine
==============================================

The target field of a training pair is A1^-1 (x + phi0(x)) - x. Here we
compare the closed form against a per-voxel loop, and look at how a pure
rotation about the lattice centre turns into a displacement field.
"""

import numpy as np

from superwarp import fieldcore as fc
from superwarp.synthgen import affine_from_params

rng = np.random.default_rng(1)
shape = (9, 7)
phi0 = rng.uniform(-2, 2, (2, *shape))
A1 = affine_from_params(
    {"translate": np.array([1.5, -2.0]), "scale": np.array([1.1, 0.9]),
     "rotate": np.array([20.0]), "shear": np.array([0.01])},
    shape,
)

fast = fc.compose_ground_truth(phi0, A1).numpy()

slow = np.zeros_like(phi0)
A1_inv = np.linalg.inv(A1)
for i in range(shape[0]):
    for j in range(shape[1]):
        y = A1_inv @ np.array([i + phi0[0, i, j], j + phi0[1, i, j], 1.0])
        slow[:, i, j] = y[:2] - (i, j)

print("max difference:", np.abs(fast - slow).max())

# rotations keep the centre voxel fixed
rotation = affine_from_params(
    {"translate": np.zeros(2), "scale": np.ones(2), "rotate": np.array([30.0]), "shear": np.zeros(1)},
    (33, 33),
)
field = fc.affine_to_field(rotation, (33, 33))
print("displacement at the centre:", field[:, 16, 16].tolist())
print("displacement at a corner:", field[:, 0, 0].tolist())
