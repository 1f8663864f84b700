# %% [markdown]
# # Layers, shapes and gradient checks
# Build small graphs from the layer set, run them forward, and compare the
# analytic backward pass with central differences.

# %%
import numpy as np

from gaitcnn import zoo
from gaitcnn.checks import layer_suite
from gaitcnn.nn import functional as F

rng = np.random.default_rng(0)

# %% [markdown]
# Arrays are channels-last; a 2D conv kernel is (kh, kw, Cin, Cout).

# %%
x = rng.standard_normal((8, 8, 3))
w = rng.standard_normal((3, 3, 3, 4))
y = F.conv2d(x, w, np.zeros(4), stride=2, padding=1)
print("conv2d", x.shape, "->", y.shape)

# %% [markdown]
# The model zoo infers every intermediate shape from the input cuboid.

# %%
for arch in zoo.ARCHS:
    g = zoo.build(arch, 155, "gray", width=1.0)
    print(f"{arch:9s} in {g.input_shape} -> {g.output_shape}  params {g.param_count():,}")

of = zoo.build_3dcnn(155, modality="of", width=0.25)
for name, leaf in of.leaves()[:6]:
    print(f"  {name:24s} {leaf.in_shape} -> {leaf.out_shape}")

# %% [markdown]
# One gradient-check instance per layer kind, in float64.

# %%
for kind, rep in layer_suite(seed=0, instances=1):
    print(f"{kind:22s} max rel error {rep.max_error:.2e}  {'ok' if rep.passed else 'FAIL'}")
