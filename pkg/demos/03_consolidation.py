# Consolidation removes closed units without changing the output
#
# A unit whose gate sits at zero contributes nothing in evaluation mode. Dropping
# its row in the dynamic layer and the matching column in the next layer gives
# a smaller network with the same function.
# Run: python3 demos/03_consolidation.py

import numpy as np

from dyncap import AdaptiveLinear, DynamicLinear, ModelGraph, consolidate, forward, profile
from dyncap.layers import loads, dumps, summary
from dyncap.rng import RngStream

rng = RngStream(3)
dcl = DynamicLinear.create(10, 8, activation="tanh", rng=rng.child("dcl"))
acl = AdaptiveLinear.create(dcl, 4, rng=rng.child("acl"))
model = ModelGraph([dcl, acl])
dcl.gate.set_lambdas([0.95, 0.0, 0.7, 0.0, 0.0, 0.8, 0.6, 0.0])

small = consolidate(model)
print(summary(model))
print(summary(small))

x = rng.child("x").normal((100, 10))
diff = np.abs(forward(model, x).data - forward(small, x).data).max()
print("max output difference:", diff)
print("FLOPs per frame:", profile(model).flops_per_frame, "->", profile(small).flops_per_frame)

# The binary format round-trips exactly.
again = loads(dumps(small))
print("reloaded model identical:", np.array_equal(forward(again, x).data, forward(small, x).data))
