"""
Adamax on a one-dimensional quadratic
======================================

Minimise f(theta) = theta**2 with the same update rule the trainer uses and
plot the iterate and the infinity-norm accumulator.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from endoscopy_xai.training import AdamaxState, adamax_step

state, theta = AdamaxState(eta=0.01), np.array([1.0])
trace, norms = [theta[0]], [0.0]
for _ in range(400):
    state, delta = adamax_step(state, 2 * theta)
    theta = theta + delta
    trace.append(theta[0])
    norms.append(state.u[0])

print(f"theta after {state.t} steps: {theta[0]:.5f}")

fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
ax1.plot(trace)
ax1.set_title("theta")
ax2.plot(norms)
ax2.set_title("u (decayed max |g|)")
for ax in (ax1, ax2):
    ax.set_xlabel("step")
fig.tight_layout()
fig.savefig("adamax_quadratic.png", dpi=100)
