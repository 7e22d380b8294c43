"""
The two numerical workhorses
============================

The proxy and policy are small tanh networks with hand-written reverse
mode; hardware extraction runs CMA-ES.  Both are checked here against
simple references.
"""
import numpy as np

from tendonopt import nn
from tendonopt.cma import CmaConfig, cmaes_minimize

net = nn.init_network([5, 16, 16, 3], seed=1)
x = np.random.default_rng(0).normal(size=(4, 5))
g = np.random.default_rng(1).normal(size=(4, 3))
print("relative FD error (params, input):", nn.gradient_check(net, x, g))

# fit y = 2x with Adam
rng = np.random.default_rng(2)
lin = nn.init_network([1, 1], seed=0)  # no hidden layer, so linear
for step in range(1, 301):
    xs = rng.uniform(-1, 1, size=(32, 1))
    out, tape = nn.net_forward(lin, xs)
    grads, _ = nn.net_backward(lin, tape, 2 * (out - 2 * xs) / len(xs))
    lin = nn.adam_update(lin, grads, 0.05, step)
print("fitted slope:", float(lin.weights[0][0, 0]))


def rosenbrock(v):
    return (1 - v[0]) ** 2 + 100 * (v[1] - v[0] ** 2) ** 2


res = cmaes_minimize(rosenbrock, np.array([-1.0, 1.5]), CmaConfig(max_evals=4000, seed=0))
print("rosenbrock best", res.best_x.round(6), "after", res.evals, "evals")
