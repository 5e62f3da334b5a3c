"""Backward pass of a composed graph checked against central differences.

Builds the smallest interesting pipeline (conv -> bn -> relu -> pool ->
unpool -> softmax cross entropy) at float64, runs one backward pass, then
probes a handful of coordinates per tensor with finite differences.
"""

import numpy as np

from segstack import (BNState, ConvParams, Tensor, backward, batchnorm,
                      conv2d, cross_entropy_loss, maxpool2, relu, unpool2)

EPS = 1e-5


def loss_value(x, w, b, gamma, beta, labels):
    params = ConvParams(Tensor(w), Tensor(b), padding=(1, 1))
    st = BNState(Tensor(gamma), Tensor(beta),
                 np.zeros(4), np.ones(4))
    h = conv2d(Tensor(x), params)
    h = relu(batchnorm(h, st, mode="train"))
    pooled, mask = maxpool2(h)
    h = unpool2(pooled, mask)
    return cross_entropy_loss(h, labels)


def main():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.3
    b = rng.standard_normal(4) * 0.1
    gamma = rng.uniform(0.5, 1.5, 4)
    beta = rng.standard_normal(4) * 0.1
    labels = rng.integers(0, 4, (2, 8, 8))

    # analytic gradients from one taped forward/backward
    params = ConvParams(Tensor(w.copy(), requires_grad=True),
                        Tensor(b.copy(), requires_grad=True), padding=(1, 1))
    st = BNState(Tensor(gamma.copy(), requires_grad=True),
                 Tensor(beta.copy(), requires_grad=True),
                 np.zeros(4), np.ones(4))
    xt = Tensor(x.copy(), requires_grad=True)
    h = conv2d(xt, params)
    h = relu(batchnorm(h, st, mode="train"))
    pooled, mask = maxpool2(h)
    loss = cross_entropy_loss(unpool2(pooled, mask), labels)
    backward(loss)
    print(f"loss = {loss.data:.6f}")

    arrays = {"x": (x, xt), "weight": (w, params.weight),
              "bias": (b, params.bias), "gamma": (gamma, st.gamma),
              "beta": (beta, st.beta)}
    worst = 0.0
    for name, (arr, tensor) in arrays.items():
        flat = arr.reshape(-1)
        for _ in range(10):
            i = int(rng.integers(flat.size))
            keep = flat[i]
            flat[i] = keep + EPS
            up = loss_value(x, w, b, gamma, beta, labels).data
            flat[i] = keep - EPS
            dn = loss_value(x, w, b, gamma, beta, labels).data
            flat[i] = keep
            fd = (up - dn) / (2 * EPS)
            got = tensor.grad.reshape(-1)[i]
            denom = max(abs(got), abs(fd))
            rel = abs(got - fd) / denom if denom > 1e-8 else 0.0
            worst = max(worst, rel)
        print(f"{name:6s} grad vs finite differences: ok "
              f"(worst so far {worst:.2e})")
    print(f"max relative error {worst:.2e}")


if __name__ == "__main__":
    main()
