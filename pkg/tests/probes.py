"""Closed-form stand-in models with the QA model's call signature.

For instance n with first token t the probe predicts
    P[n, a] = sigmoid(sum_i C[t][a, i] * mean_k V[n, i, k] + B[t][a])
so S(a, v_i) = sigmoid'(z_a) * C[t][a, i] exactly.
"""
from types import SimpleNamespace

import numpy as np

from selfcrit import autodiff as ad
from selfcrit.autodiff import Tensor


class LinearProbe:
    def __init__(self, C, B):
        self.C = [np.asarray(c, dtype=np.float64) for c in C]
        self.B = [np.asarray(b, dtype=np.float64) for b in B]
        A = self.C[0].shape[0]
        self.config = SimpleNamespace(n_answers=A)

    def __call__(self, V, tokens, object_mask=None):
        V = ad.as_tensor(V)
        n, K, _ = V.shape
        A = self.config.n_answers
        obj_sum = ad.scale(ad.sum_(V, 2), 1.0 / V.shape[2])   # (n, K)
        rows = []
        for r, toks in enumerate(tokens):
            t = toks[0]
            row = ad.reshape(ad.take(obj_sum, [r], 0), (1, K))
            z = ad.add(ad.matmul(row, Tensor(self.C[t].T)), Tensor(self.B[t][None, :]))
            rows.append(z)
        return ad.sigmoid(ad.concat(rows, 0))

    def sensitivity(self, t, a, i):
        # valid for all-zero features, where z = B
        return sigma_prime(self.B[t][a]) * self.C[t][a, i]


def sigma_prime(x):
    s = 1 / (1 + np.exp(-x))
    return s * (1 - s)
