"""Independent numpy re-computation of the hand-case values frozen into the Rust tests.

Run with `python3 oracle_values.py`; nothing here imports the Rust code.
"""
import numpy as np

np.set_printoptions(precision=17)


def softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def forward(ws, bs, masks, x):
    h = np.asarray(x, dtype=float)
    for i, (w, b, m) in enumerate(zip(ws, bs, masks)):
        z = (np.asarray(w) * np.asarray(m)) @ h + np.asarray(b)
        h = np.tanh(z) if i + 1 < len(ws) else softmax(z)
    return h


W1 = [[0.5, -0.3], [0.1, 0.8], [-0.6, 0.2], [0.4, 0.4]]
B1 = [0.1, -0.2, 0.0, 0.05]
W2 = [[0.3, -0.5, 0.2, 0.7], [-0.4, 0.6, 0.1, -0.2], [0.25, 0.05, -0.3, 0.4]]
B2 = [0.0, 0.1, -0.1]
X = [0.7, -1.2]
MASKS = [
    ([[1, 0], [1, 1], [0, 1], [1, 1]], [[1, 1, 0, 1], [0, 1, 1, 1], [1, 0, 1, 1]]),
    ([[1, 1], [0, 1], [1, 1], [1, 0]], [[0, 1, 1, 1], [1, 1, 0, 1], [1, 1, 1, 0]]),
    ([[0, 1], [1, 0], [1, 1], [0, 1]], [[1, 0, 1, 0], [1, 1, 1, 1], [0, 1, 1, 1]]),
]

print("forward mask0:", forward([W1, W2], [B1, B2], MASKS[0], X).tolist())
pm = np.array([forward([W1, W2], [B1, B2], m, X) for m in MASKS])
print("predictive matrix:", pm.tolist())


def H(p):
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


print("entropy [0.7,0.2,0.1]:", H([0.7, 0.2, 0.1]))
rows = np.array([[0.8, 0.2], [0.6, 0.4]])
print("curiosity:", H(rows.mean(0)) - np.mean([H(r) for r in rows]))


def joint(p1, p2):
    return p1.T @ p2 / p1.shape[0]


def mi(pool, tests):
    total = 0.0
    pbar = pool.mean(0)
    for t in tests:
        P = joint(pool, t)
        qbar = t.mean(0)
        for a in range(P.shape[0]):
            for b in range(P.shape[1]):
                if P[a, b] > 1e-15:
                    total += P[a, b] * np.log(P[a, b] / (pbar[a] * qbar[b]))
    return total


def gram(pm):
    m = pm.shape[0]
    mean = pm.mean(0)
    return (pm / mean) @ pm.T / m


def fast(pool, tests):
    ts = sum(gram(t) for t in tests)
    return 0.5 * ((gram(pool) * ts).sum() - len(tests))


Q1 = np.array([[0.8, 0.2], [0.6, 0.4]])
Q2 = np.array([[0.9, 0.1], [0.5, 0.5]])
print("joint 2x2:", joint(Q1, Q2).tolist())
print("mi 2x2:", mi(Q1, [Q2]))

# M=2, J=3, T=2 hand case
TEST = [
    np.array([[0.7, 0.2, 0.1], [0.2, 0.5, 0.3]]),
    np.array([[0.1, 0.1, 0.8], [0.3, 0.3, 0.4]]),
]
POOL = [
    np.array([[0.6, 0.3, 0.1], [0.1, 0.3, 0.6]]),
    np.array([[0.4, 0.4, 0.2], [0.3, 0.4, 0.3]]),
    np.array([[0.9, 0.05, 0.05], [0.05, 0.9, 0.05]]),
    np.array([[0.2, 0.2, 0.6], [0.2, 0.3, 0.5]]),
    np.array([[0.5, 0.25, 0.25], [0.3, 0.3, 0.4]]),
]
print("test summary:", sum(gram(t) for t in TEST).reshape(-1).tolist())
print("fast:", [fast(p, TEST) for p in POOL])
print("exact:", [mi(p, TEST) for p in POOL])
