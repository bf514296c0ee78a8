"""Shared test helpers: an independent classical LARS oracle and small
dataset builders."""

import numpy as np
import pytest

from flars.representation import FunctionalSample, TimeGrid


def classical_lars_oracle(X, y):
    """Least angle regression implemented directly from its definition.

    Predictors must be centered with unit L2 norm, the response centered.
    Returns (selection order, step distances gamma, final fit mu).
    """
    n, p = X.shape
    mu = np.zeros(n)
    active, signs, order, gammas = [], [], [], []
    for _ in range(p):
        c = X.T @ (y - mu)
        C = np.max(np.abs(c))
        if not active:
            j = int(np.argmax(np.abs(c)))
            active.append(j)
            signs.append(np.sign(c[j]))
            order.append(j)
        Xa = X[:, active] * np.array(signs)
        G = Xa.T @ Xa
        Gi1 = np.linalg.solve(G, np.ones(len(active)))
        Aa = 1.0 / np.sqrt(np.sum(Gi1))
        u = Xa @ (Aa * Gi1)
        a = X.T @ u
        if len(active) == p:
            gamma = C / Aa
            mu = mu + gamma * u
            gammas.append(gamma)
            break
        candidates = []
        for j in range(p):
            if j in active:
                continue
            for val in ((C - c[j]) / (Aa - a[j]), (C + c[j]) / (Aa + a[j])):
                if val > 1e-12:
                    candidates.append((val, j))
        gamma, j_new = min(candidates)
        mu = mu + gamma * u
        gammas.append(gamma)
        c_next = X.T @ (y - mu)
        active.append(j_new)
        signs.append(np.sign(c_next[j_new]))
        order.append(j_new)
    return order, gammas, mu


@pytest.fixture
def rng():
    return np.random.default_rng(20260823)


def write_dataset(directory, n=40, q=25, n_subjects=8, seed=0, with_missing=0):
    """Write a small CSV dataset plus manifest; returns the manifest path.

    The response depends on the functional variable f1, the scalar z1 and a
    smooth per-subject effect in the age covariate.
    """
    import csv
    import os

    rng_ = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, q)
    x1 = make_functional(rng_, n=n, q=q).values
    x2 = make_functional(rng_, n=n, q=q).values
    z1 = rng_.standard_normal(n)
    z2 = rng_.standard_normal(n)
    age = rng_.uniform(40, 80, size=n)
    subject = np.repeat(np.arange(n_subjects), int(np.ceil(n / n_subjects)))[:n]
    visit = np.concatenate([np.arange(np.sum(subject == s))
                            for s in range(n_subjects)]).astype(float)
    y = x1 @ np.sin(2 * np.pi * t) / q + 2.0 * z1 + 0.05 * rng_.standard_normal(n)
    for s in range(n_subjects):
        y[subject == s] += rng_.normal(scale=0.5)

    def dump(name, header, rows):
        path = os.path.join(directory, name)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        return path

    resp_rows = [[repr(float(y[i])), str(int(subject[i])), repr(float(visit[i]))]
                 for i in range(n)]
    for i in range(with_missing):
        resp_rows[i][0] = "NA"
    dump("response.csv", ["y", "subject", "visit"], resp_rows)
    dump("scalars.csv", ["z1", "z2", "age"],
         [[repr(float(z1[i])), repr(float(z2[i])), repr(float(age[i]))]
          for i in range(n)])
    dump("grid.csv", [f"t{j}" for j in range(q)], [[repr(float(v)) for v in t]])
    for name, mat in (("f1.csv", x1), ("f2.csv", x2)):
        dump(name, [f"t{j}" for j in range(q)],
             [[repr(float(v)) for v in row] for row in mat])
    manifest = os.path.join(directory, "manifest.yaml")
    with open(manifest, "w") as fh:
        fh.write(
            "response: response.csv\n"
            "scalars: scalars.csv\n"
            "subject_column: subject\n"
            "visit_column: visit\n"
            "functional:\n"
            "  - {id: f1, curves: f1.csv, grid: grid.csv}\n"
            "  - {id: f2, curves: f2.csv, grid: grid.csv}\n"
        )
    return manifest


def make_functional(rng, n=40, q=50, span=(0.0, 1.0), length_scale=0.2):
    """Smooth random curves on a common grid (squared-exponential paths)."""
    t = np.linspace(span[0], span[1], q)
    d = t[:, None] - t[None, :]
    K = np.exp(-0.5 * (d / length_scale) ** 2) + 1e-10 * np.eye(q)
    chol = np.linalg.cholesky(K)
    vals = rng.standard_normal((n, q)) @ chol.T
    return FunctionalSample(vals, TimeGrid(t))
