"""Straight-loop float64 reference implementations, independent of the tape."""

from __future__ import annotations

import math


def covariance(x, y):
    d = len(x)
    mx = sum(x) / d
    my = sum(y) / d
    return [[(x[r] - mx) * (y[c] - my) for c in range(d)] for r in range(d)]


def flat_cosine(a, b):
    dot = na = nb = 0.0
    for ra, rb in zip(a, b):
        for u, v in zip(ra, rb):
            dot += u * v
            na += u * u
            nb += v * v
    na, nb = math.sqrt(na), math.sqrt(nb)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return dot / (na * nb)


def triplet(c_a, pos, neg):
    return (1.0 - flat_cosine(c_a, pos)) + (1.0 + flat_cosine(c_a, neg))


def objective(batch):
    total = 0.0
    for c_a, pos, neg in batch:
        total += triplet(c_a, pos, neg)
    return total


def car(pairs):
    total = 0.0
    for c_a, c_gen in pairs:
        total += 1.0 - flat_cosine(c_a, c_gen)
    return total / len(pairs)
