"""Two-Gaussian flow fixture with a UNSW-NB15-like column layout.

Benign and attack rows are drawn from isotropic unit Gaussians whose means sit
``separation`` apart (Euclidean).  To exercise the whole preprocessing path the
file also carries an ``id`` column, an ``attack_cat`` tag, two categorical
columns, a heavy-tailed byte counter (triggers winsorization), a constant column
(dropped by the scaler) and a few exact duplicate rows.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

PROTOS = ["tcp", "udp", "arp", "ospf", "icmp", "igmp", "sctp", "gre"]
STATES = ["FIN", "INT", "CON", "REQ", "RST"]
ATTACKS = ["Exploits", "DoS", "Generic", "Reconnaissance", "Fuzzers"]


def two_gaussians(n=10_000, dim=20, separation=4.5, attack_fraction=0.55, seed=0):
    """Return ``(X, y)`` with ``dim`` Gaussian features."""
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < attack_fraction).astype(np.int8)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    X = rng.normal(size=(n, dim)) + np.outer(y - 0.5, direction * separation)
    return X, y


def flow_frame(n=10_000, dim=20, separation=4.5, attack_fraction=0.55, seed=0, extras=True, duplicates=25):
    """A DataFrame with ``dim`` Gaussian feature columns ``f00..``.

    With ``extras`` it also gets the heavy-tailed counter, the constant column and the
    two categorical columns, so the encoded width exceeds ``dim``.
    """
    X, y = two_gaussians(n, dim, separation, attack_fraction, seed)
    rng = np.random.default_rng(seed + 1)
    cols = {"id": np.arange(1, n + 1)}
    for j in range(dim):
        cols[f"f{j:02d}"] = X[:, j]
    if extras:
        cols["sbytes"] = np.round(rng.pareto(1.2, size=n) * 100.0 + 40.0, 3)
        cols["swin"] = np.full(n, 255.0)
        cols["proto"] = rng.choice(PROTOS, size=n, p=[0.45, 0.25, 0.1, 0.06, 0.05, 0.04, 0.03, 0.02])
        cols["state"] = rng.choice(STATES, size=n)
    cols["attack_cat"] = np.where(y == 1, rng.choice(ATTACKS, size=n), "Normal")
    cols["label"] = y
    frame = pd.DataFrame(cols)
    if duplicates:
        src = rng.choice(n, size=duplicates, replace=False)
        dup = frame.iloc[src].copy()
        dup["id"] = np.arange(n + 1, n + 1 + duplicates)
        frame = pd.concat([frame, dup], ignore_index=True)
    return frame


def write_flow_csv(path, **kwargs):
    flow_frame(**kwargs).to_csv(path, index=False, float_format="%.17g")
    return path
