"""Shared test oracles: finite differences and brute-force metric baselines."""

import numpy as np

import notebench.tensor as nt


def fd_max_rel_err(build, tensors, h=1e-5, rng=None, coords_per_tensor=None):
    """Max relative error between analytic and central-FD gradients.

    ``build()`` must rebuild the scalar loss from the current tensor values.
    When ``coords_per_tensor`` is set, only that many randomly chosen
    coordinates per tensor are probed (for large parameter sets); otherwise
    every coordinate is checked.  The denominator is floored at 1e-3 so the
    comparison is absolute for gradients below that scale, where the FD
    noise floor (~1e-10 at double precision) would dominate a pure ratio.
    """
    loss = build()
    nt.backward(loss)
    worst = 0.0
    for t in tensors:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        if coords_per_tensor is None or flat.size <= coords_per_tensor:
            idxs = range(flat.size)
        else:
            idxs = rng.choice(flat.size, size=coords_per_tensor, replace=False)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + h
            up = float(build().data)
            flat[idx] = orig - h
            down = float(build().data)
            flat[idx] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(numeric), abs(gflat[idx]), 1e-3)
            worst = max(worst, abs(numeric - gflat[idx]) / denom)
    return worst


def auroc_pair_counting(scores, labels):
    """O(n^2) Mann-Whitney AUROC: wins count 1, ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def average_precision_by_hand(scores, labels):
    """Step-wise average precision with ties broken by original index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx] == 1:
            hits += 1
            total += hits / rank
    n_pos = sum(1 for l in labels if l == 1)
    return total / n_pos


def aggregate_by_hand(rule_kind, probs, scale=2.0):
    """Loop-based re-evaluation of each aggregation rule, left to right."""
    if rule_kind == "min":
        best = probs[0]
        for p in probs[1:]:
            if p < best:
                best = p
        return best
    if rule_kind == "max":
        best = probs[0]
        for p in probs[1:]:
            if p > best:
                best = p
        return best
    acc = 0.0
    for p in probs:
        acc += p
    mean = acc / len(probs)
    if rule_kind == "mean":
        return mean
    mx = probs[0]
    for p in probs[1:]:
        if p > mx:
            mx = p
    w = len(probs) / scale
    return (mx + mean * w) / (1.0 + w)


def random_graph_case(rng):
    """One random composed graph: (build closure, leaf tensors)."""
    from notebench.tensor import Tensor

    rows = int(rng.integers(2, 5))
    mid = int(rng.integers(2, 5))
    cols = int(rng.integers(2, 5))
    a = Tensor(rng.normal(size=(rows, mid)), requires_grad=True)
    b = Tensor(rng.normal(size=(mid, cols)), requires_grad=True)
    gamma = Tensor(rng.normal(size=(cols,)), requires_grad=True)
    beta = Tensor(rng.normal(size=(cols,)), requires_grad=True)
    bias = Tensor(rng.normal(size=(cols,)), requires_grad=True)
    path = int(rng.integers(4))

    def build():
        h = nt.matmul(a, b)
        h = nt.add(h, bias)
        if path == 0:
            h = nt.gelu(h)
            h = nt.layer_norm(h, gamma, beta)
        elif path == 1:
            h = nt.tanh(h)
            h = nt.softmax(h)
            h = nt.mul(h, h)
        elif path == 2:
            h = nt.layer_norm(h, gamma, beta)
            h = nt.sigmoid(h)
        else:
            h = nt.softmax(nt.gelu(h))
            h = nt.add(h, bias)
        return nt.tmean(nt.mul(h, h))

    return build, [a, b, gamma, beta, bias]
