"""Shared oracles for the test-suite: finite differences, scalar-loop losses,
closed-form complexity counts."""
from __future__ import annotations

import math

import numpy as np

from dinspoof.layers import GradientTape, ParameterStore
from dinspoof.losses import BONAFIDE

H = 1e-4
FD_FLOOR = 1e-6  # gradients below this are compared on an absolute scale


def numeric_grad(f, arr: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every element of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), FD_FLOOR)
    return float(np.max(np.abs(a - n) / denom))


def register(layer) -> ParameterStore:
    store = ParameterStore()
    for name, p in layer.params():
        store.add(name, p)
    return store


def layer_grad_errors(layer, x: np.ndarray, rng, training: bool = True) -> dict[str, float]:
    """Relative FD errors of input and parameter gradients for loss = sum(R * layer(x))."""
    store = register(layer)
    y = layer.forward(x, training)
    R = rng.standard_normal(y.shape)
    tape = GradientTape()
    dx = layer.backward(R, tape)

    def f():
        return float(np.sum(layer.forward(x, training) * R))

    errs = {"input": rel_error(dx, numeric_grad(f, x))}
    for name, p in store.items():
        if not p.trainable:
            continue
        analytic = tape.get(name, np.zeros_like(p.value))
        errs[name] = rel_error(analytic, numeric_grad(f, p.value))
    return errs


# --- scalar-loop loss oracles ------------------------------------------------

def _unit(v):
    return [x / math.sqrt(sum(y * y for y in v)) for x in v]


def phi_scalar(theta: float, m: int) -> float:
    k = min(int(math.floor(m * theta / math.pi)), m - 1)
    return (-1) ** k * math.cos(m * theta) - 2 * k


def a_softmax_loop(Y, labels, W, m, s) -> float:
    n, c = len(Y), len(W[0])
    cols = [_unit([W[r][j] for r in range(len(W))]) for j in range(c)]
    total = 0.0
    for i in range(n):
        y = _unit(list(Y[i]))
        cos = [sum(a * b for a, b in zip(y, cols[j])) for j in range(c)]
        lab = int(labels[i])
        theta = math.acos(max(-1.0, min(1.0, cos[lab])))
        terms = [s * phi_scalar(theta, m)] + [s * cos[j] for j in range(c) if j != lab]
        mx = max(terms)
        total += -(terms[0] - mx - math.log(sum(math.exp(t - mx) for t in terms)))
    return total / n


def contrastive_loop(Z, groups, tau, include_bonafide=True) -> float:
    n = len(Z)
    z = [_unit(list(r)) for r in Z]
    active = [include_bonafide or int(g) != BONAFIDE for g in groups]
    per_anchor = []
    for a in range(n):
        if not active[a]:
            continue
        pos = [p for p in range(n) if p != a and active[p] and groups[p] == groups[a]]
        if not pos:
            continue
        neg = [j for j in range(n) if active[j] and groups[j] != groups[a]]
        sim = lambda j: sum(x * y for x, y in zip(z[a], z[j])) / tau  # noqa: E731
        acc = 0.0
        for p in pos:
            exps = [sim(p)] + [sim(j) for j in neg]
            mx = max(exps)
            acc += -(exps[0] - mx - math.log(sum(math.exp(e - mx) for e in exps)))
        per_anchor.append(acc / len(pos))
    return sum(per_anchor) / len(per_anchor) if per_anchor else 0.0


def center_loop(X, mask, c) -> float:
    rows = [X[i] for i in range(len(X)) if mask[i]]
    if not rows:
        return 0.0
    return sum(sum((a - b) ** 2 for a, b in zip(r, c)) for r in rows) / len(rows)


def cross_entropy_loop(logits, labels) -> float:
    total = 0.0
    for row, lab in zip(logits, labels):
        mx = max(row)
        total += -(row[int(lab)] - mx - math.log(sum(math.exp(v - mx) for v in row)))
    return total / len(logits)


# --- closed-form complexity ----------------------------------------------------

def closed_form_counts(cfg, heads: str = "entropy") -> tuple[int, int]:
    """Independent per-layer (parameters, FLOPs) tally for a DinConfig.

    Conventions: 2 FLOPs per MAC; BN and GELU 2 per element; residual add 1
    per element; max pooling 1 per input element; FC 2*din*dout plus dout for bias.
    """
    params = flops = 0
    h, w = cfg.input_height, cfg.input_width

    def ceil_div(a, b):
        return -(-a // b)

    def bn_gelu(c, hh, ww):
        return 2 * c, 4 * c * hh * ww

    kh, kw = cfg.stem_kernel
    c = cfg.stem_channels
    h, w = ceil_div(h, cfg.stem_stride), ceil_div(w, cfg.stem_stride)
    params += cfg.in_channels * c * kh * kw
    flops += 2 * cfg.in_channels * c * kh * kw * h * w
    p, f = bn_gelu(c, h, w)
    params, flops = params + p, flops + f

    for cout, stride in zip(cfg.block_channels, cfg.block_strides):
        cin = c
        ho, wo = ceil_div(h, stride), ceil_div(w, stride)
        q = cout // 4
        # branch a: pointwise (strided) -> BN -> GELU
        params += cin * q
        flops += 2 * cin * q * ho * wo
        p, f = bn_gelu(q, ho, wo)
        params, flops = params + p, flops + f
        for kh_, kw_ in ((3, 3), (3, 1), (5, 1)):
            params += cin * kh_ * kw_
            flops += 2 * cin * kh_ * kw_ * ho * wo
            p, f = bn_gelu(cin, ho, wo)
            params, flops = params + p, flops + f
            params += cin * q
            flops += 2 * cin * q * ho * wo
            p, f = bn_gelu(q, ho, wo)
            params, flops = params + p, flops + f
        if cin != cout or stride != 1:
            params += cin * cout + 2 * cout
            flops += 2 * cin * cout * ho * wo + 2 * cout * ho * wo
        flops += cout * ho * wo  # residual add
        c, h, w = cout, ho, wo

    flops += c * h * w  # global max pool
    D = c
    if heads == "entropy":
        params += D * cfg.entropy_classes + cfg.entropy_classes
        flops += 2 * D * cfg.entropy_classes + cfg.entropy_classes
    else:
        hid, dz, k = cfg.softmax_head_hidden, cfg.contrastive_dim, cfg.n_classes_stage1
        params += D * hid + hid + 2 * hid  # fc + BN
        params += hid * k  # class weight matrix
        params += D * dz + dz + 2 * dz + dz * dz + dz + 2 * dz
    return params, flops


# --- acceptance reporting --------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def report(n: int, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
