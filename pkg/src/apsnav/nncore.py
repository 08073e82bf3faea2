"""Minimal reverse-mode differentiable numeric core.

Dense float64 tensors with a per-forward backward graph, the handful of ops
the navigation/speaker/sampler models need (LSTM cell, bilinear attention,
softmax, cross-entropy), Adam with decoupled weight decay, a finite-difference
gradient checker, and the binary checkpoint format shared by every model.

Everything is 64-bit and deterministic: identical inputs produce bit-identical
outputs, which the reproducibility tests rely on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"APSN"
CHECKPOINT_VERSION = 1
OPT_PREFIX = "opt/"
META_PREFIX = "meta/"

PROB_FLOOR = 1e-12


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode autodiff.

    Rank is capped at 3. Leaf tensors created with ``requires_grad=True``
    accumulate into ``.grad``; interior nodes carry a backward closure that
    routes gradient to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ValueError("tensor rank must be <= 3, got %d" % arr.ndim)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, requires_grad={self.requires_grad})"


def const(data) -> Tensor:
    """Wrap raw data as a non-differentiable leaf."""
    return Tensor(data)


def _node(data, parents, backward) -> Tensor:
    needs = any(p.requires_grad or p._parents for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, parents=parents, backward=backward)


def backward(loss: Tensor, params: "ParamSet | None" = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    ``loss`` must be scalar. If ``params`` is given, every parameter gets a
    (possibly zero) gradient array even when it did not participate in this
    forward pass, so the optimizer can treat the set uniformly.
    """
    if loss.data.shape != ():
        raise ValueError("backward expects a scalar loss")
    if params is not None:
        for t in params.tensors():
            t.ensure_grad()

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and (p._parents or p.requires_grad):
                stack.append((p, False))

    loss.ensure_grad()
    loss.grad[...] = 1.0
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.dims != b.dims:
        raise ValueError(f"add shape mismatch {a.dims} vs {b.dims}")
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            a.ensure_grad()
            a.grad += g
        if b.requires_grad or b._parents:
            b.ensure_grad()
            b.grad += g

    return _node(out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.dims != b.dims:
        raise ValueError(f"mul shape mismatch {a.dims} vs {b.dims}")
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            a.ensure_grad()
            a.grad += g * b.data
        if b.requires_grad or b._parents:
            b.ensure_grad()
            b.grad += g * a.data

    return _node(out_data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out_data = a.data * s

    def bwd(g):
        if a.requires_grad or a._parents:
            a.ensure_grad()
            a.grad += g * s

    return _node(out_data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product covering the (1|2)-rank combinations."""
    out_data = a.data @ b.data
    an, bn = a.data.ndim, b.data.ndim

    def bwd(g):
        if a.requires_grad or a._parents:
            a.ensure_grad()
            if an == 1 and bn == 2:
                a.grad += b.data @ g
            elif an == 2 and bn == 1:
                a.grad += np.outer(g, b.data)
            elif an == 2 and bn == 2:
                a.grad += g @ b.data.T
            else:  # dot product
                a.grad += g * b.data
        if b.requires_grad or b._parents:
            b.ensure_grad()
            if an == 1 and bn == 2:
                b.grad += np.outer(a.data, g)
            elif an == 2 and bn == 1:
                b.grad += a.data.T @ g
            elif an == 2 and bn == 2:
                b.grad += a.data.T @ g
            else:
                b.grad += g * a.data

    return _node(out_data, (a, b), bwd)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-1 tensors (scalars are treated as length-1)."""
    flats = [p.data.reshape(-1) if p.data.ndim == 0 else p.data for p in parts]
    if any(f.ndim != 1 for f in flats):
        raise ValueError("concat expects scalars or rank-1 tensors")
    out_data = np.concatenate(flats)
    offsets = np.cumsum([0] + [f.shape[0] for f in flats])

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad or p._parents:
                p.ensure_grad()
                seg = g[lo:hi]
                if p.data.ndim == 0:
                    p.grad += seg[0]
                else:
                    p.grad += seg

    return _node(out_data, tuple(parts), bwd)


def slice1(a: Tensor, lo: int, hi: int) -> Tensor:
    out_data = a.data[lo:hi].copy()

    def bwd(g):
        if a.requires_grad or a._parents:
            a.ensure_grad()
            a.grad[lo:hi] += g

    return _node(out_data, (a,), bwd)


def row(a: Tensor, i: int) -> Tensor:
    """Select row ``i`` of a rank-2 tensor (embedding lookup)."""
    out_data = a.data[i].copy()

    def bwd(g):
        if a.requires_grad or a._parents:
            a.ensure_grad()
            a.grad[i] += g

    return _node(out_data, (a,), bwd)


def pick(a: Tensor, i: int) -> Tensor:
    """Select element ``i`` of a rank-1 tensor as a scalar."""
    out_data = np.float64(a.data[i])

    def bwd(g):
        if a.requires_grad or a._parents:
            a.ensure_grad()
            a.grad[i] += g

    return _node(out_data, (a,), bwd)


def stack_rows(rows_: Sequence[Tensor]) -> Tensor:
    """Stack rank-1 tensors of equal length into a rank-2 tensor."""
    out_data = np.stack([r.data for r in rows_])

    def bwd(g):
        for k, r in enumerate(rows_):
            if r.requires_grad or r._parents:
                r.ensure_grad()
                r.grad += g[k]

    return _node(out_data, tuple(rows_), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        if a.requires_grad or a._parents:
            a.ensure_grad()
            a.grad += g * out_data * (1.0 - out_data)

    return _node(out_data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad or a._parents:
            a.ensure_grad()
            a.grad += g * (1.0 - out_data * out_data)

    return _node(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def bwd(g):
        if a.requires_grad or a._parents:
            a.ensure_grad()
            a.grad += g / a.data

    return _node(out_data, (a,), bwd)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    out_data = np.maximum(a.data, floor)

    def bwd(g):
        if a.requires_grad or a._parents:
            a.ensure_grad()
            a.grad += g * (a.data >= floor)

    return _node(out_data, (a,), bwd)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.float64(a.data.mean())

    def bwd(g):
        if a.requires_grad or a._parents:
            a.ensure_grad()
            a.grad += g / n

    return _node(out_data, (a,), bwd)


def mean_scalars(parts: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of scalar tensors."""
    if not parts:
        raise ValueError("mean over empty sequence")
    n = len(parts)
    out_data = np.float64(sum(float(p.data) for p in parts) / n)

    def bwd(g):
        for p in parts:
            if p.requires_grad or p._parents:
                p.ensure_grad()
                p.grad += g / n

    return _node(out_data, tuple(parts), bwd)


def sum_scalars(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("sum over empty sequence")
    out_data = np.float64(sum(float(p.data) for p in parts))

    def bwd(g):
        for p in parts:
            if p.requires_grad or p._parents:
                p.ensure_grad()
                p.grad += g

    return _node(out_data, tuple(parts), bwd)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate <= 0.0:
        return a
    mask = (rng.random(a.dims) >= rate) / (1.0 - rate)
    return mul(a, const(mask))


def sample_index(rng: np.random.Generator, probs: np.ndarray) -> int:
    """Draw an index from a probability vector via inverse CDF."""
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, rng.random(), side="right"),
                   len(probs) - 1))


def softmax(logits: Tensor) -> Tensor:
    """Max-shifted softmax over a rank-1 tensor."""
    if logits.data.ndim != 1 or logits.data.size < 1:
        raise ValueError("softmax expects a non-empty rank-1 tensor")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("softmax input must be finite")
    shifted = logits.data - logits.data.max()
    e = np.exp(shifted)
    out_data = e / e.sum()

    def bwd(g):
        if logits.requires_grad or logits._parents:
            logits.ensure_grad()
            dot = float(g @ out_data)
            logits.grad += out_data * (g - dot)

    return _node(out_data, (logits,), bwd)


def cross_entropy(probs: Tensor, target: int) -> Tensor:
    """Negative log probability of ``target``, floored at 1e-12."""
    n = probs.data.size
    if not (0 <= target < n):
        raise ValueError(f"target {target} out of range for {n} classes")
    return scale(log(clamp_min(pick(probs, target), PROB_FLOOR)), -1.0)


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamSet:
    """Ordered collection of named leaf tensors plus their gradients."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, shape: tuple[int, ...],
            rng: np.random.Generator | None = None,
            fan_in: int | None = None) -> Tensor:
        """Add a parameter initialized uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).

        ``fan_in`` defaults to the last dimension; pass it explicitly for
        rank-1 parameters. ``rng=None`` gives zeros (biases).
        """
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if rng is None:
            data = np.zeros(shape)
        else:
            if fan_in is None:
                fan_in = shape[-1]
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, shape)
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def put(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def tensors(self) -> Iterable[Tensor]:
        return self._params.values()

    def grads(self) -> dict[str, np.ndarray]:
        return {n: t.ensure_grad() for n, t in self._params.items()}

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for n, t in self._params.items():
            out.put(n, t.data.copy())
        return out

    def load_from(self, other: "ParamSet") -> None:
        if self.names() != other.names():
            raise ValueError("parameter name mismatch")
        for n, t in self._params.items():
            t.data[...] = other[n].data

    def equal_bits(self, other: "ParamSet") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(t.data, other[n].data)
                   for n, t in self._params.items())

    def l2_distance(self, other: "ParamSet") -> float:
        return float(np.sqrt(sum(((t.data - other[n].data) ** 2).sum()
                                 for n, t in self._params.items())))


@dataclass
class AdamState:
    """Adam moments plus hyperparameters for one ParamSet."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, lr: float,
                   weight_decay: float = 0.0) -> "AdamState":
        s = cls(lr=lr, weight_decay=weight_decay)
        for name, t in params.items():
            s.m[name] = np.zeros_like(t.data)
            s.v[name] = np.zeros_like(t.data)
        return s


def adam_step(params: ParamSet, state: AdamState) -> tuple[ParamSet, AdamState]:
    """Bias-corrected Adam update with decoupled weight decay.

    Decay shrinks the parameter before the adaptive step; gradients are
    zeroed afterwards. Raises if any parameter is missing its gradient.
    """
    for name, t in params.items():
        if t.grad is None:
            raise RuntimeError(f"missing gradient for parameter {name!r}")
    state.step_count += 1
    t_ = state.step_count
    c1 = 1.0 - state.beta1 ** t_
    c2 = 1.0 - state.beta2 ** t_
    for name, p in params.items():
        g = p.grad
        if state.weight_decay != 0.0:
            p.data *= 1.0 - state.lr * state.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad[...] = 0.0
    return params, state


# ---------------------------------------------------------------------------
# shared model pieces


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, p: ParamSet,
              prefix: str = "") -> tuple[Tensor, Tensor]:
    """One LSTM step with fused gate weights.

    Expects ``{prefix}W`` of shape (4H, d_in + H) and ``{prefix}b`` of shape
    (4H,); gate order is input, forget, cell, output.
    """
    w = p[prefix + "W"]
    b = p[prefix + "b"]
    hsz = h.data.shape[0]
    if w.dims != (4 * hsz, x.data.shape[0] + hsz) or b.dims != (4 * hsz,):
        raise ValueError("lstm_cell parameter shapes inconsistent with inputs")
    z = add(matmul(w, concat([x, h])), b)
    i = sigmoid(slice1(z, 0, hsz))
    f = sigmoid(slice1(z, hsz, 2 * hsz))
    g = tanh(slice1(z, 2 * hsz, 3 * hsz))
    o = sigmoid(slice1(z, 3 * hsz, 4 * hsz))
    c2 = add(mul(f, c), mul(i, g))
    h2 = mul(o, tanh(c2))
    return h2, c2


def attention(query: Tensor, keys: Tensor, p: ParamSet,
              prefix: str = "") -> tuple[Tensor, Tensor]:
    """Bilinear attention: weights = softmax((q Wh) . (K Wf)^T), context = weights . K.

    ``{prefix}Wh`` projects the query, ``{prefix}Wf`` the keys, into a shared
    space. ``keys`` is (m, d_f) with m >= 1.
    """
    if keys.data.ndim != 2 or keys.data.shape[0] < 1:
        raise ValueError("attention requires at least one key")
    qp = matmul(query, p[prefix + "Wh"])
    kp = matmul(keys, p[prefix + "Wf"])
    weights = softmax(matmul(kp, qp))
    context = matmul(weights, keys)
    return context, weights


def grad_check(forward: Callable[[], Tensor], params: ParamSet,
               probe_count: int = 20, seed: int = 0,
               h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central finite differences.

    ``forward`` must be a deterministic closure over ``params`` returning a
    scalar loss. Probes ``probe_count`` randomly chosen parameter scalars.
    """
    params.zero_grads()
    loss = forward()
    backward(loss, params)
    saved = {n: t.grad.copy() for n, t in params.items()}

    rng = np.random.default_rng(seed)
    names = params.names()
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    worst = 0.0
    for _ in range(probe_count):
        flat = int(rng.integers(total))
        k = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        idx = flat - int(np.cumsum(sizes)[k - 1]) if k > 0 else flat
        t = params[names[k]]
        view = t.data.reshape(-1)
        orig = view[idx]
        view[idx] = orig + h
        f_plus = float(forward().data)
        view[idx] = orig - h
        f_minus = float(forward().data)
        view[idx] = orig
        fd = (f_plus - f_minus) / (2.0 * h)
        ad = float(saved[names[k]].reshape(-1)[idx])
        err = abs(fd - ad) / max(abs(fd), abs(ad), 1e-6)
        worst = max(worst, err)
    params.zero_grads()
    return worst


# ---------------------------------------------------------------------------
# checkpoint format


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(path, params: ParamSet,
                    adam: AdamState | None = None,
                    meta: dict[str, np.ndarray] | None = None) -> None:
    """Write parameters (plus optional optimizer state and metadata) to disk."""
    entries: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in params.items()]
    if meta:
        for k, v in meta.items():
            entries.append((META_PREFIX + k, np.asarray(v, dtype=np.float64)))
    if adam is not None:
        entries.append((OPT_PREFIX + "step", np.array([adam.step_count], dtype=np.float64)))
        entries.append((OPT_PREFIX + "lr", np.array([adam.lr])))
        entries.append((OPT_PREFIX + "beta1", np.array([adam.beta1])))
        entries.append((OPT_PREFIX + "beta2", np.array([adam.beta2])))
        entries.append((OPT_PREFIX + "eps", np.array([adam.eps])))
        entries.append((OPT_PREFIX + "weight_decay", np.array([adam.weight_decay])))
        for n in params.names():
            entries.append((OPT_PREFIX + "m/" + n, adam.m[n]))
            entries.append((OPT_PREFIX + "v/" + n, adam.v[n]))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_tensor(fh, name, arr)


def load_checkpoint(path) -> tuple[ParamSet, AdamState | None, dict[str, np.ndarray]]:
    """Read a checkpoint back into (ParamSet, AdamState | None, meta dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("bad checkpoint magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    raw: dict[str, np.ndarray] = {}
    order: list[str] = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from("<" + "I" * rank, blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims).copy()
        off += 8 * n
        raw[name] = arr
        order.append(name)

    params = ParamSet()
    meta: dict[str, np.ndarray] = {}
    for name in order:
        if name.startswith(OPT_PREFIX):
            continue
        if name.startswith(META_PREFIX):
            meta[name[len(META_PREFIX):]] = raw[name]
        else:
            params.put(name, raw[name])

    adam = None
    if OPT_PREFIX + "step" in raw:
        adam = AdamState(
            lr=float(raw[OPT_PREFIX + "lr"][0]),
            beta1=float(raw[OPT_PREFIX + "beta1"][0]),
            beta2=float(raw[OPT_PREFIX + "beta2"][0]),
            eps=float(raw[OPT_PREFIX + "eps"][0]),
            weight_decay=float(raw[OPT_PREFIX + "weight_decay"][0]),
            step_count=int(raw[OPT_PREFIX + "step"][0]),
        )
        for n in params.names():
            adam.m[n] = raw[OPT_PREFIX + "m/" + n]
            adam.v[n] = raw[OPT_PREFIX + "v/" + n]
    return params, adam, meta
