"""
This file contains the small differentiable building blocks the agents are made of: dense layers, ReLU MLPs, a tanh
recurrent cell and its dilated variant, all written directly against numpy with hand-derived backward passes.

Parameters live in a ParamStore (named tensors plus one gradient buffer each). Layers only hold names into a store,
so soft target updates, optimiser steps and checkpoint loads are all plain operations on stores.

Conventions: vectors are rows, every forward pass takes a batch of shape (B, n_in) and returns a cache that the
matching backward pass consumes. Backward passes accumulate parameter gradients into the store and return the
gradient with respect to the input.
"""

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ride_core.constants import *


class ParamStore:

    def __init__(self):
        self.params: Dict[str, Array] = {}
        self.grads: Dict[str, Array] = {}

    def add(self, name: str, value: Array) -> str:
        if name in self.params:
            raise ValueError(f"Parameter {name} is already registered.")
        self.params[name] = np.array(value, dtype=float)
        self.grads[name] = np.zeros_like(self.params[name])
        return name

    def __getitem__(self, name: str) -> Array:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> List[str]:
        return list(self.params)

    def accumulate(self, name: str, grad: Array):
        if grad.shape != self.grads[name].shape:
            raise ShapeError(f"Gradient for {name} has shape {grad.shape}, expected {self.grads[name].shape}.")
        self.grads[name] += grad

    def zero_grad(self):
        for grad in self.grads.values():
            grad[...] = 0.0

    def copy(self) -> "ParamStore":
        clone = ParamStore()
        for name, value in self.params.items():
            clone.add(name, value.copy())
        return clone

    def check_same_shapes(self, other: "ParamStore"):
        if self.params.keys() != other.params.keys():
            raise ShapeError(f"Parameter sets differ: {sorted(self.params.keys() ^ other.params.keys())}.")
        for name, value in self.params.items():
            if value.shape != other.params[name].shape:
                raise ShapeError(f"Shape mismatch for {name}: {value.shape} vs {other.params[name].shape}.")

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(value)) for value in self.params.values())


def soft_update(target: ParamStore, source: ParamStore, mixing: float):
    """ target <- mixing * source + (1 - mixing) * target, elementwise and in place. """
    if not 0.0 <= mixing <= 1.0:
        raise ValueError(f"Mixing factor must lie in [0, 1], got {mixing}.")
    target.check_same_shapes(source)
    for name, value in source.params.items():
        if mixing == 1.0:
            target.params[name][...] = value
        else:
            target.params[name][...] = mixing * value + (1.0 - mixing) * target.params[name]


def _as_batch(x: Array, n_in: int) -> Array:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[-1] != n_in:
        raise ShapeError(f"Expected input of width {n_in}, got shape {x.shape}.")
    return x


class Dense:
    """ y = x W + b """

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True, scale: Optional[float] = None):
        self.store = store
        self.n_in, self.n_out = n_in, n_out
        scale = 1.0 / np.sqrt(n_in) if scale is None else scale
        self.w = store.add(f"{name}.w", rng.normal(0.0, scale, size=(n_in, n_out)))
        self.b = store.add(f"{name}.b", np.zeros(n_out)) if bias else None

    def forward(self, x: Array) -> Tuple[Array, Array]:
        x = _as_batch(x, self.n_in)
        y = x @ self.store[self.w]
        if self.b is not None:
            y = y + self.store[self.b]
        return y, x

    def backward(self, cache: Array, grad_out: Array) -> Array:
        x = cache
        self.store.accumulate(self.w, x.T @ grad_out)
        if self.b is not None:
            self.store.accumulate(self.b, grad_out.sum(axis=0))
        return grad_out @ self.store[self.w].T


class MLP:
    """
    Affine -> ReLU stack over `sizes` = [n_in, hidden..., n_out]; the last layer is affine, optionally followed
    by a tanh head.
    """

    def __init__(self, store: ParamStore, name: str, sizes: Sequence[int], rng: np.random.Generator,
                 head: Optional[str] = None):
        if len(sizes) < 2:
            raise ValueError("An MLP needs at least an input and an output size.")
        if head not in (None, "tanh"):
            raise ValueError(f"Unknown head {head}.")
        self.layers = [Dense(store, f"{name}.{i}", n_in, n_out, rng)
                       for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.head = head
        self.n_in, self.n_out = sizes[0], sizes[-1]

    def forward(self, x: Array) -> Tuple[Array, list]:
        caches = []
        out = x
        for i, layer in enumerate(self.layers):
            out, cache = layer.forward(out)
            caches.append(cache)
            if i < len(self.layers) - 1:
                out = np.maximum(out, 0.0)
        if self.head == "tanh":
            out = np.tanh(out)
        caches.append(out)
        return out, caches

    def backward(self, caches: list, grad_out: Array) -> Array:
        if not caches:
            raise ValueError("Backward pass needs the cache of a forward pass.")
        grad = grad_out
        if self.head == "tanh":
            grad = grad * (1.0 - caches[-1] ** 2)
        for i in reversed(range(len(self.layers))):
            if i < len(self.layers) - 1:
                # input to layer i+1 is relu(pre-activation of layer i); cache of layer i+1 holds it
                grad = grad * (caches[i + 1] > 0.0)
            grad = self.layers[i].backward(caches[i], grad)
        return grad


@dataclass
class RecurrentState:
    """
    ring: (batch, r, d_h) hidden vectors; r = 1 for a plain recurrent cell. phase: slot updated by the next step.
    """
    ring: Array
    phase: int = 0

    @staticmethod
    def zeros(batch: int, hidden: int, dilation: int = 1) -> "RecurrentState":
        if dilation < 1:
            raise ValueError(f"Dilation must be at least 1, got {dilation}.")
        return RecurrentState(np.zeros((batch, dilation, hidden)), 0)

    @property
    def hidden(self) -> Array:
        return self.ring[:, 0]

    @property
    def dilation(self) -> int:
        return self.ring.shape[1]


class RNNCell:
    """ h' = tanh(x W_ih + h W_hh + b) """

    def __init__(self, store: ParamStore, name: str, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.store = store
        self.n_in, self.n_hidden = n_in, n_hidden
        self.w_ih = store.add(f"{name}.w_ih", rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_hidden)))
        self.w_hh = store.add(f"{name}.w_hh", rng.normal(0.0, 1.0 / np.sqrt(n_hidden), size=(n_hidden, n_hidden)))
        self.b = store.add(f"{name}.b", np.zeros(n_hidden))

    def forward(self, h: Array, x: Array) -> Tuple[Array, tuple]:
        x = _as_batch(x, self.n_in)
        h = _as_batch(h, self.n_hidden)
        h_new = np.tanh(x @ self.store[self.w_ih] + h @ self.store[self.w_hh] + self.store[self.b])
        return h_new, (h, x, h_new)

    def backward(self, cache: tuple, grad_h_new: Array) -> Tuple[Array, Array]:
        h, x, h_new = cache
        grad_pre = grad_h_new * (1.0 - h_new ** 2)
        self.store.accumulate(self.w_ih, x.T @ grad_pre)
        self.store.accumulate(self.w_hh, h.T @ grad_pre)
        self.store.accumulate(self.b, grad_pre.sum(axis=0))
        return grad_pre @ self.store[self.w_hh].T, grad_pre @ self.store[self.w_ih].T


def rnn_step(cell: RNNCell, state: RecurrentState, x: Array) -> Tuple[RecurrentState, Array, tuple]:
    h_new, cache = cell.forward(state.hidden, x)
    return RecurrentState(h_new[:, None, :].copy(), 0), h_new, cache


class DilatedRNN:
    """
    Keeps a ring of r hidden vectors; each step updates only the slot at the current phase (with the cell applied
    to that slot's previous value) and emits the mean over all slots.
    """

    def __init__(self, cell: RNNCell, dilation: int):
        if dilation < 1:
            raise ValueError(f"Dilation must be at least 1, got {dilation}.")
        self.cell = cell
        self.dilation = dilation

    def initial_state(self, batch: int) -> RecurrentState:
        return RecurrentState.zeros(batch, self.cell.n_hidden, self.dilation)

    def step(self, state: RecurrentState, x: Array) -> Tuple[RecurrentState, Array, tuple]:
        if state.dilation != self.dilation:
            raise ShapeError(f"State has dilation {state.dilation}, cell expects {self.dilation}.")
        slot = state.phase
        h_new, cache = self.cell.forward(state.ring[:, slot], x)
        ring = state.ring.copy()
        ring[:, slot] = h_new
        out = ring.mean(axis=1)
        return RecurrentState(ring, (slot + 1) % self.dilation), out, cache

    def backward(self, cache: tuple, grad_out: Array) -> Array:
        """ Gradient w.r.t. the input; earlier ring contents are treated as constants. """
        _, grad_x = self.cell.backward(cache, grad_out / self.dilation)
        return grad_x


def dilated_rnn_step(rnn: DilatedRNN, state: RecurrentState, x: Array) -> Tuple[RecurrentState, Array, tuple]:
    return rnn.step(state, x)


class Adam:
    """ Adaptive-moment gradient steps over every parameter of a store. Call zero_grad on the store yourself. """

    def __init__(self, store: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(v) for name, v in store.params.items()}
        self.v = {name: np.zeros_like(v) for name, v in store.params.items()}

    def step(self, ascend: bool = False):
        self.t += 1
        sign = 1.0 if ascend else -1.0
        for name, value in self.store.params.items():
            grad = self.store.grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad ** 2
            m_hat = self.m[name] / (1 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1 - self.beta2 ** self.t)
            value += sign * self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def save_checkpoint(path, stores: Dict[str, ParamStore]):
    """
    numpy .npz archive: one entry per tensor named `<role>/<parameter>`, plus `__format_version__`.
    Shapes travel in the array headers, so a load is bit-exact.
    """
    tensors = {f"{role}/{name}": value for role, store in stores.items() for name, value in store.params.items()}
    tensors["__format_version__"] = np.array(CHECKPOINT_FORMAT_VERSION)
    with open(path, "wb") as f:
        np.savez(f, **tensors)


def load_checkpoint(path, stores: Dict[str, ParamStore]):
    with np.load(path) as archive:
        version = int(archive["__format_version__"]) if "__format_version__" in archive.files else None
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"Checkpoint {path} has format version {version}, expected {CHECKPOINT_FORMAT_VERSION}.")
        for role, store in stores.items():
            for name, value in store.params.items():
                key = f"{role}/{name}"
                if key not in archive.files:
                    raise ShapeError(f"Checkpoint {path} has no tensor {key}.")
                loaded = archive[key]
                if loaded.shape != value.shape:
                    raise ShapeError(f"Tensor {key} has shape {loaded.shape} in the checkpoint, expected {value.shape}.")
                value[...] = loaded


def numerical_gradient(loss: Callable[[], float], param: Array, entries: Iterable[Tuple[int, ...]],
                       eps: float = 1e-5) -> Dict[Tuple[int, ...], float]:
    """ Central finite differences of `loss` w.r.t. selected entries of `param` (perturbed in place). """
    result = {}
    for index in entries:
        original = param[index]
        param[index] = original + eps
        plus = loss()
        param[index] = original - eps
        minus = loss()
        param[index] = original
        result[index] = (plus - minus) / (2 * eps)
    return result


def gradient_check(store: ParamStore, loss_and_backward: Callable[[], float], loss: Callable[[], float],
                   rng: np.random.Generator, n_entries: int = 20, names: Optional[Sequence[str]] = None) -> Dict[str, float]:
    """
    Compare analytic gradients (accumulated into the store by `loss_and_backward`) with central differences of
    `loss` on up to `n_entries` random entries per tensor. Returns the worst relative error per tensor.
    """
    store.zero_grad()
    loss_and_backward()
    analytic = {name: grad.copy() for name, grad in store.grads.items()}
    worst = {}
    for name in (names if names is not None else store.names()):
        param = store[name]
        flat = rng.choice(param.size, size=min(n_entries, param.size), replace=False)
        entries = [np.unravel_index(i, param.shape) for i in flat]
        numeric = numerical_gradient(loss, param, entries)
        errors = [abs(analytic[name][i] - n) / max(abs(analytic[name][i]) + abs(n), 1e-6) for i, n in numeric.items()]
        worst[name] = max(errors)
    return worst
