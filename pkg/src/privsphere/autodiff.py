"""Small reverse-mode differentiation engine over float64 numpy arrays.

Nodes are evaluated eagerly as they are built, and every node remembers the
operation that produced it, so a finished expression can be wrapped in a
:class:`Graph` and re-evaluated with new input bindings or differentiated.

Data matrices follow the feature-by-sample layout used throughout the
package: a batch of ``N`` samples with ``d`` features is a ``(d, N)`` array.
"""

import itertools

import numpy as np
from scipy import linalg as sla

from .errors import ContractError, DimensionError, NumericError

_ids = itertools.count()


def _as_array(value):
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {where}")


class Node:
    """A value in an expression graph."""

    __slots__ = ("value", "op", "inputs", "name")

    def __init__(self, value, op=None, inputs=(), name=None):
        self.value = value
        self.op = op
        self.inputs = tuple(inputs)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        kind = self.op.name if self.op is not None else type(self).__name__
        return f"<{kind} shape={self.value.shape}>"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)


class Constant(Node):
    __slots__ = ()

    def __init__(self, value, name=None):
        arr = _as_array(value)
        _check_finite(arr, "constant")
        super().__init__(arr, name=name)


class Input(Node):
    """Placeholder leaf whose value can be rebound by :func:`forward_eval`."""

    __slots__ = ()

    def __init__(self, name, value):
        arr = _as_array(value)
        _check_finite(arr, f"input {name!r}")
        super().__init__(arr, name=name)


class Parameter(Node):
    """Trainable leaf with a unique integer id and a fixed shape."""

    __slots__ = ("id", "trainable")

    def __init__(self, value, name=None, trainable=True):
        arr = _as_array(value).copy()
        _check_finite(arr, f"parameter {name!r}")
        super().__init__(arr, name=name)
        self.id = next(_ids)
        self.trainable = trainable

    def assign(self, value):
        arr = _as_array(value)
        if arr.shape != self.value.shape:
            raise DimensionError(
                f"parameter {self.name!r}: cannot assign shape {arr.shape} "
                f"to shape {self.value.shape}"
            )
        _check_finite(arr, f"parameter {self.name!r}")
        self.value = arr.copy()


def as_node(x):
    return x if isinstance(x, Node) else Constant(x)


# ----------------------------------------------------------------------------
# operations


class Op:
    name = "op"

    def forward(self, *vals):
        raise NotImplementedError

    def backward(self, g, out, *vals):
        """Return one gradient (or None) per input."""
        raise NotImplementedError


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _apply(op, *inputs):
    nodes = [as_node(x) for x in inputs]
    try:
        value = op.forward(*[n.value for n in nodes])
    except ValueError as exc:
        shapes = ", ".join(str(n.value.shape) for n in nodes)
        raise DimensionError(f"{op.name}: incompatible inputs ({shapes}): {exc}") from exc
    value = np.asarray(value, dtype=np.float64)
    _check_finite(value, op.name)
    return Node(value, op, nodes)


class _Add(Op):
    name = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, g, out, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class _Sub(Op):
    name = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, g, out, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


class _Mul(Op):
    name = "mul"

    def forward(self, a, b):
        return a * b

    def backward(self, g, out, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class _Div(Op):
    name = "div"

    def forward(self, a, b):
        return a / b

    def backward(self, g, out, a, b):
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


class _Neg(Op):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, g, out, a):
        return (-g,)


class _MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul expects 2-D operands")
        return a @ b

    def backward(self, g, out, a, b):
        return g @ b.T, a.T @ g


class _Transpose(Op):
    name = "transpose"

    def forward(self, a):
        return a.T

    def backward(self, g, out, a):
        return (g.T,)


class _Sum(Op):
    name = "sum"

    def __init__(self, axis, keepdims):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, a):
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, g, out, a):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, a.shape).copy(),)


class _Relu(Op):
    name = "relu"

    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, g, out, a):
        # derivative at exactly 0 is taken as 0
        return (g * (a > 0),)


class _ReluMask(Op):
    """Indicator of positive entries; piecewise constant, so zero gradient."""

    name = "relu_mask"

    def forward(self, a):
        return (a > 0).astype(np.float64)

    def backward(self, g, out, a):
        return (None,)


class _Exp(Op):
    name = "exp"

    def forward(self, a):
        return np.exp(a)

    def backward(self, g, out, a):
        return (g * out,)


class _Log(Op):
    name = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise NumericError("log of non-positive value")
        return np.log(a)

    def backward(self, g, out, a):
        return (g / a,)


class _Square(Op):
    name = "square"

    def forward(self, a):
        return a * a

    def backward(self, g, out, a):
        return (2.0 * g * a,)


class _Sqrt(Op):
    """Square root whose derivative is zero where the argument is at most ``eps``.

    The value itself is ``sqrt(max(a, 0))``, so exact zeros stay zero.
    """

    name = "sqrt"

    def __init__(self, eps):
        self.eps = eps

    def forward(self, a):
        return np.sqrt(np.maximum(a, 0.0))

    def backward(self, g, out, a):
        safe = np.where(a > self.eps, out, 1.0)
        return (np.where(a > self.eps, g / (2.0 * safe), 0.0),)


class _ClampMax(Op):
    name = "clamp_max"

    def __init__(self, limit):
        self.limit = limit

    def forward(self, a):
        return np.minimum(a, self.limit)

    def backward(self, g, out, a):
        return (g * (a < self.limit),)


class _Cos(Op):
    name = "cos"

    def forward(self, a):
        return np.cos(a)

    def backward(self, g, out, a):
        return (-g * np.sin(a),)


class _Sin(Op):
    name = "sin"

    def forward(self, a):
        return np.sin(a)

    def backward(self, g, out, a):
        return (g * np.cos(a),)


class _LogSoftmax(Op):
    """Log-softmax over axis 0 (classes by samples), shifted by the max."""

    name = "log_softmax"

    def forward(self, a):
        shifted = a - a.max(axis=0, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))

    def backward(self, g, out, a):
        return (g - np.exp(out) * g.sum(axis=0, keepdims=True),)


class _SqDist(Op):
    """Pairwise squared Euclidean distances between columns of A and B."""

    name = "sq_dist"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
            raise ValueError("sq_dist expects (d, n) and (d, m) arrays")
        d = (a * a).sum(0)[:, None] + (b * b).sum(0)[None, :] - 2.0 * (a.T @ b)
        return np.maximum(d, 0.0)

    def backward(self, g, out, a, b):
        ga = 2.0 * (a * g.sum(axis=1)[None, :] - b @ g.T)
        gb = 2.0 * (b * g.sum(axis=0)[None, :] - a @ g)
        return ga, gb


class _SolveSPD(Op):
    """X = A^{-1} B for symmetric positive definite A."""

    name = "solve"

    def forward(self, a, b):
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] != b.shape[0]:
            raise ValueError("solve expects square A with matching rows in B")
        try:
            self._factor = sla.cho_factor(a, lower=True, check_finite=False)
        except sla.LinAlgError as exc:
            raise NumericError(f"solve: matrix is not positive definite ({exc})") from exc
        return sla.cho_solve(self._factor, b, check_finite=False)

    def backward(self, g, out, a, b):
        gb = sla.cho_solve(self._factor, g, check_finite=False)
        ga = -gb @ out.T
        return ga, gb


class _Trace(Op):
    name = "trace"

    def forward(self, a):
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("trace expects a square matrix")
        return np.trace(a)

    def backward(self, g, out, a):
        return (g * np.eye(a.shape[0]),)


class _StopGradient(Op):
    name = "stop_gradient"

    def forward(self, a):
        return a.copy()

    def backward(self, g, out, a):
        return (None,)


def add(a, b):
    return _apply(_Add(), a, b)


def sub(a, b):
    return _apply(_Sub(), a, b)


def mul(a, b):
    return _apply(_Mul(), a, b)


def div(a, b):
    return _apply(_Div(), a, b)


def neg(a):
    return _apply(_Neg(), a)


def matmul(a, b):
    return _apply(_MatMul(), a, b)


def transpose(a):
    return _apply(_Transpose(), a)


def reduce_sum(a, axis=None, keepdims=False):
    return _apply(_Sum(axis, keepdims), a)


def mean(a, axis=None):
    a = as_node(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return reduce_sum(a, axis=axis) / float(count)


def relu(a):
    return _apply(_Relu(), a)


def relu_mask(a):
    return _apply(_ReluMask(), a)


def exp(a):
    return _apply(_Exp(), a)


def log(a):
    return _apply(_Log(), a)


def square(a):
    return _apply(_Square(), a)


def sqrt(a, eps=0.0):
    return _apply(_Sqrt(eps), a)


def clamp_max(a, limit):
    return _apply(_ClampMax(limit), a)


def cos(a):
    return _apply(_Cos(), a)


def sin(a):
    return _apply(_Sin(), a)


def log_softmax(a):
    return _apply(_LogSoftmax(), a)


def sq_dist(a, b):
    return _apply(_SqDist(), a, b)


def solve_spd(a, b):
    return _apply(_SolveSPD(), a, b)


def trace(a):
    return _apply(_Trace(), a)


def stop_gradient(a):
    return _apply(_StopGradient(), a)


# ----------------------------------------------------------------------------
# graphs


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.inputs):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


class Graph:
    """Topologically ordered view of the expression rooted at ``root``.

    ``parameters`` may list extra parameters that are not on any path to the
    root; :func:`backward` reports zero gradients for them.
    """

    def __init__(self, root, parameters=()):
        self.root = as_node(root)
        self.nodes = _topo_order(self.root)
        self.inputs = {n.name: n for n in self.nodes if isinstance(n, Input)}
        params = {}
        for p in itertools.chain((n for n in self.nodes if isinstance(n, Parameter)), parameters):
            params.setdefault(p.id, p)
        self.parameters = params

    def __len__(self):
        return len(self.nodes)


def forward_eval(graph, bindings=None):
    """Re-evaluate ``graph`` with ``bindings`` (input name -> array).

    Unbound inputs keep the value they were built with.  Returns the root
    value.
    """
    bindings = bindings or {}
    unknown = set(bindings) - set(graph.inputs)
    if unknown:
        raise ContractError(f"bindings for unknown inputs: {sorted(unknown)}")
    for name, value in bindings.items():
        arr = _as_array(value)
        _check_finite(arr, f"input {name!r}")
        graph.inputs[name].value = arr
    for index, node in enumerate(graph.nodes):
        if node.op is None:
            continue
        vals = [p.value for p in node.inputs]
        try:
            value = node.op.forward(*vals)
        except ValueError as exc:
            raise DimensionError(f"node #{index} ({node.op.name}): {exc}") from exc
        value = np.asarray(value, dtype=np.float64)
        _check_finite(value, f"node #{index} ({node.op.name})")
        node.value = value
    return graph.root.value


def backward(graph, seed=1.0):
    """Gradients of a scalar root with respect to every trainable parameter.

    Returns a dict mapping parameter id to an array shaped like the parameter.
    """
    if not isinstance(graph, Graph):
        graph = Graph(graph)
    root = graph.root
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.value.shape}")

    # nodes that depend on some trainable parameter
    live = set()
    for node in graph.nodes:
        if isinstance(node, Parameter):
            if node.trainable:
                live.add(id(node))
        elif node.op is not None and any(id(p) in live for p in node.inputs):
            live.add(id(node))

    grads = {id(root): np.full(root.value.shape, float(seed))}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None) if node.op is not None else grads.get(id(node))
        if g is None or node.op is None:
            continue
        in_grads = node.op.backward(g, node.value, *[p.value for p in node.inputs])
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or id(parent) not in live:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)

    out = {}
    for pid, p in graph.parameters.items():
        if not p.trainable:
            continue
        g = grads.get(id(p))
        out[pid] = np.zeros_like(p.value) if g is None else g.reshape(p.value.shape)
    return out


def finite_diff_check(loss_fn, parameters, epsilon=1e-5):
    """Largest relative gap between analytic and central-difference gradients.

    ``loss_fn`` is called with no arguments and must rebuild the loss from the
    current parameter values, returning a scalar node (or float).  The error
    per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    parameters = list(parameters)
    root = loss_fn()
    analytic = backward(Graph(root, parameters)) if isinstance(root, Node) else {}
    worst = 0.0
    for p in parameters:
        base = p.value.copy()
        ga = analytic.get(p.id, np.zeros_like(base))
        flat = base.reshape(-1)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] += epsilon
            p.value = bumped.reshape(base.shape)
            f_plus = float(np.asarray(_value_of(loss_fn())))
            bumped[i] -= 2 * epsilon
            p.value = bumped.reshape(base.shape)
            f_minus = float(np.asarray(_value_of(loss_fn())))
            p.value = base
            numeric = (f_plus - f_minus) / (2 * epsilon)
            err = abs(ga.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        p.value = base
    return worst


def _value_of(x):
    return x.value if isinstance(x, Node) else x


def input_gradient_graph(layers, z, select=None):
    """Build a node holding the gradient of a ReLU MLP's output w.r.t. its input.

    ``layers`` is a sequence of ``(W, b, activation)`` triples describing the
    stack ``h_k = act(W_k^T h_{k-1} + b_k)`` with activation ``"relu"`` for
    hidden layers and ``"linear"`` for the last one.  ``z`` is the ``(q, N)``
    input.  ``select`` is an ``(L, N)`` array of output weights per sample
    (e.g. one-hot privacy labels, transposed); when omitted the network must
    have a single output.  The result is ``(q, N)`` with column ``i`` equal to
    the gradient of ``select[:, i] . phi(z_i)``.

    The chain rule is spelled out with first-order operations (weight
    products and ReLU masks), so the result can itself be differentiated with
    respect to the weights.  Masks carry no gradient.
    """
    z = as_node(z)
    layers = list(layers)
    if not layers:
        raise ContractError("input_gradient_graph needs at least one layer")
    for _, _, act in layers[:-1]:
        if act != "relu":
            raise ContractError(f"unsupported hidden activation {act!r}")
    if layers[-1][2] != "linear":
        raise ContractError("the output layer must be linear")

    masks = []
    h = z
    for W, b, act in layers[:-1]:
        pre = matmul(transpose(W), h)
        if b is not None:
            pre = pre + b
        masks.append(relu_mask(pre))
        h = relu(pre)

    W_out = as_node(layers[-1][0])
    n = z.value.shape[1]
    if select is None:
        if W_out.value.shape[1] != 1:
            raise ContractError("select is required for multi-output networks")
        sel = np.ones((1, n))
    else:
        sel = _as_array(select)
        if sel.shape != (W_out.value.shape[1], n):
            raise DimensionError(
                f"select must be {(W_out.value.shape[1], n)}, got {sel.shape}"
            )
    v = matmul(W_out, sel)
    for (W, _, _), mask in zip(reversed(layers[:-1]), reversed(masks)):
        v = matmul(W, v * mask)
    return v
