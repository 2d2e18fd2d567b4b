"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor stores a numpy float64 array. Operations run eagerly; while a
Tape is active (``with Tape() as tape: ...``) each op appends one record
holding its inputs, its output and a VJP closure. ``backward`` replays the
records in exact reverse order and accumulates dLoss/dTensor into ``.grad``
of every reachable tensor with ``requires_grad`` set. Calling backward on
the same tape twice without zeroing doubles the gradients, by design.

All ops are defined on the 2-D shapes used throughout the model; most also
accept extra leading batch dimensions (numpy broadcasting rules, with
adjoints summed back over broadcast axes).
"""

import threading

import numpy as np

from .errors import EmptyTargetError, GradientError, ShapeError, VocabError

_LN_EPS = 1e-5
_NEG_INF = -1e9  # additive mask value; finite so the stabilized softmax stays NaN-free


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "n_terms")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.n_terms = None  # set by cross_entropy_rows

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def parameter(data):
    """A leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data):
    return Tensor(data, requires_grad=False)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of the ops of one forward pass.

    Confined to a single thread between recording and backward. Entering the
    context makes it the innermost active tape; ops executed with no active
    tape are not recorded (inference mode).
    """

    __slots__ = ("records",)

    def __init__(self):
        self.records = []  # (output, inputs tuple, vjp) in topological order

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.records)

    def reset(self):
        self.records.clear()


def _record(out, inputs, vjp):
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.records.append((out, inputs, vjp))


def _needs_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def backward(loss, tape):
    """Populate ``.grad`` of every requires_grad tensor reachable from loss.

    Gradients accumulate additively, both across multiple uses of a tensor
    within the pass and across repeated backward calls.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    adjoint = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    interior = {id(out) for out, _, _ in tape.records}  # op outputs: adjoints only
    for out, inputs, vjp in reversed(tape.records):
        g = adjoint.get(id(out))
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            holders[key] = t
            prev = adjoint.get(key)
            # out-of-place: vjps may return views of live buffers
            adjoint[key] = gi if prev is None else prev + gi
    for key, t in holders.items():
        # .grad materializes on leaves; interior tensors only relay adjoints
        if not t.requires_grad or key in interior:
            continue
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += adjoint[key]


def _unbroadcast(g, shape):
    """Sum g back down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Ops
# --------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data
    if ad.ndim > 2 and bd.ndim == 2:
        # shared right operand: one flat GEMM beats a stack of small ones
        flat = ad.reshape(-1, ad.shape[-1])
        out = Tensor((flat @ bd).reshape(*ad.shape[:-1], bd.shape[-1]),
                     requires_grad=_needs_grad(a, b))

        def vjp(g):
            gf = g.reshape(-1, g.shape[-1])
            return (gf @ bd.T).reshape(ad.shape), flat.T @ gf

        _record(out, (a, b), vjp)
        return out
    out = Tensor(ad @ bd, requires_grad=_needs_grad(a, b))

    def vjp(g):
        da = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        db = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return da, db

    _record(out, (a, b), vjp)
    return out


def add(a, b):
    out = Tensor(a.data + b.data, requires_grad=_needs_grad(a, b))

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    _record(out, (a, b), vjp)
    return out


def broadcast_add_row(x, row):
    """Add a length-d vector to every row of x[..., l, d]."""
    if row.data.ndim != 1 or x.data.shape[-1] != row.data.shape[0]:
        raise ShapeError(f"broadcast_add_row: shapes {x.data.shape} and {row.data.shape}")
    out = Tensor(x.data + row.data, requires_grad=_needs_grad(x, row))

    def vjp(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    _record(out, (x, row), vjp)
    return out


def scale(x, c):
    c = float(c)
    out = Tensor(x.data * c, requires_grad=x.requires_grad)
    _record(out, (x,), lambda g: (g * c,))
    return out


def relu(x):
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=x.requires_grad)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    _record(out, (x,), vjp)
    return out


def sigmoid(x):
    # split formulation avoids exp overflow on large negative inputs
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y, requires_grad=x.requires_grad)

    def vjp(g):
        return (g * y * (1.0 - y),)

    _record(out, (x,), vjp)
    return out


def softmax(x, axis=-1):
    """Row-stabilized softmax; slices along ``axis`` sum to 1."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=x.requires_grad)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    _record(out, (x,), vjp)
    return out


def layer_norm(x, gain, bias):
    """Per-row normalization over the last axis, then affine.

    eps = 1e-5 sits inside the square root, so constant rows map to zero
    (then bias) instead of dividing by zero.
    """
    d = x.data.shape[-1]
    if d < 1:
        raise ShapeError("layer_norm: empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data, requires_grad=_needs_grad(x, gain, bias))

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    _record(out, (x, gain, bias), vjp)
    return out


def mean_pool(x):
    """Column means over the row axis: [..., r, d] -> [..., d]."""
    if x.data.ndim < 2 or x.data.shape[-2] == 0:
        raise ShapeError(f"mean_pool: need at least one row, got shape {x.data.shape}")
    r = x.data.shape[-2]
    out = Tensor(x.data.mean(axis=-2), requires_grad=x.requires_grad)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / r, -2), x.data.shape).copy(),)

    _record(out, (x,), vjp)
    return out


def concat(tensors, axis=-1):
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis), requires_grad=_needs_grad(*tensors))
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    _record(out, tuple(tensors), vjp)
    return out


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad)
    _record(out, (x,), lambda g: (g.reshape(x.data.shape),))
    return out


def sum_all(x):
    out = Tensor(x.data.sum(), requires_grad=x.requires_grad)

    def vjp(g):
        return (np.broadcast_to(g, x.data.shape).copy(),)

    _record(out, (x,), vjp)
    return out


def embedding_lookup(table, ids):
    """Gather rows of ``table`` by integer id array; adjoint scatters back."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise VocabError(f"embedding id {bad} out of range [0, {table.data.shape[0]})")
    out = Tensor(table.data[ids], requires_grad=table.requires_grad)

    def vjp(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    _record(out, (table,), vjp)
    return out


def dropout(x, rate, rng):
    """Inverted dropout. Identity when rate <= 0 or rng is None."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.data.shape, dtype=np.float32) >= rate) / (1.0 - rate)
    out = Tensor(x.data * keep, requires_grad=x.requires_grad)
    _record(out, (x,), lambda g: (g * keep,))
    return out


def logistic_loss(z, signs):
    """sum(log(1 + exp(-signs * z))) with a stable softplus.

    ``signs`` is a constant array; +/-1 for the signed-label convention or
    raw {0,1} labels for the literal variant.
    """
    signs = np.asarray(signs, dtype=np.float64)
    if signs.shape != z.data.shape:
        raise ShapeError(f"logistic_loss: label shape {signs.shape} != logit shape {z.data.shape}")
    m = -signs * z.data
    out = Tensor(np.logaddexp(0.0, m).sum(), requires_grad=z.requires_grad)

    def vjp(g):
        # d/dz softplus(-s z) = -s * sigmoid(-s z)
        sig = np.empty_like(m)
        pos = m >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-m[pos]))
        ex = np.exp(m[~pos])
        sig[~pos] = ex / (1.0 + ex)
        return (g * (-signs) * sig,)

    _record(out, (z,), vjp)
    return out


def cross_entropy_rows(logits, targets, ignore_id=None, allow_empty=False):
    """Mean of -log softmax(logits)[i, target_i] over non-ignored positions.

    ``logits`` is [..., C]; ``targets`` an integer array matching the leading
    shape. Positions whose target equals ``ignore_id`` are excluded from both
    the mean and the gradient. With zero valid positions this raises
    EmptyTargetError unless ``allow_empty`` is set, in which case a constant
    zero tensor is returned. The result carries ``n_terms``, the number of
    positions averaged.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(
            f"cross_entropy_rows: target shape {targets.shape} does not match logits {logits.data.shape}")
    valid = np.ones(targets.shape, dtype=bool) if ignore_id is None else targets != ignore_id
    count = int(valid.sum())
    if count == 0:
        if not allow_empty:
            raise EmptyTargetError("cross_entropy_rows: every position is ignored")
        out = Tensor(0.0)
        out.n_terms = 0
        return out
    n_classes = logits.data.shape[-1]
    safe_targets = np.where(valid, targets, 0)
    if safe_targets.min() < 0 or safe_targets.max() >= n_classes:
        bad = int(safe_targets.min()) if safe_targets.min() < 0 else int(safe_targets.max())
        raise VocabError(f"cross_entropy_rows: target id {bad} out of range [0, {n_classes})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, safe_targets[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / count
    out = Tensor(loss, requires_grad=logits.requires_grad)
    out.n_terms = count

    def vjp(g):
        probs = np.exp(logp)
        grad = probs.copy()
        np.put_along_axis(grad, safe_targets[..., None],
                          np.take_along_axis(grad, safe_targets[..., None], axis=-1) - 1.0, axis=-1)
        grad *= valid[..., None] / count
        return (g * grad,)

    _record(out, (logits,), vjp)
    return out


def attention_core(q, k, v, n_heads, mask=None, dropout_rate=0.0, rng=None,
                   return_weights=False):
    """Scaled dot-product attention with head split/merge fused into one op.

    q is [..., lq, d]; k and v are [..., lk, d]; d must divide by n_heads.
    ``mask`` (plain ndarray) is added to the scores before softmax and
    broadcasts against [..., h, lq, lk]. Per-head scale is 1/sqrt(d/h).
    """
    d = q.data.shape[-1]
    if d % n_heads != 0:
        raise ShapeError(f"attention_core: width {d} not divisible by {n_heads} heads")
    if k.data.shape[-1] != d or v.data.shape[-1] != d:
        raise ShapeError("attention_core: q/k/v widths differ")
    dk = d // n_heads

    def split(a):
        # [..., l, d] -> [..., h, l, dk]
        return a.reshape(*a.shape[:-1], n_heads, dk).swapaxes(-3, -2)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = (qh @ kh.swapaxes(-1, -2)) / np.sqrt(dk)
    if mask is not None:
        scores = scores + np.asarray(mask, dtype=np.float64)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    att = e / e.sum(axis=-1, keepdims=True)
    if dropout_rate > 0.0 and rng is not None:
        keep = (rng.random(att.shape) >= dropout_rate) / (1.0 - dropout_rate)
        att_used = att * keep
    else:
        keep = None
        att_used = att
    oh = att_used @ vh
    out_data = oh.swapaxes(-3, -2).reshape(q.data.shape)
    out = Tensor(out_data, requires_grad=_needs_grad(q, k, v))

    def vjp(g):
        gh = split(g)
        datt_used = gh @ vh.swapaxes(-1, -2)
        dvh = att_used.swapaxes(-1, -2) @ gh
        datt = datt_used * keep if keep is not None else datt_used
        ds = (datt - (datt * att).sum(axis=-1, keepdims=True)) * att
        dqh = (ds @ kh) / np.sqrt(dk)
        dkh = (ds.swapaxes(-1, -2) @ qh) / np.sqrt(dk)

        def merge(a, like):
            return _unbroadcast(a.swapaxes(-3, -2).reshape(*a.shape[:-3], a.shape[-2], d), like.shape)

        return merge(dqh, q.data), merge(dkh, k.data), merge(dvh, v.data)

    _record(out, (q, k, v), vjp)
    if return_weights:
        return out, att
    return out


def check_finite(x, what="tensor"):
    from .errors import NumericError
    if not np.isfinite(x.data if isinstance(x, Tensor) else x).all():
        raise NumericError(f"non-finite values in {what}")
    return x
