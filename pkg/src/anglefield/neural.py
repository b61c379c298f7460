"""Angle-field network with a hand-written reverse-mode gradient tape.

The network maps a normalized patch and a batch of unit query vectors to
angle offsets in (0, pi/2):

* encoder: shared per-point affine+ReLU layers (3 -> 64 -> 64 -> 256) and
  a channel-wise max over the patch points, giving a latent code ``z``;
* decoder: 8 affine+ReLU layers of width 256 on ``concat(z, q)``, with the
  decoder input concatenated again in front of the 5th layer, then an
  affine head to one logit squashed by ``(pi/2) * sigmoid``.

Everything runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import BadMagic, NonFinite, TruncatedFile, VersionMismatch

ENCODER_WIDTHS = (3, 64, 64, 256)
DECODER_WIDTH = 256
DECODER_DEPTH = 8
SKIP_LAYER = 4
OUT_SCALE = math.pi / 2

MAGIC = "NEAF"
FORMAT_VERSION = 1


# --------------------------------------------------------------------------
# gradient tape


class Node:
    __slots__ = ("value", "id")

    def __init__(self, value, id_):
        self.value = value
        self.id = id_


class GradTape:
    """Records one forward evaluation; ``backward`` replays it in reverse.

    With ``enabled=False`` the tape only computes values, which keeps large
    inference batches from holding on to every activation.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._records = []
        self._leaves = {}
        self._next = 0
        self.output = None
        self.single = False

    def _new(self, value):
        node = Node(value, self._next)
        self._next += 1
        return node

    def variable(self, value, name: str) -> Node:
        node = self._new(value)
        if self.enabled:
            self._leaves[name] = node
        return node

    def constant(self, value) -> Node:
        return self._new(value)

    def apply(self, value, inputs, vjp) -> Node:
        node = self._new(value)
        if self.enabled:
            self._records.append((node.id, tuple(n.id for n in inputs), vjp))
        return node

    def backward(self, seed, output: Node | None = None) -> dict:
        """Propagate ``seed`` (d loss / d output) back to every named leaf.

        Returns ``{name: gradient}``; leaves the output does not depend on get
        zeros.
        """
        if not self.enabled:
            raise RuntimeError("tape was recorded with enabled=False")
        output = self.output if output is None else output
        grads = {output.id: np.asarray(seed, dtype=np.float64)}
        for node_id, input_ids, vjp in reversed(self._records):
            g = grads.pop(node_id, None)
            if g is None:
                continue
            for iid, gi in zip(input_ids, vjp(g)):
                if gi is None:
                    continue
                if iid in grads:
                    grads[iid] = grads[iid] + gi
                else:
                    grads[iid] = gi
        return {name: grads.get(node.id, np.zeros_like(node.value))
                for name, node in self._leaves.items()}


def _affine(tape, x, w, b):
    xv, wv = x.value, w.value
    out = xv @ wv + b.value

    def vjp(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0, keepdims=True)

    return tape.apply(out, (x, w, b), vjp)


def _relu(tape, x):
    mask = x.value > 0
    return tape.apply(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def _maxpool(tape, x):
    # np.argmax returns the first maximal row, which fixes the tie rule
    xv = x.value
    arg = np.argmax(xv, axis=0)
    cols = np.arange(xv.shape[1])
    out = xv[arg, cols][None, :]

    def vjp(g):
        gx = np.zeros_like(xv)
        gx[arg, cols] = g[0]
        return (gx,)

    return tape.apply(out, (x,), vjp)


def _broadcast_rows(tape, x, rows):
    out = np.broadcast_to(x.value, (rows, x.value.shape[1]))
    return tape.apply(out, (x,), lambda g: (g.sum(axis=0, keepdims=True),))


def _concat(tape, a, b):
    split = a.value.shape[1]
    out = np.concatenate([a.value, b.value], axis=1)
    return tape.apply(out, (a, b), lambda g: (g[:, :split], g[:, split:]))


def _scaled_sigmoid(tape, x):
    s = expit(x.value[:, 0])
    out = OUT_SCALE * s

    def vjp(g):
        return ((g * OUT_SCALE * s * (1.0 - s))[:, None],)

    return tape.apply(out, (x,), vjp)


# --------------------------------------------------------------------------
# model


@dataclass
class AngleFieldModel:
    """Parameters in layer order. Weights are stored ``(fan_in, fan_out)``."""

    params: dict = field(default_factory=dict)
    encoder_widths: tuple = ENCODER_WIDTHS
    decoder_width: int = DECODER_WIDTH
    decoder_depth: int = DECODER_DEPTH
    skip_layer: int = SKIP_LAYER

    @property
    def latent_dim(self) -> int:
        return self.encoder_widths[-1]

    def layer_shapes(self):
        """``[(param_name, (rows, cols)), ...]`` in checkpoint order."""
        shapes = []
        widths = self.encoder_widths
        for i in range(len(widths) - 1):
            shapes.append((f"enc{i}", widths[i], widths[i + 1]))
        din = self.latent_dim + 3
        width = self.decoder_width
        for j in range(self.decoder_depth):
            fan_in = din if j == 0 else width
            if j == self.skip_layer:
                fan_in += din
            shapes.append((f"dec{j}", fan_in, width))
        shapes.append(("out", width, 1))
        out = []
        for name, fan_in, fan_out in shapes:
            out.append((f"{name}.weight", (fan_in, fan_out)))
            out.append((f"{name}.bias", (1, fan_out)))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "AngleFieldModel":
        return AngleFieldModel({k: v.copy() for k, v in self.params.items()},
                               self.encoder_widths, self.decoder_width,
                               self.decoder_depth, self.skip_layer)


def init_model(seed: int, encoder_widths=ENCODER_WIDTHS,
               decoder_width: int = DECODER_WIDTH,
               decoder_depth: int = DECODER_DEPTH,
               skip_layer: int = SKIP_LAYER) -> AngleFieldModel:
    """Glorot-uniform weights, zero biases. Narrower widths are for tests."""
    if encoder_widths[0] != 3:
        raise ValueError("encoder input must be 3-dimensional")
    if not 0 < skip_layer < decoder_depth:
        raise ValueError("skip layer must be an inner decoder layer")
    model = AngleFieldModel({}, tuple(encoder_widths), decoder_width,
                            decoder_depth, skip_layer)
    rng = np.random.default_rng(seed)
    for name, shape in model.layer_shapes():
        if name.endswith(".bias"):
            model.params[name] = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            model.params[name] = rng.uniform(-limit, limit, size=shape)
    return model


def _coords_of(patch):
    return np.asarray(getattr(patch, "coords", patch), dtype=np.float64)


def _run(model, coords, queries, tape):
    prm = {name: tape.variable(arr, name) for name, arr in model.params.items()}

    h = tape.constant(coords)
    for i in range(len(model.encoder_widths) - 1):
        h = _relu(tape, _affine(tape, h, prm[f"enc{i}.weight"], prm[f"enc{i}.bias"]))
    z = _maxpool(tape, h)

    q = tape.variable(queries, "query")
    inp = _concat(tape, _broadcast_rows(tape, z, len(queries)), q)
    h = inp
    for j in range(model.decoder_depth):
        if j == model.skip_layer:
            h = _concat(tape, h, inp)
        h = _relu(tape, _affine(tape, h, prm[f"dec{j}.weight"], prm[f"dec{j}.bias"]))
    logit = _affine(tape, h, prm["out.weight"], prm["out.bias"])
    if not (np.all(np.isfinite(logit.value)) and np.all(np.isfinite(z.value))):
        raise NonFinite("non-finite activation in angle-field forward pass")
    alpha = _scaled_sigmoid(tape, logit)
    tape.output = alpha
    return alpha.value


def forward(model: AngleFieldModel, patch, q):
    """Evaluate the angle field for one patch and one or more query vectors.

    ``q`` is a single 3-vector or an ``(B, 3)`` batch. Returns
    ``(alpha, tape)``; ``alpha`` is a float for a single query, else shape
    ``(B,)``.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    tape = GradTape()
    alpha = _run(model, _coords_of(patch), np.atleast_2d(q), tape)
    tape.single = single
    return (float(alpha[0]) if single else alpha), tape


def predict_alpha(model: AngleFieldModel, patch, queries, chunk: int = 2048) -> np.ndarray:
    """Gradient-free batched forward, evaluated ``chunk`` queries at a time."""
    coords = _coords_of(patch)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    out = np.empty(len(queries))
    for s in range(0, len(queries), chunk):
        out[s:s + chunk] = _run(model, coords, queries[s:s + chunk],
                                GradTape(enabled=False))
    return out


def _seed_for(tape, dalpha):
    if dalpha is None:
        return np.ones(tape.output.value.shape)
    return np.broadcast_to(np.asarray(dalpha, dtype=np.float64),
                           tape.output.value.shape)


def backward(tape: GradTape, dalpha=None):
    """Gradients of ``sum(dalpha * alpha)`` w.r.t. parameters and queries.

    ``dalpha`` defaults to ones, i.e. the gradient of alpha itself (summed
    over the batch). Returns ``(param_grads, query_grad)``.
    """
    grads = tape.backward(_seed_for(tape, dalpha))
    qgrad = grads.pop("query")
    if tape.single:
        qgrad = qgrad[0]
    return grads, qgrad


def backward_params(tape: GradTape, dalpha=None) -> dict:
    return backward(tape, dalpha)[0]


def backward_query(tape: GradTape, dalpha=None) -> np.ndarray:
    return backward(tape, dalpha)[1]


# --------------------------------------------------------------------------
# loss and optimizer


def loss_l1(alpha_pred, alpha_gt):
    """Mean absolute error and its gradient w.r.t. ``alpha_pred``.

    The subgradient at ``pred == gt`` is 0.
    """
    pred = np.asarray(alpha_pred, dtype=np.float64)
    diff = pred - np.asarray(alpha_gt, dtype=np.float64)
    n = max(diff.size, 1)
    return float(np.mean(np.abs(diff))), np.sign(diff) / n


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: dict, max_norm: float) -> dict:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam step, in place on ``params`` and ``state``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def adam_step(model: AngleFieldModel, grads: dict, state: AdamState, lr: float):
    adam_update(model.params, grads, state, lr)
    return model, state


# --------------------------------------------------------------------------
# checkpoints


def save_model(model: AngleFieldModel, path) -> None:
    """ASCII header (magic line, then ``name rows cols`` per tensor, then a
    blank line) followed by little-endian float64 data, row-major."""
    shapes = model.layer_shapes()
    lines = [f"{MAGIC}{FORMAT_VERSION}"]
    for name, (rows, cols) in shapes:
        if model.params[name].shape != (rows, cols):
            raise ValueError(f"{name} has shape {model.params[name].shape}")
        lines.append(f"{name} {rows} {cols}")
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        for name, _ in shapes:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def _arch_from_shapes(shapes):
    enc = [(r, c) for n, (r, c) in shapes if n.startswith("enc") and n.endswith(".weight")]
    dec = [(r, c) for n, (r, c) in shapes if n.startswith("dec") and n.endswith(".weight")]
    if not enc or not dec:
        raise BadMagic("checkpoint lists no encoder or decoder layers")
    widths = (enc[0][0],) + tuple(c for _, c in enc)
    skip = next((j for j, (r, _) in enumerate(dec) if j > 0 and r != dec[0][1]), None)
    if skip is None:
        raise BadMagic("checkpoint has no skip layer")
    return dict(encoder_widths=widths, decoder_width=dec[0][1],
                decoder_depth=len(dec), skip_layer=skip)


def load_model(path) -> AngleFieldModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    first = blob.split(b"\n", 1)[0]
    if not first.startswith(MAGIC.encode()):
        raise BadMagic(f"{path}: not an angle-field checkpoint")
    if first != f"{MAGIC}{FORMAT_VERSION}".encode():
        raise VersionMismatch(f"{path}: unsupported format {first!r}")
    if sep < 0:
        raise TruncatedFile(f"{path}: header is incomplete")
    shapes = []
    for line in blob[:sep].decode("ascii").split("\n")[1:]:
        name, rows, cols = line.split()
        shapes.append((name, (int(rows), int(cols))))
    data = blob[sep + 2:]
    expected = 8 * sum(r * c for _, (r, c) in shapes)
    if len(data) != expected:
        raise TruncatedFile(f"{path}: {len(data)} data bytes, expected {expected}")

    model = AngleFieldModel({}, **_arch_from_shapes(shapes))
    if [n for n, _ in model.layer_shapes()] != [n for n, _ in shapes]:
        raise BadMagic(f"{path}: unexpected layer layout")
    offset = 0
    for name, (rows, cols) in shapes:
        count = rows * cols
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        model.params[name] = arr.astype(np.float64).reshape(rows, cols)
        offset += 8 * count
    return model
