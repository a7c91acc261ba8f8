"""Network families built from the KAN layers, plus the ICNN baseline.

All models share one calling convention: ``model.forward(x, tape=None)``
returns a (B,) output, evaluated eagerly on numpy arrays or recorded on
``tape``.  Convex families also provide ``input_gradient``, assembled
analytically from per-layer vector-Jacobian products so that a single
reverse sweep differentiates any loss that involves the gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .grid import Hypercube, weights_for_positive
from .layers_cubic import ConvexCubicLayer
from .layers_p1 import ConvexP1Layer, KanLayer, bind, layer_vjp

FAMILIES = ("p1", "cubic", "pickan", "kan", "icnn")
ALIASES = {
    "p1-ickan": "p1",
    "cubic-ickan": "cubic",
    "p1-kan": "kan",
}


class CheckpointError(RuntimeError):
    pass


@dataclass
class NetworkSpec:
    family: str
    domain: Hypercube
    widths: tuple = (10, 10)
    P: int = 10
    adapt: bool = False
    n_x: int = 0
    activation: str = "relu"
    random_grid: bool = False

    def __post_init__(self):
        self.family = ALIASES.get(self.family.lower(), self.family.lower())
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        self.widths = tuple(int(w) for w in self.widths)
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be >= 1")
        if not isinstance(self.domain, Hypercube):
            self.domain = Hypercube(*self.domain)
        if np.any(self.domain.upper <= self.domain.lower):
            raise ValueError("domain box must be nondegenerate")
        if self.P < 1:
            raise ValueError("P must be >= 1")
        if self.family == "pickan":
            if not 0 < self.n_x < self.input_dim:
                raise ValueError("pickan needs 0 < n_x < input dimension")
            if not self.widths or len(set(self.widths)) != 1:
                raise ValueError("pickan uses one shared width M for every layer")
        if self.family == "icnn" and not self.widths:
            raise ValueError("icnn needs at least one hidden layer")
        if self.activation not in ("relu", "celu"):
            raise ValueError("activation must be relu or celu")

    @property
    def input_dim(self) -> int:
        return self.domain.dim

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "widths": list(self.widths),
            "P": self.P,
            "adapt": self.adapt,
            "domain": self.domain.to_list(),
            "n_x": self.n_x,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            family=d["family"],
            domain=Hypercube(*d["domain"]),
            widths=tuple(d["widths"]),
            P=int(d["P"]),
            adapt=bool(d["adapt"]),
            n_x=int(d.get("n_x", 0)),
            activation=d.get("activation", "relu"),
        )


class Model:
    spec: NetworkSpec
    extrapolate: bool = False

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def n_params(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def forward(self, x, tape=None):
        raise NotImplementedError

    def __call__(self, x, tape=None):
        return self.forward(x, tape)

    def after_step(self):
        """Hook run after every optimizer step."""

    def shift_output(self, c: float):
        """Add the constant ``c`` to the model output (convexity is unaffected)."""
        raise NotImplementedError

    def _check_x(self, x):
        shape = np.shape(ad.value_of(x))
        if len(shape) != 2 or shape[1] != self.spec.input_dim:
            raise ValueError(f"expected input (B, {self.spec.input_dim}), got {shape}")


class ICKAN(Model):
    """Input-convex KAN (piecewise-linear or cubic Hermite)."""

    def __init__(self, spec: NetworkSpec, rng=None):
        if spec.family not in ("p1", "cubic"):
            raise ValueError("ICKAN family must be p1 or cubic")
        rng = np.random.default_rng(rng)
        self.spec = spec
        cls = ConvexP1Layer if spec.family == "p1" else ConvexCubicLayer
        dims = [spec.input_dim, *spec.widths, 1]
        self.layers = [
            cls(dims[i], dims[i + 1], spec.P, first=i == 0, adapt=spec.adapt, rng=rng,
                name=f"layer{i}", random_grid=spec.random_grid)
            for i in range(len(dims) - 1)
        ]
        self.extrapolate = False
        self._boxes: list[Hypercube] | None = None

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    @property
    def boxes(self) -> list[Hypercube]:
        """Domain box followed by the image box of every layer (G^0 .. G^L)."""
        if self._boxes is None:
            self.refresh_boxes()
        return self._boxes

    def run(self, x, tape=None):
        """Output (B,) and the per-layer traces (outputs and image boxes)."""
        self._check_x(x)
        lo, hi = self.spec.domain.lower, self.spec.domain.upper
        traces = []
        h = x
        for i, layer in enumerate(self.layers):
            h, lo, hi, tr = layer.forward(h, lo, hi, tape, self.extrapolate if i == 0 else True)
            traces.append(tr)
        return h[:, 0], traces

    def forward(self, x, tape=None):
        return self.run(x, tape)[0]

    def value_and_gradient(self, x, tape=None):
        out, traces = self.run(x, tape)
        v = np.ones((np.shape(ad.value_of(x))[0], 1))
        for tr in reversed(traces):
            v = layer_vjp(tr, v)
        return out, v

    def input_gradient(self, x, tape=None):
        return self.value_and_gradient(x, tape)[1]

    def refresh_boxes(self):
        c = 0.5 * (self.spec.domain.lower + self.spec.domain.upper)
        _, traces = self.run(c[None, :])
        self._boxes = [self.spec.domain] + [
            Hypercube(np.asarray(tr.lower), np.asarray(tr.upper)) for tr in traces
        ]

    def after_step(self):
        # boxes depend on the parameters; recompute on next access
        self._boxes = None

    def shift_output(self, c: float):
        # the last layer is a single neuron; b offsets its value everywhere
        self.layers[-1].b.value[0, 0] += c
        self.after_step()


class KAN(Model):
    """Unconstrained P1-KAN stack; the output is the first coordinate of the last layer."""

    def __init__(self, spec: NetworkSpec, rng=None, out_dim: int = 1):
        rng = np.random.default_rng(rng)
        self.spec = spec
        dims = [spec.input_dim, *spec.widths, out_dim]
        self.layers = [
            KanLayer(dims[i], dims[i + 1], spec.P, adapt=spec.adapt, rng=rng, name=f"kan{i}",
                     random_grid=spec.random_grid)
            for i in range(len(dims) - 1)
        ]
        self.extrapolate = False

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def run(self, x, tape=None):
        self._check_x(x)
        lo, hi = self.spec.domain.lower, self.spec.domain.upper
        traces, h = [], x
        for i, layer in enumerate(self.layers):
            h, lo, hi, tr = layer.forward(h, lo, hi, tape, self.extrapolate if i == 0 else True)
            traces.append(tr)
        return h, traces

    def forward(self, x, tape=None):
        return self.run(x, tape)[0][:, 0]

    def shift_output(self, c: float):
        self.layers[-1].a.value[0, 0] += c


class PICKAN(Model):
    """Partially input-convex KAN: convex in the trailing ``n_y`` coordinates.

    A P1-KAN path on ``x`` is added, layer by layer, onto a convex P1 path on
    ``y``; image boxes are added as intervals.
    """

    def __init__(self, spec: NetworkSpec, rng=None):
        if spec.family != "pickan":
            raise ValueError("PICKAN needs family 'pickan'")
        rng = np.random.default_rng(rng)
        self.spec = spec
        n_x, n_y = spec.n_x, spec.input_dim - spec.n_x
        M, L = spec.widths[0], len(spec.widths)
        kw = dict(adapt=spec.adapt, rng=rng, random_grid=spec.random_grid)
        self.rho = [KanLayer(n_x if i == 0 else M, M, spec.P, name=f"rho{i}", **kw) for i in range(L)]
        self.kappa = [
            ConvexP1Layer(n_y if i == 0 else M, M if i < L else 1, spec.P, first=i == 0,
                          name=f"kappa{i}", **kw)
            for i in range(L + 1)
        ]
        self.extrapolate = False

    def parameters(self):
        return [p for layer in self.rho + self.kappa for p in layer.parameters()]

    def run(self, z, tape=None):
        self._check_x(z)
        n_x = self.spec.n_x
        dom = self.spec.domain
        x, y = z[:, :n_x], z[:, n_x:]
        ex = self.extrapolate
        X, xlo, xhi, _ = self.rho[0].forward(x, dom.lower[:n_x], dom.upper[:n_x], tape, ex)
        K, klo, khi, _ = self.kappa[0].forward(y, dom.lower[n_x:], dom.upper[n_x:], tape, ex)
        Y, ylo, yhi = X + K, xlo + klo, xhi + khi
        stages = [(Y, ylo, yhi)]
        for i in range(1, len(self.rho)):
            Xn, xlo_n, xhi_n, _ = self.rho[i].forward(X, xlo, xhi, tape, True)
            K, klo, khi, _ = self.kappa[i].forward(Y, ylo, yhi, tape, True)
            X, xlo, xhi = Xn, xlo_n, xhi_n
            Y, ylo, yhi = X + K, xlo + klo, xhi + khi
            stages.append((Y, ylo, yhi))
        out, _, _, _ = self.kappa[-1].forward(Y, ylo, yhi, tape, True)
        return out[:, 0], stages

    def forward(self, z, tape=None):
        return self.run(z, tape)[0]

    def shift_output(self, c: float):
        self.kappa[-1].b.value[0, 0] += c


class ICNN(Model):
    """Input-convex feedforward network with nonnegative hidden-path weights."""

    def __init__(self, spec: NetworkSpec, rng=None):
        rng = np.random.default_rng(rng)
        self.spec = spec
        n = spec.input_dim
        h = spec.widths
        self.Wx = [Parameter(f"Wx{i}", rng.normal(0.0, np.sqrt(2.0 / n), (w, n))) for i, w in enumerate(h)]
        self.bias = [Parameter(f"b{i}", np.zeros(w)) for i, w in enumerate(h)]
        self.Wz = [
            Parameter(f"Wz{i}", rng.uniform(0.0, 1.0 / h[i - 1], (h[i], h[i - 1])))
            for i in range(1, len(h))
        ]
        self.wz = Parameter("wz", rng.uniform(0.0, 1.0 / h[-1], h[-1]))
        self.wx = Parameter("wx", rng.normal(0.0, 0.1 / np.sqrt(n), n))
        self.b_out = Parameter("b_out", np.zeros(1))
        self.extrapolate = True  # defined on all of R^n

    def parameters(self):
        return [*self.Wx, *self.bias, *self.Wz, self.wz, self.wx, self.b_out]

    def _act(self, u):
        if self.spec.activation == "relu":
            return ad.relu(u)
        return ad.relu(u) + ad.exp(ad.minimum(u, 0.0)) - 1.0

    def _act_slope(self, u):
        if self.spec.activation == "relu":
            return (ad.value_of(u) > 0).astype(float)
        return ad.exp(ad.minimum(u, 0.0))

    def run(self, x, tape=None):
        self._check_x(x)
        Wx = [bind(p, tape) for p in self.Wx]
        bs = [bind(p, tape) for p in self.bias]
        Wz = [bind(p, tape) for p in self.Wz]
        pres = []
        z = None
        for i in range(len(Wx)):
            pre = x @ ad.transpose(Wx[i]) + bs[i]
            if i > 0:
                pre = pre + z @ ad.transpose(Wz[i - 1])
            pres.append(pre)
            z = self._act(pre)
        out = z @ bind(self.wz, tape) + x @ bind(self.wx, tape) + bind(self.b_out, tape)
        return out, pres

    def forward(self, x, tape=None):
        return self.run(x, tape)[0]

    def value_and_gradient(self, x, tape=None):
        out, pres = self.run(x, tape)
        Wx = [bind(p, tape) for p in self.Wx]
        Wz = [bind(p, tape) for p in self.Wz]
        B = np.shape(ad.value_of(x))[0]
        delta = np.ones((B, 1)) * ad.reshape(bind(self.wz, tape), (1, -1))
        grad = np.ones((B, 1)) * ad.reshape(bind(self.wx, tape), (1, -1))
        for i in range(len(Wx) - 1, -1, -1):
            dpre = delta * self._act_slope(pres[i])
            grad = grad + dpre @ Wx[i]
            if i > 0:
                delta = dpre @ Wz[i - 1]
        return out, grad

    def input_gradient(self, x, tape=None):
        return self.value_and_gradient(x, tape)[1]

    def project(self):
        for p in [*self.Wz, self.wz]:
            np.maximum(p.value, 0.0, out=p.value)

    def after_step(self):
        self.project()

    def shift_output(self, c: float):
        self.b_out.value[0] += c


def build_model(spec: NetworkSpec, rng=None) -> Model:
    if spec.family in ("p1", "cubic"):
        return ICKAN(spec, rng)
    if spec.family == "pickan":
        return PICKAN(spec, rng)
    if spec.family == "kan":
        return KAN(spec, rng)
    return ICNN(spec, rng)


# -- functional surface ---------------------------------------------------------


def ickan_forward(model: ICKAN, x, tape=None):
    return model.forward(x, tape)


def ickan_input_gradient(model, x, tape=None):
    return model.input_gradient(x, tape)


def pickan_forward(model: PICKAN, x, y, tape=None):
    if np.shape(ad.value_of(x))[1] != model.spec.n_x:
        raise ValueError("x width does not match n_x")
    z = ad.concat([x, y], axis=1)
    return model.forward(z, tape)


def icnn_forward(model: ICNN, x, tape=None):
    return model.forward(x, tape)


def extrapolated_eval(model, x):
    """Value and input gradient with linear extension outside the domain box."""
    saved = model.extrapolate
    model.extrapolate = True
    try:
        return model.value_and_gradient(np.asarray(x, dtype=float))
    finally:
        model.extrapolate = saved


# -- exact max-affine construction ------------------------------------------------


def _set_identity(layer: ConvexP1Layer, k: int, j: int, lo_j: float):
    layer.b.value[k, j] = lo_j
    layer.bhat.value[k, j] = 1.0
    layer.d.value[k, j] = 0.0


def _clear(layer: ConvexP1Layer):
    for p in (layer.b, layer.bhat, layer.d):
        p.value[...] = 0.0
    if layer.raw is not None:
        layer.raw.value[...] = 0.0


def _lattice_box(model: ICKAN, layer_index: int):
    """Interval actually spanned by the lattices of ``layer_index``."""
    from .grid import widen_degenerate

    box = model.boxes[layer_index]
    return widen_degenerate(box.lower, box.upper)


def construct_max_affine_p1(alpha1, beta1, alpha2, beta2, domain: Hypercube) -> ICKAN:
    """P1-ICKAN (P=2, adaptive) equal to ``max(a1.x + b1, a2.x + b2)`` on ``domain``.

    Uses ``max(u - v, 0) + v`` with ``u, v`` the two affine maps: three first
    layer neurons produce ``u``, ``-v``, ``v``; the second layer forms
    ``u - v`` and passes ``v``; the last layer applies a hinge at 0, placed
    on an adapted interior vertex.
    """
    a1, a2 = np.atleast_1d(np.asarray(alpha1, float)), np.atleast_1d(np.asarray(alpha2, float))
    n = domain.dim
    if a1.shape != (n,) or a2.shape != (n,):
        raise ValueError("affine slopes must match the domain dimension")
    lo = domain.lower

    if np.array_equal(a1, a2):
        model = ICKAN(NetworkSpec("p1", domain, widths=(), P=2, adapt=True), rng=0)
        layer = model.layers[0]
        _clear(layer)
        layer.bhat.value[0] = a2
        layer.b.value[0] = a2 * lo
        layer.b.value[0, 0] += max(beta1, beta2)
        model.refresh_boxes()
        return model

    model = ICKAN(NetworkSpec("p1", domain, widths=(3, 2), P=2, adapt=True), rng=0)
    first, second, last = model.layers
    for layer in model.layers:
        _clear(layer)
    for k, (slope, offset) in enumerate([(a1, beta1), (-a2, -beta2), (a2, beta2)]):
        first.bhat.value[k] = slope
        first.b.value[k] = slope * lo
        first.b.value[k, 0] += offset
    model.refresh_boxes()

    lo1, _ = _lattice_box(model, 1)
    _set_identity(second, 0, 0, lo1[0])
    _set_identity(second, 0, 1, lo1[1])
    _set_identity(second, 1, 2, lo1[2])
    model.refresh_boxes()

    lo2, hi2 = _lattice_box(model, 2)
    if lo2[0] < 0.0 < hi2[0]:
        # interior vertex exactly at the hinge
        scale = min(-lo2[0], hi2[0])
        e = np.array([-lo2[0], hi2[0]]) / scale
        last.raw.value[0] = weights_for_positive(e)
        last.d.value[0, 0, 0] = 1.0
    elif lo2[0] >= 0.0:
        _set_identity(last, 0, 0, lo2[0])
    _set_identity(last, 0, 1, lo2[1])
    model.refresh_boxes()
    return model


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: Model, path) -> dict:
    doc = {"spec": model.spec.to_dict(), "params": {}}
    for name, p in model.named_parameters().items():
        doc["params"][name] = {"shape": list(p.value.shape), "data": p.value.ravel().tolist()}
    Path(path).write_text(json.dumps(doc))
    return doc


def load_checkpoint(path) -> Model:
    try:
        doc = json.loads(Path(path).read_text())
        spec = NetworkSpec.from_dict(doc["spec"])
        model = build_model(spec, rng=0)
        params = model.named_parameters()
        stored = doc["params"]
        if set(stored) != set(params):
            raise CheckpointError("parameter names do not match the model spec")
        for name, p in params.items():
            arr = np.asarray(stored[name]["data"], dtype=float).reshape(stored[name]["shape"])
            if arr.shape != p.value.shape:
                raise CheckpointError(f"shape mismatch for {name}")
            p.value[...] = arr
    except CheckpointError:
        raise
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    if isinstance(model, ICKAN):
        model.refresh_boxes()
    return model
