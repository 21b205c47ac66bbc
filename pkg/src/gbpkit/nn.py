"""Small feedforward networks with hand-written backward passes."""
from __future__ import annotations

import numpy as np

from .container import MODEL_MAGIC, read_bundle, write_bundle
from .errors import FormatError, InvalidInputError


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def config(self):
        return {}

    def state(self):
        """Arrays saved in checkpoints (parameters plus any running statistics)."""
        return dict(self.params)

    def load_state(self, arrays):
        for k in self.state():
            if k not in arrays:
                raise FormatError(f"{self.kind}: missing array {k!r}")
            self._set(k, arrays[k])

    def _set(self, k, v):
        self.params[k][...] = v


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.params = {"W": rng.standard_normal((self.n_in, self.n_out)) * np.sqrt(2.0 / self.n_in),
                       "b": np.zeros(self.n_out)}

    def forward(self, x, train=False):
        if x.shape[-1] != self.n_in:
            raise InvalidInputError(f"dense layer expects {self.n_in} inputs, got {x.shape[-1]}")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, g):
        self.grads = {"W": self._x.T @ g, "b": g.sum(axis=0)}
        return g @ self.params["W"].T

    def config(self):
        return {"n_in": self.n_in, "n_out": self.n_out}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, g):
        return np.where(self._mask, g, 0.0)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train=False):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self._p = e / e.sum(axis=-1, keepdims=True)
        return self._p

    def backward(self, g):
        p = self._p
        return p * (g - (g * p).sum(axis=-1, keepdims=True))


class BatchNorm(Layer):
    """Per-feature normalization; running statistics are used outside training."""

    kind = "batchnorm"

    def __init__(self, dim, momentum=0.9, eps=1e-5):
        super().__init__()
        self.dim, self.momentum, self.eps = int(dim), float(momentum), float(eps)
        self.params = {"gamma": np.ones(self.dim), "beta": np.zeros(self.dim)}
        self.running_mean = np.zeros(self.dim)
        self.running_var = np.ones(self.dim)

    def forward(self, x, train=False):
        if train:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mu
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
        else:
            mu, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xh = (x - mu) * inv
        self._cache = (xh, inv, train)
        return self.params["gamma"] * xh + self.params["beta"]

    def backward(self, g):
        xh, inv, train = self._cache
        gamma = self.params["gamma"]
        self.grads = {"gamma": (g * xh).sum(axis=0), "beta": g.sum(axis=0)}
        if not train:
            return g * gamma * inv
        gx = g * gamma
        return inv * (gx - gx.mean(axis=0) - xh * (gx * xh).mean(axis=0))

    def config(self):
        return {"dim": self.dim, "momentum": self.momentum, "eps": self.eps}

    def state(self):
        s = dict(self.params)
        s["running_mean"] = self.running_mean
        s["running_var"] = self.running_var
        return s

    def _set(self, k, v):
        if k in self.params:
            self.params[k][...] = v
        else:
            setattr(self, k, np.array(v, dtype=np.float64))


def _elu1(x):
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def _elu1_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


class LinearAttention(Layer):
    """Single-head linear attention over fixed-size patches of the input vector.

    The input of length L*token is read as L tokens; each token is projected
    to ``units`` features for queries, keys and values, and the feature map
    elu(x) + 1 replaces the softmax kernel.  Output length is L*units.
    """

    kind = "linear_attention"

    def __init__(self, n_in, token, units, rng=None):
        super().__init__()
        if n_in % token:
            raise InvalidInputError(f"input length {n_in} is not a multiple of the token size {token}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.token, self.units = int(n_in), int(token), int(units)
        self.n_tokens = self.n_in // self.token
        s = np.sqrt(1.0 / self.token)
        self.params = {k: rng.standard_normal((self.token, self.units)) * s for k in ("Wq", "Wk", "Wv")}

    @property
    def n_out(self):
        return self.n_tokens * self.units

    def forward(self, x, train=False):
        if x.shape[-1] != self.n_in:
            raise InvalidInputError(f"attention layer expects {self.n_in} inputs, got {x.shape[-1]}")
        T = x.reshape(x.shape[0], self.n_tokens, self.token)
        Q = T @ self.params["Wq"]
        K = T @ self.params["Wk"]
        V = T @ self.params["Wv"]
        Fq, Fk = _elu1(Q), _elu1(K)
        S = np.einsum("blu,blv->buv", Fk, V)
        z = Fk.sum(axis=1)
        num = np.einsum("blu,buv->blv", Fq, S)
        den = np.einsum("blu,bu->bl", Fq, z)
        out = num / den[..., None]
        self._cache = (T, Q, K, V, Fq, Fk, S, z, den, out)
        return out.reshape(x.shape[0], -1)

    def backward(self, g):
        T, Q, K, V, Fq, Fk, S, z, den, out = self._cache
        dO = g.reshape(out.shape)
        dnum = dO / den[..., None]
        dden = -(dO * out).sum(axis=-1) / den
        dFq = np.einsum("blv,buv->blu", dnum, S) + dden[..., None] * z[:, None, :]
        dS = np.einsum("blu,blv->buv", Fq, dnum)
        dz = np.einsum("blu,bl->bu", Fq, dden)
        dFk = np.einsum("blv,buv->blu", V, dS) + dz[:, None, :]
        dV = np.einsum("blu,buv->blv", Fk, dS)
        dQ = dFq * _elu1_grad(Q)
        dK = dFk * _elu1_grad(K)
        self.grads = {"Wq": np.einsum("blp,blu->pu", T, dQ), "Wk": np.einsum("blp,blu->pu", T, dK),
                      "Wv": np.einsum("blp,blu->pu", T, dV)}
        dT = dQ @ self.params["Wq"].T + dK @ self.params["Wk"].T + dV @ self.params["Wv"].T
        return dT.reshape(g.shape[0], -1)

    def config(self):
        return {"n_in": self.n_in, "token": self.token, "units": self.units}


_LAYERS = {cls.kind: cls for cls in (Dense, ReLU, Softmax, BatchNorm, LinearAttention)}

DENSE_SHALLOW = "DenseShallow"
DENSE_DEEP = "DenseDeep"
LINEAR_TRANSFORMER = "LinearTransformer"
ARCHITECTURES = (DENSE_SHALLOW, DENSE_DEEP, LINEAR_TRANSFORMER)


class FeedforwardModel:
    """A layer stack whose first ``code_end`` layers estimate the pooled code.

    The remaining layers form the classification head.
    """

    def __init__(self, tag, layers, code_end):
        if not 0 < code_end <= len(layers):
            raise InvalidInputError("code_end must index into the layer list")
        self.tag = tag
        self.layers = list(layers)
        self.code_end = int(code_end)

    @property
    def code_layers(self):
        return self.layers[:self.code_end]

    def _run(self, layers, X, train):
        h = np.atleast_2d(np.asarray(X, dtype=np.float64))
        for L in layers:
            h = L.forward(h, train)
        return h

    def encode(self, X, train=False):
        """Pooled-code estimate (output of the code layers)."""
        return self._run(self.code_layers, X, train)

    def forward(self, X, train=False):
        return self._run(self.layers, X, train)

    def backward_code(self, g):
        for L in reversed(self.code_layers):
            g = L.backward(g)
        return g

    def parameters(self, code_only=True):
        out = []
        for i, L in enumerate(self.code_layers if code_only else self.layers):
            for k in L.params:
                out.append((i, k))
        return out

    def n_parameters(self, code_only=True):
        layers = self.code_layers if code_only else self.layers
        return sum(v.size for L in layers for v in L.params.values())

    def save(self, path):
        meta = {"tag": self.tag, "code_end": self.code_end,
                "layers": [{"kind": L.kind, "config": L.config()} for L in self.layers]}
        arrays = {}
        for i, L in enumerate(self.layers):
            for k, v in L.state().items():
                arrays[f"{i}.{k}"] = v
        write_bundle(path, meta, arrays, magic=MODEL_MAGIC)

    @classmethod
    def load(cls, path):
        meta, arrays = read_bundle(path, magic=MODEL_MAGIC)
        layers = []
        for i, spec in enumerate(meta["layers"]):
            kind = spec["kind"]
            if kind not in _LAYERS:
                raise FormatError(f"{path}: unknown layer kind {kind!r}")
            L = _LAYERS[kind](**spec["config"])
            L.load_state({k.split(".", 1)[1]: v for k, v in arrays.items() if k.split(".", 1)[0] == str(i)})
            layers.append(L)
        return cls(meta["tag"], layers, meta["code_end"])


def forward(model: FeedforwardModel, X):
    """Inference pass (batch-norm uses running statistics)."""
    return model.forward(X, train=False)


def _head(layers, code_dim, classifier, rng, softmax):
    if classifier is not None:
        W = np.asarray(classifier.weights)
        head = Dense(code_dim, W.shape[0], rng)
        head.params["W"][...] = W.T
        head.params["b"][...] = classifier.bias
    else:
        head = Dense(code_dim, 10 if softmax else 1, rng)
    layers.append(head)
    if softmax:
        layers.append(Softmax())
    return layers


def build_synthetic_model(tag, n_in=100, code_dim=75, token=4, attention_units=100, classifier=None, seed=0):
    """Networks approximating the pooled code of the synthetic task; head = the given classifier."""
    rng = np.random.default_rng(seed)
    if tag == DENSE_SHALLOW:
        layers = [Dense(n_in, code_dim, rng), BatchNorm(code_dim), ReLU()]
    elif tag == DENSE_DEEP:
        widths = [96, 92, 89, 85, 82, 78]
        layers, d = [], n_in
        for w in widths:
            layers += [Dense(d, w, rng), ReLU()]
            d = w
        layers += [Dense(d, code_dim, rng), BatchNorm(code_dim), ReLU()]
    elif tag == LINEAR_TRANSFORMER:
        att = LinearAttention(n_in, token, attention_units, rng)
        layers = [att, Dense(att.n_out, code_dim, rng), BatchNorm(code_dim), ReLU()]
    else:
        raise InvalidInputError(f"unknown architecture {tag!r}; choose from {ARCHITECTURES}")
    code_end = len(layers)
    return FeedforwardModel(tag, _head(layers, code_dim, classifier, rng, softmax=False), code_end)


def build_mnist_model(tag, n_in=784, code_dim=32, token=28, attention_units=784, classifier=None, seed=0):
    rng = np.random.default_rng(seed)
    if tag == DENSE_SHALLOW:
        layers = [Dense(n_in, code_dim, rng), ReLU()]
    elif tag == DENSE_DEEP:
        widths = [676, 569, 461, 354, 246, 139]
        layers, d = [], n_in
        for w in widths:
            layers += [Dense(d, w, rng), ReLU()]
            d = w
        layers += [Dense(d, code_dim, rng), ReLU()]
    elif tag == LINEAR_TRANSFORMER:
        att = LinearAttention(n_in, token, attention_units, rng)
        layers = [att, BatchNorm(att.n_out), Dense(att.n_out, code_dim, rng), ReLU()]
    else:
        raise InvalidInputError(f"unknown architecture {tag!r}; choose from {ARCHITECTURES}")
    code_end = len(layers)
    return FeedforwardModel(tag, _head(layers, code_dim, classifier, rng, softmax=True), code_end)
